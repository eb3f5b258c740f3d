"""Map quality metrics: length-based accuracy against surveyed marker
pairs plus raster statistics (coverage, dispersion, local roughness)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import TooFewCells, ZeroGroundTruth
from .fusion import HeightRaster

logger = logging.getLogger(__name__)


def relative_error(measured: float, truth: float) -> float:
    """Percent error |measured - truth| / |truth| * 100.

    Raises:
        ZeroGroundTruth: truth is exactly zero.
    """
    if truth == 0:
        raise ZeroGroundTruth("relative error undefined for zero ground truth")
    return abs(measured - truth) / abs(truth) * 100.0


@dataclass(frozen=True)
class MarkerPair:
    """One surveyed distance check: reconstructed endpoint positions plus
    the tape-measured horizontal and vertical separations."""

    id_a: int
    id_b: int
    measured_a: np.ndarray
    measured_b: np.ndarray
    truth_xy: float
    truth_z: float


def marker_errors(pairs: list[MarkerPair]) -> dict:
    """Mean horizontal and vertical relative errors over marker pairs.

    Horizontal uses the xy-plane distance between the reconstructed
    endpoints, vertical the |dz|; each is compared against its surveyed
    value and the percent errors are averaged over pairs.
    """
    if not pairs:
        raise ValueError("no marker pairs")
    xy_errs = []
    z_errs = []
    for p in pairs:
        a = np.asarray(p.measured_a, dtype=float).reshape(3)
        b = np.asarray(p.measured_b, dtype=float).reshape(3)
        d_xy = float(np.hypot(b[0] - a[0], b[1] - a[1]))
        d_z = abs(float(b[2] - a[2]))
        xy_errs.append(relative_error(d_xy, p.truth_xy))
        z_errs.append(relative_error(d_z, p.truth_z))
    return {
        "n_pairs": len(pairs),
        "xy_error_pct": float(np.mean(xy_errs)),
        "z_error_pct": float(np.mean(z_errs)),
    }


def coverage(raster: HeightRaster) -> float:
    """Fraction of cells holding a finite value."""
    total = raster.data.size
    if total == 0:
        raise TooFewCells("empty raster")
    return float(np.isfinite(raster.data).sum()) / total


def sigma_global(values: np.ndarray) -> float:
    """Population standard deviation over the finite entries.

    Raises:
        TooFewCells: fewer than 2 finite values.
    """
    v = np.asarray(values, dtype=float).ravel()
    v = v[np.isfinite(v)]
    if v.size < 2:
        raise TooFewCells(f"need at least 2 finite values, got {v.size}")
    return float(np.std(v))


def nmad(values: np.ndarray) -> float:
    """Normalised median absolute deviation, 1.4826 * median|x - median|.

    Raises:
        TooFewCells: fewer than 2 finite values.
    """
    v = np.asarray(values, dtype=float).ravel()
    v = v[np.isfinite(v)]
    if v.size < 2:
        raise TooFewCells(f"need at least 2 finite values, got {v.size}")
    med = np.median(v)
    return float(1.4826 * np.median(np.abs(v - med)))


def mean_local_std(raster: HeightRaster, window: int = 3) -> tuple[float, int]:
    """Mean of per-cell local population standard deviations.

    Each finite cell contributes the std of the finite values in its
    window x window neighbourhood (centred on the cell, clipped at the
    raster border, centre included) provided the neighbourhood holds at
    least 2 finite values.  Returns (mean std, contributing cell count);
    (nan, 0) when nothing contributes.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and positive")
    data = raster.data
    rows, cols = data.shape
    half = window // 2
    stds = []
    for r in range(rows):
        r0, r1 = max(0, r - half), min(rows, r + half + 1)
        for c in range(cols):
            if not np.isfinite(data[r, c]):
                continue
            c0, c1 = max(0, c - half), min(cols, c + half + 1)
            patch = data[r0:r1, c0:c1].ravel()
            patch = patch[np.isfinite(patch)]
            if patch.size < 2:
                continue
            stds.append(np.std(patch))
    if not stds:
        return float("nan"), 0
    return float(np.mean(np.asarray(stds))), len(stds)


def quality_report(dsm: HeightRaster, pairs: list[MarkerPair] | None = None,
                   height_errors: np.ndarray | None = None) -> dict:
    """Bundle the standard metrics into one flat dict.

    ``height_errors`` is an optional array of per-cell dsm-minus-truth
    differences feeding the dispersion statistics.
    """
    out: dict[str, float | int] = {"coverage": coverage(dsm)}
    local, n_local = mean_local_std(dsm)
    out["mean_local_std"] = local
    out["local_std_cells"] = n_local
    if pairs:
        out.update(marker_errors(pairs))
    if height_errors is not None:
        try:
            out["sigma_global"] = sigma_global(height_errors)
            out["nmad"] = nmad(height_errors)
        except TooFewCells:
            logger.warning("too few height error samples for dispersion stats")
    return out
