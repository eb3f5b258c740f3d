"""Dense depth from sparse anchors: built-in fillers and the external
worker protocol.

Every densifier obeys the same output contract, checked by
:func:`verify_anchor_agreement` / :func:`verify_contract`:

(a) depth at each anchor cell reproduces the anchor within a relative
    tolerance (default 1%),
(b) all valid depths lie in (0, max_depth],
(c) the valid mask covers at least the convex hull of the anchor cells,
(d) output is deterministic for fixed inputs and seed.

Built-ins: ``idw`` (inverse-distance-squared over the k nearest anchors,
exact at anchor cells, validity limited to twice the median anchor
spacing outside the hull) and ``plane_fit`` (least-median-of-squares
plane over random anchor triples plus IDW on the residuals).
``external`` hands the work to another process through a request
directory and falls back to ``idw`` when the reply breaks the contract.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from . import _kernels
from .anchor import AnchorMap
from .errors import ContractViolation, DimensionMismatch, ExternalTimeout

logger = logging.getLogger(__name__)

BUILTIN_KINDS = ("idw", "plane_fit")


@dataclass
class DepthMap:
    """Dense per-pixel camera-z depth for one frame."""

    frame_id: int
    depth: np.ndarray  # float64 (h, w)
    valid: np.ndarray  # bool (h, w)
    source: str = "idw"

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]


@dataclass(frozen=True)
class DensifierConfig:
    kind: str = "idw"
    anchor_agreement_tol: float = 0.01
    max_depth: float = 1e4
    neighbours: int = 12
    power: float = 2.0
    spacing_factor: float = 2.0
    plane_seed: int = 0
    plane_triples: int = 200
    external_command: str | None = None
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.kind not in BUILTIN_KINDS + ("external",):
            raise ValueError(f"unknown densifier kind {self.kind!r}")
        if not 0 < self.anchor_agreement_tol < 1:
            raise ValueError("anchor_agreement_tol must be in (0, 1)")
        if self.max_depth <= 0:
            raise ValueError("max_depth must be positive")
        if self.kind == "external" and not self.external_command:
            raise ValueError("external densifier needs external_command")


@dataclass
class AgreementReport:
    """Outcome of an anchor-agreement check."""

    max_rel_dev: float
    checked: int
    violations: list[tuple[int, int, float, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_anchor_agreement(dm: DepthMap, amap: AnchorMap, rel_tol: float) -> AgreementReport:
    """Check clause (a): anchors are reproduced within ``rel_tol``.

    An anchor falling on an invalid output cell counts as a violation.

    Raises:
        DimensionMismatch: raster size differs from the anchor frame.
    """
    if (dm.height, dm.width) != (amap.height, amap.width):
        raise DimensionMismatch(
            f"depth {dm.width}x{dm.height} vs anchors {amap.width}x{amap.height}"
        )
    max_dev = 0.0
    violations = []
    for (u, v), (d_anchor, _) in sorted(amap.cells.items()):
        got = float(dm.depth[v, u])
        if not dm.valid[v, u] or not np.isfinite(got):
            violations.append((u, v, got, d_anchor))
            continue
        dev = abs(got - d_anchor) / d_anchor
        max_dev = max(max_dev, dev)
        if dev > rel_tol:
            violations.append((u, v, got, d_anchor))
    return AgreementReport(max_dev, len(amap.cells), violations)


def verify_contract(dm: DepthMap, amap: AnchorMap, config: DensifierConfig) -> AgreementReport:
    """Full contract check: agreement, depth range and hull coverage."""
    report = verify_anchor_agreement(dm, amap, config.anchor_agreement_tol)
    vals = dm.depth[dm.valid]
    if vals.size and (np.any(~np.isfinite(vals)) or np.any(vals <= 0)
                      or np.any(vals > config.max_depth)):
        raise ContractViolation("valid depths outside (0, max_depth]")
    hull = _hull_mask(amap)
    if np.any(hull & ~dm.valid):
        raise ContractViolation("valid mask does not cover the anchor hull")
    if not report.ok:
        raise ContractViolation(
            f"{len(report.violations)} anchor(s) deviate beyond "
            f"{config.anchor_agreement_tol:.1%} (max {report.max_rel_dev:.2%})"
        )
    return report


def _hull_mask(amap: AnchorMap) -> np.ndarray:
    """Boolean mask of pixels inside the convex hull of the anchor cells."""
    u, v, _, _ = amap.arrays()
    mask = np.zeros((amap.height, amap.width), dtype=bool)
    pts = np.column_stack([u, v]).astype(float)
    if len(pts) < 3:
        mask[v, u] = True
        return mask
    try:
        tri = Delaunay(pts)
    except Exception:  # collinear anchors have no 2D hull
        mask[v, u] = True
        return mask
    gu, gv = np.meshgrid(np.arange(amap.width), np.arange(amap.height))
    grid = np.column_stack([gu.ravel(), gv.ravel()]).astype(float)
    inside = tri.find_simplex(grid) >= 0
    return inside.reshape(amap.height, amap.width)


def _validity(amap: AnchorMap, nearest: np.ndarray, spacing_factor: float) -> np.ndarray:
    """Clause-(c) validity: inside the hull, or near enough to an anchor."""
    u, v, _, _ = amap.arrays()
    if len(u) >= 2:
        tree = cKDTree(np.column_stack([u, v]).astype(float))
        nn, _ = tree.query(np.column_stack([u, v]).astype(float), k=2)
        spacing = float(np.median(nn[:, 1]))
        valid = nearest <= spacing_factor * spacing
    else:
        valid = np.ones_like(nearest, dtype=bool)
    return valid | _hull_mask(amap)


def _fill_idw(amap: AnchorMap, config: DensifierConfig) -> DepthMap:
    u, v, d, _ = amap.arrays()
    filled, nearest = _kernels.idw_fill(
        u, v, d, amap.width, amap.height, config.neighbours, config.power
    )
    filled[v, u] = d  # exact reproduction at anchor cells
    np.minimum(filled, config.max_depth, out=filled)
    return DepthMap(amap.frame_id, filled, _validity(amap, nearest, config.spacing_factor), "idw")


def _fill_plane(amap: AnchorMap, config: DensifierConfig) -> DepthMap:
    u, v, d, _ = amap.arrays()
    n = len(u)
    if n < 3:
        logger.warning("plane_fit with %d anchors, falling back to idw", n)
        dm = _fill_idw(amap, config)
        return DepthMap(dm.frame_id, dm.depth, dm.valid, "plane_fit")

    A = np.column_stack([u.astype(float), v.astype(float), np.ones(n)])
    rng = np.random.default_rng(config.plane_seed)
    best_coef, best_med = None, np.inf
    for _ in range(config.plane_triples):
        idx = rng.choice(n, size=3, replace=False)
        try:
            coef = np.linalg.solve(A[idx], d[idx])
        except np.linalg.LinAlgError:
            continue
        med = float(np.median((A @ coef - d) ** 2))
        if med < best_med:
            best_med, best_coef = med, coef
    if best_coef is None:  # all sampled triples collinear
        best_coef = np.linalg.lstsq(A, d, rcond=None)[0]
        best_med = float(np.median((A @ best_coef - d) ** 2))

    # Least-squares refit on the LMedS inliers.
    thresh = 2.5 * 1.4826 * np.sqrt(best_med) + 1e-12
    inl = np.abs(A @ best_coef - d) <= thresh
    if inl.sum() >= 3:
        best_coef = np.linalg.lstsq(A[inl], d[inl], rcond=None)[0]

    resid = d - A @ best_coef
    gu, gv = np.meshgrid(np.arange(amap.width, dtype=float),
                         np.arange(amap.height, dtype=float))
    plane = best_coef[0] * gu + best_coef[1] * gv + best_coef[2]
    r_fill, nearest = _kernels.idw_fill(
        u, v, resid, amap.width, amap.height, config.neighbours, config.power
    )
    depth = plane + r_fill
    depth[v, u] = d  # exact anchors, independent of fit quality
    np.clip(depth, np.nextafter(0, 1), config.max_depth, out=depth)
    return DepthMap(amap.frame_id, depth,
                    _validity(amap, nearest, config.spacing_factor), "plane_fit")


def _fill_external(amap: AnchorMap, config: DensifierConfig, workdir: Path,
                   image: np.ndarray | None = None) -> DepthMap:
    """Run the file-exchange protocol against an external worker.

    Request directory layout written by us: ``anchor.sdepth`` (sparse
    anchors), ``camera.txt`` (fx fy cx cy / R row-major / t, 12
    significant digits), optional ``image.ppm``.  The worker writes
    ``depth.fdepth`` plus an empty ``done`` sentinel; we poll until
    ``timeout_s``.
    """
    from . import formats

    workdir.mkdir(parents=True, exist_ok=True)
    formats.write_sdepth(workdir / "anchor.sdepth", amap)
    formats.write_camera_txt(workdir / "camera.txt", amap.intrinsics, amap.pose)
    if image is not None:
        formats.write_ppm(workdir / "image.ppm", image)

    cmd = shlex.split(config.external_command) + [str(workdir)]
    proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    done = workdir / "done"
    deadline = time.monotonic() + config.timeout_s
    try:
        while not done.exists():
            if time.monotonic() > deadline:
                raise ExternalTimeout(
                    f"worker produced no result within {config.timeout_s:.0f}s"
                )
            if proc.poll() is not None and not done.exists():
                # Give the filesystem one grace period after exit.
                time.sleep(0.05)
                if not done.exists():
                    raise ContractViolation(
                        f"worker exited with code {proc.returncode} and no result"
                    )
            time.sleep(0.02)
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()

    depth = formats.read_fdepth(workdir / "depth.fdepth").astype(np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    dm = DepthMap(amap.frame_id, depth, valid, "external")
    verify_contract(dm, amap, config)
    return dm


def densify(amap: AnchorMap, config: DensifierConfig, *,
            workdir: Path | str | None = None,
            image: np.ndarray | None = None) -> DepthMap:
    """Produce a dense depth map for the anchor frame.

    Raises:
        ContractViolation / ExternalTimeout: external worker misbehaved;
            callers wanting the spec'd degradation should use
            :func:`densify_with_fallback`.
    """
    if config.kind == "idw":
        return _fill_idw(amap, config)
    if config.kind == "plane_fit":
        return _fill_plane(amap, config)
    if workdir is None:
        raise ValueError("external densifier needs a workdir")
    return _fill_external(amap, config, Path(workdir), image)


def densify_with_fallback(amap: AnchorMap, config: DensifierConfig, *,
                          workdir: Path | str | None = None,
                          image: np.ndarray | None = None):
    """Densify, degrading broken external output to idw.

    Returns (DepthMap, flags): flags carry ``contract_violation`` or
    ``external_timeout`` when the fallback engaged.
    """
    flags: list[str] = []
    try:
        return densify(amap, config, workdir=workdir, image=image), flags
    except ContractViolation as e:
        logger.warning("densifier contract violation, falling back to idw: %s", e)
        flags.append("contract_violation")
    except ExternalTimeout as e:
        logger.warning("external densifier timeout, falling back to idw: %s", e)
        flags.append("external_timeout")
    dm = _fill_idw(amap, config)
    return DepthMap(dm.frame_id, dm.depth, dm.valid, "idw_fallback"), flags
