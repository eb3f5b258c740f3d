"""Depth-map fusion: truncated signed distance volume, point extraction,
DSM rasterisation and orthomosaic colouring.

The TSDF stores, per voxel, a running weighted average of the clamped
signed distance ``depth_at_pixel - voxel_camera_z`` (positive in front
of the surface) plus the accumulated weight, both float32.  Only voxels
whose raw distance lies within the truncation band are touched, so a
zero-weight voxel means "never observed".  Points are read out at sdf
zero crossings between weighted neighbour voxels along each axis, with
linear interpolation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .densify import DepthMap
from .errors import EmptyVolume, NoImagery
from .geometry import CameraIntrinsics, Pose

logger = logging.getLogger(__name__)


@dataclass
class TsdfVolume:
    """Axis-aligned voxel grid; ``origin`` is the minimum corner and voxel
    centres sit at origin + (index + 0.5) * voxel_size."""

    origin: np.ndarray
    voxel_size: float
    truncation: float
    sdf: np.ndarray  # float32 (nx, ny, nz)
    weight: np.ndarray  # float32 (nx, ny, nz)
    max_weight: float = 64.0

    @classmethod
    def create(cls, origin, shape, voxel_size: float, truncation: float | None = None,
               max_weight: float = 64.0) -> "TsdfVolume":
        """Allocate an empty volume.

        The truncation distance defaults to 3 voxels and must be at
        least 2; it is snapped to the float32 grid so the clamp
        invariant is exact in storage precision.
        """
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if truncation is None:
            truncation = 3.0 * voxel_size
        if truncation < 2.0 * voxel_size:
            raise ValueError(
                f"truncation {truncation} below 2 voxels ({2 * voxel_size})"
            )
        truncation = float(np.float32(truncation))
        nx, ny, nz = (int(n) for n in shape)
        if min(nx, ny, nz) < 1:
            raise ValueError(f"bad volume shape {shape}")
        return cls(
            origin=np.asarray(origin, dtype=float).reshape(3).copy(),
            voxel_size=float(voxel_size),
            truncation=truncation,
            sdf=np.zeros((nx, ny, nz), dtype=np.float32),
            weight=np.zeros((nx, ny, nz), dtype=np.float32),
            max_weight=float(max_weight),
        )

    @property
    def shape(self):
        return self.sdf.shape

    def voxel_centers_axis(self, axis: int) -> np.ndarray:
        n = self.sdf.shape[axis]
        return self.origin[axis] + (np.arange(n) + 0.5) * self.voxel_size


def integrate_depth(vol: TsdfVolume, dm: DepthMap, pose: Pose,
                    intr: CameraIntrinsics, obs_weight: float = 1.0) -> dict:
    """Fuse one depth map into the volume.

    Returns stats ``{"updated": n}``.  A frustum that misses the volume
    entirely logs a warning and is a no-op.
    """
    if dm.depth.shape != (intr.height, intr.width):
        raise ValueError(
            f"depth {dm.depth.shape} does not match intrinsics "
            f"{intr.height}x{intr.width}"
        )
    updated = _kernels.tsdf_integrate(
        vol.sdf, vol.weight,
        np.ascontiguousarray(dm.depth, dtype=np.float64),
        np.ascontiguousarray(dm.valid.astype(np.uint8)),
        intr.fx, intr.fy, intr.cx, intr.cy,
        np.ascontiguousarray(pose.rotation), np.ascontiguousarray(pose.translation),
        vol.origin, vol.voxel_size, vol.truncation, vol.max_weight, float(obs_weight),
    )
    if updated == 0:
        logger.warning("frame %d: depth frustum missed the volume", dm.frame_id)
    return {"updated": int(updated)}


def extract_point_cloud(vol: TsdfVolume) -> np.ndarray:
    """Surface points at sdf zero crossings.

    Scans voxel pairs along x, then y, then z in row-major order; a pair
    crosses when the signs strictly oppose (or the first element is
    exactly zero), both weights are positive, and the linear interpolation
    parameter lands in [0, 1).  Output order is deterministic.

    Raises:
        EmptyVolume: no voxel carries weight.
    """
    if not np.any(vol.weight > 0):
        raise EmptyVolume("volume has no weighted voxels")
    out = []
    s = vol.sdf.astype(np.float64)
    w = vol.weight
    vs = vol.voxel_size
    for axis in range(3):
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        a, b = s[tuple(sl_a)], s[tuple(sl_b)]
        wa, wb = w[tuple(sl_a)], w[tuple(sl_b)]
        cross = (wa > 0) & (wb > 0) & (((a > 0) & (b < 0)) | ((a < 0) & (b > 0))
                                       | ((a == 0) & (b != 0)))
        if not cross.any():
            continue
        ii, jj, kk = np.nonzero(cross)
        sa, sb = a[ii, jj, kk], b[ii, jj, kk]
        t = sa / (sa - sb)
        base = np.column_stack([ii, jj, kk]).astype(np.float64)
        centers = vol.origin[None, :] + (base + 0.5) * vs
        centers[:, axis] += t * vs
        out.append(centers)
    if not out:
        return np.zeros((0, 3))
    return np.vstack(out)


@dataclass
class HeightRaster:
    """Gridded surface heights; NaN marks empty cells.

    Row r, column c covers world x in
    [origin_x + c*cell, origin_x + (c+1)*cell) and the matching y slab;
    row 0 sits at the minimum y.
    """

    origin_x: float
    origin_y: float
    cell_size: float
    data: np.ndarray  # float64 (rows, cols)

    @property
    def shape(self):
        return self.data.shape

    def cell_center(self, row: int, col: int):
        return (self.origin_x + (col + 0.5) * self.cell_size,
                self.origin_y + (row + 0.5) * self.cell_size)


def rasterize_dsm(points: np.ndarray, cell_size: float) -> HeightRaster:
    """Max-elevation rasterisation of a point cloud.

    The grid origin is the xy bounding box padded by half a cell; each
    cell keeps the maximum z of the points falling in it (NaN when
    empty).  Input order does not matter.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("empty point cloud")
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    ox = float(pts[:, 0].min()) - 0.5 * cell_size
    oy = float(pts[:, 1].min()) - 0.5 * cell_size
    cols = int(np.floor((pts[:, 0].max() - ox) / cell_size)) + 1
    rows = int(np.floor((pts[:, 1].max() - oy) / cell_size)) + 1
    data = np.full((rows, cols), np.nan)
    ci = np.floor((pts[:, 0] - ox) / cell_size).astype(np.int64)
    ri = np.floor((pts[:, 1] - oy) / cell_size).astype(np.int64)
    np.clip(ci, 0, cols - 1, out=ci)
    np.clip(ri, 0, rows - 1, out=ri)
    flat = ri * cols + ci
    np.fmax.at(data.reshape(-1), flat, pts[:, 2])
    return HeightRaster(ox, oy, cell_size, data)


def orthomosaic(dsm: HeightRaster, views: list[tuple[Pose, CameraIntrinsics, np.ndarray]]):
    """Colour the DSM grid from the most-nadir observing view.

    Args:
        dsm: surface raster providing per-cell elevation.
        views: (pose, intrinsics, image) triples; image is (h, w, 3) uint8.

    Returns:
        uint8 (rows, cols, 3) mosaic; cells without elevation or without
        any observing view stay black.

    Raises:
        NoImagery: the view list is empty.
    """
    if not views:
        raise NoImagery("no frame carries an image")
    rows, cols = dsm.shape
    mosaic = np.zeros((rows, cols, 3), dtype=np.uint8)
    best_cos = np.full((rows, cols), -1.0)

    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    gx = dsm.origin_x + (cc + 0.5) * dsm.cell_size
    gy = dsm.origin_y + (rr + 0.5) * dsm.cell_size
    gz = dsm.data
    has_h = np.isfinite(gz)
    if not has_h.any():
        return mosaic
    pts = np.column_stack([gx[has_h], gy[has_h], gz[has_h]])
    ridx, cidx = np.nonzero(has_h)

    for pose, intr, image in views:
        pc = pose.apply(pts)
        z = pc[:, 2]
        ok = z > 1e-9
        u = np.full(len(pts), -1.0)
        v = np.full(len(pts), -1.0)
        u[ok] = intr.fx * pc[ok, 0] / z[ok] + intr.cx
        v[ok] = intr.fy * pc[ok, 1] / z[ok] + intr.cy
        ui = np.rint(u).astype(np.int64)
        vi = np.rint(v).astype(np.int64)
        ok &= (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
        if not ok.any():
            continue
        ray = pts - pose.center[None, :]
        rn = np.linalg.norm(ray, axis=1)
        # Angle to straight-down: cos = -ray_z / |ray|; larger is more nadir.
        cosd = np.where(rn > 0, -ray[:, 2] / np.maximum(rn, 1e-15), -1.0)
        take = ok & (cosd > best_cos[ridx, cidx])
        if not take.any():
            continue
        mosaic[ridx[take], cidx[take]] = image[vi[take], ui[take]]
        best_cos[ridx[take], cidx[take]] = cosd[take]
    return mosaic
