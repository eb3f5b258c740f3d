"""Numpy fallback implementations of the hot kernels.

Same call signatures and arithmetic as the compiled core
(aerofuse._kernels._core); selection happens in the package __init__.
Accumulation orders are kept sequential where it matters so the two
backends agree far below every pipeline tolerance.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

# Voxel count per vectorised TSDF slab; bounds peak memory.
_SLAB_VOXELS = 2_000_000


def idw_fill(u, v, depth, width, height, k, power):
    """Inverse-distance-weighted depth fill over a full pixel grid.

    Args:
        u, v: int32 anchor pixel coordinates (n,).
        depth: float64 anchor depths (n,).
        width, height: raster size.
        k: neighbours per pixel (capped at n).
        power: inverse-distance exponent (2 for the standard kernel).

    Returns:
        (filled, nearest): float64 (height, width) rasters holding the
        interpolated depth and the Euclidean pixel distance to the nearest
        anchor.  Anchor pixels are *not* special-cased here; the densifier
        overwrites them with exact anchor values.
    """
    pts = np.column_stack([np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)])
    z = np.asarray(depth, dtype=np.float64)
    n = pts.shape[0]
    kk = min(int(k), n)
    tree = cKDTree(pts)
    gu, gv = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    grid = np.column_stack([gu.ravel(), gv.ravel()])
    dist, idx = tree.query(grid, k=kk)
    if kk == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    w = np.maximum(dist, 1e-12) ** (-float(power))
    # Sequential accumulation over neighbours, nearest first, to mirror the
    # compiled loop.
    num = w[:, 0] * z[idx[:, 0]]
    den = w[:, 0].copy()
    for j in range(1, kk):
        num = num + w[:, j] * z[idx[:, j]]
        den = den + w[:, j]
    filled = (num / den).reshape(height, width)
    nearest = dist[:, 0].reshape(height, width)
    return filled, nearest


def tsdf_integrate(sdf, weight, depth, valid, fx, fy, cx, cy, R, t,
                   origin, voxel, trunc, w_max, obs_weight):
    """Fuse one depth map into a TSDF volume in place.

    Visits every voxel, projects its centre into the depth image
    (nearest-pixel sampling) and, when the signed distance
    ``depth_at_pixel - voxel_camera_z`` lies within the truncation band,
    folds the clamped value into the running weighted average.  Update
    arithmetic runs in float64 and is stored back to the float32 volume.

    Returns the number of voxels updated.
    """
    nx, ny, nz = sdf.shape
    h, w = depth.shape
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    ox, oy, oz = (float(origin[0]), float(origin[1]), float(origin[2]))
    voxel = float(voxel)
    trunc = float(trunc)
    updated = 0

    ys = oy + (np.arange(ny, dtype=np.float64) + 0.5) * voxel
    zs = oz + (np.arange(nz, dtype=np.float64) + 0.5) * voxel
    chunk = max(1, _SLAB_VOXELS // max(ny * nz, 1))
    for x0 in range(0, nx, chunk):
        x1 = min(x0 + chunk, nx)
        xs = ox + (np.arange(x0, x1, dtype=np.float64) + 0.5) * voxel
        X = xs[:, None, None]
        Y = ys[None, :, None]
        Z = zs[None, None, :]
        pz = R[2, 0] * X + R[2, 1] * Y + R[2, 2] * Z + t[2]
        front = pz > 1e-12
        if not front.any():
            continue
        px = R[0, 0] * X + R[0, 1] * Y + R[0, 2] * Z + t[0]
        py = R[1, 0] * X + R[1, 1] * Y + R[1, 2] * Z + t[1]
        with np.errstate(invalid="ignore", divide="ignore"):
            ui = np.rint(fx * px / pz + cx).astype(np.int64)
            vi = np.rint(fy * py / pz + cy).astype(np.int64)
        sel = front & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        if not sel.any():
            continue
        uu, vv = ui[sel], vi[sel]
        ok = valid[vv, uu].astype(bool)
        d = depth[vv, uu]
        raw = d - pz[sel]
        band = ok & np.isfinite(d) & (np.abs(raw) <= trunc)
        if not band.any():
            continue
        ii, jj, kk2 = np.nonzero(sel)
        ii, jj, kk2 = ii[band] + x0, jj[band], kk2[band]
        s_obs = np.clip(raw[band], -trunc, trunc)
        w_old = weight[ii, jj, kk2].astype(np.float64)
        s_old = sdf[ii, jj, kk2].astype(np.float64)
        s_new = (s_old * w_old + s_obs * obs_weight) / (w_old + obs_weight)
        np.clip(s_new, -trunc, trunc, out=s_new)
        sdf[ii, jj, kk2] = s_new.astype(np.float32)
        weight[ii, jj, kk2] = np.minimum(w_old + obs_weight, w_max).astype(np.float32)
        updated += int(band.sum())
    return updated
