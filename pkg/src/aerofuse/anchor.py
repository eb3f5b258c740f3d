"""Sparse anchor maps: optimized tie-points rasterised into the
representative frame.

Each surviving tie-point is projected with the representative's
full-resolution intrinsics and lands on its nearest integer pixel;
collisions keep the smaller camera-frame depth (z-buffer).  Cells store
(depth, sigma) with depth meaning perpendicular camera z, so a cell
back-projects to the world point it came from (up to the sub-pixel
rounding).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ba import BaSolution
from .errors import EmptyAnchor
from .geometry import CameraIntrinsics, Frame, Pose, backproject


@dataclass
class AnchorMap:
    """Sparse per-pixel depth anchors for one representative frame."""

    frame_id: int
    pose: Pose
    intrinsics: CameraIntrinsics
    cells: dict[tuple[int, int], tuple[float, float]] = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def __len__(self) -> int:
        return len(self.cells)

    def arrays(self):
        """Cells as (u, v, depth, sigma) arrays sorted by (v, u)."""
        keys = sorted(self.cells, key=lambda k: (k[1], k[0]))
        u = np.array([k[0] for k in keys], dtype=np.int32)
        v = np.array([k[1] for k in keys], dtype=np.int32)
        d = np.array([self.cells[k][0] for k in keys], dtype=np.float64)
        s = np.array([self.cells[k][1] for k in keys], dtype=np.float64)
        return u, v, d, s

    def world_points(self):
        """Back-projected world coordinates of every cell, sorted by (v, u)."""
        u, v, d, _ = self.arrays()
        return backproject(np.column_stack([u, v]).astype(float), d, self.pose, self.intrinsics)


def build_anchor_map(solution: BaSolution, frame: Frame, pose: Pose | None = None) -> AnchorMap:
    """Project a window solution's tie-points into the representative frame.

    Args:
        solution: optimized window containing the frame.
        frame: representative frame (full-resolution intrinsics).
        pose: override pose; defaults to the solution's pose for the frame.

    Raises:
        EmptyAnchor: nothing projects inside the image with positive depth.
        KeyError: the frame is not part of the solution and no pose given.
    """
    if pose is None:
        pose = solution.poses[frame.frame_id]
    K = frame.intrinsics
    cells: dict[tuple[int, int], tuple[float, float]] = {}
    for tid in sorted(solution.points):
        tp = solution.points[tid]
        pc = pose.apply(tp.position)
        z = float(pc[2])
        if z <= 1e-12:
            continue
        u = int(np.rint(K.fx * pc[0] / z + K.cx))
        v = int(np.rint(K.fy * pc[1] / z + K.cy))
        if not (0 <= u < K.width and 0 <= v < K.height):
            continue
        old = cells.get((u, v))
        if old is None or z < old[0]:
            cells[(u, v)] = (z, tp.uncertainty)
    if not cells:
        raise EmptyAnchor(f"no tie-point lands inside frame {frame.frame_id}")
    return AnchorMap(frame.frame_id, pose, K, cells)


def tile_occupancy(amap: AnchorMap, nx: int, ny: int) -> float:
    """Fraction of an nx-by-ny tile grid holding at least one anchor."""
    if nx <= 0 or ny <= 0:
        raise ValueError("tile grid must be positive")
    seen = set()
    w, h = amap.width, amap.height
    for (u, v) in amap.cells:
        seen.add((min(u * nx // w, nx - 1), min(v * ny // h, ny - 1)))
    return len(seen) / (nx * ny)


def anchor_coverage(amap: AnchorMap, tile: int) -> float:
    """Occupancy over square tiles of ``tile`` px (edge tiles may be partial)."""
    if tile <= 0:
        raise ValueError("tile size must be positive")
    nx = -(-amap.width // tile)
    ny = -(-amap.height // tile)
    seen = {(u // tile, v // tile) for (u, v) in amap.cells}
    return len(seen) / (nx * ny)
