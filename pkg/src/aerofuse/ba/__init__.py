"""Three-view robust bundle adjustment with pairwise RANSAC filtering."""

from .problem import (
    BaConfig,
    BaProblem,
    BaSolution,
    TiePoint,
    Track,
    apply_ransac_filter,
    cap_tracks,
    initialize_window,
    pnp_dlt,
)
from .solver import huber_weight, schur_solve, solve
from .twoview import (
    decompose_essential,
    eight_point_essential,
    ransac_epipolar_filter,
    symmetric_epipolar_px,
)

__all__ = [
    "BaConfig",
    "BaProblem",
    "BaSolution",
    "TiePoint",
    "Track",
    "apply_ransac_filter",
    "cap_tracks",
    "initialize_window",
    "pnp_dlt",
    "huber_weight",
    "schur_solve",
    "solve",
    "decompose_essential",
    "eight_point_essential",
    "ransac_epipolar_filter",
    "symmetric_epipolar_px",
]
