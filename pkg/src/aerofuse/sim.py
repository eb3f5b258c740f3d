"""Synthetic survey flights over procedurally generated terrain.

Everything here is an oracle for the rest of the package: the terrain,
camera trajectory, feature tracks and depth maps all come with exact
ground truth.  Randomness flows exclusively through numpy's default
PCG64 generator seeded by the caller, so any (seed, parameters) pair
reproduces bit-identical output.

The scene carries three survey markers on the flight centreline whose
pairwise separations average exactly 40 m horizontally and 26 m
vertically; reconstructed marker positions against these separations
are the headline accuracy check.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ba.problem import Track
from .geometry import CameraIntrinsics, Frame, Pose, footprint, project

logger = logging.getLogger(__name__)

# Survey markers: collinear along the y=0 flight line.  Pairwise xy
# separations {30, 30, 60} m (mean 40) and |dz| {26, 13, 39} m (mean 26).
MARKERS = np.array([
    [0.0, 0.0, 26.0],
    [30.0, 0.0, 0.0],
    [60.0, 0.0, -13.0],
])
MARKER_IDS = (0, 1, 2)


def marker_truth_pairs() -> list[tuple[int, int, float, float]]:
    """(id_a, id_b, xy separation m, |dz| m) for every marker pair."""
    out = []
    for i in range(len(MARKERS)):
        for j in range(i + 1, len(MARKERS)):
            d = MARKERS[j] - MARKERS[i]
            out.append((i, j, float(np.hypot(d[0], d[1])), abs(float(d[2]))))
    return out


@dataclass
class SyntheticScene:
    """Terrain as a sum of Gaussian bumps plus the fixed survey markers.

    Bump rows are (centre_x, centre_y, amplitude, sigma).  Amplitudes
    stay below 0.9 * sigma so single-bump slopes remain under 30
    degrees, keeping near-nadir depth ray casts single-crossing.
    """

    bumps: np.ndarray

    def __post_init__(self):
        self.bumps = np.asarray(self.bumps, dtype=float).reshape(-1, 4)
        if len(self.bumps) > 16:
            raise ValueError(f"at most 16 bumps, got {len(self.bumps)}")
        if np.any(self.bumps[:, 3] <= 0):
            raise ValueError("bump sigma must be positive")
        ratio = np.abs(self.bumps[:, 2]) / self.bumps[:, 3]
        if np.any(ratio > 0.9):
            raise ValueError(f"bump amplitude/sigma ratio {ratio.max():.3f} exceeds 0.9")

    @classmethod
    def from_seed(cls, seed: int, n_bumps: int = 12,
                  extent=((-40.0, 110.0), (-25.0, 25.0))) -> "SyntheticScene":
        rng = np.random.default_rng(seed)
        (x0, x1), (y0, y1) = extent
        bumps = np.column_stack([
            rng.uniform(x0, x1, n_bumps),
            rng.uniform(y0, y1, n_bumps),
            rng.uniform(0.6, 2.2, n_bumps),
            rng.uniform(7.0, 14.0, n_bumps),
        ])
        return cls(bumps)

    def elevation(self, x, y):
        """Terrain height at (x, y); broadcasts over array input."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = np.zeros(np.broadcast(x, y).shape)
        for cx, cy, amp, sig in self.bumps:
            z += amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * sig * sig))
        return z if z.shape else float(z)

    def elevation_bounds(self, x_range, y_range, samples: int = 96) -> tuple[float, float]:
        """Conservative (min, max) terrain height over a rectangle.

        Evaluated on a samples x samples grid with a 1 m safety margin;
        with slopes under 30 degrees and metre-scale grid spacing the
        margin dominates the sampling error.
        """
        xs = np.linspace(x_range[0], x_range[1], samples)
        ys = np.linspace(y_range[0], y_range[1], samples)
        z = self.elevation(xs[None, :], ys[:, None])
        return float(z.min()) - 1.0, float(z.max()) + 1.0

    @property
    def markers(self) -> np.ndarray:
        return MARKERS.copy()


def make_intrinsics(width: int = 384, height: int = 288,
                    focal: float = 400.0) -> CameraIntrinsics:
    """Default survey camera: 0.125 m/px ground sampling at 50 m."""
    return CameraIntrinsics(fx=focal, fy=focal, cx=width / 2.0,
                            cy=height / 2.0, width=width, height=height)


def nadir_rotation() -> np.ndarray:
    """World-to-camera rotation looking straight down: camera x along
    world x, camera y along -y, camera z along -z."""
    return np.diag([1.0, -1.0, -1.0])


@dataclass
class MissionPlan:
    """Lawnmower survey: parallel strips along x at constant altitude."""

    frames_per_strip: int = 22
    n_strips: int = 1
    altitude: float = 50.0
    forward_overlap: float = 0.9
    side_overlap: float = 0.6
    start: tuple[float, float] = (-16.0, 0.0)
    gnss_sigma: float = 0.05
    gnss_dropout: tuple[int, ...] = ()
    frame_interval_s: float = 0.5
    intrinsics: CameraIntrinsics = field(default_factory=make_intrinsics)

    def __post_init__(self):
        if not 0.0 <= self.forward_overlap < 1.0:
            raise ValueError("forward_overlap must be in [0, 1)")
        if not 0.0 <= self.side_overlap < 1.0:
            raise ValueError("side_overlap must be in [0, 1)")
        if self.frames_per_strip < 1 or self.n_strips < 1:
            raise ValueError("need at least one frame and one strip")

    @property
    def forward_spacing(self) -> float:
        k = self.intrinsics
        return (1.0 - self.forward_overlap) * k.width * self.altitude / k.fx

    @property
    def strip_spacing(self) -> float:
        k = self.intrinsics
        return (1.0 - self.side_overlap) * k.height * self.altitude / k.fy


def generate_mission(plan: MissionPlan, seed: int = 0) -> tuple[list[Frame], list[Pose]]:
    """Frames (with noisy GNSS priors) plus exact ground-truth poses.

    Priors perturb the true camera centre with N(0, gnss_sigma^2) per
    axis and keep the true rotation; frames listed in ``gnss_dropout``
    get no prior at all.
    """
    rng = np.random.default_rng(seed)
    R = nadir_rotation()
    dropout = set(plan.gnss_dropout)
    frames: list[Frame] = []
    truth: list[Pose] = []
    fid = 0
    for strip in range(plan.n_strips):
        y = plan.start[1] + strip * plan.strip_spacing
        for i in range(plan.frames_per_strip):
            c = np.array([plan.start[0] + i * plan.forward_spacing, y, plan.altitude])
            pose = Pose(R, -R @ c)
            prior = None
            sigma = None
            if fid not in dropout:
                noisy = c + rng.normal(0.0, plan.gnss_sigma, 3)
                prior = Pose(R, -R @ noisy)
                sigma = plan.gnss_sigma
            frames.append(Frame(frame_id=fid, timestamp=fid * plan.frame_interval_s,
                                intrinsics=plan.intrinsics, gnss_prior=prior,
                                gnss_sigma=sigma))
            truth.append(pose)
            fid += 1
    return frames, truth


@dataclass
class RenderResult:
    """Synthetic feature tracks with complete ground truth."""

    tracks: list[Track]
    truth_points: dict[int, np.ndarray]
    outlier_labels: frozenset[tuple[int, int]]  # (track_id, frame_id)
    marker_ids: tuple[int, ...] = MARKER_IDS


def _observed_region(frames, truth_poses):
    """xy bounding box of the ground footprints of all frames."""
    lo = np.array([np.inf, np.inf])
    hi = np.array([-np.inf, -np.inf])
    for frame, pose in zip(frames, truth_poses):
        poly = footprint(frame, ground_elevation=0.0, pose=pose)
        lo = np.minimum(lo, poly.min(axis=0))
        hi = np.maximum(hi, poly.max(axis=0))
    return lo, hi


def render_tracks(scene: SyntheticScene, frames: list[Frame],
                  truth_poses: list[Pose], n_features: int = 1500,
                  noise_px: float = 0.0, outlier_fraction: float = 0.0,
                  seed: int = 0) -> RenderResult:
    """Project terrain features and survey markers into every frame.

    Features sit on the terrain surface, uniformly over the union of
    footprints.  Each observation gets isotropic Gaussian pixel noise;
    with probability ``outlier_fraction`` it is instead replaced by a
    uniform in-bounds pixel and recorded in ``outlier_labels``.
    Observations pushed outside the image are dropped, as are tracks
    seen fewer than twice.  Markers are injected as tracks 0..2; terrain
    features start at id 3.
    """
    if not 0.0 <= outlier_fraction < 1.0:
        raise ValueError("outlier_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    lo, hi = _observed_region(frames, truth_poses)
    xy = rng.uniform(lo, hi, size=(n_features, 2))
    feat = np.column_stack([xy, scene.elevation(xy[:, 0], xy[:, 1])])
    pts = np.vstack([MARKERS, feat])
    n_total = len(pts)
    truth_points = {tid: pts[tid].copy() for tid in range(n_total)}

    tracks: dict[int, Track] = {}
    outliers: set[tuple[int, int]] = set()
    for frame, pose in zip(frames, truth_poses):
        k = frame.intrinsics
        uv, depth = project(pts, pose, k)
        if noise_px > 0:
            uv = uv + rng.normal(0.0, noise_px, uv.shape)
        corrupt = (rng.random(n_total) < outlier_fraction) if outlier_fraction > 0 \
            else np.zeros(n_total, dtype=bool)
        uv[corrupt] = rng.uniform([0.0, 0.0], [k.width - 1.0, k.height - 1.0],
                                  size=(int(corrupt.sum()), 2))
        keep = ((depth > 0)
                & (uv[:, 0] >= 0) & (uv[:, 0] <= k.width - 1)
                & (uv[:, 1] >= 0) & (uv[:, 1] <= k.height - 1))
        for tid in np.nonzero(keep)[0]:
            tid = int(tid)
            tracks.setdefault(tid, Track(track_id=tid)).add(
                frame.frame_id, float(uv[tid, 0]), float(uv[tid, 1]))
            if corrupt[tid]:
                outliers.add((tid, frame.frame_id))
    kept = [t for _, t in sorted(tracks.items()) if len(t.obs) >= 2]
    kept_ids = {t.track_id for t in kept}
    missing = [m for m in MARKER_IDS if m not in kept_ids]
    if missing:
        logger.warning("markers %s not observed twice; accuracy checks will skip them",
                       missing)
    return RenderResult(
        tracks=kept,
        truth_points={t.track_id: truth_points[t.track_id] for t in kept},
        outlier_labels=frozenset(l for l in outliers if l[0] in kept_ids),
    )


def true_depth(scene: SyntheticScene, pose: Pose, intr: CameraIntrinsics,
               coarse_steps: int = 48, refine_iters: int = 48) -> np.ndarray:
    """Exact per-pixel depth of the terrain surface.

    Casts the ray of every integer pixel, brackets the first terrain
    crossing with a coarse march between the scene's elevation bounds,
    then bisects to well below 1e-6 m.  Rays must point downward.

    Returns camera-frame z (not ray length), matching the projection
    convention everywhere else.
    """
    u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    dirs_cam = np.stack([
        (u.ravel() - intr.cx) / intr.fx,
        (v.ravel() - intr.cy) / intr.fy,
        np.ones(u.size),
    ], axis=1)
    dirs = dirs_cam @ pose.rotation  # R^T rows applied to camera dirs
    c = pose.center
    wz = dirs[:, 2]
    if np.any(wz >= -1e-9):
        raise ValueError("a pixel ray does not point downward")

    # Ground region the rays can reach, for elevation bounds.
    zmin, zmax = scene.elevation_bounds(
        (c[0] + (dirs[:, 0] / -wz * (c[2] + 5)).min() - 5,
         c[0] + (dirs[:, 0] / -wz * (c[2] + 5)).max() + 5),
        (c[1] + (dirs[:, 1] / -wz * (c[2] + 5)).min() - 5,
         c[1] + (dirs[:, 1] / -wz * (c[2] + 5)).max() + 5))
    if c[2] <= zmax:
        raise ValueError("camera below the terrain bound")

    # depth d gives world point c + d * dir with camera z exactly d.
    d_lo = (c[2] - zmax) / -wz
    d_hi = (c[2] - zmin) / -wz

    def above(d):
        p = c[None, :] + d[:, None] * dirs
        return p[:, 2] - scene.elevation(p[:, 0], p[:, 1])

    # Coarse march: first step whose endpoint is at or below the surface.
    lo = d_lo.copy()
    hi = d_hi.copy()
    found = np.zeros(len(dirs), dtype=bool)
    prev = d_lo.copy()
    for s in range(1, coarse_steps + 1):
        d = d_lo + (d_hi - d_lo) * (s / coarse_steps)
        f = above(d)
        new = (~found) & (f <= 0)
        lo[new] = prev[new]
        hi[new] = d[new]
        found |= new
        prev = d
        if found.all():
            break
    if not found.all():
        raise ValueError(f"{int((~found).sum())} rays missed the terrain")

    for _ in range(refine_iters):
        mid = 0.5 * (lo + hi)
        f = above(mid)
        pos = f > 0
        lo[pos] = mid[pos]
        hi[~pos] = mid[~pos]
    return (0.5 * (lo + hi)).reshape(intr.height, intr.width)


def frame_color(frame_id: int) -> tuple[int, int, int]:
    """Deterministic flat color for a synthetic frame's image."""
    return (32 + (frame_id * 53) % 192,
            32 + (frame_id * 97) % 192,
            32 + (frame_id * 31) % 192)


def render_image(intr: CameraIntrinsics, frame_id: int) -> np.ndarray:
    """Solid-color stand-in image, (h, w, 3) uint8."""
    img = np.empty((intr.height, intr.width, 3), dtype=np.uint8)
    img[:] = frame_color(frame_id)
    return img
