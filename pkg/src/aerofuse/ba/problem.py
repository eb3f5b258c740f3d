"""Three-view bundle-adjustment problems: types and window initialization.

``initialize_window`` turns a cluster's BA window (three frames plus the
tracks observed there) into a ready-to-solve :class:`BaProblem`:

* observations and intrinsics are scaled to the working resolution
  (default 0.5); the solver reports rms back at full resolution;
* pairwise essential-matrix RANSAC removes outlier observations;
* the track list is capped by observation count;
* pose seeds come from, in priority order, the previous cluster's
  solution (those frames are fixed), GNSS priors, PnP against known
  3D points, and constant-velocity extrapolation;
* tracks already solved by the previous cluster keep their coordinates
  as constants, tying the new window to the existing map (together with
  the fixed boundary frame this pins scale and orientation without
  GNSS).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateGeometry, DisconnectedCluster, NoConsensus
from ..geometry import CameraIntrinsics, Frame, Pose, triangulate
from .twoview import guided_epipolar_filter, ransac_epipolar_filter

logger = logging.getLogger(__name__)


@dataclass
class Track:
    """One feature track: pixel observations per frame (full resolution)."""

    track_id: int
    obs: dict[int, np.ndarray] = field(default_factory=dict)
    inlier: bool = True

    def add(self, frame_id: int, u: float, v: float):
        if frame_id in self.obs:
            raise ValueError(f"track {self.track_id}: duplicate observation in frame {frame_id}")
        self.obs[frame_id] = np.array([u, v], dtype=float)


@dataclass(frozen=True)
class BaConfig:
    """Solver and window-construction settings.

    Pixel thresholds (huber_delta, ransac_threshold_px) are interpreted
    at the working resolution set by ``downscale``.
    """

    huber_delta: float = 1.5
    max_iters: int = 50
    gradient_tol: float = 1e-8
    param_tol: float = 1e-10
    lambda_init_factor: float = 1e-4
    lambda_up: float = 4.0
    lambda_down: float = 0.5
    lambda_max: float = 1e12
    prune_factor: float = 3.0
    feature_cap: int = 4000
    downscale: float = 0.5
    ransac_threshold_px: float = 1.0
    ransac_seed: int = 0
    ransac_max_iters: int = 500
    gauge_weight: float = 1e6
    min_pnp_points: int = 6


@dataclass(frozen=True)
class TiePoint:
    """A retained sparse point with a scalar 1-sigma position uncertainty."""

    track_id: int
    position: np.ndarray
    uncertainty: float
    observing_frames: tuple[int, ...]


@dataclass
class BaSolution:
    """Optimized window: poses, surviving tie-points and fit statistics."""

    frame_ids: tuple[int, ...]
    poses: dict[int, Pose]
    points: dict[int, TiePoint]
    rms_reprojection: float  # full-resolution pixels
    inlier_count: int
    iterations: int
    converged: bool
    final_cost: float


@dataclass
class BaProblem:
    """A three-view problem at working resolution, ready for the solver."""

    frame_ids: tuple[int, int, int]
    intrinsics: dict[int, CameraIntrinsics]
    poses: dict[int, Pose]
    observations: dict[int, dict[int, np.ndarray]]  # track -> frame -> pixel
    points: dict[int, np.ndarray]
    fixed_frame_ids: frozenset[int] = frozenset()
    fixed_track_ids: frozenset[int] = frozenset()
    carried_sigmas: dict[int, float] = field(default_factory=dict)
    priors: dict[int, tuple[np.ndarray, float]] = field(default_factory=dict)
    gauge: tuple[int, int, float] | None = None
    scale: float = 1.0


def cap_tracks(tracks: list[Track], cap: int) -> list[Track]:
    """Keep the ``cap`` most-observed tracks; ties break on lower id."""
    if len(tracks) <= cap:
        return sorted(tracks, key=lambda t: t.track_id)
    ranked = sorted(tracks, key=lambda t: (-len(t.obs), t.track_id))
    return sorted(ranked[:cap], key=lambda t: t.track_id)


def apply_ransac_filter(frame_ids, tracks: list[Track],
                        intrinsics: dict[int, CameraIntrinsics],
                        threshold_px: float, seed: int, max_iters: int = 500,
                        prior_poses: dict[int, Pose] | None = None):
    """Pairwise epipolar outlier filter over consecutive window frames.

    A pair with approximate poses on both ends (GNSS priors or an
    earlier solution) is gated against the epipolar geometry those poses
    imply; otherwise the essential matrix is estimated by seeded RANSAC.
    Estimating from scratch is the fallback because the eight-point
    problem degenerates on the near-planar ground common in nadir
    surveys, where known poses are the only reliable geometry source.

    An observation survives if at least one consecutive pair it belongs
    to reached consensus with it as an inlier; tracks left with fewer
    than two observations are dropped (``inlier`` flag cleared).

    Returns:
        (filtered, rel_poses): filtered tracks (new objects) and
        ``{(fid_a, fid_b): (R, t_unit)}`` relative pose estimates.
    """
    pairs = list(zip(frame_ids[:-1], frame_ids[1:]))
    keep: dict[int, set[int]] = {t.track_id: set() for t in tracks}
    priors = prior_poses or {}
    rel_poses = {}
    for pi, (fa, fb) in enumerate(pairs):
        members = [t for t in tracks if fa in t.obs and fb in t.obs]
        if len(members) < 8:
            continue
        ua = np.stack([t.obs[fa] for t in members])
        ub = np.stack([t.obs[fb] for t in members])
        mask = None
        if fa in priors and fb in priors:
            try:
                mask, R, t = guided_epipolar_filter(
                    ua, ub, intrinsics[fa], intrinsics[fb],
                    priors[fa], priors[fb], threshold_px=threshold_px,
                )
            except NoConsensus:
                logger.warning("pair (%d, %d): guided gate found no consensus, "
                               "falling back to RANSAC", fa, fb)
        if mask is None:
            mask, R, t = ransac_epipolar_filter(
                ua, ub, intrinsics[fa], intrinsics[fb],
                threshold_px=threshold_px, seed=seed + pi, max_iters=max_iters,
            )
        rel_poses[(fa, fb)] = (R, t)
        for m, track in zip(mask, members):
            if m:
                keep[track.track_id].update((fa, fb))

    filtered = []
    for t in tracks:
        kept = {fid: uv.copy() for fid, uv in t.obs.items() if fid in keep[t.track_id]}
        if len(kept) >= 2:
            filtered.append(Track(t.track_id, kept, True))
        else:
            filtered.append(Track(t.track_id, {}, False))
    return [t for t in filtered if t.inlier], rel_poses


def pnp_dlt(points, pixels, intr: CameraIntrinsics) -> Pose:
    """Direct linear pose from >= 6 3D-2D matches (seed quality only).

    Solves the projective 3x4 matrix in least squares, fixes its scale
    and sign through det(M) and orthonormalizes the rotation block.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    x = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = P.shape[0]
    if n < 6:
        raise DegenerateGeometry(f"pnp needs >= 6 points, got {n}")
    xn = np.empty_like(x)
    xn[:, 0] = (x[:, 0] - intr.cx) / intr.fx
    xn[:, 1] = (x[:, 1] - intr.cy) / intr.fy
    Ph = np.hstack([P, np.ones((n, 1))])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Ph
    A[0::2, 8:12] = -xn[:, :1] * Ph
    A[1::2, 4:8] = Ph
    A[1::2, 8:12] = -xn[:, 1:2] * Ph
    _, _, vt = np.linalg.svd(A)
    M34 = vt[-1].reshape(3, 4)
    d = np.linalg.det(M34[:, :3])
    if abs(d) < 1e-15:
        raise DegenerateGeometry("pnp produced a singular rotation block")
    M34 = M34 / np.cbrt(d)
    U, _, Vt = np.linalg.svd(M34[:, :3])
    R = U @ Vt
    if np.linalg.det(R) < 0:  # numerically defensive; det ~ +1 after scaling
        R = -R
    return Pose(R, M34[:, 3])


def _extrapolate(earlier: Pose, later: Pose) -> Pose:
    """Constant-velocity pose prediction one step beyond ``later``."""
    rel = later.compose(earlier.inverse())
    return rel.compose(later)


def initialize_window(frames: list[Frame], tracks: list[Track], config: BaConfig,
                      previous: BaSolution | None = None) -> BaProblem:
    """Build a solvable problem for a three-frame window.

    Args:
        frames: the window's three frames, stream order.
        tracks: tracks with at least the window observations present
            (extra frames are ignored); full-resolution pixels.
        config: thresholds and caps.
        previous: the last cluster's solution, if any.

    Raises:
        DisconnectedCluster: no pose seed source for some frame.
        NoConsensus / TooFewCorrespondences: RANSAC failure (propagated).
    """
    if len(frames) != 3:
        raise ValueError(f"window must have exactly 3 frames, got {len(frames)}")
    fids = tuple(f.frame_id for f in frames)
    frame_by_id = {f.frame_id: f for f in frames}
    s = config.downscale
    intr_w = {f.frame_id: f.intrinsics.scaled(s) for f in frames}

    # Window-restricted, resolution-scaled copies of the tracks.
    windowed = []
    for t in tracks:
        obs = {fid: t.obs[fid] * s for fid in fids if fid in t.obs}
        if len(obs) >= 2:
            windowed.append(Track(t.track_id, obs))

    # Approximate poses available before solving, best source first.
    guide: dict[int, Pose] = {}
    for fid in fids:
        if previous is not None and fid in previous.poses:
            guide[fid] = previous.poses[fid]
        elif frame_by_id[fid].gnss_prior is not None:
            guide[fid] = frame_by_id[fid].gnss_prior

    filtered, rel_poses = apply_ransac_filter(
        fids, windowed, intr_w,
        threshold_px=config.ransac_threshold_px,
        seed=config.ransac_seed, max_iters=config.ransac_max_iters,
        prior_poses=guide,
    )
    capped = cap_tracks(filtered, config.feature_cap)

    # --- pose seeding -------------------------------------------------------
    poses: dict[int, Pose] = {}
    fixed_frames: set[int] = set()
    for fid in fids:
        if previous is not None and fid in previous.poses:
            poses[fid] = previous.poses[fid]
            fixed_frames.add(fid)
    for fid in fids:
        if fid not in poses and frame_by_id[fid].gnss_prior is not None:
            poses[fid] = frame_by_id[fid].gnss_prior

    gauge = None
    if not poses:
        # Cold start without GNSS: identity + unit baseline from RANSAC.
        if (fids[0], fids[1]) not in rel_poses:
            raise DisconnectedCluster("no priors, no previous solution, no two-view pose")
        poses[fids[0]] = Pose(np.eye(3), np.zeros(3))
        R, t = rel_poses[(fids[0], fids[1])]
        poses[fids[1]] = Pose(R, t)
        fixed_frames.add(fids[0])
        gauge = (fids[0], fids[1], 1.0)

    # Known 3D points usable for PnP: inherited tie-points first.
    known_pts: dict[int, np.ndarray] = {}
    if previous is not None:
        for t in capped:
            tp = previous.points.get(t.track_id)
            if tp is not None:
                known_pts[t.track_id] = tp.position

    for fid in fids:
        if fid in poses:
            continue
        seeded = _seed_by_pnp(fid, capped, known_pts, poses, intr_w, config)
        if seeded is None:
            seeded = _seed_by_extrapolation(fid, fids, poses, previous)
        if seeded is None:
            raise DisconnectedCluster(f"no pose seed source for frame {fid}")
        poses[fid] = seeded

    # --- point seeding ------------------------------------------------------
    # Tie-points solved by the previous cluster are held constant: they
    # chain the new window to the map built so far, pinning the scale
    # when there is no GNSS and, on straight strips, the roll about the
    # camera line that position priors alone cannot observe.
    fixed_tracks: set[int] = set()
    carried: dict[int, float] = {}
    points: dict[int, np.ndarray] = {}
    observations: dict[int, dict[int, np.ndarray]] = {}
    for t in capped:
        if previous is not None and t.track_id in previous.points:
            tp = previous.points[t.track_id]
            pos = tp.position.copy()
            fixed_tracks.add(t.track_id)
            carried[t.track_id] = tp.uncertainty
        else:
            try:
                pos = triangulate(
                    np.stack([t.obs[fid] for fid in fids if fid in t.obs]),
                    [poses[fid] for fid in fids if fid in t.obs],
                    [intr_w[fid] for fid in fids if fid in t.obs],
                )
            except DegenerateGeometry:
                continue
        # Keep only observations the seed is actually visible in.
        obs = {}
        for fid, uv in t.obs.items():
            if fid in fixed_frames and t.track_id in fixed_tracks:
                continue  # constant-vs-constant residual carries no information
            if poses[fid].apply(pos)[2] > 1e-9:
                obs[fid] = uv
        if t.track_id in fixed_tracks:
            if obs:
                points[t.track_id] = pos
                observations[t.track_id] = obs
        elif len(obs) >= 2:
            points[t.track_id] = pos
            observations[t.track_id] = obs

    if not points:
        raise DisconnectedCluster("no usable tracks after filtering and seeding")

    priors: dict[int, tuple[np.ndarray, float]] = {}
    for f in frames:
        if f.gnss_prior is not None and f.frame_id not in fixed_frames:
            priors[f.frame_id] = (f.gnss_prior.center, float(f.gnss_sigma))

    return BaProblem(
        frame_ids=fids,
        intrinsics=intr_w,
        poses=poses,
        observations=observations,
        points=points,
        fixed_frame_ids=frozenset(fixed_frames),
        fixed_track_ids=frozenset(tid for tid in fixed_tracks if tid in points),
        carried_sigmas={tid: carried[tid] for tid in carried if tid in points},
        priors=priors,
        gauge=gauge,
        scale=s,
    )


def _seed_by_pnp(fid, tracks, known_pts, poses, intr_w, config) -> Pose | None:
    """PnP seed for ``fid`` from inherited points plus fresh triangulations."""
    usable = dict(known_pts)
    seeded_fids = [f for f in poses]
    for t in tracks:
        if t.track_id in usable or fid not in t.obs:
            continue
        vis = [f for f in seeded_fids if f in t.obs]
        if len(vis) >= 2:
            try:
                usable[t.track_id] = triangulate(
                    np.stack([t.obs[f] for f in vis]),
                    [poses[f] for f in vis],
                    [intr_w[f] for f in vis],
                )
            except DegenerateGeometry:
                continue
    pts, pix = [], []
    for t in tracks:
        if fid in t.obs and t.track_id in usable:
            pts.append(usable[t.track_id])
            pix.append(t.obs[fid])
    if len(pts) < config.min_pnp_points:
        return None
    try:
        return pnp_dlt(np.stack(pts), np.stack(pix), intr_w[fid])
    except DegenerateGeometry:
        return None


def _seed_by_extrapolation(fid, fids, poses, previous) -> Pose | None:
    """Constant-velocity seed using the two nearest known stream poses."""
    known: dict[int, Pose] = {}
    if previous is not None:
        known.update(previous.poses)
    known.update(poses)
    older = sorted(k for k in known if k < fid)
    if len(older) >= 2:
        return _extrapolate(known[older[-2]], known[older[-1]])
    newer = sorted(k for k in known if k > fid)
    if len(newer) >= 2:
        return _extrapolate(known[newer[1]], known[newer[0]])
    return None
