"""Essential-matrix RANSAC for pairwise outlier rejection and pose seeds.

Normalized 8-point estimation inside a seeded RANSAC loop, scored with
the symmetric epipolar distance in pixels.  The winning model is refit
on its consensus set and decomposed into the relative pose (R, t) with
unit-norm translation, picking the chirality-positive candidate.
"""

from __future__ import annotations

import numpy as np

from ..errors import NoConsensus, TooFewCorrespondences
from ..geometry import CameraIntrinsics, Pose, triangulate

MIN_INLIER_RATIO = 0.30


def _homogeneous(x):
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _normalize_points(x):
    """Hartley conditioning: zero centroid, mean distance sqrt(2)."""
    c = x.mean(axis=0)
    d = np.linalg.norm(x - c, axis=1).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return (x - c) * s, T

def eight_point_essential(xa, xb):
    """Essential matrix from >= 8 correspondences in normalized camera coords.

    Solves xb^T E xa = 0 in least squares and projects onto the essential
    manifold (two equal singular values, third zero).  Inputs are (n, 2)
    arrays of K^-1-normalized coordinates.
    """
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    n = xa.shape[0]
    if n < 8:
        raise TooFewCorrespondences(f"eight-point needs >= 8, got {n}")
    na, Ta = _normalize_points(xa)
    nb, Tb = _normalize_points(xb)
    A = np.empty((n, 9))
    A[:, 0] = nb[:, 0] * na[:, 0]
    A[:, 1] = nb[:, 0] * na[:, 1]
    A[:, 2] = nb[:, 0]
    A[:, 3] = nb[:, 1] * na[:, 0]
    A[:, 4] = nb[:, 1] * na[:, 1]
    A[:, 5] = nb[:, 1]
    A[:, 6] = na[:, 0]
    A[:, 7] = na[:, 1]
    A[:, 8] = 1.0
    _, _, vt = np.linalg.svd(A)
    F = vt[-1].reshape(3, 3)
    F = Tb.T @ F @ Ta  # undo conditioning
    U, s, Vt = np.linalg.svd(F)
    sig = 0.5 * (s[0] + s[1])
    E = U @ np.diag([sig, sig, 0.0]) @ Vt
    return E / np.linalg.norm(E)


def symmetric_epipolar_px(E, ua, ub, Ka: CameraIntrinsics, Kb: CameraIntrinsics):
    """Per-correspondence symmetric epipolar distance in pixels.

    Converts E to the fundamental matrix and returns
    max(point-to-line distance in image b, same in image a), the quantity
    thresholded by RANSAC.
    """
    F = np.linalg.inv(Kb.matrix).T @ E @ np.linalg.inv(Ka.matrix)
    pa = _homogeneous(np.asarray(ua, dtype=float))
    pb = _homogeneous(np.asarray(ub, dtype=float))
    la = pa @ F.T  # epipolar lines in image b
    lb = pb @ F  # epipolar lines in image a
    num = np.abs(np.einsum("ij,ij->i", pb, la))
    da = num / np.maximum(np.hypot(la[:, 0], la[:, 1]), 1e-15)
    db = num / np.maximum(np.hypot(lb[:, 0], lb[:, 1]), 1e-15)
    return np.maximum(da, db)


def decompose_essential(E, xa, xb):
    """Relative pose (R, unit t) from E via the chirality test.

    Of the four (R, t) factorisations, returns the one that places the
    most correspondences in front of both cameras (camera a at identity,
    camera b at [R | t]).  xa/xb are normalized camera coordinates of
    correspondences believed to be inliers.
    """
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    candidates = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            candidates.append((R, t / np.linalg.norm(t)))

    ident = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 1, 1)
    pose_a = Pose(np.eye(3), np.zeros(3))
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    # Subsample the chirality vote; 50 points decide it as well as 5000.
    if xa.shape[0] > 50:
        step = xa.shape[0] // 50
        xa, xb = xa[::step], xb[::step]
    best, best_votes = None, -1
    for R, t in candidates:
        pose_b = Pose(R, t)
        votes = 0
        for i in range(xa.shape[0]):
            try:
                p = triangulate(np.array([xa[i], xb[i]]), [pose_a, pose_b], [ident, ident])
            except Exception:
                continue
            if p[2] > 0 and pose_b.apply(p)[2] > 0:
                votes += 1
        if votes > best_votes:
            best, best_votes = (R, t), votes
    if best is None or best_votes <= 0:
        raise NoConsensus("no chirality-positive decomposition")
    return best


def pose_pair_essential(pose_a: Pose, pose_b: Pose):
    """Essential matrix and relative pose implied by two known poses.

    Returns (E, R_rel, t_unit) for frame b w.r.t. frame a, or None when
    the baseline is too short to define an epipolar geometry.
    """
    R_rel = pose_b.rotation @ pose_a.rotation.T
    t_rel = pose_b.translation - R_rel @ pose_a.translation
    norm = float(np.linalg.norm(t_rel))
    if norm < 1e-9:
        return None
    t_unit = t_rel / norm
    E = np.cross(np.eye(3), t_unit) @ R_rel
    return E, R_rel, t_unit


def guided_epipolar_filter(ua, ub, Ka: CameraIntrinsics, Kb: CameraIntrinsics,
                           pose_a: Pose, pose_b: Pose,
                           threshold_px: float = 1.0,
                           min_inlier_ratio: float = MIN_INLIER_RATIO):
    """Outlier gate against the epipolar geometry of two known poses.

    When approximate poses exist (GNSS priors, a previous solution) the
    implied essential matrix separates inliers far more reliably than
    estimating one from the correspondences, which degenerates on the
    near-planar scenes typical of nadir surveys.  Same return contract
    as :func:`ransac_epipolar_filter`.

    Raises:
        NoConsensus: inlier fraction below ``min_inlier_ratio``, or no
            baseline between the poses.
    """
    ua = np.asarray(ua, dtype=float).reshape(-1, 2)
    ub = np.asarray(ub, dtype=float).reshape(-1, 2)
    geom = pose_pair_essential(pose_a, pose_b)
    if geom is None:
        raise NoConsensus("poses share a centre; no epipolar geometry")
    E, R_rel, t_unit = geom
    mask = symmetric_epipolar_px(E, ua, ub, Ka, Kb) < threshold_px
    if mask.sum() / len(mask) < min_inlier_ratio:
        raise NoConsensus(
            f"guided consensus {int(mask.sum())}/{len(mask)} below {min_inlier_ratio:.0%}"
        )
    return mask, R_rel, t_unit


def ransac_epipolar_filter(ua, ub, Ka: CameraIntrinsics, Kb: CameraIntrinsics,
                           threshold_px: float = 1.0, seed: int = 0,
                           max_iters: int = 500,
                           min_inlier_ratio: float = MIN_INLIER_RATIO):
    """RANSAC essential-matrix filter over pixel correspondences.

    Args:
        ua, ub: (n, 2) matched pixel coordinates in frames a and b.
        Ka, Kb: intrinsics of the two frames.
        threshold_px: inlier gate on the symmetric epipolar distance.
        seed: RNG seed; identical inputs and seed give identical output.
        max_iters: sampling budget (adaptively shortened by confidence).
        min_inlier_ratio: consensus floor below which NoConsensus raises.

    Returns:
        (inlier_mask, R, t): boolean (n,) mask plus the relative pose of
        frame b w.r.t. frame a with unit-norm translation.

    Raises:
        TooFewCorrespondences: n < 8.
        NoConsensus: best consensus below min_inlier_ratio.
    """
    ua = np.asarray(ua, dtype=float).reshape(-1, 2)
    ub = np.asarray(ub, dtype=float).reshape(-1, 2)
    n = ua.shape[0]
    if n < 8:
        raise TooFewCorrespondences(f"ransac needs >= 8 correspondences, got {n}")

    Ka_inv = np.linalg.inv(Ka.matrix)
    Kb_inv = np.linalg.inv(Kb.matrix)
    xa = (_homogeneous(ua) @ Ka_inv.T)[:, :2]
    xb = (_homogeneous(ub) @ Kb_inv.T)[:, :2]

    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    needed = max_iters
    it = 0
    while it < needed:
        it += 1
        sample = rng.choice(n, size=8, replace=False)
        try:
            E = eight_point_essential(xa[sample], xb[sample])
        except np.linalg.LinAlgError:
            continue
        mask = symmetric_epipolar_px(E, ua, ub, Ka, Kb) < threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
            ratio = count / n
            if ratio > 0:
                # 99% confidence stopping rule.
                denom = np.log1p(-min(ratio, 1 - 1e-12) ** 8)
                if denom < 0:
                    needed = min(max_iters, int(np.ceil(np.log(0.01) / denom)))

    if best_mask is None or best_count / n < min_inlier_ratio:
        raise NoConsensus(
            f"best consensus {best_count}/{n} below {min_inlier_ratio:.0%}"
        )

    # Refit on the consensus set and refresh the mask once.
    E = eight_point_essential(xa[best_mask], xb[best_mask])
    mask = symmetric_epipolar_px(E, ua, ub, Ka, Kb) < threshold_px
    if int(mask.sum()) < 8:
        mask = best_mask
        E = eight_point_essential(xa[mask], xb[mask])
    R, t = decompose_essential(E, xa[mask], xb[mask])
    return mask, R, t
