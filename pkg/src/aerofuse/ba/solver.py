"""Robust three-view bundle adjustment.

Levenberg-Marquardt on Huber-weighted reprojection residuals, solved per
iteration through a Schur complement that eliminates the 3x3 point
blocks.  The camera system stays tiny (at most 18 parameters), so the
reduced solve is dense.

Cost being minimised, with rho the Huber kernel on the squared residual
norm and optional quadratic terms:

    E = sum_obs rho(|r|^2)
      + sum_prior |C(pose) - C_gnss|^2 / sigma^2
      + w_gauge (|C_b - C_a| - baseline)^2

IRLS turns rho into per-observation weights w = min(1, delta/|r|); the
normal equations then use w Jt J and w Jt r.  Damping is additive
(lambda * I on both camera and point diagonals), halved on accepted
steps and quadrupled on rejections.
"""

from __future__ import annotations

import logging

import numpy as np

from ..errors import Diverged, SingularSystem
from ..geometry import Pose, reprojection_jacobians, so3_hat
from .problem import BaConfig, BaProblem, BaSolution, TiePoint

logger = logging.getLogger(__name__)


def huber_weight(squared_residual, delta: float):
    """Huber cost and IRLS weight for squared residual norm(s).

    cost = s for |r| <= delta, else 2 delta |r| - delta^2;
    weight = min(1, delta / |r|).  Vectorised over the input.
    """
    s = np.asarray(squared_residual, dtype=float)
    r = np.sqrt(s)
    cost = np.where(r <= delta, s, 2.0 * delta * r - delta * delta)
    weight = np.minimum(1.0, delta / np.maximum(r, 1e-300))
    if np.ndim(squared_residual) == 0:
        return float(cost), float(weight)
    return cost, weight


def schur_solve(H_cc, H_cp, H_pp, g_c, g_p, lam: float):
    """Solve the damped normal equations by point-block elimination.

    Args:
        H_cc: (6F, 6F) camera block (F free cameras), undamped.
        H_cp: (F, P, 6, 3) camera-point blocks.
        H_pp: (P, 3, 3) point blocks, undamped.
        g_c: (6F,) camera gradient; g_p: (P, 3) point gradient.
        lam: damping added to both diagonals (lam >= 0).

    Returns:
        (delta_c, delta_p): (6F,) and (P, 3) Newton increments solving
        (H + lam I) delta = -g.

    Raises:
        SingularSystem: reduced camera matrix not solvable.
    """
    F = H_cc.shape[0] // 6
    P = H_pp.shape[0]
    D = H_pp + lam * np.eye(3)[None, :, :]
    try:
        Dinv = np.linalg.inv(D)
    except np.linalg.LinAlgError as e:
        raise SingularSystem(f"point block inversion failed: {e}") from e

    if F == 0:
        delta_p = np.einsum("pij,pj->pi", Dinv, -g_p)
        return np.zeros(0), delta_p

    S = H_cc + lam * np.eye(6 * F)
    if P:
        T = np.einsum("apij,pjk,bplk->aibl", H_cp, Dinv, H_cp, optimize=True)
        S = S - T.reshape(6 * F, 6 * F)
        rhs = -g_c + np.einsum("apij,pjk,pk->ai", H_cp, Dinv, g_p).reshape(6 * F)
    else:
        rhs = -g_c
    try:
        delta_c = np.linalg.solve(S, rhs)
    except np.linalg.LinAlgError as e:
        raise SingularSystem(f"reduced camera solve failed: {e}") from e
    if not np.all(np.isfinite(delta_c)):
        raise SingularSystem("non-finite camera update")

    if P:
        back = -g_p - np.einsum("apij,ai->pj", H_cp, delta_c.reshape(F, 6))
        delta_p = np.einsum("pij,pj->pi", Dinv, back)
    else:
        delta_p = np.zeros((0, 3))
    return delta_c, delta_p


class _Workspace:
    """Flattened problem arrays shared across LM iterations."""

    def __init__(self, problem: BaProblem):
        self.problem = problem
        self.fids = list(problem.frame_ids)
        self.free_cams = [f for f in self.fids if f not in problem.fixed_frame_ids]
        self.cam_rank = {f: i for i, f in enumerate(self.free_cams)}

        self.track_ids = sorted(problem.observations)
        self.free_tracks = [t for t in self.track_ids if t not in problem.fixed_track_ids]
        self.pt_rank = {t: i for i, t in enumerate(self.free_tracks)}
        self.fixed_pos = {
            t: problem.points[t] for t in self.track_ids if t in problem.fixed_track_ids
        }

        obs_f, obs_t, obs_uv = [], [], []
        for tid in self.track_ids:
            for fid in self.fids:
                uv = problem.observations[tid].get(fid)
                if uv is not None:
                    obs_f.append(fid)
                    obs_t.append(tid)
                    obs_uv.append(uv)
        self.obs_fid = obs_f
        self.obs_tid = obs_t
        self.obs_uv = np.asarray(obs_uv, dtype=float).reshape(-1, 2)
        self.n_obs = len(obs_f)
        # Gather indices: observation row -> free point row (-1 if fixed).
        self.obs_prow = np.array(
            [self.pt_rank.get(t, -1) for t in obs_t], dtype=np.int64
        )
        self._fid_masks = {
            fid: np.array([f == fid for f in obs_f], dtype=bool) for fid in self.fids
        }

    def sel_by_fid(self, fid):
        return self._fid_masks[fid]

    def point_array(self):
        return np.stack([self.problem.points[t] for t in self.free_tracks]) \
            if self.free_tracks else np.zeros((0, 3))

    def gather_points(self, free_pts):
        out = np.empty((self.n_obs, 3))
        for i, tid in enumerate(self.obs_tid):
            row = self.pt_rank.get(tid, -1)
            out[i] = free_pts[row] if row >= 0 else self.fixed_pos[tid]
        return out


def _center_jacobian(pose: Pose):
    """d(camera centre)/d(w, dt) for the left-multiplicative increment."""
    J = np.empty((3, 6))
    J[:, :3] = -pose.rotation.T @ so3_hat(pose.translation)
    J[:, 3:] = -pose.rotation.T
    return J


def solve(problem: BaProblem, config: BaConfig | None = None) -> BaSolution:
    """Optimise a window and return the pruned solution.

    Fixed frames and fixed tracks pass through bit-identical.  After
    convergence, points whose worst reprojection error exceeds
    ``prune_factor * huber_delta`` (working-resolution px) or that fall
    behind any observing camera are dropped; the survivors carry a
    1-sigma uncertainty from their inverse point Hessian blocks.

    Raises:
        Diverged: damping exceeded ``lambda_max`` without a cost decrease.
        SingularSystem: the reduced camera system could not be solved.
    """
    if config is None:
        config = BaConfig()
    ws = _Workspace(problem)
    delta = config.huber_delta

    poses = dict(problem.poses)
    pts = ws.point_array()

    r, sq, w, E = _eval_state(ws, poses, pts, delta, config)
    if not np.isfinite(E):
        raise Diverged("initial state has observations behind a camera")

    lam = None
    iterations = 0
    converged = False
    for iterations in range(1, config.max_iters + 1):
        H_cc, H_cp, H_pp, g_c, g_p = _normal_equations(ws, poses, pts, r, w, config)
        if lam is None:
            nf = 6 * len(ws.free_cams) + 3 * len(ws.free_tracks)
            mean_diag = (np.trace(H_cc) + H_pp.trace(axis1=1, axis2=2).sum()) / max(nf, 1)
            lam = config.lambda_init_factor * max(mean_diag, 1e-12)

        g_inf = 0.0
        if g_c.size:
            g_inf = max(g_inf, float(np.abs(g_c).max()))
        if g_p.size:
            g_inf = max(g_inf, float(np.abs(g_p).max()))
        if g_inf < config.gradient_tol:
            converged = True
            break

        accepted = False
        while lam <= config.lambda_max:
            dc, dp = schur_solve(H_cc, H_cp, H_pp, g_c, g_p, lam)
            step_inf = max(
                float(np.abs(dc).max()) if dc.size else 0.0,
                float(np.abs(dp).max()) if dp.size else 0.0,
            )
            if step_inf < config.param_tol:
                # Below parameter resolution no step can change the cost;
                # this is the numerical floor, not divergence.
                converged = True
                accepted = True
                break
            cand_poses = dict(poses)
            for fid in ws.free_cams:
                i = 6 * ws.cam_rank[fid]
                cand_poses[fid] = poses[fid].retract(dc[i : i + 3], dc[i + 3 : i + 6])
            cand_pts = pts + dp if len(dp) else pts
            r2, sq2, w2, E2 = _eval_state(ws, cand_poses, cand_pts, delta, config)
            if E2 < E:
                poses, pts, r, sq, w, E = cand_poses, cand_pts, r2, sq2, w2, E2
                lam = max(lam * config.lambda_down, 1e-18)
                accepted = True
                break
            lam *= config.lambda_up
        if not accepted:
            raise Diverged(f"lambda exceeded {config.lambda_max:.0e} without cost decrease")
        if converged:
            break

    return _finalize(ws, poses, pts, delta, config, iterations, converged, E)


def _eval_state(ws, poses, free_pts, delta, config):
    """Residuals, weights and total cost (reprojection + priors + gauge)."""
    pb = ws.problem
    P = ws.gather_points(free_pts)
    r = np.empty((ws.n_obs, 2))
    for fid in ws.fids:
        sel = ws.sel_by_fid(fid)
        if not sel.any():
            continue
        pc = poses[fid].apply(P[sel])
        z = pc[:, 2]
        if np.any(z <= 1e-12):
            return None, None, None, np.inf
        K = pb.intrinsics[fid]
        r[sel, 0] = K.fx * pc[:, 0] / z + K.cx - ws.obs_uv[sel, 0]
        r[sel, 1] = K.fy * pc[:, 1] / z + K.cy - ws.obs_uv[sel, 1]
    sq = np.einsum("ij,ij->i", r, r)
    cost, w = huber_weight(sq, delta)
    E = float(np.sum(cost))
    for fid, (c_prior, sigma) in pb.priors.items():
        d = poses[fid].center - c_prior
        E += float(d @ d) / sigma**2
    if pb.gauge is not None:
        fa, fb, baseline = pb.gauge
        rs = float(np.linalg.norm(poses[fb].center - poses[fa].center)) - baseline
        E += config.gauge_weight * rs * rs
    return r, sq, w, E


def _normal_equations(ws, poses, free_pts, r, w, config):
    """Weighted Gauss-Newton blocks at the current state."""
    pb = ws.problem
    F = len(ws.free_cams)
    P = len(ws.free_tracks)
    H_cc = np.zeros((6 * F, 6 * F))
    g_c = np.zeros(6 * F)
    H_pp = np.zeros((P, 3, 3))
    g_p = np.zeros((P, 3))
    H_cp = np.zeros((F, P, 6, 3))

    Pw = ws.gather_points(free_pts)
    for fid in ws.fids:
        sel = ws.sel_by_fid(fid)
        if not sel.any():
            continue
        Jc, Jp = reprojection_jacobians(Pw[sel], poses[fid], pb.intrinsics[fid])
        rw = r[sel] * w[sel, None]
        prow = ws.obs_prow[sel]
        crow = ws.cam_rank.get(fid, -1)
        free_pt = prow >= 0
        if crow >= 0:
            wJc = Jc * w[sel, None, None]
            Hb = np.einsum("nij,nik->jk", wJc, Jc)
            i = 6 * crow
            H_cc[i : i + 6, i : i + 6] += Hb
            g_c[i : i + 6] += np.einsum("nij,ni->j", Jc, rw)
            if free_pt.any():
                blocks = np.einsum("nij,nik->njk", wJc[free_pt], Jp[free_pt])
                H_cp[crow, prow[free_pt]] += blocks
        if free_pt.any():
            wJp = Jp[free_pt] * w[sel][free_pt, None, None]
            np.add.at(H_pp, prow[free_pt],
                      np.einsum("nij,nik->njk", wJp, Jp[free_pt]))
            np.add.at(g_p, prow[free_pt],
                      np.einsum("nij,ni->nj", Jp[free_pt], rw[free_pt]))

    for fid, (c_prior, sigma) in pb.priors.items():
        crow = ws.cam_rank.get(fid, -1)
        if crow < 0:
            continue
        Jc = _center_jacobian(poses[fid])
        wp = 1.0 / sigma**2
        i = 6 * crow
        H_cc[i : i + 6, i : i + 6] += wp * (Jc.T @ Jc)
        g_c[i : i + 6] += wp * (Jc.T @ (poses[fid].center - c_prior))

    if pb.gauge is not None:
        fa, fb, baseline = pb.gauge
        dC = poses[fb].center - poses[fa].center
        norm = float(np.linalg.norm(dC))
        if norm > 1e-15:
            direction = dC / norm
            rs = norm - baseline
            Jrow = np.zeros(6 * F)
            for fid, sign in ((fb, 1.0), (fa, -1.0)):
                crow = ws.cam_rank.get(fid, -1)
                if crow >= 0:
                    Jrow[6 * crow : 6 * crow + 6] = sign * (direction @ _center_jacobian(poses[fid]))
            H_cc += config.gauge_weight * np.outer(Jrow, Jrow)
            g_c += config.gauge_weight * rs * Jrow

    return H_cc, H_cp, H_pp, g_c, g_p


def _finalize(ws, poses, pts, delta, config, iterations, converged, E):
    """Prune, attach uncertainties and report at full resolution."""
    pb = ws.problem
    r, sq, w, _ = _eval_state(ws, poses, pts, delta, config)
    if r is None:
        raise Diverged("final state has observations behind a camera")
    norms = np.sqrt(sq)

    per_track_max: dict[int, float] = {}
    per_track_obs: dict[int, list[int]] = {}
    for i, tid in enumerate(ws.obs_tid):
        per_track_max[tid] = max(per_track_max.get(tid, 0.0), float(norms[i]))
        per_track_obs.setdefault(tid, []).append(i)

    limit = config.prune_factor * delta
    points: dict[int, TiePoint] = {}
    kept_obs: list[int] = []
    for tid in ws.track_ids:
        row = ws.pt_rank.get(tid, -1)
        pos = pts[row] if row >= 0 else ws.fixed_pos[tid]
        if per_track_max[tid] > limit:
            continue
        frames_seen = tuple(sorted(pb.observations[tid]))
        if any(poses[f].apply(pos)[2] <= 1e-12 for f in frames_seen):
            continue
        if row >= 0:
            Hj = np.zeros((3, 3))
            for i in per_track_obs[tid]:
                fid = ws.obs_fid[i]
                _, Jp = reprojection_jacobians(pos[None, :], poses[fid], pb.intrinsics[fid])
                Hj += w[i] * (Jp[0].T @ Jp[0])
            try:
                cov = np.linalg.inv(Hj)
            except np.linalg.LinAlgError:
                continue
            if not np.all(np.isfinite(cov)) or np.trace(cov) < 0:
                continue
            sigma = float(np.sqrt(np.trace(cov) / 3.0))
        else:
            sigma = pb.carried_sigmas.get(tid, 0.0)
        points[tid] = TiePoint(tid, pos.copy(), sigma, frames_seen)
        kept_obs.extend(per_track_obs[tid])

    if kept_obs:
        rms_working = float(np.sqrt(np.mean(sq[kept_obs])))
    else:
        rms_working = float("nan")
    return BaSolution(
        frame_ids=pb.frame_ids,
        poses=poses,
        points=points,
        rms_reprojection=rms_working / pb.scale,
        inlier_count=len(kept_obs),
        iterations=iterations,
        converged=converged,
        final_cost=E,
    )
