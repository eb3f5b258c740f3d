"""End-to-end mapping pipeline: frames + tracks in, map products out.

Stages: overlap clustering, per-cluster three-view adjustment chained
through shared boundary frames, anchor-map extraction at each cluster's
representative frame, densification, then a second pass fusing every
buffered depth map into one TSDF volume sized from the full tie-point
set.  Products land in the output directory:

    tiepoints.csv     every retained sparse point, per cluster
    points.xyz        fused surface point cloud
    dsm.fdepth/.hdr   max-elevation raster
    ortho.ppm         most-nadir color mosaic (when images exist)
    marker_pairs.csv  reconstructed marker endpoints vs. surveyed truth
    report.txt        quality metrics
    manifest.json     provenance: config hash, per-cluster flags, timings

Everything except manifest.json (which carries wall-clock timings) is
byte-reproducible for identical inputs and configuration.

A cluster that fails any stage is flagged in the manifest and skipped;
the pipeline continues with the remaining clusters and only gives up
when nothing fused at all.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from . import _kernels, formats
from .anchor import build_anchor_map
from .ba import BaConfig, huber_weight, initialize_window, pnp_dlt, schur_solve, solve
from .clustering import ClusterPolicy, iter_clusters
from .densify import DensifierConfig, densify_with_fallback
from .errors import (AerofuseError, ConfigError, DegenerateGeometry, EmptyVolume,
                     InputFormatError, NonPositiveDepth, SingularSystem)
from .fusion import TsdfVolume, extract_point_cloud, integrate_depth, orthomosaic, rasterize_dsm
from .geometry import Frame, Pose, project, reprojection_jacobians, so3_hat, triangulate
from .metrics import MarkerPair, quality_report

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    """Validated run configuration; see ``from_dict`` for the JSON keys."""

    frames_path: Path
    tracks_path: Path
    out_dir: Path
    images_dir: Path | None = None
    marker_truth_path: Path | None = None
    policy: ClusterPolicy = field(default_factory=ClusterPolicy)
    ba: BaConfig = field(default_factory=BaConfig)
    densifier: DensifierConfig = field(default_factory=DensifierConfig)
    voxel_size: float | None = None  # None: 4 ground sample distances
    truncation_voxels: float = 3.0
    max_weight: float = 64.0
    dsm_cell_size: float | None = None  # None: one voxel
    write_ortho: bool = True
    budget_s_per_frame: float = 2.0
    raw: dict = field(default_factory=dict)

    _TOP_KEYS = {"frames", "tracks", "out", "images_dir", "marker_truth",
                 "clustering", "ba", "densifier", "fusion", "budget_s_per_frame"}
    _FUSION_KEYS = {"voxel_size", "truncation_voxels", "max_weight",
                    "dsm_cell_size", "orthomosaic"}

    @classmethod
    def from_dict(cls, cfg: dict) -> "PipelineConfig":
        unknown = set(cfg) - cls._TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("frames", "tracks", "out"):
            if key not in cfg or not isinstance(cfg[key], str):
                raise ConfigError(f"config requires string key '{key}'")

        def sub(name, dc_type):
            raw = cfg.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"'{name}' must be an object")
            allowed = {f.name for f in dc_fields(dc_type)}
            bad = set(raw) - allowed
            if bad:
                raise ConfigError(f"unknown '{name}' keys: {sorted(bad)}")
            try:
                return dc_type(**{k: _coerce(v) for k, v in raw.items()})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad '{name}' settings: {exc}") from exc

        def _coerce(v):
            return tuple(v) if isinstance(v, list) else v

        fus = cfg.get("fusion", {})
        if not isinstance(fus, dict):
            raise ConfigError("'fusion' must be an object")
        bad = set(fus) - cls._FUSION_KEYS
        if bad:
            raise ConfigError(f"unknown 'fusion' keys: {sorted(bad)}")
        budget = cfg.get("budget_s_per_frame", 2.0)
        if not isinstance(budget, (int, float)) or budget <= 0:
            raise ConfigError("'budget_s_per_frame' must be a positive number")

        return cls(
            frames_path=Path(cfg["frames"]),
            tracks_path=Path(cfg["tracks"]),
            out_dir=Path(cfg["out"]),
            images_dir=Path(cfg["images_dir"]) if cfg.get("images_dir") else None,
            marker_truth_path=Path(cfg["marker_truth"]) if cfg.get("marker_truth") else None,
            policy=sub("clustering", ClusterPolicy),
            ba=sub("ba", BaConfig),
            densifier=sub("densifier", DensifierConfig),
            voxel_size=fus.get("voxel_size"),
            truncation_voxels=float(fus.get("truncation_voxels", 3.0)),
            max_weight=float(fus.get("max_weight", 64.0)),
            dsm_cell_size=fus.get("dsm_cell_size"),
            write_ortho=bool(fus.get("orthomosaic", True)),
            budget_s_per_frame=float(budget),
            raw=cfg,
        )


def validate_inputs(frames_path, tracks_path) -> dict:
    """Schema-check both input files, collecting every problem found.

    Returns a summary dict, or raises InputFormatError whose message
    lists one 'file:line: problem' diagnostic per offence: duplicate
    frame ids, non-increasing timestamps, malformed observation rows,
    duplicate (track, frame) pairs, unknown frames, pixels outside the
    frame.
    """
    frames = formats.read_frames_csv(frames_path)
    problems = []
    by_id: dict[int, Frame] = {}
    last_ts = None
    for idx, f in enumerate(frames):
        line = idx + 2  # header on line 1, then one frame per row
        if f.frame_id in by_id:
            problems.append(f"{frames_path}:{line}: duplicate frame id {f.frame_id}")
        by_id[f.frame_id] = f
        if last_ts is not None and f.timestamp <= last_ts:
            problems.append(
                f"{frames_path}:{line}: timestamp {f.timestamp:g} not increasing")
        last_ts = f.timestamp

    n_obs = 0
    seen: set[tuple[int, int]] = set()
    track_ids = set()
    with open(tracks_path) as fh:
        for ln, raw in enumerate(fh, start=1):
            s = raw.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            try:
                tid, fid = int(parts[0]), int(parts[1])
                u, v = float(parts[2]), float(parts[3])
                well_formed = len(parts) == 4
            except (ValueError, IndexError):
                well_formed = False
            if not well_formed:
                problems.append(f"{tracks_path}:{ln}: expected 'track frame u v'")
                continue
            n_obs += 1
            track_ids.add(tid)
            if (tid, fid) in seen:
                problems.append(f"{tracks_path}:{ln}: duplicate observation "
                                f"(track {tid}, frame {fid})")
            seen.add((tid, fid))
            f = by_id.get(fid)
            if f is None:
                problems.append(f"{tracks_path}:{ln}: unknown frame {fid}")
            elif not (0 <= u <= f.intrinsics.width - 1
                      and 0 <= v <= f.intrinsics.height - 1):
                problems.append(f"{tracks_path}:{ln}: pixel ({u:g}, {v:g}) outside "
                                f"{f.intrinsics.width}x{f.intrinsics.height}")
    if n_obs == 0:
        problems.append(f"{tracks_path}: no observations")
    if problems:
        raise InputFormatError("\n".join(problems))
    return {
        "n_frames": len(frames),
        "n_tracks": len(track_ids),
        "n_observations": n_obs,
        "with_prior": sum(1 for f in frames if f.gnss_prior is not None),
    }


@dataclass
class PipelineResult:
    out_dir: Path
    report: dict
    manifest: dict


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    t_start = time.perf_counter()
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)

    frames = formats.read_frames_csv(cfg.frames_path)
    tracks = formats.read_tracks_txt(cfg.tracks_path)
    if not tracks:
        raise InputFormatError(f"{cfg.tracks_path}: no observations")
    frame_by_id = {f.frame_id: f for f in frames}
    clusters = iter_clusters(frames, cfg.policy)
    logger.info("%d frames, %d tracks, %d clusters (kernel backend: %s)",
                len(frames), len(tracks), len(clusters), _kernels.backend_name())

    cluster_rows = []
    tiepoint_rows = []
    depth_buffer = []  # (frame_id, intrinsics, DepthMap); posed at fusion time
    track_by_id = {t.track_id: t for t in tracks}
    solved_poses: dict[int, Pose] = {}
    map_obs: dict[int, set[int]] = {}  # track -> inlier frames, all clusters
    previous = None
    for ci, cluster in enumerate(clusters):
        t0 = time.perf_counter()
        flags = list(cluster.warnings)
        entry = {
            "index": ci,
            "frame_ids": list(cluster.frame_ids),
            "ba_window": list(cluster.ba_window),
            "mode": cluster.mode,
            "flags": flags,
        }
        cluster_rows.append(entry)
        try:
            window = [frame_by_id[fid] for fid in cluster.ba_window]
            problem = initialize_window(window, tracks, cfg.ba, previous)
            solution = solve(problem, cfg.ba)
            entry.update(rms_px=solution.rms_reprojection,
                         points=len(solution.points),
                         iterations=solution.iterations,
                         converged=solution.converged)
            for tid in sorted(solution.points):
                tp = solution.points[tid]
                tiepoint_rows.append((ci, tid, tp.position, tp.uncertainty))
                map_obs.setdefault(tid, set()).update(tp.observing_frames)
            solved_poses.update(solution.poses)
            previous = solution

            rep = frame_by_id[cluster.representative_id]
            amap = build_anchor_map(solution, rep)
            dm, dflags = densify_with_fallback(
                amap, cfg.densifier,
                workdir=out / "densify" / f"cluster_{ci:04d}"
                if cfg.densifier.kind == "external" else None,
            )
            flags.extend(dflags)
            depth_buffer.append((rep.frame_id, rep.intrinsics, dm))
        except AerofuseError as exc:
            flags.append(f"failed:{type(exc).__name__}")
            logger.warning("cluster %d failed: %s", ci, exc)
        entry["seconds"] = time.perf_counter() - t0
        per_frame = entry["seconds"] / len(cluster.frame_ids)
        if per_frame > cfg.budget_s_per_frame:
            flags.append("over_budget")
            logger.warning("cluster %d: %.2f s/frame exceeds the %.2f s budget",
                           ci, per_frame, cfg.budget_s_per_frame)

    formats.write_tiepoints_csv(out / "tiepoints.csv", tiepoint_rows)
    if not depth_buffer:
        raise EmptyVolume("no cluster produced a depth map")

    solved_poses, admitted_obs, polish_info = _polish_poses(
        track_by_id, solved_poses, map_obs, frame_by_id, cfg.ba)
    map_points = _merge_map(tracks, solved_poses, admitted_obs, frame_by_id)

    # Second pass: the tie-point cloud fixes the fusion volume extents.
    positions = (np.stack([p for p, _ in map_points.values()]) if map_points
                 else np.stack([p for _, _, p, _ in tiepoint_rows]))
    voxel = cfg.voxel_size
    if voxel is None:
        _, intr0, dm0 = depth_buffer[0]
        med_depth = float(np.median(dm0.depth[dm0.valid]))
        voxel = 4.0 * med_depth / intr0.fx
    trunc = cfg.truncation_voxels * voxel
    pad = trunc + 2.0 * voxel
    # Percentile bounds: two-view tie-points have heavy depth-noise tails
    # and a min/max box would balloon the volume around a few strays.
    lo = np.percentile(positions, 1.0, axis=0) - pad
    hi = np.percentile(positions, 99.0, axis=0) + pad
    shape = np.maximum(np.ceil((hi - lo) / voxel).astype(int), 1)
    vol = TsdfVolume.create(lo, shape, voxel, truncation=trunc, max_weight=cfg.max_weight)
    logger.info("fusing %d depth maps into a %s volume, voxel %.3g m",
                len(depth_buffer), "x".join(map(str, shape)), voxel)
    for fid, intr, dm in depth_buffer:
        integrate_depth(vol, dm, solved_poses[fid], intr)

    cloud = extract_point_cloud(vol)
    formats.write_point_cloud(out / "points.xyz", cloud)
    dsm = rasterize_dsm(cloud, cfg.dsm_cell_size or voxel)
    formats.write_dsm(out / "dsm.fdepth", dsm)

    artifacts = ["tiepoints.csv", "points.xyz", "dsm.fdepth", "dsm.hdr"]
    if cfg.write_ortho and cfg.images_dir is not None:
        views = []
        for fid, intr, dm in depth_buffer:
            img_path = cfg.images_dir / f"{fid}.ppm"
            if img_path.exists():
                views.append((solved_poses[fid], intr, formats.read_ppm(img_path)))
        if views:
            formats.write_ppm(out / "ortho.ppm", orthomosaic(dsm, views))
            artifacts.append("ortho.ppm")
        else:
            logger.warning("no representative frame has an image; skipping mosaic")

    pairs = None
    if cfg.marker_truth_path is not None:
        pairs = _evaluate_markers(cfg.marker_truth_path, map_points)
        if pairs:
            formats.write_marker_pairs_csv(out / "marker_pairs.csv", pairs)
            artifacts.append("marker_pairs.csv")

    report = quality_report(dsm, pairs)
    formats.write_report_txt(out / "report.txt", report)
    artifacts.append("report.txt")

    wall = time.perf_counter() - t_start
    manifest = {
        "config_hash": formats.config_hash(cfg.raw),
        "backend": _kernels.backend_name(),
        "n_frames": len(frames),
        "n_tracks": len(tracks),
        "n_tiepoints": len(tiepoint_rows),
        "n_map_points": len(map_points),
        "polish": polish_info,
        "n_surface_points": int(len(cloud)),
        "voxel_size": voxel,
        "clusters": cluster_rows,
        "wall_seconds": wall,
        "budget_s_per_frame": cfg.budget_s_per_frame,
        "budget_exceeded": any("over_budget" in c["flags"] for c in cluster_rows),
        "artifacts": sorted(artifacts),
    }
    formats.write_manifest_json(out / "manifest.json", manifest)
    logger.info("finished in %.1f s; %d surface points, coverage %.3f",
                wall, len(cloud), report.get("coverage", float("nan")))
    return PipelineResult(out_dir=out, report=report, manifest=manifest)


def _polish_poses(track_by_id, solved_poses, map_obs, frame_by_id, cfg):
    """Register every usable frame and refine all poses jointly.

    The incremental chain solves only each cluster's window and lets
    attitude drift accumulate along a strip: a window inherits the
    previous window's orientation through the carried tie-points while
    its centres stay at the position priors, so small initial attitude
    errors relax slowly and the orientation field ramps across the
    strip.  A track seen from windows on opposite sides then
    triangulates with a depth bias growing with the square of its range,
    and no per-window step can correct that because each seam was made
    self-consistent the moment its points were carried over.

    This pass therefore works on the whole mission at once.  Frames that
    never entered a window are registered against the merged map first
    (position prior when present, direct linear pose otherwise, with an
    admission gate since these observations never passed the pairwise
    filters); then one damped Gauss-Newton adjustment over all cameras
    and merged points, position priors kept active, removes the relative
    drift.  A common rotation about the centre line of a single straight
    strip remains, since positions alone cannot observe it; it moves the
    map rigidly and cancels in relative measurements.

    Returns ``(poses, admitted, stats)``: refined poses by frame id, the
    per-track observation registry that contributed (a superset of the
    window inliers), and a stats dict for the manifest.  On failure the
    inputs come back unchanged.
    """
    # The window solver thresholds at working resolution; this pass runs
    # on full-resolution pixels, so scale the kernel width to match.
    delta = cfg.huber_delta / cfg.downscale
    admission_px = 4.0 * delta

    window_views, seeds = {}, {}
    for tid in sorted(map_obs):
        track = track_by_id.get(tid)
        if track is None:
            continue
        fl = sorted(f for f in map_obs[tid] if f in solved_poses and f in track.obs)
        if len(fl) < 2:
            continue
        try:
            seeds[tid] = triangulate(
                np.stack([track.obs[f] for f in fl]),
                [solved_poses[f] for f in fl],
                [frame_by_id[f].intrinsics for f in fl])
        except DegenerateGeometry:
            continue
        window_views[tid] = fl
    if len(seeds) < 2:
        return solved_poses, map_obs, {}

    rows = [(f, tid) for tid in sorted(window_views) for f in window_views[tid]]

    # Frames outside every window still observe the map (tracks near the
    # strip ends are often covered by just two window frames); register
    # them so their observations sharpen the merge.
    candidates: dict[int, list[int]] = {}
    for tid in sorted(seeds):
        for fid in track_by_id[tid].obs:
            if fid not in solved_poses and fid in frame_by_id:
                candidates.setdefault(fid, []).append(tid)
    poses = dict(solved_poses)
    registered = 0
    for fid in sorted(candidates):
        tids = np.array(candidates[fid])
        if len(tids) < cfg.min_pnp_points:
            continue
        frame = frame_by_id[fid]
        uv = np.stack([track_by_id[t].obs[fid] for t in tids])
        pts3 = np.stack([seeds[t] for t in tids])
        # The pose must live in the map's own gauge, so the position
        # prior cannot seed it; a resection can.  Two rounds let the
        # admission gate shed gross mismatches before the final fit.
        keep = np.ones(len(tids), dtype=bool)
        pose = None
        try:
            for _ in range(2):
                pose = pnp_dlt(pts3[keep], uv[keep], frame.intrinsics)
                pc = pose.apply(pts3)
                ok = pc[:, 2] > 1e-12
                err = np.full(len(tids), np.inf)
                K = frame.intrinsics
                err[ok] = np.hypot(K.fx * pc[ok, 0] / pc[ok, 2] + K.cx - uv[ok, 0],
                                   K.fy * pc[ok, 1] / pc[ok, 2] + K.cy - uv[ok, 1])
                keep = err < admission_px
                if keep.sum() < cfg.min_pnp_points:
                    raise DegenerateGeometry("too few consistent matches")
        except DegenerateGeometry:
            continue
        poses[fid] = pose
        rows.extend((fid, int(t)) for t in tids[keep])
        registered += 1

    fids = sorted(poses)
    cam_rank = {f: i for i, f in enumerate(fids)}
    F = len(fids)
    tid_list = sorted(seeds)
    pt_rank = {t: i for i, t in enumerate(tid_list)}
    P = len(tid_list)
    pts = np.stack([seeds[t] for t in tid_list])
    obs_uv = np.stack([track_by_id[t].obs[f] for f, t in rows])
    obs_prow = np.array([pt_rank[t] for _, t in rows])
    fid_arr = np.array([f for f, _ in rows])
    masks = {fid: fid_arr == fid for fid in fids}
    priors = {}
    for fid in fids:
        frame = frame_by_id[fid]
        if frame.gnss_prior is not None:
            priors[fid] = (frame.gnss_prior.center, float(frame.gnss_sigma))

    def evaluate(poses, points):
        r = np.empty((len(obs_uv), 2))
        for fid in fids:
            sel = masks[fid]
            pc = poses[fid].apply(points[obs_prow[sel]])
            z = pc[:, 2]
            if np.any(z <= 1e-12):
                return None, None, np.inf
            K = frame_by_id[fid].intrinsics
            r[sel, 0] = K.fx * pc[:, 0] / z + K.cx - obs_uv[sel, 0]
            r[sel, 1] = K.fy * pc[:, 1] / z + K.cy - obs_uv[sel, 1]
        cost, w = huber_weight(np.einsum("ij,ij->i", r, r), delta)
        E = float(np.sum(cost))
        for fid, (c_prior, sigma) in priors.items():
            d = poses[fid].center - c_prior
            E += float(d @ d) / sigma**2
        return r, w, E

    r, w, E = evaluate(poses, pts)
    if r is None:
        logger.warning("pose polish: a merged point starts behind a camera, skipping")
        return solved_poses, map_obs, {}

    lam = None
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        H_cc = np.zeros((6 * F, 6 * F))
        g_c = np.zeros(6 * F)
        H_pp = np.zeros((P, 3, 3))
        g_p = np.zeros((P, 3))
        H_cp = np.zeros((F, P, 6, 3))
        for fid in fids:
            sel = masks[fid]
            Jc, Jp = reprojection_jacobians(pts[obs_prow[sel]], poses[fid],
                                            frame_by_id[fid].intrinsics)
            rw = r[sel] * w[sel, None]
            wJc = Jc * w[sel, None, None]
            prow = obs_prow[sel]
            i = 6 * cam_rank[fid]
            H_cc[i:i + 6, i:i + 6] += np.einsum("nij,nik->jk", wJc, Jc)
            g_c[i:i + 6] += np.einsum("nij,ni->j", Jc, rw)
            H_cp[cam_rank[fid], prow] += np.einsum("nij,nik->njk", wJc, Jp)
            np.add.at(H_pp, prow,
                      np.einsum("nij,nik->njk", Jp * w[sel, None, None], Jp))
            np.add.at(g_p, prow, np.einsum("nij,ni->nj", Jp, rw))
        for fid, (c_prior, sigma) in priors.items():
            pose = poses[fid]
            Jc = np.empty((3, 6))
            Jc[:, :3] = -pose.rotation.T @ so3_hat(pose.translation)
            Jc[:, 3:] = -pose.rotation.T
            wp = 1.0 / sigma**2
            i = 6 * cam_rank[fid]
            H_cc[i:i + 6, i:i + 6] += wp * (Jc.T @ Jc)
            g_c[i:i + 6] += wp * (Jc.T @ (pose.center - c_prior))

        if lam is None:
            mean_diag = (np.trace(H_cc) + H_pp.trace(axis1=1, axis2=2).sum()) \
                / (6 * F + 3 * P)
            lam = cfg.lambda_init_factor * max(mean_diag, 1e-12)
        if max(float(np.abs(g_c).max()), float(np.abs(g_p).max())) < cfg.gradient_tol:
            converged = True
            break
        accepted = False
        while lam <= cfg.lambda_max:
            try:
                dc, dp = schur_solve(H_cc, H_cp, H_pp, g_c, g_p, lam)
            except SingularSystem as exc:
                logger.warning("pose polish: %s, keeping current state", exc)
                converged = False
                break
            if max(float(np.abs(dc).max()), float(np.abs(dp).max())) < cfg.param_tol:
                converged = accepted = True
                break
            cand = {fid: poses[fid].retract(dc[6 * cam_rank[fid]:6 * cam_rank[fid] + 3],
                                            dc[6 * cam_rank[fid] + 3:6 * cam_rank[fid] + 6])
                    for fid in fids}
            r2, w2, E2 = evaluate(cand, pts + dp)
            if E2 < E:
                # Relative decreases this small are the flat tail, not
                # progress worth another linearization.
                if E - E2 <= 1e-9 * max(E, 1.0):
                    converged = True
                poses, pts = cand, pts + dp
                r, w, E = r2, w2, E2
                lam = max(lam * cfg.lambda_down, 1e-18)
                accepted = True
                logger.debug("polish iter %d: cost %.6g lambda %.3g", iterations, E, lam)
                break
            lam *= cfg.lambda_up
        if not accepted:
            logger.warning("pose polish: no further cost decrease, keeping best state")
            break
        if converged:
            break

    rms = float(np.sqrt(np.mean(np.einsum("ij,ij->i", r, r))))
    logger.info("pose polish: %d cameras (%d registered), %d points, rms %.3f px, "
                "%d iterations", F, registered, P, rms, iterations)
    info = {"iterations": iterations, "converged": converged, "rms_px": rms,
            "n_cameras": F, "extra_frames": registered, "n_points": P}
    admitted = {}
    for f, tid in rows:
        admitted.setdefault(tid, set()).add(f)
    return poses, admitted, info


def _merge_map(tracks, solved_poses, map_obs, frame_by_id):
    """Final sparse map: one position per track from all its inlier
    observations across clusters, poses held fixed.

    A single window sees a track through at most three nearby cameras,
    so its depth is noisy along the viewing ray; the union of inlier
    frames a track accumulated while crossing the strip spans a far
    wider baseline.  The linear triangulation is polished by three
    Gauss-Newton steps on the full-resolution reprojection residuals.

    Returns:
        {track_id: (position (3,), sigma_m)} with sigma from the
        unit-pixel-noise inverse normal matrix.
    """
    merged: dict[int, tuple[np.ndarray, float]] = {}
    for t in tracks:
        fset = map_obs.get(t.track_id)
        if not fset:
            continue
        fl = sorted(f for f in fset if f in solved_poses and f in t.obs)
        if len(fl) < 2:
            continue
        obs = np.stack([t.obs[f] for f in fl])
        poses = [solved_poses[f] for f in fl]
        intrs = [frame_by_id[f].intrinsics for f in fl]
        try:
            pos = triangulate(obs, poses, intrs)
        except DegenerateGeometry:
            continue
        pos = _refine_point(pos, obs, poses, intrs)
        JtJ = np.zeros((3, 3))
        try:
            for uv, pose, intr in zip(obs, poses, intrs):
                _, Jp = reprojection_jacobians(pos, pose, intr)
                JtJ += Jp[0].T @ Jp[0]
            sigma = float(np.sqrt(np.trace(np.linalg.inv(JtJ)) / 3.0))
        except np.linalg.LinAlgError:
            sigma = float("inf")
        merged[t.track_id] = (pos, sigma)
    return merged


def _refine_point(pos, obs, poses, intrs, iters: int = 3):
    """Gauss-Newton polish of one triangulated point; reverts any step
    that lands behind a camera or hits a singular normal matrix."""
    for _ in range(iters):
        JtJ = np.zeros((3, 3))
        Jtr = np.zeros(3)
        try:
            for uv, pose, intr in zip(obs, poses, intrs):
                pix, _ = project(pos, pose, intr)
                _, Jp = reprojection_jacobians(pos, pose, intr)
                JtJ += Jp[0].T @ Jp[0]
                Jtr += Jp[0].T @ (pix - uv)
            cand = pos + np.linalg.solve(JtJ, -Jtr)
            for pose in poses:
                project(cand, pose, intrs[0])
        except (NonPositiveDepth, np.linalg.LinAlgError):
            break
        pos = cand
    return pos


def _evaluate_markers(truth_path, map_points) -> list[MarkerPair]:
    """Join surveyed pair truth with reconstructed marker positions;
    pairs missing an endpoint are skipped with a warning."""
    truth = formats.read_marker_truth_csv(truth_path)
    pairs = []
    for ida, idb, xy, z in truth:
        if ida not in map_points or idb not in map_points:
            logger.warning("marker pair (%d, %d) missing a reconstructed endpoint",
                           ida, idb)
            continue
        pairs.append(MarkerPair(ida, idb, map_points[ida][0], map_points[idb][0], xy, z))
    return pairs
