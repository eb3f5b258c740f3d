"""Command line front end.

Subcommands:
    simulate   generate a synthetic survey (frames, tracks, markers,
               images and a ready-to-run config.json)
    run        execute the mapping pipeline from a JSON config
    metrics    print quality metrics for an existing DSM
    validate   strictly parse a frames/tracks input pair

Exit codes: 0 success, 1 bad input data or a pipeline failure,
2 configuration or usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import formats
from .errors import AerofuseError, ConfigError, InputFormatError
from .metrics import quality_report
from .pipeline import PipelineConfig, run_pipeline, validate_inputs

logger = logging.getLogger(__name__)


def _cmd_simulate(args) -> int:
    # Import here: simulation is optional for plain mapping runs.
    from . import sim

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dropout = tuple(int(x) for x in args.dropout.split(",")) if args.dropout else ()
    plan = sim.MissionPlan(frames_per_strip=args.frames, n_strips=args.strips,
                           gnss_dropout=dropout)
    scene = sim.SyntheticScene.from_seed(args.seed)
    frames, truth = sim.generate_mission(plan, seed=args.seed)
    render = sim.render_tracks(scene, frames, truth, n_features=args.features,
                               noise_px=args.noise_px,
                               outlier_fraction=args.outlier_fraction,
                               seed=args.seed + 1)
    formats.write_frames_csv(out / "frames.csv", frames)
    formats.write_tracks_txt(out / "tracks.txt", render.tracks)
    formats.write_marker_truth_csv(out / "markers.csv", sim.marker_truth_pairs())

    cfg = {
        "frames": str(out / "frames.csv"),
        "tracks": str(out / "tracks.txt"),
        "out": str(out / "map"),
        "marker_truth": str(out / "markers.csv"),
    }
    if not args.no_images:
        img_dir = out / "images"
        img_dir.mkdir(exist_ok=True)
        for f in frames:
            formats.write_ppm(img_dir / f"{f.frame_id}.ppm",
                              sim.render_image(f.intrinsics, f.frame_id))
        cfg["images_dir"] = str(img_dir)
    import json

    with open(out / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    n_obs = sum(len(t.obs) for t in render.tracks)
    print(f"wrote {len(frames)} frames, {len(render.tracks)} tracks "
          f"({n_obs} observations) to {out}")
    print(f"next: aerofuse run --config {out / 'config.json'}")
    return 0


def _cmd_run(args) -> int:
    cfg = PipelineConfig.from_dict(formats.read_config_json(args.config))
    result = run_pipeline(cfg)
    for key in sorted(result.report):
        val = result.report[key]
        print(f"{key} = {val:.9g}" if isinstance(val, float) else f"{key} = {val}")
    print(f"artifacts in {result.out_dir}")
    return 0


def _cmd_metrics(args) -> int:
    dsm = formats.read_dsm(args.dsm)
    pairs = formats.read_marker_pairs_csv(args.markers) if args.markers else None
    report = quality_report(dsm, pairs)
    for key in sorted(report):
        val = report[key]
        print(f"{key} = {val:.9g}" if isinstance(val, float) else f"{key} = {val}")
    return 0


def _cmd_validate(args) -> int:
    root = Path(args.input)
    summary = validate_inputs(root / "frames.csv", root / "tracks.txt")
    for key in sorted(summary):
        print(f"{key} = {summary[key]}")
    print("ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aerofuse",
                                description="Incremental aerial mapping pipeline")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic survey dataset")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=22, help="frames per strip")
    s.add_argument("--strips", type=int, default=1)
    s.add_argument("--features", type=int, default=1500)
    s.add_argument("--noise-px", type=float, default=0.5)
    s.add_argument("--outlier-fraction", type=float, default=0.0)
    s.add_argument("--dropout", default="", help="comma-separated frame ids without GNSS")
    s.add_argument("--no-images", action="store_true")
    s.set_defaults(func=_cmd_simulate)

    r = sub.add_parser("run", help="run the mapping pipeline")
    r.add_argument("--config", required=True, help="JSON configuration file")
    r.set_defaults(func=_cmd_run)

    m = sub.add_parser("metrics", help="quality metrics for an existing DSM")
    m.add_argument("--dsm", required=True, help="DSM .fdepth (with .hdr sidecar)")
    m.add_argument("--markers", help="marker evaluation csv")
    m.set_defaults(func=_cmd_metrics)

    v = sub.add_parser("validate", help="strictly check an input directory")
    v.add_argument("--in", dest="input", required=True,
                   help="directory containing frames.csv and tracks.txt")
    v.set_defaults(func=_cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InputFormatError, AerofuseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
