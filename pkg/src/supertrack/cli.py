"""Command line interface: ``supertrack <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, SupertrackError
from .geometry import AxisAngleTranslation
from .kinematics import HandEyeState, render_tool_mask
from .metrics import eval_metrics, mask_iou
from .pipeline import load_config, run_pipeline
from .plotting import write_figures
from .sim import ScenarioConfig, make_sequence, scenario
from .surfels import export_ply
from .tool_tracker import ToolTracker

log = logging.getLogger("supertrack")


def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--frames", type=int, help="process only the first N frames")
    p.add_argument("--out", required=True, help="output directory or file")


def _load(loader, path):
    try:
        return loader(path)
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _pipeline_config(args):
    cfg = _load(load_config, args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_simulate(args) -> int:
    if args.config:
        cfg = _load(lambda p: ScenarioConfig.from_dict(json.loads(Path(p).read_text())), args.config)
    else:
        cfg = scenario(args.scenario)
    if args.frames is not None:
        cfg.frames = args.frames
    out = make_sequence(cfg, args.seed if args.seed is not None else 0, args.out)
    print(f"wrote {cfg.frames} frames to {out}")
    return 0


def cmd_run(args) -> int:
    res = run_pipeline(args.data, _pipeline_config(args), args.out, frames=args.frames)
    print(f"processed {len(res.rows)} frames; {len(res.smap)} surfels, {len(res.graph)} nodes")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = eval_metrics(args.run, args.data)
    report.write_csv(out / "metrics.csv")
    summary = report.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    write_figures(report, out)
    for key, val in summary.items():
        print(f"{key},{val}")
    return 0


def cmd_export(args) -> int:
    res = run_pipeline(args.data, _pipeline_config(args), None, frames=args.frames)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_ply(res.smap, out)
    print(f"exported {len(res.smap)} surfels to {out}")
    return 0


def cmd_tool_track(args) -> int:
    cfg = _pipeline_config(args)
    ds = Dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tracker = ToolTracker(ds.chain, ds.k, ds.nominal, cfg.filter, seed=cfg.seed,
                          dump_path=out / "particles.jsonl")
    truth = None
    if ds.has_ground_truth():
        gt = ds.ground_truth()["true_error"]
        truth = AxisAngleTranslation(gt["w"], gt["b"])
    n = ds.n_frames if args.frames is None else min(args.frames, ds.n_frames)
    fields = ["frame", "w_x", "w_y", "w_z", "b_x", "b_y", "b_z"]
    if truth is not None:
        fields += ["w_err_rad", "b_err_m", "iou"]
    with open(out / "tool_track.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for f in range(n):
            feats = ds.features(f)
            theta = ds.joints(f)
            est = tracker.step(theta, feats.markers, feats.lines)
            row = [f] + [repr(float(v)) for v in np.concatenate([est.w, est.b])]
            if truth is not None:
                iou = mask_iou(render_tool_mask(ds.chain, theta, HandEyeState(ds.nominal, est), ds.k),
                               render_tool_mask(ds.chain, theta, HandEyeState(ds.nominal, truth), ds.k))
                row += [repr(float(np.linalg.norm(est.w - truth.w))),
                        repr(float(np.linalg.norm(est.b - truth.b))), repr(float(iou))]
            writer.writerow(row)
    final = tracker.estimate
    print(f"final estimate w={final.w.tolist()} b={final.b.tolist()}")
    return 0


def cmd_deform_track(args) -> int:
    ds = Dataset(args.data)
    he = AxisAngleTranslation()
    if ds.has_ground_truth():
        gt = ds.ground_truth()["true_error"]
        he = AxisAngleTranslation(gt["w"], gt["b"])
    res = run_pipeline(ds, _pipeline_config(args), args.out, frames=args.frames, use_tracker=False,
                       fixed_hand_eye=he)
    print(f"processed {len(res.rows)} frames; {len(res.smap)} surfels, {len(res.graph)} nodes")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="supertrack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic dataset")
    _add_common(p, data=False)
    p.add_argument("--scenario", default="bump", choices=["bump", "static", "grasp-stretch"])
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the full tracking pipeline")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a run against ground truth and plot figures")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--run", required=True, help="run output directory")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="run the pipeline and write the final map as PLY")
    _add_common(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("tool-track", help="run only the hand-eye particle filter")
    _add_common(p)
    p.set_defaults(func=cmd_tool_track)

    p = sub.add_parser("deform-track", help="run only the deformable tracker with a fixed hand-eye")
    _add_common(p)
    p.set_defaults(func=cmd_deform_track)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SupertrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
