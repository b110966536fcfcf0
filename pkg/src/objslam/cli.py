"""Command-line interface: simulate, run, evaluate, plots."""

from __future__ import annotations

import argparse
import sys


def _cmd_simulate(args) -> int:
    from .simulator import SCENARIOS, generate_scenario

    if args.scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {args.scenario!r}; choose from {sorted(SCENARIOS)}")
    n = generate_scenario(args.scenario, args.out, seed=args.seed, noisy=args.noisy,
                          frames=args.frames)
    print(f"wrote {n} frames to {args.out}")
    return 0


def _cmd_run(args) -> int:
    from .config import default_config, load_config
    from .pipeline import run

    cfg = load_config(args.config) if args.config else default_config()
    result = run(args.dataset, cfg, out_dir=args.out, timing=args.timing)
    n_deg = len(result.degenerate_frames)
    print(f"processed {result.report['frame_count']} frames, "
          f"{result.report['model_count']} object models, {n_deg} degenerate frames")
    if args.timing and result.report["timings"]:
        for cat, row in result.report["timings"].items():
            if cat == "wall_total_ms":
                continue
            per_unit = row["ms_per_unit"]
            unit = f"{per_unit:.1f} ms/{row['unit']}" if per_unit is not None else f"0 samples/{row['unit']}"
            print(f"  {cat:16s} {row['ms_per_frame']:8.1f} ms/frame  ({unit}, {row['samples']} samples)")
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import evaluate_files

    report = evaluate_files(args.est, args.gt, align=args.align)
    report.to_json(args.out)
    print(f"ATE RMSE {report.rmse_m:.6f} m over {report.frame_count} frames (align={report.align})")
    return 0


def _cmd_plots(args) -> int:
    from .evaluation import EvaluationReport, export_plots

    report = EvaluationReport.from_json(args.report)
    paths = export_plots(report, args.out)
    print("wrote " + ", ".join(sorted(paths.values())))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="objslam",
                                description="Object-level visual-inertial dynamic SLAM tools")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic scenario dataset")
    s.add_argument("--scenario", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--noisy", action="store_true", help="sensor noise at RealSense-like levels")
    s.add_argument("--frames", type=int, default=None, help="override the frame count")
    s.set_defaults(func=_cmd_simulate)

    r = sub.add_parser("run", help="run the SLAM pipeline on a dataset")
    r.add_argument("--dataset", required=True)
    r.add_argument("--config", default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--timing", action="store_true")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("evaluate", help="ATE evaluation of a TUM trajectory")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--align", choices=("rigid", "none"), default="rigid")
    e.add_argument("--out", required=True)
    e.set_defaults(func=_cmd_evaluate)

    pl = sub.add_parser("plots", help="drift CSV and figures from an evaluation report")
    pl.add_argument("--report", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=_cmd_plots)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"objslam {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
