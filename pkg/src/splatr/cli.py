"""Command-line surface: walkthrough, unshuffle, and eval.

Each command is reproducible from (config, seed): flags override the
config file, the effective config is embedded in every report, and
rerunning a command on the same workspace yields identical artifacts.
"""

from __future__ import annotations

import argparse
import csv
import sys

from .config import MATCHERS, PipelineConfig, load_config
from .io import Workspace, read_json, write_json
from .pipeline import aggregate_reports, run_unshuffle, run_walkthrough
from .sim import DIFFICULTIES

# ── argument plumbing ──────────────────────────────────────────────────


def _add_config_args(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--workspace", required=True, help="workspace directory")
    ap.add_argument("--config", help="JSON config file (defaults apply without it)")
    ap.add_argument("--seed", type=int, help="episode seed override")
    ap.add_argument("--difficulty", choices=DIFFICULTIES, help="scene difficulty override")
    ap.add_argument("--shuffle-count", type=int, help="shuffled object count override")
    ap.add_argument("--matcher", choices=MATCHERS, help="assignment strategy override")


def _config_from(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    return cfg.with_overrides(
        seed=args.seed,
        difficulty=args.difficulty,
        shuffle_count=args.shuffle_count,
        matcher=args.matcher,
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splatr", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    walk = sub.add_parser("walkthrough", help="capture the goal scene and train its splat")
    _add_config_args(walk)

    unsh = sub.add_parser("unshuffle", help="rearrange the shuffled scene back to the goal")
    _add_config_args(unsh)

    ev = sub.add_parser("eval", help="aggregate episode reports into per-metric means")
    ev.add_argument("reports", nargs="+", help="report.json files to aggregate")
    ev.add_argument("--json", dest="json_out", help="write the aggregate document here")
    ev.add_argument("--csv", dest="csv_out", help="write a one-row CSV of the means here")
    return ap


# ── commands ───────────────────────────────────────────────────────────


def cmd_walkthrough(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    ws = Workspace.create(args.workspace)
    doc = run_walkthrough(cfg, ws)
    print(
        f"walkthrough seed {doc['seed']}: {doc['status']}, "
        f"{doc['frames']} frames, {doc['gaussians']} gaussians, "
        f"psnr {doc['psnr_mean']:.2f} (min {doc['psnr_min']:.2f}), "
        f"checkpoint {doc['checkpoint_sha256'][:16]}"
    )
    return 0


def cmd_unshuffle(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    ws = Workspace.open(args.workspace)
    doc = run_unshuffle(cfg, ws)
    m = doc["metrics"]
    print(
        f"unshuffle seed {doc['seed']} ({doc['matcher']}): "
        f"success {m['success']}, fixed {m['fixed']:.3f}, "
        f"fixed_strict {m['fixed_strict']:.3f}, misplaced {m['misplaced']:.3f}, "
        f"energy {m['energy_remaining']:.3f}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    docs = []
    for path in args.reports:
        doc = read_json(path)
        try:
            aggregate_reports([doc])
        except ValueError as err:
            raise SystemExit(f"{path}: {err}")
        docs.append(doc)
    agg = aggregate_reports(docs)
    print(f"episodes: {agg['episodes']}")
    for name, value in agg["means"].items():
        print(f"  {name:<17} {value:.4f}")
    if args.json_out:
        write_json(args.json_out, agg)
    if args.csv_out:
        with open(args.csv_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episodes", *agg["means"]])
            writer.writerow([agg["episodes"], *agg["means"].values()])
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "walkthrough": cmd_walkthrough,
        "unshuffle": cmd_unshuffle,
        "eval": cmd_eval,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
