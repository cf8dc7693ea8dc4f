"""Command-line entry point.

Commands: train, eval, roc, gen-cases, tsn-train. Every command accepts
--print-config to dump the full default configuration as JSON and exit.
Exit codes: 0 success, 2 configuration problem, 3 data problem.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .cases import build_template, suite_cases
from .config import ConfigError, DataError, SimConfig
from .harness import (SUITES, BASELINES, STAGES, evaluate_suite, load_checkpoint,
                      run_curriculum)
from .policy import fit_threshold_roc
from .tsn import build_descriptor_dataset, evaluate_fewshot, split_dataset, train_tsn


def _load_config(path) -> SimConfig:
    if path is None:
        return SimConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return SimConfig.from_json(p.read_text())


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.curriculum.seed = args.seed
    cfg.validate()
    stages = STAGES[:STAGES.index(args.stage) + 1] if args.stage else STAGES
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoints, curves = run_curriculum(cfg, out_dir=out, stages=stages)
    final = checkpoints[stages[-1]]
    print(f"trained stages {', '.join(stages)}; "
          f"final checkpoint {out / (stages[-1] + '.ckpt')}")
    if curves["roc"]:
        print(f"confidence threshold tau={curves['roc']['tau']:.3f} "
              f"(auc={curves['roc']['auc']:.3f})")
    for stage, rate in curves["probe"].items():
        print(f"probe {stage}: grasp success {rate:.2f}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate_suite(ckpt, args.suite, episodes_per_case=args.episodes,
                            baseline=args.baseline, cfg=cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.suite}_{args.baseline}"
    with open(out / f"{stem}_episodes.jsonl", "w") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec.to_dict()) + "\n")
    with open(out / f"{stem}_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "episodes", "successes", "success_rate",
                         "ci_low", "ci_high", "avg_motions_all",
                         "avg_motions_success"])
        for case, row in report.per_case.items():
            writer.writerow([case, row["episodes"], row["successes"],
                             f"{row['success_rate']:.4f}",
                             f"{row['ci_low']:.4f}", f"{row['ci_high']:.4f}",
                             f"{row['avg_motions_all']:.3f}",
                             "" if row["avg_motions_success"] is None
                             else f"{row['avg_motions_success']:.3f}"])
        agg = report.aggregate
        writer.writerow(["ALL", agg["episodes"], agg["successes"],
                         f"{agg['success_rate']:.4f}",
                         f"{agg['ci_low']:.4f}", f"{agg['ci_high']:.4f}",
                         f"{agg['avg_motions_all']:.3f}",
                         "" if agg["avg_motions_success"] is None
                         else f"{agg['avg_motions_success']:.3f}"])
    print(f"{args.suite} / {args.baseline}: "
          f"success {report.aggregate['success_rate']:.3f} "
          f"[{report.aggregate['ci_low']:.3f}, {report.aggregate['ci_high']:.3f}] "
          f"over {report.aggregate['episodes']} episodes")
    return 0


def _cmd_roc(args) -> int:
    path = Path(args.data)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    samples = []
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            samples.append((float(row["p_c"]), bool(row["grasp_success"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad record on line {line_no} of {path}: {exc}")
    result = fit_threshold_roc(samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "roc.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in zip(result.thresholds, result.fpr, result.tpr):
            writer.writerow([f"{thr:.6g}", f"{fpr:.6f}", f"{tpr:.6f}"])
    (out / "roc.json").write_text(json.dumps(
        {"auc": result.auc, "tau": result.tau, "samples": len(samples)}, indent=2))
    print(f"auc={result.auc:.4f} tau={result.tau:.4f} over {len(samples)} samples")
    return 0


def _cmd_gen_cases(args) -> int:
    cases = suite_cases(args.suite)
    if args.suite == "full":
        raise ConfigError("the full-task suite uses procedural scenes; "
                          "there are no templates to generate")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for case in cases:
        state = build_template(case)
        (out / f"{case}.json").write_text(state.to_json())
        print(f"wrote {out / (case + '.json')}")
    return 0


def _cmd_tsn_train(args) -> int:
    cfg = _load_config(args.config)
    cfg.validate()
    ds = build_descriptor_dataset(24, 12, seed=cfg.tsn.seed,
                                  mode=cfg.tsn.feature_mode)
    train, test = split_dataset(ds, n_train=18)
    params, curve = train_tsn(train, cfg.tsn, seed=cfg.tsn.seed)
    acc = evaluate_fewshot(params, test, n_way=5, k_shot=1, episodes=200,
                           seed=cfg.tsn.seed)
    print(f"trained {len(curve)} episodes; one-shot 5-way accuracy {acc:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        arrays = {f"e_{i}": p for i, p in enumerate(params.encoder.params)}
        arrays.update({f"r_{i}": p for i, p in enumerate(params.relation.params)})
        np.savez(out / "tsn.npz", **arrays)
        (out / "tsn_curve.json").write_text(json.dumps(
            {"loss": curve, "accuracy": acc}, default=float))
        print(f"wrote {out / 'tsn.npz'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seekgrasp",
        description="Desk-scale object search-and-grasp simulator and trainer.")
    parser.add_argument("--print-config", action="store_true",
                        help="dump the full default configuration JSON and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="run the staged training curriculum")
    p.add_argument("--config", help="JSON config file (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--stage", choices=STAGES,
                   help="train only through this stage")
    p.add_argument("--seed", type=int, help="override the curriculum seed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a suite")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--episodes", type=int, default=50,
                   help="episodes per case (default 50)")
    p.add_argument("--baseline", default="iosg", choices=BASELINES)
    p.add_argument("--config", help="JSON config file (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("roc", help="fit the grasp-confidence threshold")
    p.add_argument("--data", required=True,
                   help="JSONL of {p_c, grasp_success} records")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_roc)

    p = sub.add_parser("gen-cases", help="write suite templates as JSON")
    p.add_argument("--suite", required=True,
                   choices=[s for s in SUITES if s != "full"] + ["full"])
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen_cases)

    p = sub.add_parser("tsn-train", help="train the target matching network")
    p.add_argument("--config", help="JSON config file (defaults when omitted)")
    p.add_argument("--out", help="directory for trained weights (optional)")
    p.set_defaults(func=_cmd_tsn_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        print(SimConfig().to_json())
        return 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
