"""Command-line surface: train, eval, gen-data, grad-check.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Setting POOLFORGE_VERIFY=1 forces 64-bit deterministic mode
regardless of the configured precision.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import yaml

from .dataio import SyntheticSpec, generate_corpus, load_corpus, \
    write_manifest, write_records
from .errors import ConfigError, ContractError, DataError, NumericError, \
    PoolforgeError
from .models import ARCHITECTURES
from .training import TrainConfig, evaluate, train
from .verify import check_architecture

logger = logging.getLogger("poolforge")


def _verify_mode() -> bool:
    return os.environ.get("POOLFORGE_VERIFY", "") == "1"


def _load_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file '{path}' does not exist")
    try:
        content = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse '{path}': {exc}") from None
    if not isinstance(content, dict):
        raise ConfigError(f"'{path}' must hold a key/value mapping")
    return content


def _cmd_train(args) -> int:
    config = TrainConfig.from_dict(_load_yaml(args.config))
    if _verify_mode() and config.precision != "float64":
        logger.info("POOLFORGE_VERIFY=1: forcing float64 precision")
        config = dataclasses.replace(config, precision="float64")
    out_dir = args.out if args.out is not None else config.output_dir
    if not out_dir:
        raise ConfigError("no output directory (set output_dir or pass --out)")
    result = train(config, resume=args.resume, output_dir=out_dir)

    from .report import write_training_report
    paths = write_training_report(out_dir, result.losses, result.eval_history)
    logger.info("wrote %s", ", ".join(str(p) for p in paths))
    if result.final_train_gap is not None:
        logger.info("final training GAP@20: %.4f", result.final_train_gap)
    logger.info("checkpoint: %s", result.checkpoint_path)
    return 0


def _cmd_eval(args) -> int:
    records = load_corpus(args.data)
    report, video_ids, preds = evaluate(args.ckpt, records)

    from .evalmetrics import write_predictions
    from .report import write_eval_report
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out_path, video_ids, preds)
    paths = write_eval_report(out_path.parent, report)
    logger.info("predictions: %s", out_path)
    logger.info("report files: %s", ", ".join(str(p) for p in paths))
    logger.info("GAP@20 over %d videos: %.4f", report.num_videos, report.gap)
    if report.zero_positives:
        logger.warning("dataset had no ground-truth positives")
    return 0


def _cmd_gen_data(args) -> int:
    spec = SyntheticSpec.from_dict(_load_yaml(args.spec))
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / "corpus.rec"
    count = write_records(records_path, generate_corpus(spec, args.count))
    manifest_path = out_dir / "corpus.manifest"
    write_manifest(manifest_path, [records_path.name])
    logger.info("wrote %d records to %s (manifest %s)", count, records_path,
                manifest_path)
    return 0


def _cmd_grad_check(args) -> int:
    targets = list(ARCHITECTURES) if args.arch == "all" else [args.arch]
    for arch in targets:
        if arch not in ARCHITECTURES:
            raise ConfigError(
                f"unknown architecture '{arch}'; expected one of "
                f"{ARCHITECTURES} or 'all'"
            )
    failed = False
    for arch in targets:
        reports = check_architecture(arch, seed=args.seed,
                                     sample_per_tensor=args.samples)
        worst = max(r.max_rel_error for _, r in reports)
        ok = all(r.passed for _, r in reports)
        print(f"{arch}: {'pass' if ok else 'FAIL'} "
              f"(worst rel error {worst:.3e} over {len(reports)} tensors)")
        for name, report in reports:
            if not report.passed:
                print(f"  {name}: {report}")
                failed = True
    if failed:
        raise NumericError("gradient check failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poolforge",
        description="Learnable pooling of frame descriptors into global "
                    "video representations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the optimization loop")
    p_train.add_argument("--config", required=True,
                         help="YAML file mirroring TrainConfig")
    p_train.add_argument("--resume", default=None,
                         help="checkpoint to resume from")
    p_train.add_argument("--out", default=None,
                         help="output directory (overrides config)")
    p_train.set_defaults(run=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", required=True, help="checkpoint file")
    p_eval.add_argument("--data", required=True, help="corpus manifest")
    p_eval.add_argument("--out", required=True, help="predictions file")
    p_eval.set_defaults(run=_cmd_eval)

    p_gen = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p_gen.add_argument("--spec", required=True,
                       help="YAML file mirroring SyntheticSpec")
    p_gen.add_argument("--count", type=int, required=True,
                       help="number of videos")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.set_defaults(run=_cmd_gen_data)

    p_check = sub.add_parser("grad-check",
                             help="finite-difference check an architecture")
    p_check.add_argument("--arch", required=True,
                         help=f"one of {ARCHITECTURES} or 'all'")
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--samples", type=int, default=40,
                         help="coordinates probed per parameter tensor")
    p_check.set_defaults(run=_cmd_grad_check)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, ContractError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except PoolforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
