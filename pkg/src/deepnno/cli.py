"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .benchmark import (
    BENCHMARK_OVERRIDES,
    derive_seeds,
    make_dataset,
    make_oracle,
    make_split,
    run_deepnno,
    run_initial,
    run_ncm,
    run_nno,
)
from .config import RunConfig
from .data import load_csv, split_open_world, write_csv
from .errors import ConfigError, OwrError
from .metrics import MetricsWriter, NullMetrics
from .protocol import HumanVerifiedOracle, evaluate, load_checkpoint, save_checkpoint

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_override(text):
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(args) -> RunConfig:
    doc = {}
    if args.preset == "benchmark":
        doc.update(BENCHMARK_OVERRIDES)
    if args.config:
        doc.update(RunConfig.load(args.config).to_dict())
    for item in args.set or []:
        key, value = _parse_override(item)
        doc[key] = value
    if args.seed is not None:
        doc["seed"] = args.seed
    return RunConfig.from_dict(doc)


def _split(cfg, path):
    if path:
        ds = load_csv(path)
        return split_open_world(ds, cfg.num_known_initial, cfg.num_known_total,
                                derive_seeds(cfg.seed)["split"], cfg.test_fraction)
    return make_split(cfg)


def _metrics(args):
    path = getattr(args, "metrics", None)
    return MetricsWriter(path) if path else NullMetrics()


def _print(doc):
    print(json.dumps(doc, indent=2, sort_keys=True))


def cmd_gen_synthetic(cfg, args):
    ds = make_dataset(cfg)
    write_csv(ds, args.out)
    print(f"wrote {len(ds)} samples, {len(ds.class_ids)} classes to {args.out}")


def cmd_split(cfg, args):
    split = _split(cfg, args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(split.initial_train, out / "initial.csv")
    write_csv(split.test, out / "test.csv")
    for k, pool in split.train_pools.items():
        write_csv(pool, out / f"pool_{k}.csv")
    manifest = {
        "initial_classes": split.initial_classes,
        "incremental_classes": split.incremental_classes,
        "unknown_classes": split.unknown_classes,
    }
    (out / "split.json").write_text(json.dumps(manifest, indent=2, default=str))
    _print(manifest)


def cmd_train_initial(cfg, args):
    split = _split(cfg, args.data)
    metrics = args.sink
    state = run_initial(cfg, split, metrics)
    save_checkpoint(state, args.checkpoint)
    report = evaluate(state, split.test)
    _print({"theta": state.threshold.theta, **report.as_dict()})


def cmd_run_owr(cfg, args):
    split = _split(cfg, args.data)
    metrics = args.sink
    oracle = make_oracle(cfg, split)
    if args.human_verify:
        oracle = HumanVerifiedOracle(oracle)
    result = run_deepnno(cfg, split, metrics, oracle=oracle)
    if args.checkpoint:
        save_checkpoint(result.state, args.checkpoint)
    _print({
        "learned": result.learned,
        "forced_steps": result.forced_steps,
        "steps": [r.as_dict() for r in result.reports],
        "mean_open_world_accuracy": result.mean_open_world_accuracy,
    })


def cmd_evaluate(cfg, args):
    state = load_checkpoint(args.checkpoint)
    report = evaluate(state, load_csv(args.data))
    _print({"theta": state.threshold.theta, **report.as_dict()})


def cmd_baseline_nno(cfg, args):
    split = _split(cfg, args.data)
    result = run_nno(cfg, split, metrics=args.sink)
    _print({
        "tau": result.state.params.tau,
        "steps": [r.as_dict() for r in result.reports],
        "mean_open_world_accuracy": result.mean_open_world_accuracy,
    })


def cmd_baseline_ncm(cfg, args):
    split = _split(cfg, args.data)
    _print({"closed_world_accuracy": run_ncm(cfg, split)})


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config field (value parsed as JSON)")
    common.add_argument("--preset", choices=["default", "benchmark"], default="default",
                        help="starting point before --config and --set are applied")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="deepnno", description="Open-world recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("split", parents=[common], help="write an open-world split")
    p.add_argument("--data", help="CSV dataset (synthetic if omitted)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-initial", parents=[common], help="train on the initial classes")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_train_initial)

    p = sub.add_parser("run-owr", parents=[common], help="full incremental protocol")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--metrics")
    p.add_argument("--human-verify", action="store_true",
                   help="confirm each oracle label on the terminal")
    p.set_defaults(func=cmd_run_owr)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline-nno", parents=[common], help="frozen-feature NNO baseline")
    p.add_argument("--data")
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_baseline_nno)

    p = sub.add_parser("baseline-ncm", parents=[common], help="closed-world NCM baseline")
    p.add_argument("--data")
    p.set_defaults(func=cmd_baseline_ncm)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.sink = NullMetrics()
    try:
        cfg = load_config(args)
        args.sink = _metrics(args)
        args.func(cfg, args)
    except OwrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    finally:
        if isinstance(args.sink, MetricsWriter):
            args.sink.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
