"""Command-line interface: experiment, node, aggregate, predict.

Exit codes: 0 success, 1 usage error (bad flags, missing/invalid config),
2 runtime failure. A JSON config file supplies defaults; flags override
individual fields, and the effective configuration is echoed into every
report. NDCP_SEED in the environment acts as the master-seed fallback.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .conformal import PredictorConfig
from .data import PartitionPlan, load_csv, partition
from .experiment import ExperimentConfig, emit_report, run_experiment
from .node import Aggregator, NodeServer, encode_bound
from .regressors import GridSearchSpec


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> _Parser:
    parser = _Parser(
        prog="ndcp",
        description="Multi-source conformal regression with non-disclosed interval aggregation",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    exp = sub.add_parser("experiment", help="run the repeated-split evaluation")
    exp.add_argument("--config", help="JSON config file")
    exp.add_argument("--dataset", help="training CSV (header row, label in last column by default)")
    exp.add_argument("--label-column", dest="label_column")
    exp.add_argument("--repetitions", type=int)
    exp.add_argument("--seed", type=int)
    exp.add_argument("--jobs", type=int, help="concurrent repetitions")
    exp.add_argument("--schemes", type=_str_list, help="comma list: equal,unequal,non_iid")
    exp.add_argument("--source-counts", dest="source_counts", type=_int_list)
    exp.add_argument("--significances", type=_float_list)
    exp.add_argument("--predictor", choices=["icp", "ccp"])
    exp.add_argument("--output-dir", dest="output_dir", default=".")
    exp.add_argument("--basename", default="report")

    node = sub.add_parser("node", help="serve one shard as a prediction node")
    node.add_argument("--shard", required=True, help="shard CSV file")
    node.add_argument("--predictor", choices=["icp", "ccp"], default="icp")
    node.add_argument("--bind", default="127.0.0.1:0", help="HOST:PORT (port 0 = ephemeral)")
    node.add_argument("--config", help="JSON predictor config file")
    node.add_argument("--seed", type=int)

    agg = sub.add_parser("aggregate", help="combine intervals from running nodes")
    agg.add_argument("--nodes", required=True, type=_str_list, help="comma list of host:port")
    agg.add_argument("--eps", required=True, type=float)
    agg.add_argument("--input", required=True, help="CSV of prediction points")
    agg.add_argument("--quorum", type=int)
    agg.add_argument("--timeout", type=float, default=10.0)
    agg.add_argument("--output", help="write NDJSON results here instead of stdout")

    pred = sub.add_parser("predict", help="offline: partition, fit sources, combine")
    pred.add_argument("--data", required=True, help="training CSV")
    pred.add_argument("--input", required=True, help="CSV of prediction points")
    pred.add_argument("--eps", required=True, type=float)
    pred.add_argument("--scheme", choices=["equal", "unequal", "non_iid"], default="equal")
    pred.add_argument("--sources", type=int, default=2)
    pred.add_argument("--predictor", choices=["icp", "ccp"], default="icp")
    pred.add_argument("--label-column", dest="label_column")
    pred.add_argument("--seed", type=int)
    pred.add_argument("--config", help="JSON predictor config file")
    return parser


def _seed_fallback(flag_value, config_value=None) -> int:
    if flag_value is not None:
        return flag_value
    if config_value is not None:
        return config_value
    env = os.environ.get("NDCP_SEED")
    return int(env) if env else 0


def _load_json(path: str) -> dict:
    if not Path(path).is_file():
        raise _UsageError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise _UsageError(f"config file {path} is not valid JSON: {exc}") from None


def _predictor_from_dict(d: dict) -> PredictorConfig:
    d = dict(d)
    grid = d.pop("grid", None)
    if grid is not None:
        grid = GridSearchSpec(
            grid={k: list(v) for k, v in grid["grid"].items()},
            folds=grid.get("folds", 10),
            scoring=grid.get("scoring", "mse"),
            seed=grid.get("seed", 0),
        )
    return PredictorConfig(grid=grid, **d)


def _cmd_experiment(args) -> int:
    config = _load_json(args.config) if args.config else {}
    overrides = {
        "dataset": args.dataset,
        "label_column": args.label_column,
        "repetitions": args.repetitions,
        "jobs": args.jobs,
        "schemes": args.schemes,
        "source_counts": args.source_counts,
        "significances": args.significances,
    }
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    config["seed"] = _seed_fallback(args.seed, config.get("seed"))
    if args.predictor is not None:
        config.setdefault("predictor", {})["kind"] = args.predictor
    if "dataset" not in config:
        raise _UsageError("a dataset must be given via --dataset or the config file")
    try:
        cfg = ExperimentConfig.from_dict(config)
    except (TypeError, ValueError) as exc:
        raise _UsageError(f"invalid configuration: {exc}") from None

    report = run_experiment(cfg)
    paths = emit_report(report, args.output_dir, args.basename)
    print(report.summary_text())
    for path in paths:
        print(f"wrote {path}")
    return 0


def _cmd_node(args) -> int:
    pred_dict = _load_json(args.config) if args.config else {}
    pred_dict["kind"] = args.predictor
    cfg = _predictor_from_dict(pred_dict)
    server = NodeServer(
        args.shard,
        cfg,
        host=args.bind.rpartition(":")[0] or "127.0.0.1",
        port=int(args.bind.rpartition(":")[2]),
        seed=_seed_fallback(args.seed),
    )
    print(f"node serving shard {args.shard} on {server.address}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


def _read_points(path: str, feature_count: int) -> list[list[float]]:
    """Prediction points: a CSV whose rows have exactly p columns, or p+1
    (trailing label column, ignored)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if any(cell.strip() for cell in row)]
    width = len(header)
    if width == feature_count + 1:
        return [[float(v) for v in row[:-1]] for row in rows]
    if width == feature_count:
        return [[float(v) for v in row] for row in rows]
    raise ValueError(
        f"{path}: expected {feature_count} or {feature_count + 1} columns, found {width}"
    )


def _emit_intervals(results, output: str | None) -> None:
    lines = [
        json.dumps(
            {"index": i, "lo": encode_bound(iv.lower), "hi": encode_bound(iv.upper)}
        )
        for i, iv in enumerate(results)
    ]
    text = "\n".join(lines) + "\n"
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def _cmd_aggregate(args) -> int:
    with Aggregator(args.nodes, timeout=args.timeout, quorum=args.quorum) as agg:
        p = agg.feature_count()
        points = _read_points(args.input, p)
        results = [agg.predict(x, args.eps).interval for x in points]
    _emit_intervals(results, args.output)
    return 0


def _cmd_predict(args) -> int:
    from .aggregation import ndcp_predict
    from .conformal import fit_predictor

    pred_dict = _load_json(args.config) if args.config else {}
    pred_dict["kind"] = args.predictor
    cfg = _predictor_from_dict(pred_dict)
    seed = _seed_fallback(args.seed)
    train = load_csv(args.data, args.label_column)
    shards = partition(train, PartitionPlan(args.scheme, args.sources, seed))
    sources = [fit_predictor(shard, cfg, seed + 7919 * (j + 1)) for j, shard in enumerate(shards)]
    points = _read_points(args.input, train.feature_count)
    results = [ndcp_predict(sources, x, args.eps).interval for x in points]
    _emit_intervals(results, None)
    return 0


_COMMANDS = {
    "experiment": _cmd_experiment,
    "node": _cmd_node,
    "aggregate": _cmd_aggregate,
    "predict": _cmd_predict,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())
