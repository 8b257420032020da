"""Evaluation harness: repeated splits, shard training, interval metrics.

One repetition: split the data 90/10, partition the training part per
scheme and source count, fit a conformal predictor per shard, combine the
per-source intervals on the test set (NDCP), shrink them post hoc to the
target coverage (Ideal NDCP), and fit a reference predictor on the pooled
training data. Validity is the covered fraction of test labels; efficiency
is the median interval width. Everything is a deterministic function of
the master seed.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregation import combine, ideal_shrink
from .conformal import (
    PredictionInterval,
    PredictorConfig,
    fit_predictor,
    predict_interval_bounds,
)
from .data import SCHEMES, Dataset, PartitionPlan, load_csv, partition, train_test_split
from .regressors import GridSearchSpec


def _bounds_of(intervals) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(intervals, np.ndarray):
        return intervals[:, 0], intervals[:, 1]
    lowers = np.array([iv.lower for iv in intervals])
    uppers = np.array([iv.upper for iv in intervals])
    return lowers, uppers


def validity(intervals, truths: Sequence[float]) -> float:
    """Fraction of truths inside their (closed) intervals."""
    lowers, uppers = _bounds_of(intervals)
    y = np.asarray(truths, dtype=float)
    if len(y) != len(lowers) or len(y) == 0:
        raise ValueError("intervals and truths must be nonempty and equally long")
    return float(np.mean((lowers <= y) & (y <= uppers)))


def efficiency(intervals) -> float:
    """Median interval width; infinite widths participate."""
    lowers, uppers = _bounds_of(intervals)
    if len(lowers) == 0:
        raise ValueError("need at least one interval")
    return float(np.median(uppers - lowers))


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one evaluation run; echoed into every report."""

    dataset: str
    label_column: str | int | None = None
    test_fraction: float = 0.1
    schemes: tuple[str, ...] = ("equal", "unequal", "non_iid")
    source_counts: tuple[int, ...] = (2, 4, 6)
    repetitions: int = 100
    significances: tuple[float, ...] = (0.05, 0.10, 0.15, 0.20)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    non_iid_quantile: float = 0.75
    non_iid_boost: float = 2.0
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not self.schemes:
            raise ValueError("need at least one scheme")
        for s in self.schemes:
            if s not in SCHEMES:
                raise ValueError(f"unknown scheme {s!r}")
        for eps in self.significances:
            if not 0.0 < eps < 1.0:
                raise ValueError("significances must lie in (0, 1)")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schemes"] = list(self.schemes)
        d["source_counts"] = list(self.source_counts)
        d["significances"] = list(self.significances)
        d["predictor"] = asdict(self.predictor)
        if self.predictor.grid is not None:
            g = asdict(self.predictor.grid)
            g["grid"] = {k: list(v) for k, v in self.predictor.grid.grid.items()}
            d["predictor"]["grid"] = g
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        pred = d.pop("predictor", None)
        if pred is not None:
            pred = dict(pred)
            grid = pred.pop("grid", None)
            if grid is not None:
                grid = GridSearchSpec(
                    grid={k: list(v) for k, v in grid["grid"].items()},
                    folds=grid.get("folds", 10),
                    scoring=grid.get("scoring", "mse"),
                    seed=grid.get("seed", 0),
                )
            d["predictor"] = PredictorConfig(grid=grid, **pred)
        for key in ("schemes", "source_counts", "significances"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class MetricsRow:
    """One model's validity/efficiency in one table cell."""

    model: str
    n: int
    validity: float
    efficiency: float


@dataclass(frozen=True)
class RawRow:
    """Per-repetition metrics for one
    (scheme, sources, predictor, epsilon, model) combination."""

    repetition: int
    scheme: str
    sources: int
    predictor: str
    epsilon: float
    model: str
    n: int
    validity: float
    efficiency: float
    shrink_factor: float | None = None


@dataclass
class ExperimentReport:
    config: dict
    rows: list[RawRow]

    def cell(self, scheme: str, sources: int, epsilon: float) -> list[RawRow]:
        return [
            r
            for r in self.rows
            if r.scheme == scheme and r.sources == sources and r.epsilon == epsilon
        ]

    def aggregated(self) -> list[dict]:
        """Mean validity and median of per-repetition median widths for
        every (scheme, sources, predictor, epsilon, model)."""
        groups: dict[tuple, list[RawRow]] = {}
        order: list[tuple] = []
        for r in self.rows:
            key = (r.scheme, r.sources, r.predictor, r.epsilon, r.model)
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(r)
        out = []
        for key in order:
            rows = groups[key]
            scheme, sources, predictor, epsilon, model = key
            out.append(
                {
                    "scheme": scheme,
                    "sources": sources,
                    "predictor": predictor,
                    "epsilon": epsilon,
                    "model": model,
                    "n": rows[0].n,
                    "validity": float(np.mean([r.validity for r in rows])),
                    "efficiency": float(np.median([r.efficiency for r in rows])),
                }
            )
        return out

    def summary_text(self) -> str:
        """Table-style stdout summary, one block per (scheme, sources)."""
        agg = self.aggregated()
        eps_levels = sorted({a["epsilon"] for a in agg})
        blocks: dict[tuple, dict[str, dict]] = {}
        for a in agg:
            block = blocks.setdefault((a["scheme"], a["sources"], a["predictor"]), {})
            row = block.setdefault(a["model"], {"n": a["n"]})
            row[a["epsilon"]] = (a["validity"], a["efficiency"])
        lines = []
        for (scheme, sources, predictor), models in blocks.items():
            lines.append(f"scheme={scheme} sources={sources} predictor={predictor}")
            header = f"{'model':<12}{'n':>6}"
            for eps in eps_levels:
                header += f"{f'Val@{eps:g}':>10}{f'Eff@{eps:g}':>10}"
            lines.append(header)
            for model, row in models.items():
                line = f"{model:<12}{row['n']:>6}"
                for eps in eps_levels:
                    val, eff = row.get(eps, (math.nan, math.nan))
                    line += f"{val:>10.3f}{eff:>10.3f}"
                lines.append(line)
            lines.append("")
        return "\n".join(lines)


def _source_seed(rep_seed: int, source_index: int) -> int:
    # Distinct deterministic streams per shard within one repetition.
    return rep_seed * 1009 + 7919 * (source_index + 1)


def _model_rows(rep, scheme, sources, kind, eps, model, n, bounds_or_ivs, truths, shrink=None):
    return RawRow(
        repetition=rep,
        scheme=scheme,
        sources=sources,
        predictor=kind,
        epsilon=eps,
        model=model,
        n=n,
        validity=validity(bounds_or_ivs, truths),
        efficiency=efficiency(bounds_or_ivs),
        shrink_factor=shrink,
    )


def run_repetition(dataset: Dataset, cfg: ExperimentConfig, rep: int) -> list[RawRow]:
    """All metric rows for one repetition (seeded by master seed + rep)."""
    rep_seed = cfg.seed + rep
    train, test = train_test_split(dataset, cfg.test_fraction, rep_seed)
    X_test, y_test = test.features, test.labels
    kind = cfg.predictor.kind
    n_train = len(train)

    pooled = fit_predictor(train, cfg.predictor, rep_seed)
    pooled_bounds = {
        eps: predict_interval_bounds(pooled, X_test, eps) for eps in cfg.significances
    }

    rows: list[RawRow] = []
    for scheme in cfg.schemes:
        for k in cfg.source_counts:
            plan = PartitionPlan(
                scheme=scheme,
                source_count=k,
                seed=rep_seed,
                non_iid_quantile=cfg.non_iid_quantile,
                non_iid_boost=cfg.non_iid_boost,
            )
            shards = partition(train, plan)
            models = [
                fit_predictor(shard, cfg.predictor, _source_seed(rep_seed, j))
                for j, shard in enumerate(shards)
            ]
            for eps in cfg.significances:
                source_bounds = [
                    predict_interval_bounds(m, X_test, eps) for m in models
                ]
                ndcp_ivs = []
                for i in range(len(test)):
                    per_source = [
                        PredictionInterval(float(b[i, 0]), float(b[i, 1]), eps)
                        for b in source_bounds
                    ]
                    ndcp_ivs.append(combine(per_source))
                shrink_c, ideal_ivs = ideal_shrink(ndcp_ivs, y_test, eps)

                rows.append(
                    _model_rows(rep, scheme, k, kind, eps, "NDCP", n_train, ndcp_ivs, y_test)
                )
                rows.append(
                    _model_rows(
                        rep, scheme, k, kind, eps, "IdealNDCP", n_train,
                        ideal_ivs, y_test, shrink=shrink_c,
                    )
                )
                for j, bounds in enumerate(source_bounds):
                    rows.append(
                        _model_rows(
                            rep, scheme, k, kind, eps, f"Source{j + 1}",
                            len(shards[j]), bounds, y_test,
                        )
                    )
                rows.append(
                    _model_rows(
                        rep, scheme, k, kind, eps, "Pooled", n_train,
                        pooled_bounds[eps], y_test,
                    )
                )
    return rows


def _run_repetition_job(args) -> list[RawRow]:
    dataset, cfg, rep = args
    return run_repetition(dataset, cfg, rep)


def run_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None) -> ExperimentReport:
    """Run every repetition and collect raw metric rows.

    ``dataset`` skips re-loading when the caller already has it; otherwise
    the CSV at ``cfg.dataset`` is loaded. With ``cfg.jobs > 1`` repetitions
    run in a process pool; results are merged in repetition order either
    way, so reports are byte-identical for a fixed master seed.
    """
    if dataset is None:
        dataset = load_csv(cfg.dataset, cfg.label_column)
    rows: list[RawRow] = []
    if cfg.jobs > 1:
        jobs = [(dataset, cfg, rep) for rep in range(cfg.repetitions)]
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for rep_rows in pool.map(_run_repetition_job, jobs):
                rows.extend(rep_rows)
    else:
        for rep in range(cfg.repetitions):
            rows.extend(run_repetition(dataset, cfg, rep))
    return ExperimentReport(config=cfg.to_dict(), rows=rows)


def _json_safe(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _row_dict(row: RawRow) -> dict:
    d = asdict(row)
    d["efficiency"] = _json_safe(d["efficiency"])
    return d


def report_to_json(report: ExperimentReport) -> str:
    payload = {
        "config": report.config,
        "aggregated": [
            {k: _json_safe(v) for k, v in a.items()} for a in report.aggregated()
        ],
        "rows": [_row_dict(r) for r in report.rows],
    }
    return json.dumps(payload, indent=2)


def emit_report(
    report: ExperimentReport,
    directory,
    basename: str = "report",
    formats: Sequence[str] = ("json", "csv"),
) -> list[Path]:
    """Write the report as JSON and/or CSV; returns the paths written.

    The CSV holds one row per (repetition, scheme, sources, predictor,
    epsilon, model) for external plotting; the JSON mirrors the full
    report including the config echo and aggregated cells.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        path = directory / f"{basename}.{fmt}"
        if fmt == "json":
            path.write_text(report_to_json(report))
        elif fmt == "csv":
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(
                    [
                        "repetition", "scheme", "sources", "predictor", "epsilon",
                        "model", "n", "validity", "efficiency", "shrink_factor",
                    ]
                )
                for r in report.rows:
                    writer.writerow(
                        [
                            r.repetition, r.scheme, r.sources, r.predictor,
                            repr(r.epsilon), r.model, r.n, repr(r.validity),
                            repr(r.efficiency),
                            "" if r.shrink_factor is None else repr(r.shrink_factor),
                        ]
                    )
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(path)
    return written
