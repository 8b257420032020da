"""Nonconformity scores and conformal predictors producing intervals.

Two predictor shapes:

* ICP -- split the shard into a proper training part and a calibration
  part; intervals come from a rank statistic of the calibration scores.
* CCP -- k-fold variant where every example contributes one calibration
  score; intervals use the pooled scores and the mean of the fold models'
  point predictions.

The rank rule is ceil((1 - epsilon) * (n + 1)) over n sorted scores,
1-indexed; when the rank exceeds n the interval is infinite (calibration
exhaustion). Intervals are closed, so a label exactly on a bound counts
as covered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, round_half_up
from .regressors import GridSearchSpec, LinearModel, grid_search, make_regressor

MEASURES = ("absolute", "normalized")


@dataclass(frozen=True)
class PredictionInterval:
    """Closed interval [lower, upper] at significance level epsilon."""

    lower: float
    upper: float
    significance: float

    def __post_init__(self):
        if math.isnan(self.lower) or math.isnan(self.upper) or self.lower > self.upper:
            raise ValueError(f"invalid interval bounds [{self.lower}, {self.upper}]")
        if not 0.0 < self.significance < 1.0:
            raise ValueError("significance must be in (0, 1)")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, y: float) -> bool:
        return self.lower <= y <= self.upper


def conservative_rank(epsilon: float, n: int) -> int:
    """ceil((1 - epsilon) * (n + 1)), robust to float representation of
    epsilon (0.8 * 5 must give rank 4, not 5)."""
    return math.ceil((1.0 - epsilon) * (n + 1) - 1e-9)


def score(kind: str, truth: float, prediction: float, sigma: float | None = None) -> float:
    """Nonconformity of one example: absolute residual, optionally scaled
    down by exp(sigma) where sigma predicts the log absolute residual."""
    if kind == "absolute":
        if sigma is not None:
            raise ValueError("sigma is only used by the normalized measure")
        return abs(truth - prediction)
    if kind == "normalized":
        if sigma is None:
            raise ValueError("normalized measure requires sigma")
        return abs(truth - prediction) / math.exp(sigma)
    raise ValueError(f"unknown measure {kind!r}; choose from {MEASURES}")


def _fit_sigma_model(proper: Dataset, point_model, beta: float) -> LinearModel:
    resid = np.abs(proper.labels - point_model.predict(proper.features))
    targets = np.log(resid + beta)
    return LinearModel().fit(Dataset(proper.features, targets))


@dataclass(frozen=True)
class IcpModel:
    """Fitted inductive conformal predictor for one shard."""

    point_model: object
    sigma_model: object | None
    calibration_scores: np.ndarray  # sorted ascending, nonnegative
    measure: str
    n_train: int  # shard size backing this predictor

    @property
    def n_cal(self) -> int:
        return len(self.calibration_scores)


@dataclass(frozen=True)
class CcpFold:
    model: object
    sigma_model: object | None
    scores: np.ndarray


@dataclass(frozen=True)
class CcpModel:
    """Fitted cross-conformal predictor: fold models plus pooled scores."""

    folds: tuple[CcpFold, ...]
    pooled_scores: np.ndarray  # sorted ascending
    measure: str
    n_train: int

    @property
    def fold_count(self) -> int:
        return len(self.folds)


def split_proper_calibration(
    n: int, calibration_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled (proper, calibration) indices; calibration size is
    round(n * fraction) clamped to leave both sides nonempty."""
    if n < 2:
        raise ValueError("need at least 2 examples to split off a calibration set")
    if not 0.0 < calibration_fraction < 1.0:
        raise ValueError("calibration_fraction must be in (0, 1)")
    n_cal = min(max(round_half_up(n * calibration_fraction), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_cal:]), np.sort(perm[:n_cal])


def fit_icp(
    shard: Dataset,
    family: str = "kernel_ridge",
    params: dict | None = None,
    *,
    measure: str = "absolute",
    calibration_fraction: float = 1.0 / 3.0,
    seed: int = 0,
    beta: float = 0.01,
) -> IcpModel:
    """Split the shard, fit the point model (and the difficulty model for
    the normalized measure) on the proper part, score the calibration part."""
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}")
    proper_ix, cal_ix = split_proper_calibration(len(shard), calibration_fraction, seed)
    proper, cal = shard.subset(proper_ix), shard.subset(cal_ix)

    point_model = make_regressor(family, params).fit(proper)
    sigma_model = None
    sigmas = None
    if measure == "normalized":
        sigma_model = _fit_sigma_model(proper, point_model, beta)
        sigmas = sigma_model.predict(cal.features)

    residuals = np.abs(cal.labels - point_model.predict(cal.features))
    scores = residuals / np.exp(sigmas) if sigmas is not None else residuals
    return IcpModel(
        point_model=point_model,
        sigma_model=sigma_model,
        calibration_scores=np.sort(scores),
        measure=measure,
        n_train=len(shard),
    )


def _interval_arrays(
    yhat: np.ndarray, scale: np.ndarray, sorted_scores: np.ndarray, epsilon: float
) -> np.ndarray:
    n = len(sorted_scores)
    rank = conservative_rank(epsilon, n)
    if rank > n:
        lower = np.full_like(yhat, -math.inf)
        upper = np.full_like(yhat, math.inf)
    else:
        q = sorted_scores[rank - 1]
        lower = yhat - q * scale
        upper = yhat + q * scale
    return np.column_stack([lower, upper])


def icp_interval_bounds(m: IcpModel, X: np.ndarray, epsilon: float) -> np.ndarray:
    """Vectorized ICP intervals: (n, 2) array of [lower, upper] rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    yhat = m.point_model.predict(X)
    if m.measure == "normalized":
        scale = np.exp(m.sigma_model.predict(X))
    else:
        scale = np.ones_like(yhat)
    return _interval_arrays(yhat, scale, m.calibration_scores, epsilon)


def icp_interval(m: IcpModel, x, epsilon: float) -> PredictionInterval:
    """Prediction interval for one feature vector at significance epsilon."""
    row = icp_interval_bounds(m, np.asarray(x, dtype=float)[None, :], epsilon)[0]
    return PredictionInterval(float(row[0]), float(row[1]), epsilon)


def fit_ccp(
    shard: Dataset,
    fold_count: int = 5,
    family: str = "kernel_ridge",
    params: dict | None = None,
    *,
    measure: str = "absolute",
    seed: int = 0,
    beta: float = 0.01,
) -> CcpModel:
    """k-fold conformal predictor: each fold is scored by a model trained
    on the other folds, so every example contributes one score."""
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}")
    n = len(shard)
    if fold_count < 2:
        raise ValueError("fold_count must be >= 2")
    if n < fold_count:
        raise ValueError(f"shard of {n} examples cannot form {fold_count} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = []
    for part in np.array_split(perm, fold_count):
        hold = np.zeros(n, dtype=bool)
        hold[part] = True
        train_part = shard.subset(np.flatnonzero(~hold))
        cal_part = shard.subset(np.sort(part))
        model = make_regressor(family, params).fit(train_part)
        sigma_model = None
        resid = np.abs(cal_part.labels - model.predict(cal_part.features))
        if measure == "normalized":
            sigma_model = _fit_sigma_model(train_part, model, beta)
            resid = resid / np.exp(sigma_model.predict(cal_part.features))
        folds.append(CcpFold(model=model, sigma_model=sigma_model, scores=resid))
    pooled = np.sort(np.concatenate([f.scores for f in folds]))
    return CcpModel(
        folds=tuple(folds), pooled_scores=pooled, measure=measure, n_train=n
    )


def ccp_interval_bounds(m: CcpModel, X: np.ndarray, epsilon: float) -> np.ndarray:
    """Vectorized CCP intervals: mean-of-folds center, pooled-score radius."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    yhat = np.mean([f.model.predict(X) for f in m.folds], axis=0)
    if m.measure == "normalized":
        sigma = np.mean([f.sigma_model.predict(X) for f in m.folds], axis=0)
        scale = np.exp(sigma)
    else:
        scale = np.ones_like(yhat)
    return _interval_arrays(yhat, scale, m.pooled_scores, epsilon)


def ccp_interval(m: CcpModel, x, epsilon: float) -> PredictionInterval:
    row = ccp_interval_bounds(m, np.asarray(x, dtype=float)[None, :], epsilon)[0]
    return PredictionInterval(float(row[0]), float(row[1]), epsilon)


@dataclass(frozen=True)
class PredictorConfig:
    """Everything needed to train one conformal predictor on one shard."""

    kind: str = "icp"
    family: str = "kernel_ridge"
    params: dict = field(default_factory=dict)
    grid: GridSearchSpec | None = None
    measure: str = "absolute"
    calibration_fraction: float = 1.0 / 3.0
    ccp_folds: int = 5
    beta: float = 0.01

    def __post_init__(self):
        if self.kind not in ("icp", "ccp"):
            raise ValueError("kind must be 'icp' or 'ccp'")
        if self.measure not in MEASURES:
            raise ValueError(f"measure must be one of {MEASURES}")


def fit_predictor(shard: Dataset, cfg: PredictorConfig, seed: int) -> IcpModel | CcpModel:
    """Fit an ICP or CCP on one shard, running the grid search first when
    configured (re-run per shard: every source tunes autonomously)."""
    params = dict(cfg.params)
    if cfg.grid is not None:
        best = grid_search(shard, cfg.family, replace(cfg.grid, seed=seed), params)
        params.update(best)
    if cfg.family == "random_forest":
        params.setdefault("seed", seed)
    if cfg.kind == "icp":
        return fit_icp(
            shard,
            cfg.family,
            params,
            measure=cfg.measure,
            calibration_fraction=cfg.calibration_fraction,
            seed=seed,
            beta=cfg.beta,
        )
    return fit_ccp(
        shard,
        cfg.ccp_folds,
        cfg.family,
        params,
        measure=cfg.measure,
        seed=seed,
        beta=cfg.beta,
    )


def predict_interval(model: IcpModel | CcpModel, x, epsilon: float) -> PredictionInterval:
    """Dispatch on predictor shape for a single feature vector."""
    if isinstance(model, IcpModel):
        return icp_interval(model, x, epsilon)
    return ccp_interval(model, x, epsilon)


def predict_interval_bounds(model: IcpModel | CcpModel, X, epsilon: float) -> np.ndarray:
    if isinstance(model, IcpModel):
        return icp_interval_bounds(model, X, epsilon)
    return ccp_interval_bounds(model, X, epsilon)
