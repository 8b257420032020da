"""Point regressors used inside the conformal predictors.

All models share the same surface: construct with hyperparameters, ``fit``
on a :class:`~ndcp.data.Dataset`, then ``predict`` on an (m, p) feature
matrix (or a single p-vector). Fitted models are immutable and their
predictions are pure functions of the input.

Families:

* :class:`KernelRidge` -- RBF kernel ridge, closed form; the fast
  deterministic default.
* :class:`SupportVectorRegressor` -- epsilon-tube SVR with an RBF kernel,
  trained by sequential minimal optimization on the dual.
* :class:`RandomForest` -- bagged CART regression trees with random
  feature subsets.
* :class:`LinearModel` -- ordinary least squares with intercept, used for
  the log-residual difficulty model of the normalized score.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset


class SmoConvergenceError(RuntimeError):
    """SMO hit its iteration cap before reaching the KKT tolerance."""


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """k(u, v) = exp(-gamma * ||u - v||^2), computed pairwise."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.clip(sq, 0.0, None, out=sq)
    return np.exp(-gamma * sq)


class _Scaler:
    """Per-feature standardization frozen at fit time."""

    def __init__(self, X: np.ndarray):
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.std = np.where(std > 1e-12, std, 1.0)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X[None, :] if X.ndim == 1 else X


class KernelRidge:
    """RBF kernel ridge regression, solved in closed form.

    Labels are centered so the fit is exactly equivariant under label
    shifts; the dual coefficients solve (K + lam*I) a = y - mean(y).
    ``gamma=None`` uses 1 / feature_count at fit time.
    """

    def __init__(self, gamma: float | None = None, lam: float = 1e-2, standardize: bool = True):
        if gamma is not None and gamma <= 0:
            raise ValueError("gamma must be positive")
        if lam <= 0:
            raise ValueError("lam must be positive")
        self.gamma = gamma
        self.lam = lam
        self.standardize = standardize

    def fit(self, train: Dataset) -> "KernelRidge":
        X = train.features
        self.gamma_ = self.gamma if self.gamma is not None else 1.0 / X.shape[1]
        self._scaler = _Scaler(X) if self.standardize else None
        Xs = self._scaler.transform(X) if self._scaler else np.array(X)
        K = rbf_kernel(Xs, Xs, self.gamma_)
        K[np.diag_indices_from(K)] += self.lam
        self._label_mean = float(train.labels.mean())
        try:
            self._dual = np.linalg.solve(K, train.labels - self._label_mean)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"kernel system is singular: {exc}") from exc
        self._train_X = Xs
        return self

    def predict(self, X) -> np.ndarray:
        Xq = _as_matrix(X)
        if self._scaler:
            Xq = self._scaler.transform(Xq)
        return self._label_mean + rbf_kernel(Xq, self._train_X, self.gamma_) @ self._dual


class SupportVectorRegressor:
    """Epsilon-tube SVR with RBF kernel, trained by SMO on the dual.

    The dual is posed over 2n box-constrained variables (one pair per
    training point) with a single equality constraint. Each step picks the
    maximal KKT-violating pair, solves the two-variable subproblem
    analytically, clips to the box, and updates the gradient; training
    stops when the largest violation drops below ``tol``.

    After ``fit``: ``alpha_`` / ``alpha_star_`` hold the dual pair,
    ``bias_`` the intercept, ``iterations_`` the pair updates used and
    ``kkt_gap_`` the final violation.
    """

    def __init__(
        self,
        c: float = 10.0,
        tube: float = 0.1,
        gamma: float | None = None,
        tol: float = 1e-3,
        max_iter: int = 100_000,
        standardize: bool = True,
    ):
        if c <= 0:
            raise ValueError("c must be positive")
        if tube < 0:
            raise ValueError("tube must be nonnegative")
        if gamma is not None and gamma <= 0:
            raise ValueError("gamma must be positive")
        self.c = c
        self.tube = tube
        self.gamma = gamma
        self.tol = tol
        self.max_iter = max_iter
        self.standardize = standardize

    def fit(self, train: Dataset) -> "SupportVectorRegressor":
        X, y = train.features, train.labels
        n = len(train)
        self.gamma_ = self.gamma if self.gamma is not None else 1.0 / X.shape[1]
        self._scaler = _Scaler(X) if self.standardize else None
        Xs = self._scaler.transform(X) if self._scaler else np.array(X)
        K = rbf_kernel(Xs, Xs, self.gamma_)
        theta, G, iterations, gap = self._smo(K, y)

        self.alpha_ = theta[:n].copy()
        self.alpha_star_ = theta[n:].copy()
        self.iterations_ = iterations
        self.kkt_gap_ = gap
        beta = self.alpha_ - self.alpha_star_
        self.bias_ = self._intercept(theta, G)
        sv = np.flatnonzero(beta != 0.0)
        self._sv_X = Xs[sv]
        self._sv_beta = beta[sv]
        return self

    def _smo(self, K: np.ndarray, y: np.ndarray):
        n = len(y)
        C, eps = self.c, self.tube
        z = np.concatenate([np.ones(n), -np.ones(n)])
        # Signed kernel columns: ZK[t, c] = z_t * K[t mod n, c].
        ZK = z[:, None] * np.vstack((K, K))
        theta = np.zeros(2 * n)
        G = np.concatenate([eps - y, eps + y])  # gradient at theta = 0

        gap = math.inf
        for it in range(self.max_iter):
            v = -z * G
            up = ((z > 0) & (theta < C)) | ((z < 0) & (theta > 0))
            lo = ((z < 0) & (theta < C)) | ((z > 0) & (theta > 0))
            if not up.any() or not lo.any():
                gap = 0.0
                return theta, G, it, gap
            vi = np.where(up, v, -np.inf)
            vj = np.where(lo, v, np.inf)
            i = int(np.argmax(vi))
            j = int(np.argmin(vj))
            gap = v[i] - v[j]
            if gap <= self.tol:
                return theta, G, it, gap

            old_i, old_j = theta[i], theta[j]
            Kii = K[i % n, i % n]
            Kjj = K[j % n, j % n]
            Kij = K[i % n, j % n]
            quad = max(Kii + Kjj - 2.0 * Kij, 1e-12)
            if z[i] != z[j]:
                delta = (-G[i] - G[j]) / quad
                diff = theta[i] - theta[j]
                theta[i] += delta
                theta[j] += delta
                if diff > 0:
                    if theta[j] < 0:
                        theta[j] = 0.0
                        theta[i] = diff
                    if theta[i] > C:
                        theta[i] = C
                        theta[j] = C - diff
                else:
                    if theta[i] < 0:
                        theta[i] = 0.0
                        theta[j] = -diff
                    if theta[j] > C:
                        theta[j] = C
                        theta[i] = C + diff
            else:
                delta = (G[i] - G[j]) / quad
                ssum = theta[i] + theta[j]
                theta[i] -= delta
                theta[j] += delta
                if ssum > C:
                    if theta[i] > C:
                        theta[i] = C
                        theta[j] = ssum - C
                    if theta[j] > C:
                        theta[j] = C
                        theta[i] = ssum - C
                else:
                    if theta[j] < 0:
                        theta[j] = 0.0
                        theta[i] = ssum
                    if theta[i] < 0:
                        theta[i] = 0.0
                        theta[j] = ssum

            di, dj = theta[i] - old_i, theta[j] - old_j
            if di:
                G += (z[i] * di) * ZK[:, i % n]
            if dj:
                G += (z[j] * dj) * ZK[:, j % n]

        raise SmoConvergenceError(
            f"no convergence after {self.max_iter} pair updates; "
            f"KKT violation {gap:.3e} > tol {self.tol:.3e}"
        )

    def _intercept(self, theta: np.ndarray, G: np.ndarray) -> float:
        n = len(theta) // 2
        z = np.concatenate([np.ones(n), -np.ones(n)])
        v = -z * G
        free = (theta > 0.0) & (theta < self.c)
        if free.any():
            return float(v[free].mean())
        up = ((z > 0) & (theta < self.c)) | ((z < 0) & (theta > 0))
        lo = ((z < 0) & (theta < self.c)) | ((z > 0) & (theta > 0))
        hi = v[up].max() if up.any() else -math.inf
        lo_v = v[lo].min() if lo.any() else math.inf
        if not (math.isfinite(hi) and math.isfinite(lo_v)):
            return 0.0
        return float((hi + lo_v) / 2.0)

    def predict(self, X) -> np.ndarray:
        Xq = _as_matrix(X)
        if self._scaler:
            Xq = self._scaler.transform(Xq)
        if len(self._sv_beta) == 0:
            return np.full(len(Xq), self.bias_)
        return rbf_kernel(Xq, self._sv_X, self.gamma_) @ self._sv_beta + self.bias_


@dataclass
class _TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "_TreeNode | None" = None
    right: "_TreeNode | None" = None
    value: float = 0.0

    def is_leaf(self) -> bool:
        return self.left is None


class RandomForest:
    """Bootstrap-aggregated CART regression trees.

    Per tree, the bootstrap indices are drawn as ``rng.integers(0, n, n)``
    from a ``numpy.random.default_rng(seed)`` stream shared across trees
    (bootstrap first, then split draws, in build order), which makes the
    whole forest a deterministic function of ``seed``. Splits minimize the
    summed squared error of the children over a random feature subset of
    size ceil(p / 3).
    """

    def __init__(self, trees: int = 100, min_leaf: int = 1, seed: int = 0):
        if trees < 1:
            raise ValueError("trees must be >= 1")
        if min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        self.trees = trees
        self.min_leaf = min_leaf
        self.seed = seed

    def fit(self, train: Dataset) -> "RandomForest":
        X, y = train.features, train.labels
        n, p = X.shape
        self._subset = max(1, math.ceil(p / 3))
        rng = np.random.default_rng(self.seed)
        self._roots = []
        for _ in range(self.trees):
            boot = rng.integers(0, n, n)
            self._roots.append(self._build(X, y, boot, rng))
        return self

    def _build(self, X, y, indices, rng) -> _TreeNode:
        node = _TreeNode(value=float(np.mean(y[indices])))
        if len(indices) < 2 * self.min_leaf:
            return node
        yv = y[indices]
        if np.all(yv == yv[0]):
            return node
        split = self._best_split(X, yv, indices, rng)
        if split is None:
            return node
        feat, thr = split
        mask = X[indices, feat] <= thr
        node.feature = feat
        node.threshold = thr
        node.left = self._build(X, y, indices[mask], rng)
        node.right = self._build(X, y, indices[~mask], rng)
        return node

    def _best_split(self, X, yv, indices, rng):
        p = X.shape[1]
        feats = rng.choice(p, size=self._subset, replace=False)
        m = len(indices)
        best = None
        best_sse = math.inf
        for feat in feats:
            xv = X[indices, feat]
            order = np.argsort(xv, kind="stable")
            xs, ys = xv[order], yv[order]
            cum = np.cumsum(ys)
            cum2 = np.cumsum(ys * ys)
            total, total2 = cum[-1], cum2[-1]
            # candidate boundaries after position i (1-based left size)
            sizes = np.arange(1, m)
            valid = (sizes >= self.min_leaf) & (m - sizes >= self.min_leaf)
            valid &= xs[:-1] < xs[1:]  # value must actually change
            if not valid.any():
                continue
            ls = sizes[valid]
            left_sse = cum2[ls - 1] - cum[ls - 1] ** 2 / ls
            right_sse = (total2 - cum2[ls - 1]) - (total - cum[ls - 1]) ** 2 / (m - ls)
            sse = left_sse + right_sse
            k = int(np.argmin(sse))
            if sse[k] < best_sse:
                best_sse = float(sse[k])
                cut = ls[k] - 1
                best = (int(feat), float((xs[cut] + xs[cut + 1]) / 2.0))
        return best

    def predict(self, X) -> np.ndarray:
        Xq = _as_matrix(X)
        out = np.zeros(len(Xq))
        for root in self._roots:
            for r, x in enumerate(Xq):
                node = root
                while not node.is_leaf():
                    node = node.left if x[node.feature] <= node.threshold else node.right
                out[r] += node.value
        return out / self.trees


class LinearModel:
    """Ordinary least squares with intercept.

    A rank-deficient design falls back to ridge with lam = 1e-8 and emits
    a warning.
    """

    RIDGE_FALLBACK = 1e-8

    def fit(self, train: Dataset) -> "LinearModel":
        X, y = train.features, train.labels
        n, p = X.shape
        if n < p + 1:
            raise ValueError(f"need at least p+1 = {p + 1} examples, have {n}")
        A = np.hstack([np.ones((n, 1)), X])
        coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
        if rank < p + 1:
            warnings.warn(
                f"rank-deficient design (rank {rank} < {p + 1}); "
                f"using ridge fallback lam={self.RIDGE_FALLBACK}",
                RuntimeWarning,
                stacklevel=2,
            )
            coef = np.linalg.solve(
                A.T @ A + self.RIDGE_FALLBACK * np.eye(p + 1), A.T @ y
            )
        self.intercept_ = float(coef[0])
        self.coef_ = coef[1:]
        return self

    def predict(self, X) -> np.ndarray:
        return self.intercept_ + _as_matrix(X) @ self.coef_


REGRESSOR_FAMILIES = {
    "kernel_ridge": KernelRidge,
    "svr": SupportVectorRegressor,
    "random_forest": RandomForest,
    "linear": LinearModel,
}


def make_regressor(family: str, params: dict | None = None):
    """Instantiate an unfitted regressor from a family name and kwargs."""
    try:
        cls = REGRESSOR_FAMILIES[family]
    except KeyError:
        raise ValueError(
            f"unknown regressor family {family!r}; choose from {sorted(REGRESSOR_FAMILIES)}"
        ) from None
    return cls(**(params or {}))


def fit_kernel_ridge(train: Dataset, gamma: float, lam: float, **kw) -> KernelRidge:
    return KernelRidge(gamma=gamma, lam=lam, **kw).fit(train)


def fit_svr(train: Dataset, c: float, eps_tube: float, gamma: float, **kw) -> SupportVectorRegressor:
    return SupportVectorRegressor(c=c, tube=eps_tube, gamma=gamma, **kw).fit(train)


def fit_random_forest(train: Dataset, trees: int, min_leaf: int, seed: int) -> RandomForest:
    return RandomForest(trees=trees, min_leaf=min_leaf, seed=seed).fit(train)


def fit_linear(train: Dataset) -> LinearModel:
    return LinearModel().fit(train)


@dataclass(frozen=True)
class GridSearchSpec:
    """Cross-validated grid search settings; scoring is mean squared error."""

    grid: dict[str, Sequence] = field(default_factory=dict)
    folds: int = 10
    scoring: str = "mse"
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.scoring != "mse":
            raise ValueError("only mse scoring is supported")
        if not self.grid or any(len(v) == 0 for v in self.grid.values()):
            raise ValueError("grid must have at least one nonempty axis")


def cv_fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Shuffled fold membership; fold sizes differ by at most one."""
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, folds)]


def grid_search(
    train: Dataset,
    family: str,
    spec: GridSearchSpec,
    fixed_params: dict | None = None,
) -> dict:
    """Pick the grid point with the lowest mean k-fold CV MSE.

    Ties keep the earliest point in grid iteration order (itertools.product
    over the axes as given). Returns the winning grid point as a dict.
    """
    n = len(train)
    if spec.folds > n:
        raise ValueError(f"folds={spec.folds} exceeds dataset size {n}")
    folds = cv_fold_indices(n, spec.folds, spec.seed)
    all_ix = np.arange(n)
    names = list(spec.grid.keys())
    best_point, best_score = None, math.inf
    for combo in itertools.product(*(spec.grid[k] for k in names)):
        point = dict(zip(names, combo))
        params = dict(fixed_params or {})
        params.update(point)
        total = 0.0
        for fold in folds:
            hold = np.zeros(n, dtype=bool)
            hold[fold] = True
            model = make_regressor(family, params).fit(train.subset(all_ix[~hold]))
            resid = model.predict(train.features[fold]) - train.labels[fold]
            total += float(np.mean(resid * resid))
        score = total / len(folds)
        if score < best_score:
            best_score = score
            best_point = point
    return best_point
