"""Gradient-boosted regression trees over the 33-slot query vector.

Two boosters share the tree learner:

* :func:`fit_gbdt` -- probabilistic model with a mean head and a log-variance
  head, trained on Gaussian negative log-likelihood of ``log1p(seconds)``.
* :func:`fit_baseline` -- single point model trained on absolute error, the
  comparison predictor.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from . import _kernels

LOGVAR_FLOOR = -10.0
LOGVAR_CEIL = 10.0
# caps the squared standardized residual in the variance step
_MAX_Z2 = 25.0


class UnderTrainedError(ValueError):
    """Too little data to fit a model; callers should skip the stage."""


@dataclass(frozen=True)
class TreeParams:
    n_estimators: int = 200
    max_depth: int = 6
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    subsample: float = 0.8
    validation_fraction: float = 0.2
    patience: int = 20
    max_bins: int = 64
    min_pool: int = 10

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def nll_loss(mu, logvar, y_log):
    """Gaussian NLL (constant dropped) and its analytic gradients.

    Returns ``(loss, d_mu, d_logvar)``; works elementwise on arrays.
    """
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.maximum(np.asarray(logvar, dtype=np.float64), LOGVAR_FLOOR)
    r = np.asarray(y_log, dtype=np.float64) - mu
    inv = np.exp(-logvar)
    loss = 0.5 * logvar + 0.5 * r * r * inv
    d_mu = -r * inv
    d_logvar = 0.5 - 0.5 * r * r * inv
    if loss.ndim == 0:
        return float(loss), float(d_mu), float(d_logvar)
    return loss, d_mu, d_logvar


# --------------------------------------------------------------------------
# Trees
# --------------------------------------------------------------------------


@dataclass
class Tree:
    """Axis-aligned regression tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return _kernels.apply_tree(X, self.feature, self.threshold, self.left, self.right)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(np.ascontiguousarray(X, dtype=np.float64))]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
        )


class Forest:
    """Trees padded into rectangular arrays for one-pass traversal.

    Tree ``t`` adds its leaf value to output column ``group[t]``.
    """

    def __init__(self, trees: Sequence[Tree], groups: Sequence[int], n_groups: int):
        width = max([t.n_nodes for t in trees], default=1)
        n = len(trees)
        self.feature = np.full((n, width), -1, dtype=np.int64)
        self.threshold = np.zeros((n, width))
        self.left = np.full((n, width), -1, dtype=np.int64)
        self.right = np.full((n, width), -1, dtype=np.int64)
        self.value = np.zeros((n, width))
        for i, t in enumerate(trees):
            k = t.n_nodes
            self.feature[i, :k] = t.feature
            self.threshold[i, :k] = t.threshold
            self.left[i, :k] = t.left
            self.right[i, :k] = t.right
            self.value[i, :k] = t.value
        self.group = np.asarray(groups, dtype=np.int64).reshape(n)
        self.n_groups = int(n_groups)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        return _kernels.forest_predict(
            X, self.feature, self.threshold, self.left, self.right, self.value, self.group, self.n_groups
        )


class Binner:
    """Quantile candidate thresholds per feature.

    A value ``x`` falls in bin ``b`` iff it exceeds exactly ``b`` thresholds,
    so the split "bin <= b" is the raw-value test ``x <= thresholds[b]``.
    """

    def __init__(self, X: np.ndarray, max_bins: int = 64):
        if not 2 <= max_bins <= 254:
            raise ValueError("max_bins must lie in [2, 254]")
        self.max_bins = max_bins
        self.thresholds: list[np.ndarray] = []
        qs = np.linspace(0.0, 1.0, max_bins + 1)
        for col in np.asarray(X, dtype=np.float64).T:
            uniq = np.unique(col)
            if len(uniq) > max_bins:
                uniq = np.unique(np.quantile(col, qs, method="lower"))
            self.thresholds.append(0.5 * (uniq[:-1] + uniq[1:]))

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(X.shape, dtype=np.uint8)
        for f, thr in enumerate(self.thresholds):
            out[:, f] = np.searchsorted(thr, X[:, f], side="left")
        return out


def grow_tree(
    bins: np.ndarray,
    binner: Binner,
    rows: np.ndarray,
    target: np.ndarray,
    max_depth: int,
    min_samples_leaf: int,
) -> tuple[Tree, np.ndarray]:
    """Least-squares regression tree on ``target`` over ``rows``.

    Grows level by level; ties in split gain go to the lowest (feature, bin).
    Returns the tree (leaf values = target means) and the leaf of each row.
    """
    n_bins = binner.max_bins + 1
    feature = [-1]
    threshold = [0.0]
    left = [-1]
    right = [-1]
    value = [float(target.mean()) if len(target) else 0.0]

    node_of = np.zeros(len(rows), dtype=np.int64)
    frontier = [0]
    n_thr = np.array([len(t) for t in binner.thresholds], dtype=np.int64)

    for _depth in range(max_depth):
        if not frontier:
            break
        slot_map = np.full(len(feature), -1, dtype=np.int64)
        slot_map[frontier] = np.arange(len(frontier))
        slot = slot_map[node_of]
        sums, counts = _kernels.histograms(bins, rows, slot, target, len(frontier), n_bins)

        best_f, best_b, best_gain, lmean, rmean = _kernels.best_splits(sums, counts, n_thr, min_samples_leaf)
        tot_s = sums[:, 0, :].sum(axis=1)
        tot_c = counts[:, 0, :].sum(axis=1)
        scale = tot_s**2 / np.maximum(tot_c, 1) + 1.0
        do_split = (best_f >= 0) & (best_gain > 1e-12 * scale)

        # split tables indexed by node id; -1 = not split this level
        n_after = len(feature) + 2 * int(do_split.sum())
        split_f = np.full(n_after, -1, dtype=np.int64)
        split_b = np.zeros(n_after, dtype=np.int64)
        new_frontier = []
        for s_ in np.flatnonzero(do_split):
            node = frontier[s_]
            f, b = int(best_f[s_]), int(best_b[s_])
            lid = len(feature)
            feature[node] = f
            threshold[node] = float(binner.thresholds[f][b])
            left[node] = lid
            right[node] = lid + 1
            for v in (lmean[s_], rmean[s_]):
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(float(v))
            split_f[node] = f
            split_b[node] = b
            new_frontier.extend((lid, lid + 1))
        if new_frontier:
            moving = np.flatnonzero(split_f[node_of] >= 0)
            nodes = node_of[moving]
            go_left = bins[rows[moving], split_f[nodes]] <= split_b[nodes]
            lefts = np.asarray(left, dtype=np.int64)[nodes]
            node_of[moving] = np.where(go_left, lefts, lefts + 1)
        frontier = new_frontier

    tree = Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
    )
    return tree, node_of


# --------------------------------------------------------------------------
# Probabilistic booster
# --------------------------------------------------------------------------


@dataclass
class GbdtModel:
    trees_mu: list[Tree]
    trees_logvar: list[Tree]
    base_mu: float
    base_logvar: float
    learning_rate: float
    max_depth: int
    n_estimators: int
    val_nll: float = float("nan")

    def predict_log(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean and log-variance of ``log1p(seconds)``; shrinkage is baked into leaves."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        mu = np.full(len(X), self.base_mu)
        lv = np.full(len(X), self.base_logvar)
        for t in self.trees_mu:
            mu += t.predict(X)
        for t in self.trees_logvar:
            lv += t.predict(X)
        return mu, np.clip(lv, LOGVAR_FLOOR, LOGVAR_CEIL)

    def to_dict(self) -> dict:
        return {
            "base_mu": self.base_mu,
            "base_logvar": self.base_logvar,
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "n_estimators": self.n_estimators,
            "val_nll": self.val_nll,
            "trees_mu": [t.to_dict() for t in self.trees_mu],
            "trees_logvar": [t.to_dict() for t in self.trees_logvar],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtModel":
        return cls(
            [Tree.from_dict(t) for t in d["trees_mu"]],
            [Tree.from_dict(t) for t in d["trees_logvar"]],
            float(d["base_mu"]),
            float(d["base_logvar"]),
            float(d["learning_rate"]),
            int(d["max_depth"]),
            int(d["n_estimators"]),
            float(d.get("val_nll", "nan")),
        )


def _split(n: int, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(frac * n))
    if frac > 0:
        n_val = max(1, n_val)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _subsample(n: int, frac: float, rng: np.random.Generator) -> np.ndarray:
    if frac >= 1.0:
        return np.arange(n)
    k = max(1, int(round(frac * n)))
    return np.sort(rng.choice(n, size=k, replace=False))


def _check(X, y_seconds, params):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y_seconds, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per target")
    if len(y) < params.min_pool:
        raise UnderTrainedError(f"need at least {params.min_pool} training queries, have {len(y)}")
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValueError("exec-times must be finite and >= 0")
    return X, np.log1p(y)


def _nll(mu, lv, y):
    return float(np.mean(0.5 * lv + 0.5 * (y - mu) ** 2 * np.exp(-lv)))


def fit_gbdt(X, y_seconds, params: TreeParams = TreeParams(), seed: int = 0) -> GbdtModel:
    """Boost a mean head and a log-variance head jointly.

    Each round fits one tree per head to the Fisher-scaled negative gradient
    of the Gaussian NLL (residual for the mean, standardized squared residual
    minus one for the log-variance), with row subsampling and shrinkage.
    Training stops once validation NLL has not improved for ``patience``
    rounds and the best prefix is kept.
    """
    X, y = _check(X, y_seconds, params)
    rng = np.random.default_rng(seed)
    tr, va = _split(len(y), params.validation_fraction, rng)
    Xtr, ytr = X[tr], y[tr]
    binner = Binner(Xtr, params.max_bins)
    bins = binner.transform(Xtr)

    base_mu = float(ytr.mean())
    var = float(ytr.var())
    base_lv = float(np.clip(np.log(var), LOGVAR_FLOOR, LOGVAR_CEIL)) if var > 0 else LOGVAR_FLOOR
    # raw (unclipped) log-variance sums; the model clips only its final output
    mu = np.full(len(ytr), base_mu)
    lv_raw = np.full(len(ytr), base_lv)
    Xva, yva = X[va], y[va]
    mu_va = np.full(len(yva), base_mu)
    lv_va_raw = np.full(len(yva), base_lv)

    lr = params.learning_rate
    trees_mu: list[Tree] = []
    trees_lv: list[Tree] = []
    best = _nll(mu_va, lv_va_raw, yva) if len(yva) else np.inf
    best_round = 0
    for r in range(params.n_estimators):
        rows = _subsample(len(ytr), params.subsample, rng)
        resid = ytr - mu
        g_mu = resid[rows]
        lv = np.clip(lv_raw[rows], LOGVAR_FLOOR, LOGVAR_CEIL)
        g_lv = np.minimum(resid[rows] ** 2 * np.exp(-lv), _MAX_Z2) - 1.0
        t_mu, _ = grow_tree(bins, binner, rows, g_mu, params.max_depth, params.min_samples_leaf)
        t_lv, _ = grow_tree(bins, binner, rows, g_lv, params.max_depth, params.min_samples_leaf)
        t_mu.value *= lr
        t_lv.value *= lr
        trees_mu.append(t_mu)
        trees_lv.append(t_lv)
        mu += t_mu.predict(Xtr)
        lv_raw += t_lv.predict(Xtr)
        if len(yva):
            mu_va += t_mu.predict(Xva)
            lv_va_raw += t_lv.predict(Xva)
            cur = _nll(mu_va, np.clip(lv_va_raw, LOGVAR_FLOOR, LOGVAR_CEIL), yva)
            if cur < best - 1e-12:
                best, best_round = cur, r + 1
            elif r + 1 - best_round >= params.patience:
                break
        else:
            best_round = r + 1

    return GbdtModel(
        trees_mu[:best_round],
        trees_lv[:best_round],
        base_mu,
        base_lv,
        lr,
        params.max_depth,
        params.n_estimators,
        best,
    )


# --------------------------------------------------------------------------
# Absolute-error baseline
# --------------------------------------------------------------------------


@dataclass
class BaselineModel:
    trees: list[Tree]
    base: float
    learning_rate: float
    max_depth: int
    n_estimators: int
    val_mae: float = float("nan")

    @cached_property
    def forest(self) -> Forest:
        return Forest(self.trees, [0] * len(self.trees), 1)

    def predict_log(self, X: np.ndarray) -> np.ndarray:
        return self.forest.predict(X)[:, 0] + self.base

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Point prediction in seconds; there is no uncertainty output."""
        return np.expm1(self.predict_log(X))

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "n_estimators": self.n_estimators,
            "val_mae": self.val_mae,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineModel":
        return cls(
            [Tree.from_dict(t) for t in d["trees"]],
            float(d["base"]),
            float(d["learning_rate"]),
            int(d["max_depth"]),
            int(d["n_estimators"]),
            float(d.get("val_mae", "nan")),
        )


def _leaf_medians(leaf: np.ndarray, resid: np.ndarray, n_nodes: int) -> np.ndarray:
    out = np.zeros(n_nodes)
    order = np.lexsort((resid, leaf))
    leaf_s, res_s = leaf[order], resid[order]
    starts = np.flatnonzero(np.r_[True, leaf_s[1:] != leaf_s[:-1]])
    ends = np.r_[starts[1:], len(leaf_s)]
    for a, b in zip(starts, ends):
        out[leaf_s[a]] = np.median(res_s[a:b])
    return out


def fit_baseline(X, y_seconds, params: TreeParams = TreeParams(), seed: int = 0) -> BaselineModel:
    """Least-absolute-deviation boosting on ``log1p(seconds)``.

    Trees are grown on the sign of the residual; each leaf then takes the
    median residual of its rows.
    """
    X, y = _check(X, y_seconds, params)
    rng = np.random.default_rng(seed)
    tr, va = _split(len(y), params.validation_fraction, rng)
    Xtr, ytr = X[tr], y[tr]
    binner = Binner(Xtr, params.max_bins)
    bins = binner.transform(Xtr)
    base = float(np.median(ytr))
    pred = np.full(len(ytr), base)
    Xva, yva = X[va], y[va]
    pred_va = np.full(len(yva), base)
    lr = params.learning_rate

    trees: list[Tree] = []
    best = float(np.mean(np.abs(yva - pred_va))) if len(yva) else np.inf
    best_round = 0
    for r in range(params.n_estimators):
        rows = _subsample(len(ytr), params.subsample, rng)
        resid = ytr[rows] - pred[rows]
        tree, leaf = grow_tree(bins, binner, rows, np.sign(resid), params.max_depth, params.min_samples_leaf)
        tree.value = lr * _leaf_medians(leaf, resid, tree.n_nodes)
        trees.append(tree)
        pred += tree.predict(Xtr)
        if len(yva):
            pred_va += tree.predict(Xva)
            cur = float(np.mean(np.abs(yva - pred_va)))
            if cur < best - 1e-12:
                best, best_round = cur, r + 1
            elif r + 1 - best_round >= params.patience:
                break
        else:
            best_round = r + 1
    return BaselineModel(trees[:best_round], base, lr, params.max_depth, params.n_estimators, best)
