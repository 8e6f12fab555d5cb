"""Instance-local stage: an ensemble of probabilistic boosted-tree models.

Each member predicts a mean and variance of ``log1p(seconds)``. The ensemble
mean is the average member mean; the total variance splits into the spread
of member means (model uncertainty) plus the average member variance (data
uncertainty).
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .cache import ExecCache
from .gbdt import LOGVAR_CEIL, LOGVAR_FLOOR, Forest, GbdtModel, TreeParams, UnderTrainedError, fit_gbdt
from .plan import N_LOCAL, QueryFeatures, hash_features

SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class Prediction:
    mean: float  # seconds
    model_uncertainty: float  # seconds^2
    data_uncertainty: float
    total_uncertainty: float
    mean_log: float  # log1p(seconds)
    model_uncertainty_log: float
    data_uncertainty_log: float
    total_uncertainty_log: float

    @property
    def cov_log(self) -> float:
        """Coefficient of variation in log space, the scale-free confidence score."""
        if self.mean_log == 0.0:
            return float("inf")
        return float(np.sqrt(self.total_uncertainty_log) / abs(self.mean_log))


def combine(mus, variances):
    """Ensemble mean, model, data and total variance over the last axis."""
    mus = np.asarray(mus, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    mean = mus.mean(axis=-1)
    model = np.mean((np.expand_dims(mean, -1) - mus) ** 2, axis=-1)
    data = variances.mean(axis=-1)
    return mean, model, data, model + data


def to_seconds(mean_log, model_log, data_log):
    """Back-transform log-space moments to seconds by the delta method."""
    mean_log = np.asarray(mean_log, dtype=np.float64)
    slope2 = np.exp(2.0 * mean_log)
    model_s = slope2 * model_log
    data_s = slope2 * data_log
    return np.expm1(mean_log), model_s, data_s, model_s + data_s


class Ensemble:
    """K independently seeded :class:`GbdtModel` members."""

    def __init__(self, members: list[GbdtModel], params: TreeParams | None = None):
        if not members:
            raise ValueError("an ensemble needs at least one member")
        self.members = list(members)
        self.params = params or TreeParams()
        self._pack()

    @property
    def K(self) -> int:
        return len(self.members)

    def _pack(self):
        trees, groups = [], []
        for m, member in enumerate(self.members):
            trees += member.trees_mu
            groups += [2 * m] * len(member.trees_mu)
            trees += member.trees_logvar
            groups += [2 * m + 1] * len(member.trees_logvar)
        self._forest = Forest(trees, groups, 2 * self.K)
        self._base = np.empty(2 * self.K)
        self._base[0::2] = [m.base_mu for m in self.members]
        self._base[1::2] = [m.base_logvar for m in self.members]

    def member_outputs(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-member (mu, logvar), each of shape (n, K)."""
        out = self._forest.predict(X)
        out += self._base
        return out[:, 0::2], np.clip(out[:, 1::2], LOGVAR_FLOOR, LOGVAR_CEIL)

    def predict_arrays(self, X: np.ndarray) -> dict[str, np.ndarray]:
        mu, lv = self.member_outputs(X)
        mean, model, data, total = combine(mu, np.exp(lv))
        mean_s, model_s, data_s, total_s = to_seconds(mean, model, data)
        return {
            "mean": mean_s,
            "model_uncertainty": model_s,
            "data_uncertainty": data_s,
            "total_uncertainty": total_s,
            "mean_log": mean,
            "model_uncertainty_log": model,
            "data_uncertainty_log": data,
            "total_uncertainty_log": total,
        }

    def predict(self, features: QueryFeatures | np.ndarray) -> Prediction:
        x = features.values if isinstance(features, QueryFeatures) else np.asarray(features, dtype=np.float64)
        arr = self.predict_arrays(x.reshape(1, -1))
        return Prediction(**{k: float(v[0]) for k, v in arr.items()})

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": SNAPSHOT_VERSION,
            "K": self.K,
            "hyperparams": self.params.to_dict(),
            "members": [m.to_dict() for m in self.members],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        if d.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported ensemble snapshot version {d.get('version')!r}")
        members = [GbdtModel.from_dict(m) for m in d["members"]]
        if len(members) != d["K"]:
            raise ValueError("member count does not match K")
        return cls(members, TreeParams(**d["hyperparams"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Ensemble":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def member_seeds(seed: int, K: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(K)]


def fit_ensemble(X, y_seconds, params: TreeParams = TreeParams(), K: int = 10, seed: int = 0) -> Ensemble:
    if K < 1:
        raise ValueError("K must be >= 1")
    members = [fit_gbdt(X, y_seconds, params, s) for s in member_seeds(seed, K)]
    return Ensemble(members, params)


# --------------------------------------------------------------------------
# Training pool
# --------------------------------------------------------------------------

BUCKET_EDGES = (10.0, 60.0)
BUCKET_NAMES = ("0-10s", "10-60s", "60s+")


def bucket_of(seconds: float) -> int:
    if seconds < BUCKET_EDGES[0]:
        return 0
    if seconds < BUCKET_EDGES[1]:
        return 1
    return 2


class TrainingPool:
    """Deduplicated, duration-bucketed store of (features, exec-time) pairs.

    Each bucket is capped separately so short queries cannot crowd out the
    long ones; a full bucket drops its oldest entry.
    """

    def __init__(self, capacities: tuple[int, int, int] = (6000, 3000, 1000)):
        if len(capacities) != 3 or min(capacities) < 1:
            raise ValueError("need three positive bucket capacities")
        self.capacities = tuple(int(c) for c in capacities)
        self.buckets: list[deque] = [deque() for _ in capacities]
        self.total_added = 0

    def __len__(self) -> int:
        return sum(len(b) for b in self.buckets)

    def add(self, features: QueryFeatures, observed: float, seq: int, cache: ExecCache | None = None, key: int | None = None) -> bool:
        if observed < 0:
            raise ValueError("observed exec-time must be >= 0")
        if cache is not None:
            if key is None:
                key = hash_features(features)
            if cache.lookup(key) is not None:
                return False
        b = self.buckets[bucket_of(observed)]
        if len(b) >= self.capacities[bucket_of(observed)]:
            b.popleft()
        b.append((features.values, float(observed), seq))
        self.total_added += 1
        return True

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """Immutable (X, y_seconds) copy ordered by seq."""
        rows = sorted((e for b in self.buckets for e in b), key=lambda e: e[2])
        if not rows:
            return np.zeros((0, N_LOCAL)), np.zeros(0)
        return np.vstack([r[0] for r in rows]), np.array([r[1] for r in rows])


def pool_add(pool: TrainingPool, features: QueryFeatures, observed: float, cache: ExecCache, seq: int) -> bool:
    return pool.add(features, observed, seq, cache)


__all__ = [
    "Ensemble",
    "Prediction",
    "TrainingPool",
    "UnderTrainedError",
    "bucket_of",
    "combine",
    "fit_ensemble",
    "pool_add",
    "to_seconds",
]
