"""Stage orchestration: exec-time cache, then local ensemble, then global model."""
from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from . import gcn
from .cache import ExecCache
from .gbdt import BaselineModel, TreeParams, UnderTrainedError, fit_baseline
from .local import Ensemble, TrainingPool, fit_ensemble

STAGES = ("Cache", "Local", "Global", "Fallback")


@dataclass(frozen=True)
class StagedPrediction:
    value: float  # seconds
    stage: str
    local_uncertainty: float | None = None  # total variance, seconds^2
    inference_cost: float = 0.0  # seconds

    def to_dict(self, query_id: str) -> dict:
        return {
            "query_id": query_id,
            "stage": self.stage,
            "value_s": self.value,
            "uncertainty": self.local_uncertainty,
            "inference_cost_s": self.inference_cost,
        }


@dataclass(frozen=True)
class DispatchConfig:
    t_long: float = 2.0
    cov_threshold: float = 0.5
    stage_costs: dict = field(default_factory=lambda: {"cache": 2e-6, "local": 1e-4, "global": 0.1})

    def __post_init__(self):
        if not self.t_long > 0:
            raise ValueError("t_long must be positive")
        if not self.cov_threshold > 0:
            raise ValueError("cov_threshold must be positive")
        if set(self.stage_costs) != {"cache", "local", "global"} or min(self.stage_costs.values()) < 0:
            raise ValueError("stage_costs needs nonnegative cache, local and global entries")


@dataclass(frozen=True)
class RetrainPolicy:
    every: int = 500  # new pool entries between retrains
    params: TreeParams = TreeParams()
    K: int = 10
    seed: int = 0


class RunningMedian:
    """Median of a growing stream, via two heaps."""

    def __init__(self):
        self._lo: list[float] = []  # max-heap by negation
        self._hi: list[float] = []

    def __len__(self) -> int:
        return len(self._lo) + len(self._hi)

    def add(self, x: float) -> None:
        if self._lo and x > -self._lo[0]:
            heapq.heappush(self._hi, x)
        else:
            heapq.heappush(self._lo, -x)
        if len(self._lo) > len(self._hi) + 1:
            heapq.heappush(self._hi, -heapq.heappop(self._lo))
        elif len(self._hi) > len(self._lo):
            heapq.heappush(self._lo, -heapq.heappop(self._hi))

    def value(self, default: float = 1.0) -> float:
        if not self._lo:
            return default
        if len(self._lo) > len(self._hi):
            return -self._lo[0]
        return (-self._lo[0] + self._hi[0]) / 2.0


class StagePredictor:
    """Per-instance predictor state.

    ``predict`` never mutates state. ``observe`` feeds an executed query back
    into the training pool (deduplicated against the cache as it was before
    this observation) and then into the cache, and retrains the local
    ensemble when enough new pool entries have accumulated.
    """

    def __init__(
        self,
        config: DispatchConfig = DispatchConfig(),
        policy: RetrainPolicy = RetrainPolicy(),
        cache: ExecCache | None = None,
        pool: TrainingPool | None = None,
        local: Ensemble | None = None,
        global_model: gcn.GcnModel | None = None,
        auto_retrain: bool = True,
        trace: IO[str] | None = None,
    ):
        self.config = config
        self.policy = policy
        self.cache = cache if cache is not None else ExecCache()
        self.pool = pool if pool is not None else TrainingPool()
        self.local = local
        self.global_model = global_model
        self.auto_retrain = auto_retrain
        self.trace = trace
        self.version = 0
        self.new_entries = 0
        self.median = RunningMedian()

    # -- prediction -------------------------------------------------------------

    def predict_plan(self, plan, ctx) -> StagedPrediction:
        costs = self.config.stage_costs
        hit = self.cache.predict(plan.key)
        if hit is not None:
            return StagedPrediction(hit, "Cache", None, costs["cache"])
        local = self.local  # one read, so a concurrent swap cannot mix models
        if local is not None:
            p = local.predict(plan.features)
            if p.mean <= self.config.t_long or p.cov_log <= self.config.cov_threshold:
                return StagedPrediction(p.mean, "Local", p.total_uncertainty, costs["local"])
            if self.global_model is None:
                # an uncertain local estimate still beats the instance median
                return StagedPrediction(p.mean, "Local", p.total_uncertainty, costs["local"])
            g = gcn.predict_seconds(self.global_model, plan.graph, ctx)
            return StagedPrediction(g, "Global", p.total_uncertainty, costs["global"])
        if self.global_model is not None:
            g = gcn.predict_seconds(self.global_model, plan.graph, ctx)
            return StagedPrediction(g, "Global", None, costs["global"])
        return StagedPrediction(self.median.value(), "Fallback", None, costs["cache"])

    def predict(self, event) -> StagedPrediction:
        sp = self.predict_plan(event.plan, event.context)
        if self.trace is not None:
            self.trace.write(json.dumps(sp.to_dict(event.query_id)) + "\n")
        return sp

    # -- feedback ---------------------------------------------------------------

    def observe_plan(self, plan, observed: float, seq: int) -> None:
        if not (math.isfinite(observed) and observed >= 0):
            raise ValueError(f"observed exec-time must be finite and >= 0, got {observed!r}")
        last = self.cache.last_seq
        if last is not None and seq <= last:
            raise ValueError(f"seq must increase: {seq} after {last}")
        accepted = self.pool.add(plan.features, observed, seq, self.cache, plan.key)
        self.cache.record(plan.key, observed, seq)
        self.median.add(observed)
        self.new_entries += accepted
        if self.auto_retrain:
            self.maybe_retrain()

    def observe(self, event, seq: int) -> None:
        self.observe_plan(event.plan, event.true_exec, seq)

    def maybe_retrain(self) -> bool:
        pol = self.policy
        if self.new_entries < pol.every or len(self.pool) < pol.params.min_pool:
            return False
        X, y = self.pool.snapshot()
        try:
            model = fit_ensemble(X, y, pol.params, pol.K, seed=pol.seed + self.version)
        except UnderTrainedError:
            return False
        self.local = model
        self.version += 1
        self.new_entries = 0
        return True


class BaselinePredictor:
    """Single absolute-error boosted model over a FIFO history, no cache."""

    def __init__(self, every: int = 500, capacity: int = 10_000, params: TreeParams = TreeParams(),
                 seed: int = 0, cost: float = 1e-4):
        self.every = every
        self.params = params
        self.seed = seed
        self.cost = cost
        self.history: deque = deque(maxlen=capacity)
        self.model: BaselineModel | None = None
        self.new_entries = 0
        self.version = 0
        self.median = RunningMedian()

    def predict_plan(self, plan, ctx=None) -> StagedPrediction:
        if self.model is None:
            return StagedPrediction(self.median.value(), "Fallback", None, 0.0)
        v = float(self.model.predict(plan.features.values.reshape(1, -1))[0])
        return StagedPrediction(max(v, 0.0), "Local", None, self.cost)

    def predict(self, event) -> StagedPrediction:
        return self.predict_plan(event.plan, event.context)

    def observe(self, event, seq: int) -> None:
        self.history.append((event.features.values, event.true_exec))
        self.median.add(event.true_exec)
        self.new_entries += 1
        if self.new_entries >= self.every and len(self.history) >= self.params.min_pool:
            X = np.vstack([h[0] for h in self.history])
            y = np.array([h[1] for h in self.history])
            try:
                self.model = fit_baseline(X, y, self.params, seed=self.seed + self.version)
            except UnderTrainedError:
                return
            self.version += 1
            self.new_entries = 0


def replay_sequential(events, predictor, start_seq: int = 1) -> list[StagedPrediction]:
    """Predict then immediately observe each event, in order."""
    out = []
    for i, ev in enumerate(events):
        out.append(predictor.predict(ev))
        predictor.observe(ev, start_seq + i)
    return out
