"""Discrete-event replay of a two-queue workload manager.

Predicted exec-times decide the queue (short vs long) and the order within
it; true exec-times decide how long a query holds its slot. Prediction error
therefore moves wait time only.
"""
from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .plan import PlanGraph, QueryFeatures, QueryPlan, SystemContext


@dataclass(frozen=True, eq=False)
class QueryEvent:
    query_id: str
    arrival: float  # seconds
    true_exec: float  # seconds
    plan: QueryPlan
    context: SystemContext

    def __post_init__(self):
        if not (math.isfinite(self.arrival) and self.arrival >= 0):
            raise ValueError(f"{self.query_id}: arrival must be finite and >= 0")
        if not (math.isfinite(self.true_exec) and self.true_exec > 0):
            raise ValueError(f"{self.query_id}: true_exec must be finite and > 0")

    @property
    def features(self) -> QueryFeatures:
        return self.plan.features

    @property
    def key(self) -> int:
        return self.plan.key

    @property
    def graph(self) -> PlanGraph:
        return self.plan.graph


@dataclass(frozen=True)
class SimConfig:
    short_threshold: float = 10.0
    short_slots: int = 2
    long_slots: int = 4
    charge_inference: bool = True

    def __post_init__(self):
        if self.short_slots < 1 or self.long_slots < 1:
            raise ValueError("each queue needs at least one slot")
        if not self.short_threshold > 0:
            raise ValueError("short_threshold must be positive")


class Predictor(Protocol):
    def predict(self, event: QueryEvent): ...

    def observe(self, event: QueryEvent, seq: int) -> None: ...


class OraclePredictor:
    """Feeds the true exec-time to the scheduler at zero cost."""

    def predict(self, event: QueryEvent):
        from .dispatch import StagedPrediction

        return StagedPrediction(event.true_exec, "Oracle", None, 0.0)

    def observe(self, event: QueryEvent, seq: int) -> None:
        pass


SIM_COLUMNS = (
    "query_id",
    "arrival",
    "predicted",
    "true_exec",
    "wait",
    "exec",
    "inference",
    "latency",
    "queue",
    "stage",
    "uncertainty",
)


@dataclass
class SimResult:
    rows: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    @property
    def summary(self) -> dict:
        from .metrics import nearest_rank

        if not self.rows:
            return {"n": 0, "mean": 0.0, "p50": 0.0, "p90": 0.0}
        lat = self.column("latency")
        return {
            "n": len(lat),
            "mean": float(lat.mean()),
            "p50": nearest_rank(lat, 50),
            "p90": nearest_rank(lat, 90),
        }

    def stage_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.rows:
            counts[r["stage"]] = counts.get(r["stage"], 0) + 1
        return counts

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SIM_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k])) for k in SIM_COLUMNS})

    @classmethod
    def from_csv(cls, path) -> "SimResult":
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                missing = [c for c in ("query_id", "latency") if c not in r]
                if missing:
                    raise ValueError(f"{path}: missing column(s) {missing}")
                row = dict(r)
                for k in ("arrival", "predicted", "true_exec", "wait", "exec", "inference", "latency", "uncertainty"):
                    if k in row:
                        row[k] = float(row[k]) if row[k] not in ("", None) else None
                rows.append(row)
        return cls(rows)

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({**self.summary, "stages": self.stage_counts()}, fh, indent=2, sort_keys=True)


_COMPLETE, _ARRIVE, _READY = 0, 1, 2


def check_sorted(workload: Sequence[QueryEvent]) -> None:
    for a, b in zip(workload, workload[1:]):
        if (b.arrival, b.query_id) < (a.arrival, a.query_id):
            raise ValueError(f"workload not sorted by arrival: {b.query_id} after {a.query_id}")


def simulate(workload: Sequence[QueryEvent], predictor, config: SimConfig = SimConfig()) -> SimResult:
    """Replay ``workload`` through the two-queue manager.

    Each queue serves its waiting queries shortest-predicted-first (ties by
    arrival, then query id) and never preempts. All events sharing a
    timestamp are applied before any slot is filled: completions first, then
    arrivals, then queries whose inference has finished.
    """
    check_sorted(workload)
    n = len(workload)
    rows: list[dict | None] = [None] * n
    events: list[tuple] = []
    for i, ev in enumerate(workload):
        events.append((ev.arrival, _ARRIVE, i))
    heapq.heapify(events)
    free = [config.short_slots, config.long_slots]
    waiting: list[list] = [[], []]
    ready_at = [0.0] * n
    pred_of: list = [None] * n
    seq = 0

    while events:
        now = events[0][0]
        while events and events[0][0] == now:
            _, kind, i = heapq.heappop(events)
            ev = workload[i]
            if kind == _COMPLETE:
                free[rows[i]["_q"]] += 1
                seq += 1
                predictor.observe(ev, seq)
            elif kind == _ARRIVE:
                sp = predictor.predict(ev)
                pred_of[i] = sp
                cost = sp.inference_cost if config.charge_inference else 0.0
                ready_at[i] = ev.arrival + cost
                q = 0 if sp.value <= config.short_threshold else 1
                rows[i] = {"_q": q}
                if ready_at[i] == now:
                    heapq.heappush(waiting[q], (sp.value, ev.arrival, ev.query_id, i))
                else:
                    heapq.heappush(events, (ready_at[i], _READY, i))
            else:
                q = rows[i]["_q"]
                heapq.heappush(waiting[q], (pred_of[i].value, ev.arrival, ev.query_id, i))
        for q in (0, 1):
            while free[q] and waiting[q]:
                _, _, _, i = heapq.heappop(waiting[q])
                free[q] -= 1
                ev = workload[i]
                sp = pred_of[i]
                end = now + ev.true_exec
                rows[i].update(
                    query_id=ev.query_id,
                    arrival=ev.arrival,
                    predicted=float(sp.value),
                    true_exec=ev.true_exec,
                    wait=now - ready_at[i],
                    exec=ev.true_exec,
                    inference=ready_at[i] - ev.arrival,
                    latency=end - ev.arrival,
                    queue="short" if q == 0 else "long",
                    stage=sp.stage,
                    uncertainty=sp.local_uncertainty,
                )
                heapq.heappush(events, (end, _COMPLETE, i))

    for r in rows:
        r.pop("_q", None)
    return SimResult(rows)  # type: ignore[arg-type]


def run_oracle(workload: Sequence[QueryEvent], config: SimConfig = SimConfig()) -> SimResult:
    return simulate(workload, OraclePredictor(), config)


METRICS = ("mean", "p50", "p90")


def compare(results: Mapping[str, SimResult], baseline: str | None = None) -> list[dict]:
    """Percentage latency improvement of every result over ``baseline``.

    ``baseline`` defaults to the last entry. One row per (result, metric).
    """
    if not results:
        return []
    names = list(results)
    ref_name = baseline if baseline is not None else names[-1]
    if ref_name not in results:
        raise KeyError(f"unknown baseline {ref_name!r}")
    ref = results[ref_name].summary
    out = []
    for name in names:
        s = results[name].summary
        for m in METRICS:
            base = ref[m]
            pct = 0.0 if base == 0 else 100.0 * (base - s[m]) / base
            out.append({"name": name, "metric": m, "value": s[m], "baseline": ref_name, "improvement_pct": pct})
    return out


def write_report(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("name", "metric", "value", "baseline", "improvement_pct"))
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": repr(float(r["value"])), "improvement_pct": f"{r['improvement_pct']:.1f}"})
