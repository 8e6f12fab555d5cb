"""Synthetic workloads with exact repeats, heavy-tailed latency and drift.

A workload is a stream of executions of plan templates. A fixed fraction of
executions are exact repeats of an earlier template; which template repeats
is drawn from a Zipf law over recency rank, so recently run queries are the
likeliest to come back. Plan costs are noisy estimates of a template's true
latency, and the noise grows with the number of joins.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .plan import (
    INSTANCE_TYPES,
    TABLE_FORMATS,
    PlanError,
    PlanNode,
    QueryPlan,
    SystemContext,
    dump_plan_log,
    parse_plan_log,
    record_to_dict,
    snap_seconds,
)
from .sim import QueryEvent

MIN_LATENCY = 1e-3
MAX_LATENCY = 86400.0
COST_PER_SECOND = 1e4  # estimated cost units one compute node burns per second


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class Drift:
    start_fraction: float = 0.5
    latency_scale: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.start_fraction <= 1.0:
            raise WorkloadError("drift.start_fraction must lie in [0, 1]")
        if not self.latency_scale > 0:
            raise WorkloadError("drift.latency_scale must be positive")


@dataclass(frozen=True)
class WorkloadSpec:
    n_queries: int = 10_000
    n_templates: int | None = None  # defaults to n_queries
    repeat_rate_target: float = 0.6
    latency_lognormal: tuple[float, float] = (0.0, 2.0)
    template_popularity: float = 1.5  # Zipf exponent over recency rank
    noise_sigma: float = 0.2
    drift: Drift | None = None
    arrival_rate: float = 1.0  # queries per second
    seed: int = 0
    instance_type: str = "ra3.4xlarge"
    node_count: int = 2
    memory_gb: float = 96.0
    estimate_sigma: float = 0.1
    estimate_sigma_per_join: float = 0.1
    prefix: str = "q"

    def __post_init__(self):
        if self.n_queries < 1:
            raise WorkloadError("n_queries must be positive")
        if self.n_templates is not None and self.n_templates < 1:
            raise WorkloadError("n_templates must be positive")
        if not 0.0 <= self.repeat_rate_target <= 1.0:
            raise WorkloadError("repeat_rate_target must lie in [0, 1]")
        mu, sigma = self.latency_lognormal
        if not (math.isfinite(mu) and sigma >= 0):
            raise WorkloadError("latency_lognormal needs finite mu and sigma >= 0")
        if not self.template_popularity > 1.0:
            raise WorkloadError("template_popularity (Zipf exponent) must exceed 1")
        if self.noise_sigma < 0 or self.estimate_sigma < 0 or self.estimate_sigma_per_join < 0:
            raise WorkloadError("noise scales must be >= 0")
        if not self.arrival_rate > 0:
            raise WorkloadError("arrival_rate must be positive")
        if self.instance_type not in INSTANCE_TYPES:
            raise WorkloadError(f"instance_type must be one of {INSTANCE_TYPES}")
        if self.node_count < 1 or not self.memory_gb > 0:
            raise WorkloadError("node_count and memory_gb must be positive")

    @property
    def templates(self) -> int:
        return self.n_queries if self.n_templates is None else self.n_templates

    @property
    def n_fresh(self) -> int:
        """Number of first-time executions needed to hit the repeat target."""
        return max(1, int(round(self.n_queries * (1.0 - self.repeat_rate_target))))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latency_lognormal"] = list(self.latency_lognormal)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise WorkloadError(f"unknown spec field(s): {sorted(unknown)}")
        d = dict(d)
        if d.get("drift") is not None:
            d["drift"] = Drift(**d["drift"])
        if "latency_lognormal" in d:
            d["latency_lognormal"] = tuple(d["latency_lognormal"])
        return cls(**d)


# --------------------------------------------------------------------------
# Random plan trees
# --------------------------------------------------------------------------

_SCANS = ("Seq Scan", "Seq Scan", "Seq Scan", "S3 Seq Scan", "Index Scan", "Zone Map Scan", "Spectrum Seq Scan")
_HASH_JOINS = ("Hash Join DS_DIST_NONE", "Hash Join DS_BCAST_INNER", "Hash Join DS_DIST_INNER",
               "Hash Left Join DS_DIST_NONE", "Hash Join DS_DIST_BOTH")
_OTHER_JOINS = ("Merge Join", "Nested Loop DS_BCAST_INNER", "Nested Loop DS_DIST_NONE")
_NETWORK = ("Distribute", "Broadcast", "Redistribute")
_AGGS = ("HashAggregate", "Aggregate", "GroupAggregate")
_QUERY_TYPES = ("Select", "Insert", "Update", "Delete")
_QUERY_TYPE_P = (0.9, 0.05, 0.03, 0.02)


@dataclass
class _Draft:
    op: str
    work: float
    card: float
    width: int
    fmt: str | None = None
    rows: float | None = None
    children: list = field(default_factory=list)


def _loguniform(rng, lo, hi):
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _draft_plan(rng: np.random.Generator, n_scans: int) -> _Draft:
    subtrees = []
    for _ in range(n_scans):
        rows = float(round(_loguniform(rng, 1e3, 1e9)))
        subtrees.append(
            _Draft(
                op=_SCANS[rng.integers(len(_SCANS))],
                work=rng.exponential(),
                card=float(round(rows * _loguniform(rng, 1e-4, 1.0))) + 1.0,
                width=int(rng.integers(4, 257)),
                fmt=TABLE_FORMATS[rng.integers(len(TABLE_FORMATS))],
                rows=rows,
            )
        )
    while len(subtrees) > 1:
        outer = subtrees.pop(int(rng.integers(len(subtrees))))
        inner = subtrees.pop(int(rng.integers(len(subtrees))))
        if rng.random() < 0.3:
            inner = _Draft(_NETWORK[rng.integers(len(_NETWORK))], rng.exponential(), inner.card, inner.width, children=[inner])
        if rng.random() < 0.7:
            inner = _Draft("Hash", rng.exponential(), inner.card, inner.width, children=[inner])
            op = _HASH_JOINS[rng.integers(len(_HASH_JOINS))]
        else:
            op = _OTHER_JOINS[rng.integers(len(_OTHER_JOINS))]
        card = float(round(max(outer.card, inner.card) * _loguniform(rng, 0.05, 2.0))) + 1.0
        subtrees.append(_Draft(op, rng.exponential(), card, min(outer.width + inner.width, 2048), children=[outer, inner]))
    top = subtrees[0]
    if rng.random() < 0.5:
        top = _Draft(_AGGS[rng.integers(len(_AGGS))], rng.exponential(), float(round(top.card * _loguniform(rng, 1e-3, 1.0))) + 1.0, top.width, children=[top])
    if rng.random() < 0.3:
        top = _Draft("Sort", rng.exponential(), top.card, top.width, children=[top])
    if rng.random() < 0.2:
        top = _Draft("Limit", rng.exponential(), min(top.card, 100.0), top.width, children=[top])
    if rng.random() < 0.5:
        top = _Draft("Return", rng.exponential(), top.card, top.width, children=[top])
    return top


def _finish(d: _Draft, scale: float) -> tuple[PlanNode, float]:
    kids = [_finish(ch, scale) for ch in d.children]
    cost = d.work * scale + sum(c for _, c in kids)
    node = PlanNode(d.op, float(cost), float(d.card), d.width, d.fmt, d.rows, tuple(k for k, _ in kids))
    return node, cost


def _count_joins(d: _Draft) -> int:
    stack, n = [d], 0
    while stack:
        x = stack.pop()
        n += len(x.children) == 2
        stack.extend(x.children)
    return n


def random_plan(rng: np.random.Generator, root_cost: float, n_scans: int | None = None) -> PlanNode:
    """Random plan tree (1-25 nodes) whose cumulative root cost is ``root_cost``.

    Node costs are cumulative, as in EXPLAIN output: each node's cost covers
    its own work plus its inputs.
    """
    if n_scans is None:
        n_scans = int(rng.integers(1, 7))
    draft = _draft_plan(rng, n_scans)
    total_work = 0.0
    stack = [draft]
    while stack:
        x = stack.pop()
        total_work += x.work
        stack.extend(x.children)
    tree, _ = _finish(draft, root_cost / total_work)
    return tree


@dataclass(frozen=True)
class Template:
    plan: QueryPlan
    latency: float  # base seconds, drift included
    n_joins: int


def _make_template(rng: np.random.Generator, spec: WorkloadSpec, drifted: bool) -> Template:
    mu, sigma = spec.latency_lognormal
    latency = float(np.clip(math.exp(rng.normal(mu, sigma)), MIN_LATENCY, MAX_LATENCY))
    n_scans = int(rng.integers(1, 7))
    n_joins = n_scans - 1
    est_sigma = spec.estimate_sigma + spec.estimate_sigma_per_join * n_joins
    root_cost = latency * COST_PER_SECOND * spec.node_count * math.exp(rng.normal(0.0, est_sigma))
    tree = random_plan(rng, root_cost, n_scans)
    qtype = _QUERY_TYPES[int(rng.choice(len(_QUERY_TYPES), p=_QUERY_TYPE_P))]
    if qtype != "Select":
        tree = PlanNode(qtype, tree.est_cost * 1.05, tree.est_cardinality, tree.tuple_width, children=(tree,))
    if drifted:
        latency *= spec.drift.latency_scale
    return Template(QueryPlan(tree, qtype), latency, n_joins)


def _zipf_rank(rng: np.random.Generator, a: float, n: int) -> int:
    """1-based rank drawn from Zipf(a) truncated to [1, n]."""
    while True:
        k = int(rng.zipf(a))
        if k <= n:
            return k


def generate(spec: WorkloadSpec) -> list[QueryEvent]:
    """Deterministic event stream for ``spec``.

    Exactly ``spec.n_fresh`` executions introduce a new template, at random
    positions (the first execution always does), so the realized repeat rate
    is ``1 - n_fresh / n_queries``.
    """
    n = spec.n_queries
    n_fresh = spec.n_fresh
    if n_fresh > spec.templates:
        bound = 1.0 - spec.templates / n
        raise WorkloadError(
            f"repeat_rate_target {spec.repeat_rate_target} needs {n_fresh} templates but only "
            f"{spec.templates} exist; achievable repeat rate >= {bound:.6f}"
        )
    rng = np.random.default_rng(spec.seed)
    fresh = np.zeros(n, dtype=bool)
    fresh[0] = True
    if n_fresh > 1:
        fresh[1 + rng.choice(n - 1, size=n_fresh - 1, replace=False)] = True
    gaps = rng.exponential(1.0 / spec.arrival_rate, size=n)
    gaps[0] = 0.0
    arrivals = np.cumsum(gaps)
    noise = np.exp(rng.normal(0.0, spec.noise_sigma, size=n))

    base_ctx = SystemContext(spec.instance_type, spec.node_count, spec.memory_gb)
    drift_at = n if spec.drift is None else int(math.ceil(spec.drift.start_fraction * n))
    recent: list[tuple[Template, SystemContext]] = []  # most recent last
    events = []
    width = max(7, len(str(n - 1)))
    for i in range(n):
        if fresh[i]:
            t = _make_template(rng, spec, drifted=i >= drift_at)
            item = (t, base_ctx.with_plan(t.plan.tree))
        else:
            k = _zipf_rank(rng, spec.template_popularity, len(recent))
            item = recent.pop(len(recent) - k)
        recent.append(item)
        t, ctx = item
        true_exec = snap_seconds(max(MIN_LATENCY, t.latency * float(noise[i])))
        events.append(QueryEvent(f"{spec.prefix}{i:0{width}d}", snap_seconds(float(arrivals[i])), true_exec, t.plan, ctx))
    return events


def repeat_fraction(events: Sequence[QueryEvent]) -> float:
    """Fraction of events whose exact plan was seen earlier in the stream."""
    if not events:
        return 0.0
    seen: set = set()
    hits = 0
    for ev in events:
        k = ev.key
        hits += k in seen
        seen.add(k)
    return hits / len(events)


# --------------------------------------------------------------------------
# Plan-log files
# --------------------------------------------------------------------------


def export(events: Sequence[QueryEvent], path) -> None:
    Path(path).write_text(
        dump_plan_log(record_to_dict(e.query_id, e.arrival, e.plan, e.context, e.true_exec) for e in events)
    )


def ingest(path) -> list[QueryEvent]:
    """Read a plan-log file with observed exec-times into arrival-sorted events."""
    text = Path(path).read_text()
    records = parse_plan_log(text)
    events = []
    for rec in records:
        if rec.observed is None:
            line = _line_of(text, rec.query_id)
            raise PlanError("missing field", "observed_ms", line)
        if not rec.observed > 0:
            raise PlanError(f"must be > 0, got {rec.observed * 1000.0!r}", "observed_ms", _line_of(text, rec.query_id))
        events.append(QueryEvent(rec.query_id, rec.arrival, rec.observed, rec.plan, rec.context))
    events.sort(key=lambda e: (e.arrival, e.query_id))
    return events


def _line_of(text: str, query_id: str) -> int | None:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if raw.strip() and json.loads(raw).get("query_id") == query_id:
            return lineno
    return None


# --------------------------------------------------------------------------
# Fleet data for the global model
# --------------------------------------------------------------------------


def fleet_specs(n_instances: int, queries_per_instance: int, seed: int = 0) -> list[WorkloadSpec]:
    """Specs for a varied fleet of instances, each workload fully unique."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_instances):
        specs.append(
            WorkloadSpec(
                n_queries=queries_per_instance,
                repeat_rate_target=0.0,
                instance_type=INSTANCE_TYPES[int(rng.integers(len(INSTANCE_TYPES)))],
                node_count=int(rng.integers(1, 17)),
                memory_gb=float(2 ** rng.integers(4, 10)),
                seed=int(rng.integers(2**31)),
                prefix=f"i{i}-",
            )
        )
    return specs


def training_triples(events: Sequence[QueryEvent]):
    """(graph, context, seconds) for the first execution of every template."""
    seen: set = set()
    out = []
    for ev in events:
        if ev.key in seen:
            continue
        seen.add(ev.key)
        out.append((ev.graph, ev.context, ev.true_exec))
    return out
