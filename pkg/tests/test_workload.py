import json
from collections import defaultdict

import numpy as np
import pytest

from stagepred.plan import PlanError, featurize_local
from stagepred.workload import (
    Drift,
    WorkloadError,
    WorkloadSpec,
    export,
    fleet_specs,
    generate,
    ingest,
    random_plan,
    repeat_fraction,
    training_triples,
)


def _repeats_by_hand(events):
    # independent count: an event repeats iff an earlier event had the same feature vector
    seen, hits = set(), 0
    for ev in events:
        b = ev.features.values.tobytes() + ev.features.query_type.encode()
        hits += b in seen
        seen.add(b)
    return hits / len(events)


def test_fixed_seed_is_reproducible():
    spec = WorkloadSpec(n_queries=500, seed=4)
    a, b = generate(spec), generate(spec)
    assert [(e.query_id, e.arrival, e.true_exec, e.key) for e in a] == [(e.query_id, e.arrival, e.true_exec, e.key) for e in b]
    assert [e.key for e in generate(WorkloadSpec(n_queries=500, seed=5))] != [e.key for e in a]


def test_repeat_rate_near_target():
    events = generate(WorkloadSpec(n_queries=20_000, repeat_rate_target=0.6, seed=1))
    measured = _repeats_by_hand(events)
    assert abs(measured - 0.6) <= 0.02
    assert repeat_fraction(events) == measured


def test_all_unique_when_nothing_repeats():
    events = generate(WorkloadSpec(n_queries=2000, n_templates=2000, repeat_rate_target=0.0, seed=2))
    assert _repeats_by_hand(events) == 0.0


def test_infeasible_target_reports_bound():
    with pytest.raises(WorkloadError, match="0.9"):
        generate(WorkloadSpec(n_queries=1000, n_templates=100, repeat_rate_target=0.5))
    # 100 templates over 1000 queries: at least 90% must repeat
    assert len(generate(WorkloadSpec(n_queries=1000, n_templates=100, repeat_rate_target=0.9))) == 1000


def test_latency_is_heavy_tailed():
    lat = np.array([e.true_exec for e in generate(WorkloadSpec(n_queries=5000, repeat_rate_target=0.0, seed=3))])
    assert np.quantile(lat, 0.99) / np.quantile(lat, 0.5) > 10
    assert lat.min() >= 1e-3


def test_repeats_share_features_but_not_latency():
    events = generate(WorkloadSpec(n_queries=3000, seed=6))
    by_key = defaultdict(list)
    for e in events:
        by_key[e.key].append(e)
    multi = [v for v in by_key.values() if len(v) >= 3]
    assert multi
    for group in multi:
        assert len({featurize_local(e.plan.tree, e.plan.query_type) for e in group}) == 1
    assert any(len({e.true_exec for e in g}) > 1 for g in multi)


def test_drift_scales_later_templates():
    base = generate(WorkloadSpec(n_queries=400, seed=7, noise_sigma=0.0))
    drift = generate(WorkloadSpec(n_queries=400, seed=7, noise_sigma=0.0, drift=Drift(0.5, 2.0)))
    assert [e.key for e in base] == [e.key for e in drift]
    first_at = {}
    for i, e in enumerate(base):
        first_at.setdefault(e.key, i)
    for a, b in zip(base, drift):
        ratio = b.true_exec / a.true_exec
        if first_at[a.key] >= 200 and a.true_exec > 0.01:
            assert ratio == pytest.approx(2.0, rel=1e-3)
        elif first_at[a.key] < 200:
            assert ratio == 1.0


def test_arrivals_sorted_and_poisson():
    events = generate(WorkloadSpec(n_queries=5000, arrival_rate=4.0, seed=8))
    arr = np.array([e.arrival for e in events])
    assert np.all(np.diff(arr) >= 0)
    assert np.mean(np.diff(arr)) == pytest.approx(0.25, rel=0.05)


def test_export_ingest_round_trip(tmp_path):
    events = generate(WorkloadSpec(n_queries=300, seed=9, drift=Drift()))
    export(events, tmp_path / "w.jsonl")
    back = ingest(tmp_path / "w.jsonl")
    assert [(e.query_id, e.arrival, e.true_exec, e.key, e.context) for e in back] == [
        (e.query_id, e.arrival, e.true_exec, e.key, e.context) for e in events
    ]


def test_ingest_sorts_by_arrival(tmp_path):
    events = generate(WorkloadSpec(n_queries=2, seed=10))
    export(events[::-1], tmp_path / "w.jsonl")
    assert [e.query_id for e in ingest(tmp_path / "w.jsonl")] == [e.query_id for e in events]


def test_ingest_requires_observed_ms(tmp_path):
    events = generate(WorkloadSpec(n_queries=2, seed=11))
    export(events, tmp_path / "w.jsonl")
    lines = (tmp_path / "w.jsonl").read_text().splitlines()
    rec = json.loads(lines[1])
    del rec["observed_ms"]
    (tmp_path / "w.jsonl").write_text(lines[0] + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(PlanError) as exc:
        ingest(tmp_path / "w.jsonl")
    assert "observed_ms" in str(exc.value) and exc.value.line == 2


def test_random_plan_costs_are_cumulative():
    rng = np.random.default_rng(12)
    for _ in range(50):
        tree = random_plan(rng, 1234.5)
        assert tree.est_cost == pytest.approx(1234.5)
        assert 1 <= tree.size <= 30
        for node in tree.iter_nodes():
            assert node.est_cost >= sum(c.est_cost for c in node.children) - 1e-9


def test_spec_validation_and_dict_round_trip():
    with pytest.raises(WorkloadError):
        WorkloadSpec(repeat_rate_target=1.5)
    with pytest.raises(WorkloadError):
        WorkloadSpec(template_popularity=1.0)
    with pytest.raises(WorkloadError):
        WorkloadSpec.from_dict({"n_queries": 5, "bogus": 1})
    spec = WorkloadSpec(n_queries=7, drift=Drift(0.25, 3.0), seed=3)
    assert WorkloadSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_fleet_is_unique_and_varied():
    specs = fleet_specs(3, 50, seed=1)
    events = [e for s in specs for e in generate(s)]
    assert len(training_triples(events)) == len(events)
    assert len({s.seed for s in specs}) == 3
