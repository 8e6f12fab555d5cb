import zlib

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stagepred.plan import PlanNode, QueryPlan, SystemContext
from stagepred.sim import QueryEvent

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def scan(cost=10.0, card=100.0, op="Seq Scan", fmt="Local", rows=1000.0, width=8):
    return PlanNode(op, cost, card, width, fmt, rows)


def join(left, right, cost=30.0, card=50.0, op="Hash Join DS_DIST_NONE"):
    return PlanNode(op, cost, card, 16, None, None, (left, right))


def event(qid, arrival, true_exec, tree=None, qtype="Select"):
    tree = tree if tree is not None else scan(cost=float(zlib.crc32(qid.encode()) % 1000 + 1))
    return QueryEvent(qid, arrival, true_exec, QueryPlan(tree, qtype), SystemContext().with_plan(tree))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
