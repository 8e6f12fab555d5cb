"""Physical plan trees and their two featurizations.

The flat featurization (33 slots) feeds the exec-time cache and the local
tree ensemble; the per-node graph featurization feeds the global GCN.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Sequence

import numpy as np

# --------------------------------------------------------------------------
# Operator catalog
# --------------------------------------------------------------------------

CATEGORIES = (
    "seq_scan",
    "index_scan",
    "hash",
    "hash_join",
    "merge_join",
    "nested_loop",
    "aggregate",
    "sort",
    "materialize",
    "network",
    "window",
    "limit",
    "subquery",
    "other",
)
CATEGORY_INDEX = {c: i for i, c in enumerate(CATEGORIES)}

_DIST = (
    "DS_DIST_NONE",
    "DS_DIST_ALL_NONE",
    "DS_DIST_INNER",
    "DS_DIST_OUTER",
    "DS_DIST_BOTH",
    "DS_BCAST_INNER",
    "DS_DIST_ALL_INNER",
)

_CATALOG_BY_CATEGORY: dict[str, list[str]] = {
    "seq_scan": [
        "Seq Scan",
        "S3 Seq Scan",
        "S3 Query Scan",
        "S3 Partition Scan",
        "Spectrum Seq Scan",
        "Seq Scan PG Catalog",
    ],
    "index_scan": [
        "Index Scan",
        "Index Only Scan",
        "Bitmap Heap Scan",
        "Bitmap Index Scan",
        "Zone Map Scan",
        "Range Restricted Scan",
        "Sort Key Scan",
        "S3 Index Scan",
    ],
    "hash": ["Hash", "Hash Probe", "Hash Build", "Bloom Filter"],
    "hash_join": (
        [f"Hash Join {d}" for d in _DIST]
        + [f"Hash Left Join {d}" for d in _DIST]
        + [f"Hash Right Join {d}" for d in ("DS_DIST_NONE", "DS_BCAST_INNER", "DS_DIST_BOTH")]
        + ["Hash Full Join DS_DIST_NONE", "Hash Full Join DS_DIST_BOTH"]
    ),
    "merge_join": ["Merge Join", "Merge Left Join", "Merge Right Join", "Merge Full Join"],
    "nested_loop": [
        "Nested Loop DS_DIST_NONE",
        "Nested Loop DS_BCAST_INNER",
        "Nested Loop DS_DIST_ALL_NONE",
        "Nested Loop DS_DIST_BOTH",
        "Nested Loop Left Join DS_DIST_NONE",
        "Nested Loop Left Join DS_BCAST_INNER",
    ],
    "aggregate": [
        "Aggregate",
        "HashAggregate",
        "GroupAggregate",
        "Partial Aggregate",
        "Final Aggregate",
        "Unique",
        "SetOp Intersect",
        "SetOp Except",
    ],
    "sort": ["Sort", "Merge", "Top-N Sort", "Incremental Sort"],
    "materialize": ["Materialize", "Result", "Append", "Project"],
    "network": [
        "Network",
        "Broadcast",
        "Distribute",
        "Return",
        "Send to Leader",
        "Receive",
        "Redistribute",
        "Gather",
    ],
    "window": ["Window", "WindowAgg", "Partition"],
    "limit": ["Limit", "Top-N Limit"],
    "subquery": [
        "Subquery Scan",
        "SubPlan",
        "InitPlan",
        "Recursive Union",
        "CTE",
        "CTE Scan",
        "Function Scan",
        "Values Scan",
    ],
    "other": [
        "Insert",
        "Delete",
        "Update",
        "Copy",
        "Unload",
        "Spectrum Filter",
    ],
}

OPERATORS: tuple[str, ...] = tuple(op for c in CATEGORIES for op in _CATALOG_BY_CATEGORY[c])
N_OPERATORS = len(OPERATORS)
assert N_OPERATORS == 90
OTHER_OP = N_OPERATORS  # one-hot slot for names outside the catalog
OPERATOR_INDEX = {op: i for i, op in enumerate(OPERATORS)}
OPERATOR_CATEGORY = {op: c for c in CATEGORIES for op in _CATALOG_BY_CATEGORY[c]}

SCAN_OPERATORS = frozenset(_CATALOG_BY_CATEGORY["seq_scan"] + _CATALOG_BY_CATEGORY["index_scan"])

TABLE_FORMATS = ("Parquet", "OpenCSV", "Text", "Local")
QUERY_TYPES = ("Select", "Insert", "Update", "Delete")
INSTANCE_TYPES = ("dc2.large", "dc2.8xlarge", "ra3.xlplus", "ra3.4xlarge", "ra3.16xlarge")

# local layout: 14 categories x (cost, card), 4 query-type one-hots, node count
N_LOCAL = 2 * len(CATEGORIES) + len(QUERY_TYPES) + 1
assert N_LOCAL == 33
QUERY_TYPE_OFFSET = 2 * len(CATEGORIES)
NODE_COUNT_SLOT = N_LOCAL - 1

# global node row: op one-hot (91) | cost, card, width | format one-hot (4) | rows | null flag
N_NODE_FEATURES = N_OPERATORS + 1 + 3 + len(TABLE_FORMATS) + 2
COST_COL = N_OPERATORS + 1
CARD_COL = COST_COL + 1
WIDTH_COL = COST_COL + 2
FORMAT_COL = COST_COL + 3
ROWS_COL = FORMAT_COL + len(TABLE_FORMATS)
NULL_COL = ROWS_COL + 1


class PlanError(ValueError):
    """Invalid plan content; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = "", line: int | None = None):
        self.path = path
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if path:
            where.append(path)
        super().__init__(f"{': '.join(where)}: {message}" if where else message)


def operator_category(op_type: str) -> str:
    return OPERATOR_CATEGORY.get(op_type, "other")


def is_scan(op_type: str) -> bool:
    return op_type in SCAN_OPERATORS


# --------------------------------------------------------------------------
# Plan tree
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanNode:
    op_type: str
    est_cost: float
    est_cardinality: float
    tuple_width: int = 0
    table_format: str | None = None
    table_rows: float | None = None
    children: tuple["PlanNode", ...] = ()

    def __post_init__(self):
        if not isinstance(self.children, tuple):
            object.__setattr__(self, "children", tuple(self.children))

    def iter_nodes(self):
        """Preorder traversal, iterative so deep chains do not hit the recursion limit."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def validate(self, path: str = "plan") -> None:
        stack = [(self, path)]
        while stack:
            node, p = stack.pop()
            for name in ("est_cost", "est_cardinality"):
                v = getattr(node, name)
                if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                    raise PlanError(f"must be finite and >= 0, got {v!r}", f"{p}.{name}")
            if not isinstance(node.tuple_width, (int, np.integer)) or node.tuple_width < 0:
                raise PlanError(f"must be a nonnegative integer, got {node.tuple_width!r}", f"{p}.tuple_width")
            if is_scan(node.op_type):
                if node.table_format not in TABLE_FORMATS:
                    raise PlanError(f"scan needs one of {TABLE_FORMATS}, got {node.table_format!r}", f"{p}.table_format")
                r = node.table_rows
                if r is None or not math.isfinite(r) or r < 0:
                    raise PlanError(f"scan needs finite table_rows >= 0, got {r!r}", f"{p}.table_rows")
            else:
                if node.table_format is not None:
                    raise PlanError("must be null for non-scan operators", f"{p}.table_format")
                if node.table_rows is not None:
                    raise PlanError("must be null for non-scan operators", f"{p}.table_rows")
            for i, ch in enumerate(node.children):
                stack.append((ch, f"{p}.children[{i}]"))

    @property
    def size(self) -> int:
        return sum(1 for _ in self.iter_nodes())

    @property
    def depth(self) -> int:
        best = 0
        stack = [(self, 1)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            stack.extend((ch, d + 1) for ch in node.children)
        return best

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "op": self.op_type,
            "cost": self.est_cost,
            "card": self.est_cardinality,
            "width": int(self.tuple_width),
        }
        if self.table_format is not None:
            out["format"] = self.table_format
        if self.table_rows is not None:
            out["rows"] = self.table_rows
        out["children"] = [ch.to_dict() for ch in self.children]
        return out

    @classmethod
    def from_dict(cls, d: dict, path: str = "plan") -> "PlanNode":
        if not isinstance(d, dict):
            raise PlanError("expected an object", path)
        try:
            op = d["op"]
        except KeyError:
            raise PlanError("missing field", f"{path}.op") from None
        if not isinstance(op, str):
            raise PlanError("must be a string", f"{path}.op")
        vals = {}
        for key, name in (("cost", "est_cost"), ("card", "est_cardinality")):
            if key not in d:
                raise PlanError("missing field", f"{path}.{name}")
            v = d[key]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise PlanError(f"must be a number, got {v!r}", f"{path}.{name}")
            vals[name] = float(v)
        width = d.get("width", 0)
        if isinstance(width, float) and width.is_integer():
            width = int(width)
        rows = d.get("rows")
        if rows is not None:
            if isinstance(rows, bool) or not isinstance(rows, (int, float)):
                raise PlanError(f"must be a number, got {rows!r}", f"{path}.table_rows")
            rows = float(rows)
        children = d.get("children", [])
        if not isinstance(children, list):
            raise PlanError("must be a list", f"{path}.children")
        return cls(
            op_type=op,
            est_cost=vals["est_cost"],
            est_cardinality=vals["est_cardinality"],
            tuple_width=width,
            table_format=d.get("format"),
            table_rows=rows,
            children=tuple(cls.from_dict(ch, f"{path}.children[{i}]") for i, ch in enumerate(children)),
        )


# --------------------------------------------------------------------------
# Local featurization + cache key
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QueryFeatures:
    values: np.ndarray
    query_type: str = "Select"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (N_LOCAL,):
            raise ValueError(f"feature vector must have length {N_LOCAL}, got shape {v.shape}")
        if self.query_type not in QUERY_TYPES:
            raise ValueError(f"unknown query type {self.query_type!r}")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __eq__(self, other):
        if not isinstance(other, QueryFeatures):
            return NotImplemented
        return self.query_type == other.query_type and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash_features(self)


def featurize_local(tree: PlanNode, query_type: str = "Select") -> QueryFeatures:
    v = np.zeros(N_LOCAL)
    n = 0
    for node in tree.iter_nodes():
        c = CATEGORY_INDEX[operator_category(node.op_type)]
        v[2 * c] += node.est_cost
        v[2 * c + 1] += node.est_cardinality
        n += 1
    v[QUERY_TYPE_OFFSET + QUERY_TYPES.index(query_type)] = 1.0
    v[NODE_COUNT_SLOT] = n
    return QueryFeatures(v, query_type)


HASH_SEED = b"stagepred-v1"


def canonical_bytes(f: QueryFeatures) -> bytes:
    # +0.0 folds -0.0 into 0.0 so equal vectors encode identically
    vals = np.ascontiguousarray(f.values + 0.0, dtype="<f8")
    return vals.tobytes() + QUERY_TYPES.index(f.query_type).to_bytes(1, "little")


def hash_features(f: QueryFeatures) -> int:
    """64-bit key over the canonical encoding, stable across processes."""
    digest = hashlib.blake2b(canonical_bytes(f), digest_size=8, key=HASH_SEED).digest()
    return int.from_bytes(digest, "little")


# --------------------------------------------------------------------------
# Global featurization
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PlanGraph:
    nodes: np.ndarray  # (n, N_NODE_FEATURES)
    edges: np.ndarray  # (e, 2) rows of (child, parent)
    root_index: int = 0

    def __eq__(self, other):
        if not isinstance(other, PlanGraph):
            return NotImplemented
        return (
            self.root_index == other.root_index
            and np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.edges, other.edges)
        )

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def to_dict(self) -> dict:
        return {
            "nodes": self.nodes.tolist(),
            "edges": self.edges.tolist(),
            "root_index": int(self.root_index),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlanGraph":
        nodes = np.asarray(d["nodes"], dtype=np.float64).reshape(-1, N_NODE_FEATURES)
        edges = np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2)
        return cls(nodes, edges, int(d["root_index"]))


def node_row(node: PlanNode) -> np.ndarray:
    row = np.zeros(N_NODE_FEATURES)
    row[OPERATOR_INDEX.get(node.op_type, OTHER_OP)] = 1.0
    row[COST_COL] = node.est_cost
    row[CARD_COL] = node.est_cardinality
    row[WIDTH_COL] = node.tuple_width
    if node.table_format is None:
        row[NULL_COL] = 1.0
    else:
        row[FORMAT_COL + TABLE_FORMATS.index(node.table_format)] = 1.0
        row[ROWS_COL] = node.table_rows or 0.0
    return row


def featurize_global(tree: PlanNode) -> PlanGraph:
    rows = []
    edges = []
    stack: list[tuple[PlanNode, int]] = [(tree, -1)]
    while stack:
        node, parent = stack.pop()
        idx = len(rows)
        rows.append(node_row(node))
        if parent >= 0:
            edges.append((idx, parent))
        stack.extend((ch, idx) for ch in reversed(node.children))
    return PlanGraph(
        np.vstack(rows),
        np.asarray(edges, dtype=np.int64).reshape(-1, 2),
        0,
    )


# --------------------------------------------------------------------------
# System context
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SystemContext:
    instance_type: str = "ra3.4xlarge"
    node_count: int = 2
    memory_gb: float = 96.0
    concurrent_queries: int = 0
    plan_summary: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if not isinstance(self.node_count, (int, np.integer)) or self.node_count < 1:
            raise PlanError(f"must be a positive integer, got {self.node_count!r}", "system.node_count")
        if not (math.isfinite(self.memory_gb) and self.memory_gb > 0):
            raise PlanError(f"must be positive, got {self.memory_gb!r}", "system.memory_gb")
        if not isinstance(self.concurrent_queries, (int, np.integer)) or self.concurrent_queries < 0:
            raise PlanError(f"must be a nonnegative integer, got {self.concurrent_queries!r}", "system.concurrent")
        s = tuple(float(x) for x in self.plan_summary)
        if len(s) != 4 or not all(math.isfinite(x) and x >= 0 for x in s):
            raise PlanError("must be 4 finite nonnegative numbers", "system.plan_summary")
        object.__setattr__(self, "plan_summary", s)

    def with_plan(self, tree: PlanNode) -> "SystemContext":
        return SystemContext(
            self.instance_type, self.node_count, self.memory_gb, self.concurrent_queries, summarize_plan(tree)
        )

    def vector(self) -> np.ndarray:
        """Raw numeric system vector; heavy-tailed entries are log-scaled."""
        onehot = np.zeros(len(INSTANCE_TYPES) + 1)
        onehot[INSTANCE_TYPES.index(self.instance_type) if self.instance_type in INSTANCE_TYPES else -1] = 1.0
        n_nodes, depth, cost, card = self.plan_summary
        nums = np.array(
            [
                self.node_count,
                math.log(self.memory_gb),
                self.concurrent_queries,
                n_nodes,
                depth,
                math.log1p(cost),
                math.log1p(card),
            ]
        )
        return np.concatenate([onehot, nums])


N_SYSTEM_FEATURES = len(INSTANCE_TYPES) + 1 + 7


def summarize_plan(tree: PlanNode) -> tuple[float, float, float, float]:
    n = 0
    cost = card = 0.0
    for node in tree.iter_nodes():
        n += 1
        cost += node.est_cost
        card += node.est_cardinality
    return (float(n), float(tree.depth), cost, card)


# --------------------------------------------------------------------------
# Query plans shared by repeated executions
# --------------------------------------------------------------------------


class QueryPlan:
    """A planned query; featurizations are computed once and shared by repeats."""

    __slots__ = ("tree", "query_type", "__dict__")

    def __init__(self, tree: PlanNode, query_type: str = "Select"):
        if query_type not in QUERY_TYPES:
            raise PlanError(f"unknown query type {query_type!r}", "query_type")
        self.tree = tree
        self.query_type = query_type

    @cached_property
    def features(self) -> QueryFeatures:
        return featurize_local(self.tree, self.query_type)

    @cached_property
    def key(self) -> int:
        return hash_features(self.features)

    @cached_property
    def graph(self) -> PlanGraph:
        return featurize_global(self.tree)

    @cached_property
    def summary(self) -> tuple[float, float, float, float]:
        return summarize_plan(self.tree)

    def __repr__(self):
        return f"QueryPlan({self.query_type}, nodes={self.tree.size}, key={self.key:#018x})"


# --------------------------------------------------------------------------
# Plan-log JSON lines
# --------------------------------------------------------------------------


@dataclass
class PlanRecord:
    query_id: str
    arrival: float  # seconds
    plan: QueryPlan
    context: SystemContext
    observed: float | None = None  # seconds

    @property
    def tree(self) -> PlanNode:
        return self.plan.tree

    @property
    def query_type(self) -> str:
        return self.plan.query_type


def _number(d: dict, key: str, path: str, *, positive=False, integer=False, required=True):
    if key not in d:
        if required:
            raise PlanError("missing field", path)
        return None
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise PlanError(f"must be a finite number, got {v!r}", path)
    if v < 0 or (positive and v <= 0):
        raise PlanError(f"out of range: {v!r}", path)
    if integer:
        if float(v) != int(v):
            raise PlanError(f"must be an integer, got {v!r}", path)
        return int(v)
    return float(v)


def parse_record(obj: Any, line: int | None = None, intern: dict | None = None) -> PlanRecord:
    try:
        if not isinstance(obj, dict):
            raise PlanError("expected a JSON object")
        if "query_id" not in obj:
            raise PlanError("missing field", "query_id")
        qid = str(obj["query_id"])
        arrival = _number(obj, "arrival_ms", "arrival_ms")
        qtype = obj.get("query_type", "Select")
        if qtype not in QUERY_TYPES:
            raise PlanError(f"must be one of {QUERY_TYPES}, got {qtype!r}", "query_type")
        sysd = obj.get("system")
        if not isinstance(sysd, dict):
            raise PlanError("missing or not an object", "system")
        if "plan" not in obj:
            raise PlanError("missing field", "plan")
        tree = PlanNode.from_dict(obj["plan"])
        tree.validate()
        ctx = SystemContext(
            instance_type=str(sysd.get("instance_type", "ra3.4xlarge")),
            node_count=_number(sysd, "node_count", "system.node_count", positive=True, integer=True),
            memory_gb=_number(sysd, "memory_gb", "system.memory_gb", positive=True),
            concurrent_queries=_number(sysd, "concurrent", "system.concurrent", integer=True, required=False) or 0,
            plan_summary=summarize_plan(tree),
        )
        observed = _number(obj, "observed_ms", "observed_ms", required=False)
    except PlanError as exc:
        raise PlanError(str(exc).split(": ", 1)[-1] if exc.path else str(exc), exc.path, line) from None
    if intern is not None:
        k = (qtype, json.dumps(obj["plan"], sort_keys=True))
        plan = intern.get(k)
        if plan is None:
            plan = intern[k] = QueryPlan(tree, qtype)
    else:
        plan = QueryPlan(tree, qtype)
    return PlanRecord(
        query_id=qid,
        arrival=arrival / 1000.0,
        plan=plan,
        context=ctx,
        observed=None if observed is None else observed / 1000.0,
    )


def parse_plan_log(text: str, errors: list | None = None) -> list[PlanRecord]:
    """Parse plan-log JSON lines.

    Bad lines raise :class:`PlanError` carrying the line number, unless an
    ``errors`` list is given, in which case they are appended there and skipped.
    Identical plans are interned so repeats share one :class:`QueryPlan`.
    """
    records = []
    intern: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise PlanError(f"invalid JSON ({exc.msg})", "", lineno) from None
            records.append(parse_record(obj, lineno, intern))
        except PlanError as exc:
            if errors is None:
                raise
            errors.append(exc)
    return records


def snap_seconds(seconds: float) -> float:
    """Round to a value that survives the seconds -> ms -> seconds trip exactly."""
    return (seconds * 1000.0) / 1000.0


def to_ms(seconds: float) -> float:
    """Milliseconds value that converts back to exactly ``seconds``."""
    ms = seconds * 1000.0
    up = down = ms
    for _ in range(64):
        for cand in (up, down):
            if cand / 1000.0 == seconds:
                return cand
        up = float(np.nextafter(up, np.inf))
        down = float(np.nextafter(down, -np.inf))
    return ms


def record_to_dict(
    query_id: str,
    arrival: float,
    plan: QueryPlan,
    ctx: SystemContext,
    observed: float | None = None,
) -> dict:
    d = {
        "query_id": query_id,
        "arrival_ms": to_ms(arrival),
        "query_type": plan.query_type,
        "system": {
            "instance_type": ctx.instance_type,
            "node_count": int(ctx.node_count),
            "memory_gb": ctx.memory_gb,
            "concurrent": int(ctx.concurrent_queries),
        },
        "plan": plan.tree.to_dict(),
    }
    if observed is not None:
        d["observed_ms"] = to_ms(observed)
    return d


def dump_plan_log(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)


def stack_features(feats: Sequence[QueryFeatures]) -> np.ndarray:
    if not feats:
        return np.zeros((0, N_LOCAL))
    return np.vstack([f.values for f in feats])
