"""Instance-independent graph model over physical plans.

Node rows are embedded by a one-layer MLP, refined by ``L`` rounds of
child-to-parent message passing (mean over children), and the root state is
concatenated with the standardized system vector and read out by a two-layer
MLP head into ``log1p(seconds)``. Gradients are derived by hand; see
:func:`gcn_grad_check`.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .plan import (
    CARD_COL,
    COST_COL,
    N_NODE_FEATURES,
    N_SYSTEM_FEATURES,
    ROWS_COL,
    WIDTH_COL,
    PlanGraph,
    SystemContext,
)

SNAPSHOT_VERSION = 1
LOG_COLS = np.array([COST_COL, CARD_COL, WIDTH_COL, ROWS_COL])


class StructureError(ValueError):
    """Graph or context does not match the model's input layout."""


@dataclass(frozen=True)
class GcnConfig:
    hidden: int = 64
    layers: int = 4
    dropout: float = 0.2
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    holdout: float = 0.1
    seed: int = 0


def _relu(x):
    return np.maximum(x, 0.0)


class GcnModel:
    """Parameters plus input normalization statistics."""

    PARAM_ORDER = ("W_e", "b_e", "W_s", "W_c", "b_c", "W_h1", "b_h1", "w_h2", "b_h2")

    def __init__(self, params: dict[str, np.ndarray], hidden: int, layers: int, dropout: float = 0.0,
                 node_shift=None, node_scale=None, ctx_shift=None, ctx_scale=None):
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.hidden = hidden
        self.layers = layers
        self.dropout = dropout
        self.node_shift = np.zeros(len(LOG_COLS)) if node_shift is None else np.asarray(node_shift, float)
        self.node_scale = np.ones(len(LOG_COLS)) if node_scale is None else np.asarray(node_scale, float)
        self.ctx_shift = np.zeros(N_SYSTEM_FEATURES) if ctx_shift is None else np.asarray(ctx_shift, float)
        self.ctx_scale = np.ones(N_SYSTEM_FEATURES) if ctx_scale is None else np.asarray(ctx_scale, float)

    @classmethod
    def init(cls, hidden: int = 64, layers: int = 4, dropout: float = 0.2, seed: int = 0) -> "GcnModel":
        rng = np.random.default_rng(seed)
        H, D, S = hidden, N_NODE_FEATURES, N_SYSTEM_FEATURES
        p = {
            "W_e": rng.normal(0, math.sqrt(2.0 / D), (D, H)),
            "b_e": np.zeros(H),
            "W_s": rng.normal(0, math.sqrt(1.0 / H), (layers, H, H)),
            "W_c": rng.normal(0, math.sqrt(1.0 / H), (layers, H, H)),
            "b_c": np.zeros((layers, H)),
            "W_h1": rng.normal(0, math.sqrt(2.0 / (H + S)), (H + S, H)),
            "b_h1": np.zeros(H),
            "w_h2": rng.normal(0, math.sqrt(1.0 / H), H),
            "b_h2": np.zeros(()),
        }
        return cls(p, hidden, layers, dropout)

    def copy(self) -> "GcnModel":
        return GcnModel(
            {k: v.copy() for k, v in self.params.items()},
            self.hidden,
            self.layers,
            self.dropout,
            self.node_shift.copy(),
            self.node_scale.copy(),
            self.ctx_shift.copy(),
            self.ctx_scale.copy(),
        )

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- input handling -------------------------------------------------------

    def node_inputs(self, nodes: np.ndarray) -> np.ndarray:
        X = np.array(nodes, dtype=np.float64)
        X[:, LOG_COLS] = (np.log1p(X[:, LOG_COLS]) - self.node_shift) / self.node_scale
        return X

    def ctx_inputs(self, ctx_vectors: np.ndarray) -> np.ndarray:
        return (ctx_vectors - self.ctx_shift) / self.ctx_scale

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "version": SNAPSHOT_VERSION,
            "hidden": self.hidden,
            "layers": self.layers,
            "dropout": self.dropout,
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
        }
        arrays = {f"param_{k}": v for k, v in self.params.items()}
        np.savez(
            path,
            meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            node_shift=self.node_shift,
            node_scale=self.node_scale,
            ctx_shift=self.ctx_shift,
            ctx_scale=self.ctx_scale,
            **arrays,
        )

    @classmethod
    def load(cls, path) -> "GcnModel":
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            if meta.get("version") != SNAPSHOT_VERSION:
                raise ValueError(f"unsupported GCN snapshot version {meta.get('version')!r}")
            params = {k: z[f"param_{k}"].copy() for k in meta["shapes"]}
            for k, shape in meta["shapes"].items():
                if list(params[k].shape) != shape:
                    raise StructureError(f"parameter {k} has shape {params[k].shape}, expected {shape}")
            return cls(
                params,
                meta["hidden"],
                meta["layers"],
                meta["dropout"],
                z["node_shift"].copy(),
                z["node_scale"].copy(),
                z["ctx_shift"].copy(),
                z["ctx_scale"].copy(),
            )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.save(buf)
        return buf.getvalue()


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------


@dataclass
class GraphBatch:
    X: np.ndarray  # normalized node inputs (N, D)
    A: sp.csr_matrix  # mean-over-children aggregator (N, N)
    roots: np.ndarray  # (B,)
    C: np.ndarray  # standardized system vectors (B, S)


def child_mean_matrix(edges: np.ndarray, n: int) -> sp.csr_matrix:
    """Row ``p`` averages the rows of p's children; leaves get a zero row."""
    if len(edges) == 0:
        return sp.csr_matrix((n, n))
    child, parent = edges[:, 0], edges[:, 1]
    fan_in = np.bincount(parent, minlength=n).astype(np.float64)
    return sp.csr_matrix((1.0 / fan_in[parent], (parent, child)), shape=(n, n))


def make_batch(model: GcnModel, graphs: Sequence[PlanGraph], ctx_vectors: np.ndarray) -> GraphBatch:
    nodes, edges, roots = [], [], []
    off = 0
    for g in graphs:
        if g.nodes.ndim != 2 or g.nodes.shape[1] != N_NODE_FEATURES:
            raise StructureError(f"node rows must have {N_NODE_FEATURES} features, got shape {g.nodes.shape}")
        nodes.append(g.nodes)
        edges.append(g.edges + off)
        roots.append(g.root_index + off)
        off += g.n_nodes
    ctx_vectors = np.atleast_2d(np.asarray(ctx_vectors, dtype=np.float64))
    if ctx_vectors.shape != (len(graphs), N_SYSTEM_FEATURES):
        raise StructureError(f"expected {len(graphs)} system vectors of length {N_SYSTEM_FEATURES}, got {ctx_vectors.shape}")
    E = np.vstack(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    return GraphBatch(
        model.node_inputs(np.vstack(nodes)),
        child_mean_matrix(E, off),
        np.asarray(roots, dtype=np.int64),
        model.ctx_inputs(ctx_vectors),
    )


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


def _forward(model: GcnModel, batch: GraphBatch, rng: np.random.Generator | None = None):
    """Returns (output, cache). Dropout is applied iff ``rng`` is given."""
    p = model.params
    Z0 = batch.X @ p["W_e"] + p["b_e"]
    H = _relu(Z0)
    layer_cache = []
    keep = 1.0 - model.dropout
    for l in range(model.layers):
        M = batch.A @ H
        Z = H @ p["W_s"][l] + M @ p["W_c"][l] + p["b_c"][l]
        H_new = _relu(Z)
        mask = None
        if rng is not None and model.dropout > 0:
            mask = (rng.random(H_new.shape) < keep) / keep
            H_new = H_new * mask
        layer_cache.append((H, M, Z, mask))
        H = H_new
    R = H[batch.roots]
    U_in = np.concatenate([R, batch.C], axis=1)
    Zh = U_in @ p["W_h1"] + p["b_h1"]
    U = _relu(Zh)
    out = U @ p["w_h2"] + p["b_h2"]
    return out, (Z0, layer_cache, H, U_in, Zh, U)


def _backward(model: GcnModel, batch: GraphBatch, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    Z0, layer_cache, H_last, U_in, Zh, U = cache
    g = {}
    g["w_h2"] = U.T @ d_out
    g["b_h2"] = np.asarray(d_out.sum())
    dZh = np.outer(d_out, p["w_h2"]) * (Zh > 0)
    g["W_h1"] = U_in.T @ dZh
    g["b_h1"] = dZh.sum(axis=0)
    dU_in = dZh @ p["W_h1"].T
    dH = np.zeros_like(H_last)
    np.add.at(dH, batch.roots, dU_in[:, : model.hidden])

    g["W_s"] = np.zeros_like(p["W_s"])
    g["W_c"] = np.zeros_like(p["W_c"])
    g["b_c"] = np.zeros_like(p["b_c"])
    AT = batch.A.T.tocsr()
    for l in reversed(range(model.layers)):
        H_prev, M, Z, mask = layer_cache[l]
        if mask is not None:
            dH = dH * mask
        dZ = dH * (Z > 0)
        g["W_s"][l] = H_prev.T @ dZ
        g["W_c"][l] = M.T @ dZ
        g["b_c"][l] = dZ.sum(axis=0)
        dH = dZ @ p["W_s"][l].T + AT @ (dZ @ p["W_c"][l].T)
    dZ0 = dH * (Z0 > 0)
    g["W_e"] = batch.X.T @ dZ0
    g["b_e"] = dZ0.sum(axis=0)
    return g


def mse_and_grad(model: GcnModel, batch: GraphBatch, targets_log: np.ndarray, rng=None):
    out, cache = _forward(model, batch, rng)
    err = out - targets_log
    loss = float(np.mean(err**2))
    grads = _backward(model, batch, cache, 2.0 * err / len(err))
    return loss, grads


def gcn_forward(model: GcnModel, graph: PlanGraph, ctx: SystemContext, training: bool = False,
                rng: np.random.Generator | None = None) -> float:
    """Predicted ``log1p(seconds)`` for one plan."""
    batch = make_batch(model, [graph], ctx.vector()[None, :])
    if training and rng is None:
        rng = np.random.default_rng()
    out, _ = _forward(model, batch, rng if training else None)
    return float(out[0])


def predict_log(model: GcnModel, graphs: Sequence[PlanGraph], ctxs: Sequence[SystemContext],
                batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(graphs), batch_size):
        gs = graphs[i : i + batch_size]
        cv = np.vstack([c.vector() for c in ctxs[i : i + batch_size]])
        o, _ = _forward(model, make_batch(model, gs, cv))
        out.append(o)
    return np.concatenate(out) if out else np.zeros(0)


def predict_seconds(model: GcnModel, graph: PlanGraph, ctx: SystemContext) -> float:
    return float(np.expm1(max(gcn_forward(model, graph, ctx), 0.0)))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def gcn_train(dataset: Sequence[tuple[PlanGraph, SystemContext, float]], config: GcnConfig = GcnConfig(),
              log=None) -> GcnModel:
    """Fit on (graph, context, observed seconds) triples.

    Minimizes MSE of ``log1p(seconds)`` with Adam, holding out a fraction of
    the data, and returns the parameters with the best held-out loss.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    model = GcnModel.init(config.hidden, config.layers, config.dropout, seed=int(rng.integers(2**63)))

    graphs = [d[0] for d in dataset]
    ctxv = np.vstack([d[1].vector() for d in dataset])
    y = np.log1p(np.asarray([d[2] for d in dataset], dtype=np.float64))
    if np.any(~np.isfinite(y)):
        raise ValueError("observed exec-times must be finite and >= 0")

    n = len(dataset)
    perm = rng.permutation(n)
    n_hold = int(round(config.holdout * n)) if n >= 10 else 0
    hold, train = perm[:n_hold], perm[n_hold:]

    # normalization statistics from the training split
    raw = np.log1p(np.vstack([graphs[i].nodes[:, LOG_COLS] for i in train]))
    model.node_shift = raw.mean(axis=0)
    model.node_scale = np.where(raw.std(axis=0) > 1e-12, raw.std(axis=0), 1.0)
    model.ctx_shift = ctxv[train].mean(axis=0)
    sd = ctxv[train].std(axis=0)
    model.ctx_scale = np.where(sd > 1e-12, sd, 1.0)
    model.params["b_h2"] = np.asarray(y[train].mean())

    def batches(idx):
        for i in range(0, len(idx), config.batch_size):
            b = idx[i : i + config.batch_size]
            yield make_batch(model, [graphs[j] for j in b], ctxv[b]), y[b]

    hold_batches = list(batches(hold)) if n_hold else []

    def held_out_loss():
        if not hold_batches:
            return None
        se = sum(float(np.sum((_forward(model, b)[0] - t) ** 2)) for b, t in hold_batches)
        return se / n_hold

    opt = Adam(model.params, lr=config.learning_rate)
    best = model.copy()
    best_loss = held_out_loss()
    for epoch in range(config.epochs):
        order = train[rng.permutation(len(train))]
        tr_loss = 0.0
        for batch, t in batches(order):
            loss, grads = mse_and_grad(model, batch, t, rng)
            opt.step(model.params, grads)
            tr_loss += loss * len(t)
        cur = held_out_loss()
        if cur is None:
            best = model.copy()
        elif best_loss is None or cur < best_loss:
            best_loss, best = cur, model.copy()
        if log is not None:
            log(epoch, tr_loss / max(len(train), 1), cur)
    return best


# --------------------------------------------------------------------------
# Gradient check
# --------------------------------------------------------------------------


def gcn_grad_check(model: GcnModel, example: tuple[PlanGraph, SystemContext, float], step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in inference mode (no dropout) on the squared log-error of a single
    example; every parameter entry is perturbed.
    """
    graph, ctx, seconds = example
    batch = make_batch(model, [graph], ctx.vector()[None, :])
    target = np.array([math.log1p(seconds)])
    _, grads = mse_and_grad(model, batch, target)

    def loss():
        out, _ = _forward(model, batch)
        return float(np.mean((out - target) ** 2))

    worst = 0.0
    for name in list(model.params):
        arr = model.params[name] = np.ascontiguousarray(model.params[name], dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = np.asarray(grads[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss()
            flat[i] = orig - step
            lm = loss()
            flat[i] = orig
            num = (lp - lm) / (2 * step)
            ana = gflat[i]
            denom = max(abs(ana), abs(num), 1e-6)
            worst = max(worst, abs(ana - num) / denom)
    return worst


def config_dict(config: GcnConfig) -> dict:
    return asdict(config)
