"""Accuracy and uncertainty-quality metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

BUCKETS = ((0.0, 10.0), (10.0, 60.0), (60.0, 120.0), (120.0, 300.0), (300.0, math.inf))
BUCKET_LABELS = ("0-10s", "10-60s", "60-120s", "120-300s", "300s+")


class DegenerateInputError(ValueError):
    pass


def nearest_rank(values, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of an empty sample")
    if not 0 <= q <= 100:
        raise ValueError("q must lie in [0, 100]")
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


@dataclass
class ErrorStats:
    n: int
    mae: float
    p50_ae: float
    p90_ae: float
    mqe: float
    p50_qe: float
    p90_qe: float
    buckets: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _summary(pred: np.ndarray, true: np.ndarray) -> dict:
    ae = np.abs(true - pred)
    qe = np.maximum(pred / true, true / pred)
    return {
        "n": int(ae.size),
        "mae": float(ae.mean()),
        "p50_ae": nearest_rank(ae, 50),
        "p90_ae": nearest_rank(ae, 90),
        "mqe": float(qe.mean()),
        "p50_qe": nearest_rank(qe, 50),
        "p90_qe": nearest_rank(qe, 90),
    }


def error_stats(pairs: Sequence[tuple[float, float]]) -> ErrorStats:
    """Absolute-error and Q-error summaries of (predicted, true) pairs.

    The per-bucket breakdown groups pairs by their true exec-time.
    """
    if len(pairs) == 0:
        raise ValueError("no pairs")
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    for i, (p, t) in enumerate(arr):
        if not (p > 0 and t > 0 and math.isfinite(p) and math.isfinite(t)):
            raise ValueError(f"pair {i} ({p!r}, {t!r}): predicted and true must be finite and > 0")
    pred, true = arr[:, 0], arr[:, 1]
    stats = ErrorStats(**_summary(pred, true))
    for (lo, hi), label in zip(BUCKETS, BUCKET_LABELS):
        m = (true >= lo) & (true < hi)
        stats.buckets[label] = _summary(pred[m], true[m]) if m.any() else {"n": 0}
    return stats


def _curve_area(errors_in_order: np.ndarray, total: float) -> float:
    """Trapezoid area under the cumulative error fraction over k/n, k = 0..n."""
    n = errors_in_order.size
    frac = np.concatenate([[0.0], np.cumsum(errors_in_order) / total])
    return float(np.sum((frac[1:] + frac[:-1]) * 0.5) / n)


def prr(errors, uncertainties) -> float:
    """Prediction-rejection ratio of ``uncertainties`` as a ranking of ``errors``.

    Ranking items by descending uncertainty traces the fraction of total
    error removed as the top k are rejected. PRR is the area between that
    curve and the random-rejection diagonal, divided by the same area for
    the error-sorted ordering: 1 is perfect, 0 is random, negative is worse
    than random.
    """
    e = np.asarray(errors, dtype=np.float64)
    u = np.asarray(uncertainties, dtype=np.float64)
    if e.shape != u.shape or e.ndim != 1:
        raise ValueError("errors and uncertainties must be 1-d of equal length")
    if e.size < 2:
        raise ValueError("need at least two items")
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(u))):
        raise ValueError("errors and uncertainties must be finite")
    if np.any(e < 0):
        raise ValueError("errors must be >= 0")
    total = float(e.sum())
    if np.all(e == e[0]) or total == 0.0:
        raise DegenerateInputError("all errors are equal; the oracle curve coincides with the diagonal")
    diag = 0.5
    oracle = _curve_area(np.sort(e)[::-1], total) - diag
    # lexsort keys run last-to-first: uncertainty desc, then error desc, then index
    order = np.lexsort((np.arange(e.size), -e, -u))
    cand = _curve_area(e[order], total) - diag
    return cand / oracle
