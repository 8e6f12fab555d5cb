"""Hot loops of the tree ensemble.

Each kernel has a numba implementation and a vectorized numpy twin with the
same signature; the module-level names point at whichever backend
``stagepred._accel`` selected.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


# -- gradient histograms ----------------------------------------------------


@njit
def _histograms_numba(bins, rows, slot, target, n_slots, n_bins):
    n_features = bins.shape[1]
    sums = np.zeros((n_slots, n_features, n_bins))
    counts = np.zeros((n_slots, n_features, n_bins), dtype=np.int64)
    for k in range(rows.shape[0]):
        i = rows[k]
        s = slot[k]
        if s < 0:
            continue
        t = target[k]
        for f in range(n_features):
            b = bins[i, f]
            sums[s, f, b] += t
            counts[s, f, b] += 1
    return sums, counts


def _histograms_numpy(bins, rows, slot, target, n_slots, n_bins):
    n_features = bins.shape[1]
    keep = slot >= 0
    rows, slot, target = rows[keep], slot[keep], target[keep]
    flat = (slot[:, None] * n_features + np.arange(n_features)[None, :]) * n_bins + bins[rows]
    size = n_slots * n_features * n_bins
    # bincount accumulates in input order, matching the numba loop bit for bit
    sums = np.bincount(flat.ravel(), weights=np.repeat(target, n_features), minlength=size)
    counts = np.bincount(flat.ravel(), minlength=size).astype(np.int64)
    shape = (n_slots, n_features, n_bins)
    return sums.reshape(shape), counts.reshape(shape)


# -- split search -------------------------------------------------------------


@njit
def _best_splits_numba(sums, counts, n_thresholds, min_leaf):
    n_slots, n_features, n_bins = sums.shape
    best_f = np.full(n_slots, -1, dtype=np.int64)
    best_b = np.zeros(n_slots, dtype=np.int64)
    best_gain = np.full(n_slots, -np.inf)
    left_mean = np.zeros(n_slots)
    right_mean = np.zeros(n_slots)
    for s in range(n_slots):
        tot_s = 0.0
        tot_c = 0
        for b in range(n_bins):
            tot_s += sums[s, 0, b]
            tot_c += counts[s, 0, b]
        parent = tot_s * tot_s / tot_c if tot_c > 0 else 0.0
        for f in range(n_features):
            ls = 0.0
            lc = 0
            for b in range(n_thresholds[f]):
                ls += sums[s, f, b]
                lc += counts[s, f, b]
                rc = tot_c - lc
                if lc < min_leaf or rc < min_leaf:
                    continue
                rs = tot_s - ls
                g = ls * ls / lc + rs * rs / rc - parent
                if g > best_gain[s]:
                    best_gain[s] = g
                    best_f[s] = f
                    best_b[s] = b
                    left_mean[s] = ls / lc
                    right_mean[s] = rs / rc
    return best_f, best_b, best_gain, left_mean, right_mean


def _best_splits_numpy(sums, counts, n_thresholds, min_leaf):
    n_slots, n_features, n_bins = sums.shape
    cs = np.cumsum(sums, axis=2)
    cc = np.cumsum(counts, axis=2)
    tot_s = np.cumsum(sums[:, 0, :], axis=1)[:, -1][:, None, None]
    tot_c = cc[:, :1, -1:]
    rs = tot_s - cs
    rc = tot_c - cc
    valid = np.arange(n_bins)[None, :] < n_thresholds[:, None]
    ok = (cc >= min_leaf) & (rc >= min_leaf) & valid[None]
    with np.errstate(divide="ignore", invalid="ignore"):
        parent = np.where(tot_c > 0, tot_s * tot_s / tot_c, 0.0)
        gain = cs * cs / cc + rs * rs / rc - parent
    gain = np.where(ok, gain, -np.inf).reshape(n_slots, -1)
    flat = np.argmax(gain, axis=1)
    idx = np.arange(n_slots)
    best_gain = gain[idx, flat]
    f, b = np.divmod(flat, n_bins)
    found = np.isfinite(best_gain)
    best_f = np.where(found, f, -1)
    best_b = np.where(found, b, 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        left_mean = np.where(found, cs[idx, f, b] / cc[idx, f, b], 0.0)
        right_mean = np.where(found, rs[idx, f, b] / rc[idx, f, b], 0.0)
    return best_f, best_b, best_gain, left_mean, right_mean


# -- forest traversal ---------------------------------------------------------


@njit
def _forest_predict_numba(X, feature, threshold, left, right, value, group, n_groups):
    n = X.shape[0]
    n_trees = feature.shape[0]
    out = np.zeros((n, n_groups))
    for i in range(n):
        for t in range(n_trees):
            node = 0
            f = feature[t, 0]
            while f >= 0:
                if X[i, f] <= threshold[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
                f = feature[t, node]
            out[i, group[t]] += value[t, node]
    return out


def _forest_predict_numpy(X, feature, threshold, left, right, value, group, n_groups):
    n = X.shape[0]
    n_trees = feature.shape[0]
    out = np.zeros((n, n_groups))
    if n == 0 or n_trees == 0:
        return out
    tidx = np.arange(n_trees)[None, :]
    ridx = np.arange(n)[:, None]
    node = np.zeros((n, n_trees), dtype=np.int64)
    while True:
        f = feature[tidx, node]
        active = f >= 0
        if not active.any():
            break
        x = X[ridx, np.maximum(f, 0)]
        go_left = x <= threshold[tidx, node]
        nxt = np.where(go_left, left[tidx, node], right[tidx, node])
        node = np.where(active, nxt, node)
    vals = value[tidx, node]
    for g in range(n_groups):
        out[:, g] = vals[:, group == g].sum(axis=1)
    return out


@njit
def _apply_tree_numba(X, feature, threshold, left, right):
    n = X.shape[0]
    leaf = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        f = feature[0]
        while f >= 0:
            if X[i, f] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
            f = feature[node]
        leaf[i] = node
    return leaf


def _apply_tree_numpy(X, feature, threshold, left, right):
    n = X.shape[0]
    node = np.zeros(n, dtype=np.int64)
    idx = np.arange(n)
    while True:
        f = feature[node]
        active = f >= 0
        if not active.any():
            return node
        go_left = X[idx, np.maximum(f, 0)] <= threshold[node]
        node = np.where(active, np.where(go_left, left[node], right[node]), node)


if USE_NUMBA:
    histograms = _histograms_numba
    best_splits = _best_splits_numba
    forest_predict = _forest_predict_numba
    apply_tree = _apply_tree_numba
else:
    histograms = _histograms_numpy
    best_splits = _best_splits_numpy
    forest_predict = _forest_predict_numpy
    apply_tree = _apply_tree_numpy

NUMBA_KERNELS = {
    "histograms": _histograms_numba,
    "best_splits": _best_splits_numba,
    "forest_predict": _forest_predict_numba,
    "apply_tree": _apply_tree_numba,
}
NUMPY_KERNELS = {
    "histograms": _histograms_numpy,
    "best_splits": _best_splits_numpy,
    "forest_predict": _forest_predict_numpy,
    "apply_tree": _apply_tree_numpy,
}
