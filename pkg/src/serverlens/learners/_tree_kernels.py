"""Compiled kernels for exact-greedy regression-tree growth and traversal.

Trees are stored as parallel node arrays (feature index, threshold, child
indices, leaf value) with tree-local child indexing, so whole ensembles can
be stacked into flat arrays with per-tree offsets.  Growth is level-wise over
per-tree presorted columns: every column is argsorted once per tree and each
level is a single pass per column that accumulates gradient prefix sums for
all open nodes simultaneously.  All randomness inside the kernel (per-level /
per-node column subsampling) flows from one explicit 64-bit seed via
splitmix64, keeping results independent of scheduling.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MIN_GAIN = 1e-12


@njit(cache=True)
def _next_u64(state: np.uint64) -> tuple[np.uint64, np.uint64]:
    state = (state + _GOLDEN) & _MASK
    z = state
    z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _MASK
    z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _MASK
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True)
def _choose_k(m: int, ratio: float) -> int:
    k = int(ratio * m + 0.5)
    if k < 1:
        k = 1
    if k > m:
        k = m
    return k


@njit(cache=True, inline="always")
def _soft_threshold(g: float, alpha: float) -> float:
    if g > alpha:
        return g - alpha
    if g < -alpha:
        return g + alpha
    return 0.0


@njit(cache=True, inline="always")
def _leaf_objective(G: float, H: float, alpha: float, lam: float) -> float:
    t = _soft_threshold(G, alpha)
    return t * t / (H + lam)


@njit(cache=True)
def grow_tree(
    X,
    grad,
    rows,
    tree_cols,
    max_depth,
    alpha,
    lam,
    colsample_bylevel,
    colsample_bynode,
    seed,
):
    """Grow one regression tree by exact greedy split search.

    Gain of a split is 0.5 * [T(G_L)^2/(H_L+lam) + T(G_R)^2/(H_R+lam)
    - T(G)^2/(H+lam)] with T the soft-threshold by alpha; hessians are row
    counts (squared-error loss).  Leaf weight is -T(G)/(H+lam).  ``rows`` may
    contain duplicates (bootstrap resamples).

    Returns (feature, threshold, left, right, value, n_clamped); internal
    nodes have feature >= 0, leaves have feature == -1.
    """
    n = rows.size
    d_tree = tree_cols.size
    cap = 2 * n + 1
    full = 2 ** (max_depth + 1)
    if full < cap:
        cap = full
    max_slots = 2**max_depth
    if n < max_slots:
        max_slots = n

    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    value = np.zeros(cap, np.float64)

    # presort each tree column once over the sampled rows
    sorted_pos = np.empty((d_tree, n), np.int32)
    colvals = np.empty(n, np.float64)
    for ci in range(d_tree):
        c = tree_cols[ci]
        for p in range(n):
            colvals[p] = X[rows[p], c]
        order = np.argsort(colvals)
        for p in range(n):
            sorted_pos[ci, p] = np.int32(order[p])

    grad_of = np.empty(n, np.float64)
    for p in range(n):
        grad_of[p] = grad[rows[p]]

    node_slot = np.zeros(n, np.int32)  # level-local slot per row position, -1 done
    slot_node = np.empty(max_slots, np.int32)
    slot_node_next = np.empty(max_slots, np.int32)
    slot_node[0] = 0
    n_slots = 1
    n_nodes = 1
    state = np.uint64(seed)
    n_clamped = 0

    G = np.empty(max_slots, np.float64)
    H = np.empty(max_slots, np.float64)
    parent_obj = np.empty(max_slots, np.float64)
    best_gain = np.empty(max_slots, np.float64)
    best_col = np.empty(max_slots, np.int32)
    best_thr = np.empty(max_slots, np.float64)
    GL = np.empty(max_slots, np.float64)
    HL = np.empty(max_slots, np.float64)
    prev_val = np.empty(max_slots, np.float64)
    started = np.empty(max_slots, np.uint8)
    left_slot = np.empty(max_slots, np.int32)
    right_slot = np.empty(max_slots, np.int32)

    lvl_scratch = np.empty(d_tree, np.int32)
    lvl_cols = np.empty(d_tree, np.int32)

    for depth in range(max_depth + 1):
        if n_slots == 0:
            break

        # node statistics for this level
        for k in range(n_slots):
            G[k] = 0.0
            H[k] = 0.0
        for p in range(n):
            k = node_slot[p]
            if k >= 0:
                G[k] += grad_of[p]
                H[k] += 1.0

        if depth == max_depth:
            for k in range(n_slots):
                value[slot_node[k]] = -_soft_threshold(G[k], alpha) / (H[k] + lam)
            break

        for k in range(n_slots):
            parent_obj[k] = _leaf_objective(G[k], H[k], alpha, lam)
            best_gain[k] = _MIN_GAIN
            best_col[k] = -1
            best_thr[k] = 0.0

        # level column pool (indices into tree_cols)
        if colsample_bylevel >= 1.0:
            n_lvl = d_tree
            for i in range(d_tree):
                lvl_cols[i] = i
        else:
            n_lvl = _choose_k(d_tree, colsample_bylevel)
            if int(colsample_bylevel * d_tree + 0.5) < 1:
                n_clamped += 1
            for i in range(d_tree):
                lvl_scratch[i] = i
            for i in range(n_lvl):
                state, z = _next_u64(state)
                j = i + int(z % np.uint64(d_tree - i))
                tmp = lvl_scratch[i]
                lvl_scratch[i] = lvl_scratch[j]
                lvl_scratch[j] = tmp
            lvl_cols[:n_lvl] = np.sort(lvl_scratch[:n_lvl].copy())

        # per-node column inclusion under bynode subsampling
        use_mask = np.ones((n_slots, n_lvl), np.uint8)
        if colsample_bynode < 1.0:
            k_node = _choose_k(n_lvl, colsample_bynode)
            if int(colsample_bynode * n_lvl + 0.5) < 1:
                n_clamped += n_slots
            for k in range(n_slots):
                for i in range(n_lvl):
                    use_mask[k, i] = 0
                for i in range(n_lvl):
                    lvl_scratch[i] = i
                for i in range(k_node):
                    state, z = _next_u64(state)
                    j = i + int(z % np.uint64(n_lvl - i))
                    tmp = lvl_scratch[i]
                    lvl_scratch[i] = lvl_scratch[j]
                    lvl_scratch[j] = tmp
                    use_mask[k, lvl_scratch[i]] = 1

        # one pass per level column, prefix sums for every open node at once
        for lc in range(n_lvl):
            ci = lvl_cols[lc]
            c = tree_cols[ci]
            for k in range(n_slots):
                GL[k] = 0.0
                HL[k] = 0.0
                started[k] = 0
            for s in range(n):
                p = sorted_pos[ci, s]
                k = node_slot[p]
                if k < 0 or use_mask[k, lc] == 0:
                    continue
                v = X[rows[p], c]
                if started[k] == 1 and v > prev_val[k]:
                    gain = 0.5 * (
                        _leaf_objective(GL[k], HL[k], alpha, lam)
                        + _leaf_objective(G[k] - GL[k], H[k] - HL[k], alpha, lam)
                        - parent_obj[k]
                    )
                    if gain > best_gain[k]:
                        best_gain[k] = gain
                        best_col[k] = c
                        best_thr[k] = 0.5 * (prev_val[k] + v)
                GL[k] += grad_of[p]
                HL[k] += 1.0
                prev_val[k] = v
                started[k] = 1

        # materialize splits and reassign rows
        next_slots = 0
        for k in range(n_slots):
            node = slot_node[k]
            if best_col[k] >= 0 and next_slots + 2 <= max_slots:
                feature[node] = best_col[k]
                threshold[node] = best_thr[k]
                left[node] = n_nodes
                right[node] = n_nodes + 1
                left_slot[k] = next_slots
                right_slot[k] = next_slots + 1
                slot_node_next[next_slots] = n_nodes
                slot_node_next[next_slots + 1] = n_nodes + 1
                n_nodes += 2
                next_slots += 2
            else:
                best_col[k] = -1
                value[node] = -_soft_threshold(G[k], alpha) / (H[k] + lam)
                left_slot[k] = -1
                right_slot[k] = -1

        if next_slots == 0:
            break
        for p in range(n):
            k = node_slot[p]
            if k < 0:
                continue
            if best_col[k] < 0:
                node_slot[p] = -1
            elif X[rows[p], best_col[k]] < best_thr[k]:
                node_slot[p] = left_slot[k]
            else:
                node_slot[p] = right_slot[k]
        for k in range(next_slots):
            slot_node[k] = slot_node_next[k]
        n_slots = next_slots

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        n_clamped,
    )


@njit(cache=True)
def tree_values(feature, threshold, left, right, value, X):
    """Leaf value reached by each row of X in one tree."""
    n = X.shape[0]
    out = np.empty(n, np.float64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True)
def stacked_sum(feature, threshold, left, right, value, offsets, X, scale, init):
    """init + scale * sum of per-tree leaf values, over stacked node arrays."""
    n = X.shape[0]
    out = np.full(n, init, np.float64)
    for t in range(offsets.size - 1):
        base = offsets[t]
        for i in range(n):
            node = base
            while feature[node] >= 0:
                if X[i, feature[node]] < threshold[node]:
                    node = base + left[node]
                else:
                    node = base + right[node]
            out[i] += scale * value[node]
    return out


@njit(cache=True)
def stacked_per_tree(feature, threshold, left, right, value, offsets, X):
    """(n_trees, n_rows) matrix of per-tree leaf values."""
    n = X.shape[0]
    n_trees = offsets.size - 1
    out = np.empty((n_trees, n), np.float64)
    for t in range(n_trees):
        base = offsets[t]
        for i in range(n):
            node = base
            while feature[node] >= 0:
                if X[i, feature[node]] < threshold[node]:
                    node = base + left[node]
                else:
                    node = base + right[node]
            out[t, i] = value[node]
    return out
