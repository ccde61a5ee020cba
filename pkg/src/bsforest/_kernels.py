"""Numba kernels for partition growth and point location.

All randomness is pre-drawn by the caller; a kernel consumes its buffers
in a fixed order, so results are bit-identical however the surrounding
work is scheduled.  Kernels release the GIL, which is where the training
parallelism actually comes from.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def grow_axis(X, leaf_ids, p, lower, upper, vote_idx, leaf_u, dims, ratios, adaptive):
    """Grow an axis-parallel partition by p splits.

    ``leaf_ids`` (per-sample current leaf) and rows of ``lower``/``upper``
    (per-leaf boxes, row 0 pre-filled with the root box) are updated in
    place.  Leaf id convention: the lower child of split i keeps the split
    leaf's id, the upper child becomes leaf i+1.  Points exactly on a cut
    stay on the lower side.
    """
    n = X.shape[0]
    d = X.shape[1]
    split_leaf = np.empty(p, np.int32)
    cuts = np.empty(p, np.float64)
    nn = 2 * p + 1
    node_split = np.full(nn, -1, np.int32)
    node_left = np.full(nn, -1, np.int32)
    node_right = np.full(nn, -1, np.int32)
    node_parent = np.full(nn, -1, np.int32)
    node_side = np.zeros(nn, np.int8)
    node_leaf = np.full(nn, -1, np.int32)
    leaf_node = np.zeros(p + 1, np.int32)
    node_leaf[0] = 0
    next_node = 1
    counts = np.zeros(p + 1, np.int32)

    for i in range(p):
        n_leaves = i + 1
        if adaptive:
            for ell in range(n_leaves):
                counts[ell] = 0
            t = vote_idx.shape[1]
            for v in range(t):
                counts[leaf_ids[vote_idx[i, v]]] += 1
            best = 0
            best_count = counts[0]
            for ell in range(1, n_leaves):
                if counts[ell] > best_count:
                    best_count = counts[ell]
                    best = ell
            chosen = best
        else:
            chosen = int(leaf_u[i] * n_leaves)
            if chosen >= n_leaves:
                chosen = n_leaves - 1
        k = dims[i]
        lo = lower[chosen, k]
        hi = upper[chosen, k]
        cut = lo + ratios[i] * (hi - lo)
        # Keep the cut strictly interior even when the extent underflows.
        if cut <= lo:
            cut = np.nextafter(lo, hi)
        if cut >= hi:
            cut = np.nextafter(hi, lo)
        split_leaf[i] = chosen
        cuts[i] = cut
        new_leaf = i + 1
        for kk in range(d):
            lower[new_leaf, kk] = lower[chosen, kk]
            upper[new_leaf, kk] = upper[chosen, kk]
        lower[new_leaf, k] = cut
        upper[chosen, k] = cut

        parent = leaf_node[chosen]
        a = next_node
        b = next_node + 1
        next_node += 2
        node_split[parent] = i
        node_left[parent] = a
        node_right[parent] = b
        node_leaf[parent] = -1
        node_parent[a] = parent
        node_parent[b] = parent
        node_side[a] = 0
        node_side[b] = 1
        node_leaf[a] = chosen
        node_leaf[b] = new_leaf
        leaf_node[chosen] = a
        leaf_node[new_leaf] = b

        for s in range(n):
            if leaf_ids[s] == chosen and X[s, k] > cut:
                leaf_ids[s] = new_leaf

    return (
        split_leaf,
        cuts,
        node_split,
        node_left,
        node_right,
        node_parent,
        node_side,
        node_leaf,
        leaf_node,
    )


@njit(cache=True, nogil=True)
def replay_axis(p, d, root_lower, root_upper, split_leaf, split_dim, split_ratio):
    """Rebuild the arrays of an axis partition from its recorded splits.

    Replays the exact floating-point operations of ``grow_axis``, so the
    reconstructed cuts and boxes are bit-identical to the original build.
    """
    lower = np.empty((p + 1, d), np.float64)
    upper = np.empty((p + 1, d), np.float64)
    for kk in range(d):
        lower[0, kk] = root_lower[kk]
        upper[0, kk] = root_upper[kk]
    cuts = np.empty(p, np.float64)
    nn = 2 * p + 1
    node_split = np.full(nn, -1, np.int32)
    node_left = np.full(nn, -1, np.int32)
    node_right = np.full(nn, -1, np.int32)
    node_parent = np.full(nn, -1, np.int32)
    node_side = np.zeros(nn, np.int8)
    node_leaf = np.full(nn, -1, np.int32)
    leaf_node = np.zeros(p + 1, np.int32)
    node_leaf[0] = 0
    next_node = 1

    for i in range(p):
        chosen = split_leaf[i]
        k = split_dim[i]
        lo = lower[chosen, k]
        hi = upper[chosen, k]
        cut = lo + split_ratio[i] * (hi - lo)
        if cut <= lo:
            cut = np.nextafter(lo, hi)
        if cut >= hi:
            cut = np.nextafter(hi, lo)
        cuts[i] = cut
        new_leaf = i + 1
        for kk in range(d):
            lower[new_leaf, kk] = lower[chosen, kk]
            upper[new_leaf, kk] = upper[chosen, kk]
        lower[new_leaf, k] = cut
        upper[chosen, k] = cut

        parent = leaf_node[chosen]
        a = next_node
        b = next_node + 1
        next_node += 2
        node_split[parent] = i
        node_left[parent] = a
        node_right[parent] = b
        node_leaf[parent] = -1
        node_parent[a] = parent
        node_parent[b] = parent
        node_side[a] = 0
        node_side[b] = 1
        node_leaf[a] = chosen
        node_leaf[b] = new_leaf
        leaf_node[chosen] = a
        leaf_node[new_leaf] = b

    return (
        lower,
        upper,
        cuts,
        node_split,
        node_left,
        node_right,
        node_parent,
        node_side,
        node_leaf,
        leaf_node,
    )


@njit(cache=True, nogil=True)
def locate_axis(node_split, node_left, node_right, node_leaf, split_dim, split_cut, X):
    """Tree-walk point location for axis partitions; ties go to the lower side."""
    nq = X.shape[0]
    out = np.empty(nq, np.int32)
    for q in range(nq):
        node = 0
        while node_split[node] >= 0:
            s = node_split[node]
            if X[q, split_dim[s]] <= split_cut[s]:
                node = node_left[node]
            else:
                node = node_right[node]
        out[q] = node_leaf[node]
    return out


@njit(cache=True, nogil=True)
def locate_oblique(node_split, node_left, node_right, node_leaf, normals, offsets, X):
    """Tree-walk point location for halfspace partitions; w.x + b <= 0 goes left."""
    nq = X.shape[0]
    d = X.shape[1]
    out = np.empty(nq, np.int32)
    for q in range(nq):
        node = 0
        while node_split[node] >= 0:
            s = node_split[node]
            val = offsets[s]
            for k in range(d):
                val += normals[s, k] * X[q, k]
            if val <= 0.0:
                node = node_left[node]
            else:
                node = node_right[node]
        out[q] = node_leaf[node]
    return out


@njit(cache=True, nogil=True)
def assign_halfspace(X, leaf_ids, target_leaf, w, b, new_leaf):
    """Move samples of ``target_leaf`` with w.x + b > 0 into ``new_leaf``."""
    n = X.shape[0]
    d = X.shape[1]
    for s in range(n):
        if leaf_ids[s] == target_leaf:
            val = b
            for k in range(d):
                val += w[k] * X[s, k]
            if val > 0.0:
                leaf_ids[s] = new_leaf
