"""Numba kernels for tree growing and ensemble evaluation.

Everything here operates on plain arrays. Each tree owns a private
counter-based RNG seeded from its uint64 stream seed, and parallel loops
write only to per-tree (or per-query) slabs, so outputs are bit-identical
regardless of worker count or scheduling.
"""
from __future__ import annotations

import numpy as np
import numba
from numba import njit, prange

if numba.config.THREADING_LAYER == "default":
    # skip the TBB probe (noisy on older TBB); results never depend on the
    # threading layer because parallel loops write disjoint slabs only
    numba.config.THREADING_LAYER = "workqueue"

U64 = np.uint64
_GOLDEN = U64(0x9E3779B97F4A7C15)
_MIX1 = U64(0xBF58476D1CE4E5B9)
_MIX2 = U64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


# ---------------------------------------------------------------------------
# splitmix64: tiny, fast, platform-independent
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _rng_next(rs):
    rs[0] = rs[0] + _GOLDEN
    z = rs[0]
    z = (z ^ (z >> U64(30))) * _MIX1
    z = (z ^ (z >> U64(27))) * _MIX2
    return z ^ (z >> U64(31))


@njit(cache=True, inline="always")
def _rng_uniform(rs):
    return float(_rng_next(rs) >> U64(11)) * _INV53


@njit(cache=True, inline="always")
def _rng_below(rs, n):
    v = int(_rng_uniform(rs) * n)
    if v >= n:
        v = n - 1
    return v


@njit(cache=True)
def _sample_without_replacement(rs, pool, k):
    """Partial Fisher-Yates over ``pool`` in place; the draw is pool[:k]."""
    n = pool.shape[0]
    for i in range(k):
        j = i + _rng_below(rs, n - i)
        tmp = pool[i]
        pool[i] = pool[j]
        pool[j] = tmp


# ---------------------------------------------------------------------------
# Extremely randomized survival trees (log-rank splits, KM leaves)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _logrank_and_counts(X, t, d, order, s, e, f, thr):
    """Two-group log-rank |z| between {x<=thr} and the rest of a node.

    ``order[s:e]`` must be sorted by time ascending. Returns
    (stat, n_left, events_left); stat < 0 flags an unusable split.
    """
    m = e - s
    n_left = 0
    ev_left = 0
    ev_tot = 0
    for i in range(s, e):
        u = order[i]
        if X[u, f] <= thr:
            n_left += 1
            if d[u] == 1:
                ev_left += 1
        if d[u] == 1:
            ev_tot += 1
    if n_left == 0 or n_left == m:
        return -1.0, n_left, ev_left
    o1 = 0.0
    e1 = 0.0
    var = 0.0
    n1_rem = n_left
    i = s
    while i < e:
        tcur = t[order[i]]
        j = i
        d_tot = 0
        d_left = 0
        c_left = 0
        while j < e and t[order[j]] == tcur:
            u = order[j]
            is_l = X[u, f] <= thr
            if d[u] == 1:
                d_tot += 1
                if is_l:
                    d_left += 1
            if is_l:
                c_left += 1
            j += 1
        at_risk = e - i
        if d_tot > 0:
            frac = n1_rem / at_risk
            e1 += d_tot * frac
            if at_risk > 1:
                var += d_tot * frac * (1.0 - frac) * (at_risk - d_tot) / (at_risk - 1.0)
            o1 += d_left
        n1_rem -= c_left
        i = j
    if var <= 0.0:
        return -1.0, n_left, ev_left
    return abs(o1 - e1) / np.sqrt(var), n_left, ev_left


@njit(cache=True)
def _grow_survival_tree(X, t, d, order, k_try, n_min, seed,
                        feat, thr, left, right, start, end):
    """Grow one extremely randomized survival tree in place.

    ``order`` arrives sorted by time and is partitioned stably at each
    split, so every node's slice stays time-sorted. Returns the node count.
    """
    n = order.shape[0]
    pf = X.shape[1]
    rs = np.empty(1, dtype=np.uint64)
    rs[0] = seed
    buf_l = np.empty(n, dtype=np.int32)
    buf_r = np.empty(n, dtype=np.int32)
    fpool = np.empty(pf, dtype=np.int64)

    max_nodes = feat.shape[0]
    stack_node = np.empty(max_nodes, dtype=np.int64)
    stack_s = np.empty(max_nodes, dtype=np.int64)
    stack_e = np.empty(max_nodes, dtype=np.int64)
    top = 0
    stack_node[top] = 0
    stack_s[top] = 0
    stack_e[top] = n
    top += 1
    start[0] = 0
    end[0] = n
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack_node[top]
        s = stack_s[top]
        e = stack_e[top]
        m = e - s

        ev_tot = 0
        for i in range(s, e):
            if d[order[i]] == 1:
                ev_tot += 1

        best_stat = -1.0
        best_f = -1
        best_thr = 0.0
        if ev_tot >= 2 * n_min and m >= 2 and n_nodes + 2 <= max_nodes:
            for i in range(pf):
                fpool[i] = i
            kk = k_try if k_try < pf else pf
            for k in range(kk):
                j = k + _rng_below(rs, pf - k)
                tmpf = fpool[k]
                fpool[k] = fpool[j]
                fpool[j] = tmpf
                f = fpool[k]
                lo = X[order[s], f]
                hi = lo
                for i in range(s + 1, e):
                    v = X[order[i], f]
                    if v < lo:
                        lo = v
                    elif v > hi:
                        hi = v
                if hi <= lo:
                    continue
                cand = lo + _rng_uniform(rs) * (hi - lo)
                if cand >= hi:
                    continue
                stat, n_l, ev_l = _logrank_and_counts(X, t, d, order, s, e, f, cand)
                if stat < 0.0:
                    continue
                if ev_l < n_min or (ev_tot - ev_l) < n_min:
                    continue
                if stat > best_stat:
                    best_stat = stat
                    best_f = f
                    best_thr = cand

        if best_f < 0:
            feat[node] = -1
            left[node] = -1
            right[node] = -1
            continue

        bl = 0
        br = 0
        for i in range(s, e):
            u = order[i]
            if X[u, best_f] <= best_thr:
                buf_l[bl] = u
                bl += 1
            else:
                buf_r[br] = u
                br += 1
        for i in range(bl):
            order[s + i] = buf_l[i]
        for i in range(br):
            order[s + bl + i] = buf_r[i]

        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feat[node] = best_f
        thr[node] = best_thr
        left[node] = lid
        right[node] = rid
        start[lid] = s
        end[lid] = s + bl
        start[rid] = s + bl
        end[rid] = e
        stack_node[top] = lid
        stack_s[top] = s
        stack_e[top] = s + bl
        top += 1
        stack_node[top] = rid
        stack_s[top] = s + bl
        stack_e[top] = e
        top += 1
    return n_nodes


@njit(cache=True, parallel=True)
def fit_survival_trees(X, T2, D2, ORD0, ds_of_tree, k_try, n_min, seeds,
                       feat, thr, left, right, start, end, order, n_nodes):
    """Fit M survival trees in parallel; tree m uses dataset ds_of_tree[m]."""
    m_trees = seeds.shape[0]
    for m in prange(m_trees):
        ds = ds_of_tree[m]
        order[m, :] = ORD0[ds, :]
        n_nodes[m] = _grow_survival_tree(
            X, T2[ds], D2[ds], order[m], k_try, n_min, seeds[m],
            feat[m], thr[m], left[m], right[m], start[m], end[m],
        )


@njit(cache=True, parallel=True)
def count_leaf_jumps(D2, GIDX, ds_of_tree, feat, start, end, order, n_nodes,
                     jumps_per_node):
    """Count distinct event times per leaf (pass 1 of KM compression)."""
    m_trees = feat.shape[0]
    for m in prange(m_trees):
        ds = ds_of_tree[m]
        d = D2[ds]
        g = GIDX[ds]
        for node in range(n_nodes[m]):
            if feat[m, node] != -1:
                continue
            cnt = 0
            last = -1
            for i in range(start[m, node], end[m, node]):
                u = order[m, i]
                if d[u] == 1 and g[u] != last:
                    cnt += 1
                    last = g[u]
            jumps_per_node[m, node] = cnt


@njit(cache=True, parallel=True)
def fill_leaf_km(T2, D2, GIDX, ds_of_tree, feat, start, end, order, n_nodes,
                 jump_off, jump_gidx, jump_val):
    """Kaplan-Meier per leaf, compressed to (grid index, value) jump pairs.

    Tie groups are formed on the actual times (leaf units arrive
    time-sorted); the grid index recorded for a jump comes from an event
    unit, whose time is a grid point by construction.
    """
    m_trees = feat.shape[0]
    for m in prange(m_trees):
        ds = ds_of_tree[m]
        t = T2[ds]
        d = D2[ds]
        g = GIDX[ds]
        for node in range(n_nodes[m]):
            if feat[m, node] != -1:
                continue
            s = start[m, node]
            e = end[m, node]
            ptr = jump_off[m, node]
            surv = 1.0
            i = s
            while i < e:
                tcur = t[order[m, i]]
                j = i
                d_tot = 0
                gi = -1
                while j < e and t[order[m, j]] == tcur:
                    if d[order[m, j]] == 1:
                        d_tot += 1
                        gi = g[order[m, j]]
                    j += 1
                if d_tot > 0:
                    at_risk = e - i
                    surv *= 1.0 - d_tot / at_risk
                    jump_gidx[ptr] = gi
                    jump_val[ptr] = surv
                    ptr += 1
                i = j


@njit(cache=True, inline="always")
def _descend(Xq, q, feat, thr, left, right, m):
    node = 0
    while feat[m, node] >= 0:
        if Xq[q, feat[m, node]] <= thr[m, node]:
            node = left[m, node]
        else:
            node = right[m, node]
    return node


@njit(cache=True, parallel=True)
def ensemble_survival(Xq, feat, thr, left, right, jump_off, jump_cnt,
                      jump_gidx, jump_val, n_grid, out):
    """Mean of per-tree leaf KM curves on the shared grid, one row per query."""
    mq = Xq.shape[0]
    m_trees = feat.shape[0]
    for q in prange(mq):
        acc = np.zeros(n_grid, dtype=np.float64)
        for m in range(m_trees):
            node = _descend(Xq, q, feat, thr, left, right, m)
            off = jump_off[m, node]
            cnt = jump_cnt[m, node]
            cur = 1.0
            jp = 0
            for gi in range(n_grid):
                while jp < cnt and jump_gidx[off + jp] <= gi:
                    cur = jump_val[off + jp]
                    jp += 1
                acc[gi] += cur
        for gi in range(n_grid):
            out[q, gi] = acc[gi] / m_trees


# ---------------------------------------------------------------------------
# Regression forest (nuisance models, out-of-bag cross-fitting)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _grow_regression_tree(X, y, w, units, min_leaf, rs,
                          feat, thr, left, right, leaf_val):
    """CART tree on a subsample, weighted variance-reduction splits."""
    max_nodes = feat.shape[0]
    n_sub = units.shape[0]
    p = X.shape[1]
    stack_node = np.empty(max_nodes, dtype=np.int64)
    stack_s = np.empty(max_nodes, dtype=np.int64)
    stack_e = np.empty(max_nodes, dtype=np.int64)
    top = 0
    stack_node[0] = 0
    stack_s[0] = 0
    stack_e[0] = n_sub
    top = 1
    n_nodes = 1
    buf_l = np.empty(n_sub, dtype=np.int32)
    buf_r = np.empty(n_sub, dtype=np.int32)

    while top > 0:
        top -= 1
        node = stack_node[top]
        s = stack_s[top]
        e = stack_e[top]
        m = e - s

        best_gain = -1.0
        best_f = -1
        best_thr = 0.0
        if m >= 2 * min_leaf and n_nodes + 2 <= max_nodes:
            for f in range(p):
                vals = np.empty(m, dtype=np.float64)
                for i in range(m):
                    vals[i] = X[units[s + i], f]
                ord_f = np.argsort(vals)
                wl = 0.0
                sl = 0.0
                wt = 0.0
                st = 0.0
                for i in range(m):
                    u = units[s + ord_f[i]]
                    wt += w[u]
                    st += w[u] * y[u]
                if wt <= 0.0:
                    continue
                base = st * st / wt
                for i in range(m - 1):
                    u = units[s + ord_f[i]]
                    wl += w[u]
                    sl += w[u] * y[u]
                    cl = i + 1
                    if cl < min_leaf or (m - cl) < min_leaf:
                        continue
                    v_here = vals[ord_f[i]]
                    v_next = vals[ord_f[i + 1]]
                    if v_next <= v_here:
                        continue
                    wr = wt - wl
                    if wl <= 0.0 or wr <= 0.0:
                        continue
                    sr = st - sl
                    gain = sl * sl / wl + sr * sr / wr - base
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_thr = 0.5 * (v_here + v_next)

        if best_f < 0:
            feat[node] = -1
            left[node] = -1
            right[node] = -1
            wt = 0.0
            st = 0.0
            for i in range(s, e):
                u = units[i]
                wt += w[u]
                st += w[u] * y[u]
            leaf_val[node] = st / wt if wt > 0.0 else 0.0
            continue

        bl = 0
        br = 0
        for i in range(s, e):
            u = units[i]
            if X[u, best_f] <= best_thr:
                buf_l[bl] = u
                bl += 1
            else:
                buf_r[br] = u
                br += 1
        for i in range(bl):
            units[s + i] = buf_l[i]
        for i in range(br):
            units[s + bl + i] = buf_r[i]
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feat[node] = best_f
        thr[node] = best_thr
        left[node] = lid
        right[node] = rid
        stack_node[top] = lid
        stack_s[top] = s
        stack_e[top] = s + bl
        top += 1
        stack_node[top] = rid
        stack_s[top] = s + bl
        stack_e[top] = e
        top += 1
    return n_nodes


@njit(cache=True, parallel=True)
def fit_regression_forest(X, y, w, ssize, min_leaf, seeds,
                          feat, thr, left, right, leaf_val, n_nodes, inbag):
    n = X.shape[0]
    n_trees = seeds.shape[0]
    for b in prange(n_trees):
        rs = np.empty(1, dtype=np.uint64)
        rs[0] = seeds[b]
        pool = np.empty(n, dtype=np.int32)
        for i in range(n):
            pool[i] = i
        _sample_without_replacement(rs, pool, ssize)
        units = pool[:ssize].copy()
        for i in range(ssize):
            inbag[b, units[i]] = 1
        n_nodes[b] = _grow_regression_tree(
            X, y, w, units, min_leaf, rs,
            feat[b], thr[b], left[b], right[b], leaf_val[b],
        )


@njit(cache=True, parallel=True)
def regression_oob(X, feat, thr, left, right, leaf_val, inbag, out, cnt):
    """Out-of-bag mean prediction per training unit (NaN if never OOB)."""
    n = X.shape[0]
    n_trees = feat.shape[0]
    for i in prange(n):
        s = 0.0
        c = 0
        for b in range(n_trees):
            if inbag[b, i] == 1:
                continue
            node = _descend(X, i, feat, thr, left, right, b)
            s += leaf_val[b][node]
            c += 1
        cnt[i] = c
        out[i] = s / c if c > 0 else np.nan


@njit(cache=True, parallel=True)
def regression_predict(Xq, feat, thr, left, right, leaf_val, out):
    mq = Xq.shape[0]
    n_trees = feat.shape[0]
    for q in prange(mq):
        s = 0.0
        for b in range(n_trees):
            node = _descend(Xq, q, feat, thr, left, right, b)
            s += leaf_val[b][node]
        out[q] = s / n_trees


@njit(cache=True, parallel=True)
def regression_predict_subset(Xq, feat, thr, left, right, leaf_val, tree_ids, out):
    mq = Xq.shape[0]
    k = tree_ids.shape[0]
    for q in prange(mq):
        s = 0.0
        for j in range(k):
            b = tree_ids[j]
            node = _descend(Xq, q, feat, thr, left, right, b)
            s += leaf_val[b][node]
        out[q] = s / k


# ---------------------------------------------------------------------------
# Honest causal / instrumental forest
# ---------------------------------------------------------------------------
# The same kernel serves both: the causal case passes rz identical to rw,
# which makes every IV expression collapse to its unconfounded counterpart.

@njit(cache=True)
def _grow_causal_tree(X, rw, rg, rz, w, units_j1, min_node, rs,
                      feat, thr, left, right):
    max_nodes = feat.shape[0]
    n1 = units_j1.shape[0]
    p = X.shape[1]
    stack_node = np.empty(max_nodes, dtype=np.int64)
    stack_s = np.empty(max_nodes, dtype=np.int64)
    stack_e = np.empty(max_nodes, dtype=np.int64)
    stack_node[0] = 0
    stack_s[0] = 0
    stack_e[0] = n1
    top = 1
    n_nodes = 1
    rho = np.empty(n1, dtype=np.float64)
    buf_l = np.empty(n1, dtype=np.int32)
    buf_r = np.empty(n1, dtype=np.int32)

    while top > 0:
        top -= 1
        node = stack_node[top]
        s = stack_s[top]
        e = stack_e[top]
        m = e - s

        best_gain = -1.0
        best_f = -1
        best_thr = 0.0
        if m >= 2 * min_node and n_nodes + 2 <= max_nodes:
            # node-level effect estimate, then gradient-style pseudo-outcomes
            a_sum = 0.0
            b_sum = 0.0
            a_abs = 0.0
            for i in range(s, e):
                u = units_j1[i]
                a_sum += w[u] * rz[u] * rw[u]
                b_sum += w[u] * rz[u] * rg[u]
                a_abs += abs(w[u] * rz[u] * rw[u])
            tau_bar = b_sum / a_sum if abs(a_sum) > 1e-12 * (a_abs + 1e-300) else 0.0
            for i in range(s, e):
                u = units_j1[i]
                rho[i] = rz[u] * (rg[u] - tau_bar * rw[u])

            for f in range(p):
                vals = np.empty(m, dtype=np.float64)
                for i in range(m):
                    vals[i] = X[units_j1[s + i], f]
                ord_f = np.argsort(vals)
                wt = 0.0
                st = 0.0
                for i in range(m):
                    u = units_j1[s + ord_f[i]]
                    wt += w[u]
                    st += w[u] * rho[s + ord_f[i]]
                if wt <= 0.0:
                    continue
                wl = 0.0
                sl = 0.0
                for i in range(m - 1):
                    idx = s + ord_f[i]
                    u = units_j1[idx]
                    wl += w[u]
                    sl += w[u] * rho[idx]
                    cl = i + 1
                    if cl < min_node or (m - cl) < min_node:
                        continue
                    v_here = vals[ord_f[i]]
                    v_next = vals[ord_f[i + 1]]
                    if v_next <= v_here:
                        continue
                    wr = wt - wl
                    if wl <= 0.0 or wr <= 0.0:
                        continue
                    sr = st - sl
                    gain = sl * sl / wl + sr * sr / wr
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_thr = 0.5 * (v_here + v_next)

        if best_f < 0:
            feat[node] = -1
            left[node] = -1
            right[node] = -1
            continue

        bl = 0
        br = 0
        for i in range(s, e):
            u = units_j1[i]
            if X[u, best_f] <= best_thr:
                buf_l[bl] = u
                bl += 1
            else:
                buf_r[br] = u
                br += 1
        for i in range(bl):
            units_j1[s + i] = buf_l[i]
        for i in range(br):
            units_j1[s + bl + i] = buf_r[i]
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feat[node] = best_f
        thr[node] = best_thr
        left[node] = lid
        right[node] = rid
        stack_node[top] = lid
        stack_s[top] = s
        stack_e[top] = s + bl
        top += 1
        stack_node[top] = rid
        stack_s[top] = s + bl
        stack_e[top] = e
        top += 1
    return n_nodes


@njit(cache=True, parallel=True)
def fit_causal_forest_kernel(X, rw, rg, rz, w, ell, min_node, n_j1, ssize,
                             tree_seeds, bag_seeds,
                             feat, thr, left, right, n_nodes,
                             leaf_sw, leaf_szg, leaf_szw, leaf_cnt,
                             est_units, est_leaf, n_est):
    """Grow B honest trees grouped into little bags sharing half-samples.

    Trees in bag g regenerate the same half-sample from bag_seeds[g], then
    draw their own subsample and honest split from tree_seeds[b]. Structure
    is grown on the J1 half; leaf statistics come from the J2 half only.
    """
    n = X.shape[0]
    n_trees = tree_seeds.shape[0]
    n_half = n // 2
    for b in prange(n_trees):
        bag = b // ell
        rs = np.empty(1, dtype=np.uint64)
        rs[0] = bag_seeds[bag]
        pool = np.empty(n, dtype=np.int32)
        for i in range(n):
            pool[i] = i
        _sample_without_replacement(rs, pool, n_half)

        rs[0] = tree_seeds[b]
        half = pool[:n_half]
        _sample_without_replacement(rs, half, ssize)
        j1 = half[:n_j1].copy()
        n_j2 = ssize - n_j1

        n_nodes[b] = _grow_causal_tree(
            X, rw, rg, rz, w, j1, min_node, rs,
            feat[b], thr[b], left[b], right[b],
        )

        # route the estimation half and accumulate per-leaf score pieces
        n_est[b] = n_j2
        for i in range(n_j2):
            u = half[n_j1 + i]
            node = 0
            while feat[b, node] >= 0:
                if X[u, feat[b, node]] <= thr[b, node]:
                    node = left[b, node]
                else:
                    node = right[b, node]
            est_units[b, i] = u
            est_leaf[b, i] = node
            leaf_sw[b, node] += w[u]
            leaf_szg[b, node] += w[u] * rz[u] * rg[u]
            leaf_szw[b, node] += w[u] * rz[u] * rw[u]
            leaf_cnt[b, node] += 1


@njit(cache=True, parallel=True)
def causal_predict(Xq, feat, thr, left, right,
                   leaf_sw, leaf_szg, leaf_szw, leaf_cnt,
                   ell, iv_mode, denom_tol,
                   tau, var, status, n_skipped):
    """Forest point estimates plus little-bags variance, one query per row.

    status: 0 ok; 1 no contributing trees; 2 vanishing score denominator;
    3 variance unavailable (fewer than 2 usable bags). tau/var are NaN when
    their status forbids them.
    """
    mq = Xq.shape[0]
    n_trees = feat.shape[0]
    n_bags = n_trees // ell
    for q in prange(mq):
        num = 0.0
        den = 0.0
        n_contrib = 0
        skip = 0
        bag_num = np.zeros(n_bags, dtype=np.float64)
        bag_den = np.zeros(n_bags, dtype=np.float64)
        bag_cnt = np.zeros(n_bags, dtype=np.int64)
        bag_tsum = np.zeros(n_bags, dtype=np.float64)
        bag_tsq = np.zeros(n_bags, dtype=np.float64)
        bag_tcnt = np.zeros(n_bags, dtype=np.int64)
        for b in range(n_trees):
            node = _descend(Xq, q, feat, thr, left, right, b)
            sw = leaf_sw[b, node]
            if leaf_cnt[b, node] == 0 or sw <= 0.0:
                skip += 1
                continue
            nb = leaf_szg[b, node] / sw
            db = leaf_szw[b, node] / sw
            num += nb
            den += db
            n_contrib += 1
            g = b // ell
            bag_num[g] += nb
            bag_den[g] += db
            bag_cnt[g] += 1
            if abs(db) > denom_tol:
                t_b = nb / db
                bag_tsum[g] += t_b
                bag_tsq[g] += t_b * t_b
                bag_tcnt[g] += 1
        n_skipped[q] = skip
        if n_contrib == 0:
            tau[q] = np.nan
            var[q] = np.nan
            status[q] = 1
            continue
        den_mean = den / n_contrib
        bad = (abs(den_mean) < denom_tol) if iv_mode else (den_mean < denom_tol)
        if bad:
            tau[q] = np.nan
            var[q] = np.nan
            status[q] = 2
            continue
        tau[q] = num / den
        # bootstrap of little bags
        g_valid = 0
        tg_sum = 0.0
        for g in range(n_bags):
            if bag_cnt[g] == 0:
                continue
            dg = bag_den[g] / bag_cnt[g]
            okg = (abs(dg) > denom_tol) if iv_mode else (dg > denom_tol)
            if not okg:
                continue
            g_valid += 1
            tg_sum += bag_num[g] / bag_den[g]
        if g_valid < 2:
            var[q] = np.nan
            status[q] = 3
            continue
        tg_mean = tg_sum / g_valid
        between = 0.0
        within_sum = 0.0
        within_n = 0
        for g in range(n_bags):
            if bag_cnt[g] == 0:
                continue
            dg = bag_den[g] / bag_cnt[g]
            okg = (abs(dg) > denom_tol) if iv_mode else (dg > denom_tol)
            if not okg:
                continue
            tg = bag_num[g] / bag_den[g]
            between += (tg - tg_mean) * (tg - tg_mean)
            if bag_tcnt[g] >= 2:
                mean_t = bag_tsum[g] / bag_tcnt[g]
                ss = bag_tsq[g] - bag_tcnt[g] * mean_t * mean_t
                if ss < 0.0:
                    ss = 0.0
                within_sum += ss / (bag_tcnt[g] - 1)
                within_n += 1
        between /= g_valid
        within = within_sum / within_n if within_n > 0 else 0.0
        v = between - within / ell
        var[q] = v if v > 0.0 else 0.0
        status[q] = 0


@njit(cache=True, parallel=True)
def causal_alpha(Xq, feat, thr, left, right, leaf_sw, leaf_cnt,
                 est_units, est_leaf, n_est, weights, out):
    """Similarity weights alpha_i(x) over training units, one query per row.

    Trees whose leaf at x holds no estimation mass are skipped and the
    average renormalizes over contributing trees.
    """
    mq = Xq.shape[0]
    n_trees = feat.shape[0]
    for q in prange(mq):
        n_contrib = 0
        for b in range(n_trees):
            node = _descend(Xq, q, feat, thr, left, right, b)
            sw = leaf_sw[b, node]
            if leaf_cnt[b, node] == 0 or sw <= 0.0:
                continue
            n_contrib += 1
            for i in range(n_est[b]):
                if est_leaf[b, i] == node:
                    u = est_units[b, i]
                    out[q, u] += weights[u] / sw
        if n_contrib > 0:
            for u in range(out.shape[1]):
                out[q, u] /= n_contrib
