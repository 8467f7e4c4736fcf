"""Compiled kernels for tree growth, split search and prediction.

Everything here works on a feature-major matrix ``xt`` of shape (p, n) so a
column scan is a contiguous read. Randomness comes from a counter-based
splitmix64 stream: a stream is a 2-element uint64 array ``(key, counter)``
and every draw is ``mix(key + counter * GOLDEN)``. Two trees with different
keys never share state, which is what makes the forests reproducible under
any thread schedule.
"""
import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0

# split acceptance rules for the regularized grower
RULE_PLAIN = 0
RULE_POSITIVE = 1
RULE_DOMINANT = 2
RULE_PARENT = 3

# a split must remove at least this fraction of the node SSE
REL_GAIN_TOL = 1e-12


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def new_stream(key):
    state = np.empty(2, dtype=np.uint64)
    state[0] = _mix64(np.uint64(key))
    state[1] = np.uint64(0)
    return state


@njit(cache=True, nogil=True)
def next_u64(state):
    state[1] += np.uint64(1)
    return _mix64(state[0] + state[1] * GOLDEN)


@njit(cache=True, nogil=True)
def randbelow(state, m):
    u = next_u64(state) >> np.uint64(11)
    r = int(np.float64(u) * _INV53 * m)
    return r if r < m else m - 1


@njit(cache=True, nogil=True)
def bootstrap_rows(state, n, size, replace):
    """Row multiset for one tree: ``size`` draws, with or without replacement."""
    out = np.empty(size, dtype=np.int64)
    if replace:
        for i in range(size):
            out[i] = randbelow(state, n)
    else:
        perm = np.arange(n)
        for i in range(size):
            j = i + randbelow(state, n - i)
            t = perm[i]
            perm[i] = perm[j]
            perm[j] = t
            out[i] = perm[i]
        out.sort()
    return out


@njit(cache=True, nogil=True)
def permutation(state, n):
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = randbelow(state, i + 1)
        t = perm[i]
        perm[i] = perm[j]
        perm[j] = t
    return perm


def rank_encode(xt):
    """Per-column ranks into the sorted unique values.

    Returns (rk, uval, nuniq): ``rk[j, i]`` indexes ``uval[j, :nuniq[j]]``.
    """
    p, n = xt.shape
    rk = np.empty((p, n), dtype=np.int32)
    uniq = []
    for j in range(p):
        u, inv = np.unique(xt[j], return_inverse=True)
        rk[j] = inv
        uniq.append(u)
    nuniq = np.array([len(u) for u in uniq], dtype=np.int64)
    uval = np.zeros((p, max(int(nuniq.max()), 1)))
    for j, u in enumerate(uniq):
        uval[j, :len(u)] = u
    return rk, uval, nuniq


@njit(cache=True, nogil=True)
def shadow_design(xt, rk, state):
    """Stack ``xt`` (and its ranks) on row-permuted copies of each column."""
    p, n = xt.shape
    aug = np.empty((2 * p, n))
    ark = np.empty((2 * p, n), dtype=np.int32)
    for j in range(p):
        perm = permutation(state, n)
        for i in range(n):
            aug[j, i] = xt[j, i]
            ark[j, i] = rk[j, i]
            aug[p + j, i] = xt[j, perm[i]]
            ark[p + j, i] = rk[j, perm[i]]
    return aug, ark


@njit(cache=True, nogil=True)
def _insertion_sort(keys, vals, lo, hi):
    for i in range(lo + 1, hi + 1):
        k = keys[i]
        v = vals[i]
        j = i - 1
        while j >= lo and keys[j] > k:
            keys[j + 1] = keys[j]
            vals[j + 1] = vals[j]
            j -= 1
        keys[j + 1] = k
        vals[j + 1] = v


@njit(cache=True, nogil=True)
def sort_pairs(keys, vals, m):
    """In-place ascending sort of keys[:m], carrying vals along."""
    if m <= 24:
        _insertion_sort(keys, vals, 0, m - 1)
        return
    stack = np.empty(128, dtype=np.int64)
    stack[0] = 0
    stack[1] = m - 1
    top = 2
    while top > 0:
        hi = stack[top - 1]
        lo = stack[top - 2]
        top -= 2
        while hi - lo > 16:
            mid = (lo + hi) >> 1
            # median of three moved to keys[mid]
            if keys[mid] < keys[lo]:
                keys[mid], keys[lo] = keys[lo], keys[mid]
                vals[mid], vals[lo] = vals[lo], vals[mid]
            if keys[hi] < keys[lo]:
                keys[hi], keys[lo] = keys[lo], keys[hi]
                vals[hi], vals[lo] = vals[lo], vals[hi]
            if keys[hi] < keys[mid]:
                keys[hi], keys[mid] = keys[mid], keys[hi]
                vals[hi], vals[mid] = vals[mid], vals[hi]
            pivot = keys[mid]
            i = lo
            j = hi
            while i <= j:
                while keys[i] < pivot:
                    i += 1
                while keys[j] > pivot:
                    j -= 1
                if i <= j:
                    keys[i], keys[j] = keys[j], keys[i]
                    vals[i], vals[j] = vals[j], vals[i]
                    i += 1
                    j -= 1
            # recurse into the smaller side via the stack, loop on the larger
            if j - lo < hi - i:
                if i < hi:
                    stack[top] = i
                    stack[top + 1] = hi
                    top += 2
                hi = j
            else:
                if lo < j:
                    stack[top] = lo
                    stack[top + 1] = j
                    top += 2
                lo = i
        _insertion_sort(keys, vals, lo, hi)


@njit(cache=True, nogil=True)
def feature_split(xt, rk, uval, nuniq, tab, f, y, idx, s, e, ybar, keys, vals, cnt, sm, tol):
    """Best threshold on column ``f`` for rows ``idx[s:e]``.

    ``rk[f, row]`` is the rank of the row's value among the unique values
    ``uval[tab[f], :nuniq[tab[f]]]`` of the column. Large nodes are scanned
    through per-rank buckets, small ones by sorting ranks.

    Returns (gain, threshold); gain is -1 when the column is constant on the
    node. Gain is the SSE decrease S_L^2 * m / (m_L * m_R) with S_L the
    centered left sum. Gains within ``tol`` of each other count as tied and
    the lower threshold is kept.
    """
    m = e - s
    t = tab[f]
    u = nuniq[t]
    best = -1.0
    lo_rank = -1
    hi_rank = -1
    if 8 * m > u:
        for r in range(u):
            cnt[r] = 0
            sm[r] = 0.0
        for k in range(s, e):
            row = idx[k]
            r = rk[f, row]
            cnt[r] += 1
            sm[r] += y[row] - ybar
        cum = 0.0
        nl = 0
        prev = -1
        for r in range(u):
            c = cnt[r]
            if c == 0:
                continue
            if prev >= 0:
                g = cum * cum * m / (nl * (m - nl))
                if g > best + tol:
                    best = g
                    lo_rank = prev
                    hi_rank = r
            cum += sm[r]
            nl += c
            prev = r
    else:
        for k in range(m):
            row = idx[s + k]
            keys[k] = rk[f, row]
            vals[k] = y[row] - ybar
        sort_pairs(keys, vals, m)
        cum = 0.0
        for k in range(m - 1):
            cum += vals[k]
            if keys[k] < keys[k + 1]:
                nl = k + 1
                g = cum * cum * m / (nl * (m - nl))
                if g > best + tol:
                    best = g
                    lo_rank = keys[k]
                    hi_rank = keys[k + 1]
    if lo_rank < 0:
        return -1.0, 0.0
    a = uval[t, lo_rank]
    b = uval[t, hi_rank]
    thr = 0.5 * (a + b)
    if not (thr > a):
        thr = b
    return best, thr


@njit(cache=True, nogil=True)
def node_stats(y, idx, s, e):
    m = e - s
    tot = 0.0
    lo = np.inf
    hi = -np.inf
    for k in range(s, e):
        v = y[idx[k]]
        tot += v
        if v < lo:
            lo = v
        if v > hi:
            hi = v
    ybar = tot / m
    sst = 0.0
    for k in range(s, e):
        d = y[idx[k]] - ybar
        sst += d * d
    return ybar, sst, hi > lo


@njit(cache=True, nogil=True)
def best_split_exact(xt, rk, uval, nuniq, tab, y, rows, candidates):
    """Best (feature, threshold, gain) over ``candidates``; feature -1 if none.

    Ties go to the lowest feature index, then the lowest threshold.
    """
    m = rows.shape[0]
    if m < 2:
        return -1, 0.0, 0.0
    idx = rows.copy()
    keys = np.empty(m, dtype=np.int32)
    vals = np.empty(m)
    cnt = np.empty(uval.shape[1], dtype=np.int64)
    sm = np.empty(uval.shape[1])
    ybar, sst, varies = node_stats(y, idx, 0, m)
    if not varies:
        return -1, 0.0, 0.0
    tol = REL_GAIN_TOL * max(sst, 1.0)
    bf = -1
    bt = 0.0
    bg = 0.0
    for c in range(candidates.shape[0]):
        f = candidates[c]
        g, t = feature_split(xt, rk, uval, nuniq, tab, f, y, idx, 0, m, ybar,
                             keys, vals, cnt, sm, tol)
        if g <= tol:
            continue
        if bf < 0 or g > bg + tol or (abs(g - bg) <= tol and f < bf):
            bf = f
            bt = t
            bg = g
    return bf, bt, bg


@njit(cache=True, nogil=True)
def grow_tree(xt, rk, uval, nuniq, tab, y, rows, pool, mtry, min_node_size,
              max_depth, state, rule, penalty, in_fs, depth_exponent, imp_star,
              tree_id, entered):
    """Grow one CART tree on the row multiset ``rows``.

    Nodes are expanded breadth first (top to bottom, left to right). With
    ``rule != RULE_PLAIN`` each split is ranked by its regularized gain and
    the active feature set ``in_fs`` is updated in place; ``entered[f]``
    records the tree that first put ``f`` into the set.

    Returns per-node arrays (feature, threshold, left, right, value, gain,
    count, depth); ``feature == -1`` marks a leaf, child indices are local.
    """
    n = rows.shape[0]
    ncol = xt.shape[0]
    cap = 2 * n + 1
    feat = np.full(cap, -1, dtype=np.int32)
    thr = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    value = np.zeros(cap)
    gain = np.zeros(cap)
    count = np.zeros(cap, dtype=np.int64)
    depth = np.zeros(cap, dtype=np.int32)
    start = np.zeros(cap, dtype=np.int64)
    stop = np.zeros(cap, dtype=np.int64)
    pgain = np.zeros(cap)

    idx = rows.copy()
    buf = np.empty(n, dtype=np.int64)
    keys = np.empty(n, dtype=np.int32)
    vals = np.empty(n)
    cnt = np.empty(uval.shape[1], dtype=np.int64)
    sm = np.empty(uval.shape[1])
    n_pool = pool.shape[0]
    work = pool.copy()
    cand = np.empty(mtry, dtype=np.int64)
    evaluated = np.zeros(ncol, dtype=np.bool_)
    ev_gain = np.zeros(ncol)
    ev_thr = np.zeros(ncol)

    stop[0] = n
    n_nodes = 1
    node = 0
    while node < n_nodes:
        s = start[node]
        e = stop[node]
        m = e - s
        ybar, sst, varies = node_stats(y, idx, s, e)
        value[node] = ybar
        count[node] = m
        if m < min_node_size or m < 2 or not varies or \
                (max_depth >= 0 and depth[node] >= max_depth):
            node += 1
            continue

        # mtry candidates drawn without replacement from the pool
        for k in range(mtry):
            j = k + randbelow(state, n_pool - k)
            tmp = work[k]
            work[k] = work[j]
            work[j] = tmp
            cand[k] = work[k]

        floor = REL_GAIN_TOL * max(sst, 1.0)
        bf = -1
        bt = 0.0
        braw = 0.0
        breg = 0.0
        for k in range(mtry):
            f = cand[k]
            g, t = feature_split(xt, rk, uval, nuniq, tab, f, y, idx, s, e, ybar,
                                 keys, vals, cnt, sm, floor)
            evaluated[f] = True
            ev_gain[f] = g
            ev_thr[f] = t
            if g <= floor:
                continue
            rg = g
            if rule != RULE_PLAIN and not in_fs[f]:
                if depth_exponent:
                    rg = g * imp_star[f] ** (depth[node] + 1)
                else:
                    rg = g * penalty[f]
                # an entering split must also beat the gain that created this node
                if rule == RULE_PARENT and not (rg > pgain[node]):
                    continue
            if bf < 0 or rg > breg + floor or (abs(rg - breg) <= floor and f < bf):
                bf = f
                bt = t
                braw = g
                breg = rg

        if rule >= RULE_DOMINANT and (bf < 0 or not in_fs[bf]):
            # an outside feature has to beat the best member of the active set
            ff = -1
            ft = 0.0
            fg = 0.0
            for f in range(ncol):
                if not in_fs[f]:
                    continue
                if evaluated[f]:
                    g = ev_gain[f]
                    t = ev_thr[f]
                else:
                    g, t = feature_split(xt, rk, uval, nuniq, tab, f, y, idx, s, e,
                                         ybar, keys, vals, cnt, sm, floor)
                if g <= floor:
                    continue
                if ff < 0 or g > fg + floor or (abs(g - fg) <= floor and f < ff):
                    ff = f
                    ft = t
                    fg = g
            if ff >= 0 and not (breg > fg):
                bf = ff
                bt = ft
                braw = fg
                breg = fg
        for k in range(mtry):
            evaluated[cand[k]] = False

        if bf < 0 or not (breg > 0.0):
            node += 1
            continue
        if rule != RULE_PLAIN and not in_fs[bf]:
            in_fs[bf] = True
            entered[bf] = tree_id

        # stable partition of idx[s:e]: x < threshold goes left
        nl = 0
        for k in range(s, e):
            r = idx[k]
            if xt[bf, r] < bt:
                idx[s + nl] = r
                nl += 1
            else:
                buf[k - s - nl] = r
        for k in range(m - nl):
            idx[s + nl + k] = buf[k]

        feat[node] = bf
        thr[node] = bt
        gain[node] = braw
        lc = n_nodes
        rc = n_nodes + 1
        left[node] = lc
        right[node] = rc
        start[lc] = s
        stop[lc] = s + nl
        start[rc] = s + nl
        stop[rc] = e
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        pgain[lc] = braw
        pgain[rc] = braw
        n_nodes += 2
        node += 1

    return (feat[:n_nodes].copy(), thr[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), gain[:n_nodes].copy(),
            count[:n_nodes].copy(), depth[:n_nodes].copy())


@njit(cache=True, nogil=True)
def predict_flat(x, feat, thr, left, right, value, roots):
    """Average leaf value over trees for each row of ``x`` (n, p)."""
    n = x.shape[0]
    b = roots.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for t in range(b):
            node = roots[t]
            while feat[node] >= 0:
                if x[i, feat[node]] < thr[node]:
                    node = roots[t] + left[node]
                else:
                    node = roots[t] + right[node]
            acc += value[node]
        out[i] = acc / b
    return out


@njit(cache=True, nogil=True)
def signed_gain_sum(feat, gain, p):
    """Per-feature gain totals with shadows (columns >= p) counted negatively."""
    out = np.zeros(p)
    for k in range(feat.shape[0]):
        f = feat[k]
        if f < 0:
            continue
        if f < p:
            out[f] += gain[k]
        else:
            out[f - p] -= gain[k]
    return out
