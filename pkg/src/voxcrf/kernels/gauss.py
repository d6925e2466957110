"""Gaussian filtering of per-point values in feature space.

Two routes compute ``out_i = sum_{j != i} exp(-|f_i - f_j|^2 / 2) v_j``:

* an exact O(N^2) double loop, and
* the permutohedral lattice (splat, blur along the d+1 lattice directions,
  slice), which is linear in N and approximate.
"""
import numpy as np

from .._accel import USE_NUMBA, njit

BRUTEFORCE_MAX_POINTS = 5000

# --- exact filter ----------------------------------------------------------


@njit
def _bruteforce_nb(f, v):
    n, d = f.shape
    c = v.shape[1]
    out = np.zeros((n, c))
    for i in range(n):
        for j in range(i + 1, n):
            d2 = 0.0
            for t in range(d):
                diff = f[i, t] - f[j, t]
                d2 += diff * diff
            k = np.exp(-0.5 * d2)
            for l in range(c):
                out[i, l] += k * v[j, l]
                out[j, l] += k * v[i, l]
    return out


def _bruteforce_np(f, v, block=512):
    n = f.shape[0]
    out = np.empty((n, v.shape[1]))
    sq = np.einsum("nd,nd->n", f, f)
    for s in range(0, n, block):
        e = min(n, s + block)
        d2 = sq[s:e, None] + sq[None, :] - 2.0 * f[s:e] @ f.T
        np.maximum(d2, 0.0, out=d2)
        k = np.exp(-0.5 * d2)
        k[np.arange(e - s), np.arange(s, e)] = 0.0
        out[s:e] = k @ v
    return out


def bruteforce_filter(f, v, use_numba=None):
    use_numba = USE_NUMBA if use_numba is None else use_numba
    f = np.ascontiguousarray(f, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    fn = _bruteforce_nb if use_numba else _bruteforce_np
    return fn(f, v)


# --- permutohedral lattice -------------------------------------------------


def _scale_factors(d):
    inv_std = np.sqrt(2.0 / 3.0) * (d + 1)
    i = np.arange(d, dtype=np.float64)
    return inv_std / np.sqrt((i + 1.0) * (i + 2.0))


def _canonical(d):
    can = np.empty((d + 1, d + 1), dtype=np.int64)
    for r in range(d + 1):
        for j in range(d + 1):
            can[r, j] = r if j <= d - r else r - (d + 1)
    return can


def _embed_np(f):
    """Simplex embedding: enclosing-simplex keys and barycentric weights."""
    n, d = f.shape
    dp1 = d + 1
    cf = f * _scale_factors(d)
    # elevated[i] = sum_{k >= i} cf[k] - i * cf[i-1]; elevated[0] = sum(cf)
    tail = np.cumsum(cf[:, ::-1], axis=1)[:, ::-1]
    elev = np.empty((n, dp1))
    elev[:, 0] = tail[:, 0]
    for i in range(1, dp1):
        s = tail[:, i] if i < d else 0.0
        elev[:, i] = s - i * cf[:, i - 1]
    v = elev / dp1
    up = np.ceil(v) * dp1
    down = np.floor(v) * dp1
    rem0 = np.where(up - elev < elev - down, up, down)
    total = np.rint(rem0.sum(axis=1) / dp1).astype(np.int64)
    diff = elev - rem0
    rank = np.zeros((n, dp1), dtype=np.int64)
    for i in range(dp1):
        for j in range(i + 1, dp1):
            less = diff[:, i] < diff[:, j]
            rank[:, i] += less
            rank[:, j] += ~less
    pos = total[:, None] > 0
    neg = total[:, None] < 0
    hi = rank >= dp1 - total[:, None]
    lo = rank < -total[:, None]
    rem0 = np.where(pos & hi, rem0 - dp1, rem0)
    rem0 = np.where(neg & lo, rem0 + dp1, rem0)
    rank = np.where(pos & hi, rank + total[:, None] - dp1,
                    np.where(pos, rank + total[:, None], rank))
    rank = np.where(neg & lo, rank + dp1 + total[:, None],
                    np.where(neg, rank + total[:, None], rank))
    bary = np.zeros((n, d + 2))
    rows = np.arange(n)
    vals = (elev - rem0) / dp1
    for i in range(dp1):
        np.add.at(bary, (rows, d - rank[:, i]), vals[:, i])
        np.add.at(bary, (rows, d + 1 - rank[:, i]), -vals[:, i])
    bary[:, 0] += 1.0 + bary[:, d + 1]
    can = _canonical(d)
    rem0 = rem0.astype(np.int64)
    keys = np.empty((n, dp1, d), dtype=np.int64)
    for r in range(dp1):
        keys[:, r, :] = rem0[:, :d] + can[r][rank[:, :d]]
    return keys, bary[:, :dp1]


def _row_view(a):
    a = np.ascontiguousarray(a)
    return a.view(np.dtype((np.void, a.dtype.itemsize * a.shape[1]))).ravel()


def _directions(d):
    """The d+1 lattice step vectors in the d-coordinate key space."""
    e = np.ones((d + 1, d), dtype=np.int64)
    for j in range(d):
        e[j, j] = -d
    return e


def _build_np(f, fill=True):
    n, d = f.shape
    keys, bary = _embed_np(f)
    flat = keys.reshape(-1, d)
    occ = np.unique(flat, axis=0)
    steps = _directions(d)
    if fill:
        occ = np.unique(np.vstack([occ] + [occ + e for e in steps] + [occ - e for e in steps]), axis=0)
    uniq = _row_view(occ)
    order = np.argsort(uniq)
    uniq, lat_keys = uniq[order], occ[order]
    m = lat_keys.shape[0]
    offsets = np.searchsorted(uniq, _row_view(flat)).reshape(n, d + 1).astype(np.int64)
    neighbors = np.full((d + 1, m, 2), -1, dtype=np.int64)
    for j in range(d + 1):
        for side, nk in enumerate((lat_keys + steps[j], lat_keys - steps[j])):
            q = _row_view(nk)
            pos = np.minimum(np.searchsorted(uniq, q), m - 1)
            neighbors[j, :, side] = np.where(uniq[pos] == q, pos, -1)
    return offsets, bary, m, neighbors, lat_keys


@njit
def _hash_key(key):
    h = np.uint64(0)
    for k in range(key.shape[0]):
        h = (h + np.uint64(key[k] & 0xFFFFFFFF)) * np.uint64(2531011)
    return h


@njit
def _lookup(table, store, key, mask):
    h = _hash_key(key) & mask
    d = key.shape[0]
    while True:
        e = table[h]
        if e < 0:
            return -1, h
        same = True
        for k in range(d):
            if store[e, k] != key[k]:
                same = False
                break
        if same:
            return e, h
        h = (h + np.uint64(1)) & mask


@njit
def _rehash(store, m, cap):
    table = -np.ones(cap, dtype=np.int64)
    mask = np.uint64(cap - 1)
    for e in range(m):
        h = _hash_key(store[e]) & mask
        while table[h] >= 0:
            h = (h + np.uint64(1)) & mask
        table[h] = e
    return table, mask


@njit
def _insert(table, mask, store, m, key):
    """Index of ``key``, adding it when absent.

    Returns (index, table, mask, store, m); the table and store grow as needed
    and keep the load factor at or below one half.
    """
    e, h = _lookup(table, store, key, mask)
    if e >= 0:
        return e, table, mask, store, m
    if m == store.shape[0]:
        grown = np.empty((2 * m, store.shape[1]), dtype=np.int64)
        grown[:m] = store
        store = grown
    store[m] = key
    if 2 * (m + 1) > table.shape[0]:
        table, mask = _rehash(store, m + 1, 2 * table.shape[0])
    else:
        table[h] = m
    return m, table, mask, store, m + 1


@njit
def _build_nb(f, scale, can, fill):
    n, d = f.shape
    dp1 = d + 1
    cap = 1
    while cap < 2 * n * dp1:
        cap *= 2
    mask = np.uint64(cap - 1)
    table = -np.ones(cap, dtype=np.int64)
    store = np.empty((n * dp1, d), dtype=np.int64)
    m = 0
    offsets = np.empty((n, dp1), dtype=np.int64)
    bary_out = np.empty((n, dp1))
    elev = np.empty(dp1)
    rem0 = np.empty(dp1)
    rank = np.empty(dp1, dtype=np.int64)
    bary = np.empty(d + 2)
    key = np.empty(d, dtype=np.int64)
    for p in range(n):
        sm = 0.0
        for i in range(d, 0, -1):
            cf = f[p, i - 1] * scale[i - 1]
            elev[i] = sm - i * cf
            sm += cf
        elev[0] = sm
        total = 0.0
        for i in range(dp1):
            v = elev[i] / dp1
            up = np.ceil(v) * dp1
            down = np.floor(v) * dp1
            if up - elev[i] < elev[i] - down:
                rem0[i] = up
            else:
                rem0[i] = down
            total += rem0[i]
        s = int(np.rint(total / dp1))
        for i in range(dp1):
            rank[i] = 0
        for i in range(dp1):
            di = elev[i] - rem0[i]
            for j in range(i + 1, dp1):
                if di < elev[j] - rem0[j]:
                    rank[i] += 1
                else:
                    rank[j] += 1
        if s > 0:
            for i in range(dp1):
                if rank[i] >= dp1 - s:
                    rem0[i] -= dp1
                    rank[i] += s - dp1
                else:
                    rank[i] += s
        elif s < 0:
            for i in range(dp1):
                if rank[i] < -s:
                    rem0[i] += dp1
                    rank[i] += dp1 + s
                else:
                    rank[i] += s
        for i in range(d + 2):
            bary[i] = 0.0
        for i in range(dp1):
            v = (elev[i] - rem0[i]) / dp1
            bary[d - rank[i]] += v
            bary[d + 1 - rank[i]] -= v
        bary[0] += 1.0 + bary[d + 1]
        for r in range(dp1):
            for k in range(d):
                key[k] = np.int64(rem0[k]) + can[r, rank[k]]
            e, table, mask, store, m = _insert(table, mask, store, m, key)
            offsets[p, r] = e
            bary_out[p, r] = bary[r]
    if fill:
        # add the one-ring of every occupied vertex so the blur can pass
        # through cells no point landed in
        occupied = m
        for v in range(occupied):
            for j in range(dp1):
                for sign in (1, -1):
                    for k in range(d):
                        key[k] = store[v, k] + sign
                    if j < d:
                        key[j] = store[v, j] - sign * d
                    e, table, mask, store, m = _insert(table, mask, store, m, key)
    neighbors = -np.ones((dp1, m, 2), dtype=np.int64)
    n1 = np.empty(d, dtype=np.int64)
    n2 = np.empty(d, dtype=np.int64)
    for j in range(dp1):
        for v in range(m):
            for k in range(d):
                n1[k] = store[v, k] + 1
                n2[k] = store[v, k] - 1
            if j < d:
                n1[j] = store[v, j] - d
                n2[j] = store[v, j] + d
            neighbors[j, v, 0] = _lookup(table, store, n1, mask)[0]
            neighbors[j, v, 1] = _lookup(table, store, n2, mask)[0]
    return offsets, bary_out, m, neighbors, store[:m].copy()


@njit
def _lattice_filter_nb(offsets, bary, neighbors, m, v, alpha, transpose):
    n, dp1 = offsets.shape
    c = v.shape[1]
    lat = np.zeros((m, c))
    for p in range(n):
        for r in range(dp1):
            o = offsets[p, r]
            b = bary[p, r]
            for l in range(c):
                lat[o, l] += b * v[p, l]
    tmp = np.empty((m, c))
    for jj in range(dp1):
        j = dp1 - 1 - jj if transpose else jj
        for u in range(m):
            a = neighbors[j, u, 0]
            b = neighbors[j, u, 1]
            for l in range(c):
                s = lat[u, l]
                if a >= 0:
                    s += 0.5 * lat[a, l]
                if b >= 0:
                    s += 0.5 * lat[b, l]
                tmp[u, l] = s
        lat, tmp = tmp, lat
    out = np.zeros((n, c))
    for p in range(n):
        for r in range(dp1):
            o = offsets[p, r]
            b = bary[p, r] * alpha
            for l in range(c):
                out[p, l] += b * lat[o, l]
    return out


def _lattice_filter_np(offsets, bary, neighbors, m, v, alpha, transpose):
    n, dp1 = offsets.shape
    c = v.shape[1]
    flat = offsets.ravel()
    contrib = bary[:, :, None] * v[:, None, :]
    lat = np.empty((m, c))
    for l in range(c):
        lat[:, l] = np.bincount(flat, weights=contrib[:, :, l].ravel(), minlength=m)
    padded = np.zeros((m + 1, c))
    order = range(dp1 - 1, -1, -1) if transpose else range(dp1)
    for j in order:
        padded[:m] = lat
        # index -1 reads the zero row
        lat = lat + 0.5 * (padded[neighbors[j, :, 0]] + padded[neighbors[j, :, 1]])
    return alpha * np.einsum("nr,nrc->nc", bary, lat[offsets])


# --- diagonal of the discrete operator ----------------------------------
# Two vertices u, w of one simplex differ by delta = sum_j a_j e_j with every
# a_j in {-1, 0, 1}.  Since the e_j sum to zero there are at most three such
# representations, one per choice of a_d.  In key space
# delta_k = A - (d+1) a_k with A = sum_j a_j, which gives A = (d+1) a_d - sum(delta).
# The blur carries mass from u to w along exactly these step sequences (one
# step per pass, weight 1/2 per nonzero step) when every intermediate vertex
# exists.


@njit
def _diagonal_nb(offsets, bary, neighbors, keys):
    n, dp1 = offsets.shape
    d = dp1 - 1
    out = np.zeros(n)
    a = np.empty(dp1, dtype=np.int64)
    for p in range(n):
        acc = 0.0
        for r in range(dp1):
            w = offsets[p, r]
            for rs in range(dp1):
                u = offsets[p, rs]
                dsum = 0
                for k in range(d):
                    dsum += keys[w, k] - keys[u, k]
                for ad in (-1, 0, 1):
                    big = dp1 * ad - dsum
                    ok = True
                    nonzero = 0 if ad == 0 else 1
                    for k in range(d):
                        num = big - (keys[w, k] - keys[u, k])
                        if num % dp1 != 0:
                            ok = False
                            break
                        ak = num // dp1
                        if ak < -1 or ak > 1:
                            ok = False
                            break
                        a[k] = ak
                        if ak != 0:
                            nonzero += 1
                    if not ok:
                        continue
                    a[d] = ad
                    cur = u
                    for j in range(dp1):
                        if a[j] == 1:
                            cur = neighbors[j, cur, 0]
                        elif a[j] == -1:
                            cur = neighbors[j, cur, 1]
                        if cur < 0:
                            break
                    if cur == w:
                        acc += bary[p, r] * bary[p, rs] * 0.5 ** nonzero
        out[p] = acc
    return out


def _diagonal_np(offsets, bary, neighbors, keys):
    n, dp1 = offsets.shape
    out = np.zeros(n)
    rows = np.arange(n)
    for r in range(dp1):
        w = offsets[:, r]
        for rs in range(dp1):
            u = offsets[:, rs]
            delta = keys[w] - keys[u]
            for ad in (-1, 0, 1):
                num = (dp1 * ad - delta.sum(axis=1))[:, None] - delta
                ok = np.all((num % dp1 == 0) & (np.abs(num) <= dp1), axis=1)
                steps = np.hstack([num // dp1, np.full((n, 1), ad)])
                cur = u.copy()
                for j in range(dp1):
                    nxt = np.where(steps[:, j] == 1, neighbors[j, cur, 0],
                                   np.where(steps[:, j] == -1, neighbors[j, cur, 1], cur))
                    ok &= nxt >= 0
                    cur = np.where(ok, nxt, 0)
                ok &= cur == w
                weight = 0.5 ** np.count_nonzero(steps, axis=1)
                out += np.where(ok, bary[rows, r] * bary[rows, rs] * weight, 0.0)
    return out


@njit
def _probe_sums_nb(f, probes):
    n, d = f.shape
    out = np.zeros(probes.shape[0])
    for t in range(probes.shape[0]):
        i = probes[t]
        acc = 0.0
        for j in range(n):
            d2 = 0.0
            for k in range(d):
                diff = f[i, k] - f[j, k]
                d2 += diff * diff
            acc += np.exp(-0.5 * d2)
        out[t] = acc
    return out


def _probe_sums_np(f, probes):
    d2 = ((f[probes, None, :] - f[None, :, :]) ** 2).sum(axis=-1)
    return np.exp(-0.5 * d2).sum(axis=1)


def probe_indices(n, n_probes):
    step = max(1, n // n_probes)
    return np.arange(0, n, step, dtype=np.int64)[:n_probes]


class PermutohedralLattice:
    """Lattice built once per feature set and reused for every filtering call.

    ``filter(v)`` approximates ``sum_j exp(-|f_i - f_j|^2 / 2) v_j`` including
    the j == i term; ``filter(v, transpose=True)`` applies the exact adjoint
    of the discrete operator.  With ``exclude_self=True`` the diagonal of the
    discrete operator is subtracted instead, so the result approximates the
    sum over j != i.  The diagonal varies from point to point with the
    position inside its simplex, so removing it exactly is more accurate than
    subtracting ``v``.

    With ``fill=True`` the lattice also holds every direct neighbour of an
    occupied vertex, so blurring can carry mass across one empty cell.  The
    effective kernel mass of the raw lattice still depends on how densely
    the data fills the feature space.  With ``n_probes > 0`` a scalar gain is
    fitted by least squares against exact kernel sums at evenly spaced probe
    points (O(n_probes * N) work).  The gain depends on the features only, so
    the operator stays linear in the values.
    """

    def __init__(self, features, use_numba=None, n_probes=256, fill=True, exclude_self=False):
        self.use_numba = USE_NUMBA if use_numba is None else use_numba
        f = np.ascontiguousarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] == 0:
            raise ValueError("features must be a non-empty (N, d) array")
        self.n, self.d = f.shape
        if self.use_numba:
            out = _build_nb(f, _scale_factors(self.d), _canonical(self.d), fill)
        else:
            out = _build_np(f, fill)
        self.offsets, self.bary, self.size, self.neighbors, keys = out
        self.alpha = 1.0 / (1.0 + 2.0 ** (-self.d))
        self.exclude_self = exclude_self
        self.diagonal = None
        if exclude_self:
            fn = _diagonal_nb if self.use_numba else _diagonal_np
            self.diagonal = self.alpha * fn(self.offsets, self.bary, self.neighbors, keys)
        self.gain = 1.0
        if n_probes > 0:
            probes = probe_indices(self.n, n_probes)
            fn = _probe_sums_nb if self.use_numba else _probe_sums_np
            exact = fn(f, probes)
            approx = self.filter(np.ones((self.n, 1)))[probes, 0]
            if exclude_self:
                exact = exact - 1.0
            denom = float(approx @ approx)
            if denom > 0.0:
                self.gain = float(exact @ approx) / denom

    def filter(self, values, transpose=False):
        v = np.ascontiguousarray(values, dtype=np.float64)
        if v.shape[0] != self.n:
            raise ValueError(f"expected {self.n} rows, got {v.shape[0]}")
        fn = _lattice_filter_nb if self.use_numba else _lattice_filter_np
        out = fn(self.offsets, self.bary, self.neighbors, self.size, v, self.alpha, transpose)
        if self.diagonal is not None:
            out -= self.diagonal.reshape((-1,) + (1,) * (v.ndim - 1)) * v
        return self.gain * out
