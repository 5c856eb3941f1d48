"""Hot loops, each with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``S4C_NUMBA`` is not set to
``0``/``false``/``off``. Both paths consume the same counter-based uniforms
in the same order, so they return identical tokens for identical keys.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 1.0 / (1 << 53)

# counter slot 1 ("purpose") of every uniform drawn during generation
PURPOSE_PREFILL = 0
PURPOSE_DRAFT = 1
PURPOSE_ACCEPT = 2
PURPOSE_CORRECT = 3


def numba_requested() -> bool:
    return os.environ.get("S4C_NUMBA", "1").strip().lower() not in ("0", "false", "off", "no")


USE_NUMBA = numba is not None and numba_requested()


# ---------------------------------------------------------------------------
# counter-based uniforms (SplitMix64 finaliser chained over the counters)
# ---------------------------------------------------------------------------


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def stream_key(key: int, stream: int) -> int:
    return mix64(key ^ mix64(stream + GOLDEN))


def counter_uniform(key: int, c0: int, c1: int, c2: int) -> float:
    h = mix64(key + GOLDEN * (c0 + 1))
    h = mix64(h + GOLDEN * (c1 + 1))
    h = mix64(h + GOLDEN * (c2 + 1))
    return (h >> 11) * _INV53


_U_GOLDEN = np.uint64(GOLDEN)
_U_M1 = np.uint64(_M1)
_U_M2 = np.uint64(_M2)
_U1 = np.uint64(1)
_S11 = np.uint64(11)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)


def _mix64_np(z):
    z = (z ^ (z >> _S30)) * _U_M1
    z = (z ^ (z >> _S27)) * _U_M2
    return z ^ (z >> _S31)


def stream_keys_np(key: int, streams: np.ndarray) -> np.ndarray:
    s = np.asarray(streams, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix64_np(np.uint64(key) ^ _mix64_np(s + _U_GOLDEN))


def counter_uniform_np(keys: np.ndarray, c0, c1, c2) -> np.ndarray:
    """Vectorised :func:`counter_uniform`; counters broadcast against ``keys``."""
    k = np.asarray(keys, dtype=np.uint64)
    a = np.asarray(c0, dtype=np.uint64)
    b = np.asarray(c1, dtype=np.uint64)
    c = np.asarray(c2, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix64_np(k + _U_GOLDEN * (a + _U1))
        h = _mix64_np(h + _U_GOLDEN * (b + _U1))
        h = _mix64_np(h + _U_GOLDEN * (c + _U1))
    return (h >> _S11).astype(np.float64) * _INV53


# ---------------------------------------------------------------------------
# inverse-CDF sampling
# ---------------------------------------------------------------------------


def _last_nonzero_np(p: np.ndarray) -> int:
    nz = np.flatnonzero(p > 0.0)
    return int(nz[-1]) if nz.size else p.shape[0] - 1


def sample_index_np(p: np.ndarray, u: float) -> int:
    cum = np.cumsum(p)
    i = int(np.searchsorted(cum, u, side="right"))
    if i >= p.shape[0]:
        return _last_nonzero_np(p)
    return i


def sample_rows_np(q: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(q, axis=1)
    idx = (cum <= u[:, None]).sum(axis=1)
    over = idx >= q.shape[1]
    if over.any():
        nz = q[over] > 0.0
        last = q.shape[1] - 1 - np.argmax(nz[:, ::-1], axis=1)
        idx[over] = last
    return idx


def exclude_np(q: np.ndarray, x: int) -> np.ndarray:
    """``q`` with token ``x`` removed and the rest renormalised (unchanged mass-free rows stay zero)."""
    r = q.copy()
    r[x] = 0.0
    s = np.cumsum(r)[-1]
    return r / s if s > 0.0 else r


def exclude_rows_np(q: np.ndarray, x: np.ndarray) -> np.ndarray:
    r = q.copy()
    r[np.arange(q.shape[0]), x] = 0.0
    s = np.cumsum(r, axis=1)[:, -1]
    pos = s > 0.0
    r[pos] /= s[pos, None]
    return r


def residual_rows_np(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    r = np.maximum(p - q, 0.0)
    s = np.cumsum(r, axis=1)[:, -1]
    out = p.copy()
    pos = s > 0.0
    out[pos] = r[pos] / s[pos, None]
    return out


# ---------------------------------------------------------------------------
# tree ancestry
# ---------------------------------------------------------------------------


def ancestor_mask_np(parents: np.ndarray) -> np.ndarray:
    n = parents.shape[0]
    mask = np.zeros((n, n), dtype=np.bool_)
    rows = np.arange(n)
    cur = rows.copy()
    while True:
        live = cur >= 0
        if not live.any():
            break
        mask[rows[live], cur[live]] = True
        nxt = np.full(n, -1, dtype=np.int64)
        nxt[live] = parents[cur[live]]
        cur = nxt
    return mask


# ---------------------------------------------------------------------------
# tabular speculative sampling (Monte-Carlo losslessness runs)
# ---------------------------------------------------------------------------


def chain_tree_topology(depth: int, branches: int, top_k: int):
    """Parents, vertical flags and child lists of the fixed sampled-tree layout.

    Node 0 is the root. Depth 1 holds ``branches`` vertical nodes then
    ``top_k - 1`` horizontal leaves; every deeper level holds, per branch,
    one vertical node then ``top_k - 1`` horizontal leaves.
    """
    parents = [-1]
    vertical = [True]
    last = []
    for c in range(branches + top_k - 1):
        parents.append(0)
        vertical.append(c < branches)
        if c < branches:
            last.append(len(parents) - 1)
    for _ in range(2, depth + 1):
        for b in range(branches):
            par = last[b]
            for c in range(top_k):
                parents.append(par)
                vertical.append(c == 0)
                if c == 0:
                    last[b] = len(parents) - 1
    n = len(parents)
    kids = [[] for _ in range(n)]
    for i in range(1, n):
        kids[parents[i]].append(i)
    maxc = max(len(k) for k in kids)
    children = np.full((n, max(maxc, 1)), -1, dtype=np.int64)
    for i, k in enumerate(kids):
        children[i, : len(k)] = k
    return np.asarray(parents, np.int64), np.asarray(vertical, np.bool_), children


def spec_sample_tabular_np(target_t, draft_t, prompt_tok, n_tokens, keys, depth, branches, top_k):
    """Vectorised over samples. Returns (sequences, rounds, accepted-length histogram)."""
    parents, _, children = chain_tree_topology(depth, branches, top_k)
    n_nodes = parents.shape[0]
    maxc = children.shape[1]
    n_samples = keys.shape[0]
    out = np.zeros((n_samples, n_tokens + depth + 1), dtype=np.int64)
    cnt = np.zeros(n_samples, dtype=np.int64)
    rounds = np.zeros(n_samples, dtype=np.int64)
    hist = np.zeros(depth + 1, dtype=np.int64)

    p0 = np.broadcast_to(target_t[prompt_tok], (n_samples, target_t.shape[1]))
    out[:, 0] = sample_rows_np(p0, counter_uniform_np(keys, 0, PURPOSE_PREFILL, 0))
    cnt[:] = 1
    t0 = out[:, 0].copy()
    r = 0
    while True:
        act = np.flatnonzero(cnt < n_tokens)
        if act.size == 0:
            break
        r += 1
        a = act.size
        ka = keys[act]
        ar = np.arange(a)
        tok = np.full((a, n_nodes), -1, dtype=np.int64)
        tok[:, 0] = t0[act]
        for i in range(n_nodes):
            q = draft_t[np.maximum(tok[:, i], 0)]
            live = tok[:, i] >= 0
            for c in children[i]:
                if c < 0:
                    break
                live &= np.cumsum(q, axis=1)[:, -1] > 0.0
                drawn = sample_rows_np(q, counter_uniform_np(ka, r, PURPOSE_DRAFT, c))
                tok[:, c] = np.where(live, drawn, -1)
                q = exclude_rows_np(q, drawn)

        cur = np.zeros(a, dtype=np.int64)
        p = target_t[tok[:, 0]].copy()
        done = np.zeros(a, dtype=np.bool_)
        length = np.zeros(a, dtype=np.int64)
        path = np.zeros((a, depth), dtype=np.int64)
        while not done.all():
            live = ~done
            q = draft_t[tok[ar, cur]].copy()
            ch = children[cur]
            chosen = np.full(a, -1, dtype=np.int64)
            resolved = done.copy()
            for j in range(maxc):
                c = ch[:, j]
                cc = np.maximum(c, 0)
                x = tok[ar, cc]
                test = ~resolved & (c >= 0) & (x >= 0)
                if not test.any():
                    continue
                uu = counter_uniform_np(ka, r, PURPOSE_ACCEPT, cc)
                with np.errstate(divide="ignore", invalid="ignore"):
                    ratio = np.minimum(1.0, p[ar, x] / q[ar, x])
                acc = test & (uu < ratio)
                chosen[acc] = c[acc]
                resolved |= acc
                rej = test & ~acc
                if rej.any():
                    p[rej] = residual_rows_np(p[rej], q[rej])
                    q[rej] = exclude_rows_np(q[rej], x[rej])
            adv = live & (chosen >= 0)
            done |= live & (chosen < 0)
            if adv.any():
                ia = np.flatnonzero(adv)
                path[ia, length[ia]] = tok[ia, chosen[ia]]
                length[ia] += 1
                cur[ia] = chosen[ia]
                p[ia] = target_t[tok[ia, cur[ia]]]
        corr = sample_rows_np(p, counter_uniform_np(ka, r, PURPOSE_CORRECT, 0))
        base = cnt[act]
        for l in range(depth):
            m = length > l
            out[act[m], base[m] + l] = path[m, l]
        out[act, base + length] = corr
        cnt[act] = base + length + 1
        rounds[act] += 1
        hist += np.bincount(length, minlength=depth + 1)
        t0[act] = corr
    return out[:, :n_tokens], rounds, hist


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if numba is not None:
    _njit = numba.njit(cache=True, nogil=True)

    @_njit
    def _mix64_nb(z):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))

    @_njit
    def _uniform_nb(key, c0, c1, c2):
        g = np.uint64(GOLDEN)
        h = _mix64_nb(key + g * (np.uint64(c0) + np.uint64(1)))
        h = _mix64_nb(h + g * (np.uint64(c1) + np.uint64(1)))
        h = _mix64_nb(h + g * (np.uint64(c2) + np.uint64(1)))
        return np.float64(h >> np.uint64(11)) * _INV53

    @_njit
    def _sample_nb(p, u):
        c = 0.0
        n = p.shape[0]
        for i in range(n):
            c += p[i]
            if u < c:
                return i
        for i in range(n - 1, -1, -1):
            if p[i] > 0.0:
                return i
        return n - 1

    @_njit
    def _residual_nb(p, q):
        n = p.shape[0]
        r = np.empty(n)
        s = 0.0
        for i in range(n):
            d = p[i] - q[i]
            r[i] = d if d > 0.0 else 0.0
            s += r[i]
        if s > 0.0:
            for i in range(n):
                r[i] = r[i] / s
            return r
        return p.copy()

    @_njit
    def _exclude_nb(q, x):
        r = q.copy()
        r[x] = 0.0
        s = 0.0
        for i in range(r.shape[0]):
            s += r[i]
        if s > 0.0:
            for i in range(r.shape[0]):
                r[i] = r[i] / s
        return r

    @_njit
    def ancestor_mask_nb(parents):
        n = parents.shape[0]
        mask = np.zeros((n, n), dtype=np.bool_)
        for i in range(n):
            j = i
            while j >= 0:
                mask[i, j] = True
                j = parents[j]
        return mask

    @_njit
    def sample_index_nb(p, u):
        return _sample_nb(p, u)

    @_njit
    def spec_sample_tabular_nb(target_t, draft_t, prompt_tok, n_tokens, keys,
                               parents, children, depth):
        n_samples = keys.shape[0]
        n_nodes = parents.shape[0]
        maxc = children.shape[1]
        out = np.zeros((n_samples, n_tokens), dtype=np.int64)
        rounds = np.zeros(n_samples, dtype=np.int64)
        hist = np.zeros(depth + 1, dtype=np.int64)
        tok = np.zeros(n_nodes, dtype=np.int64)
        path = np.zeros(depth, dtype=np.int64)
        buf = np.zeros(n_tokens + depth + 1, dtype=np.int64)
        for s in range(n_samples):
            key = keys[s]
            buf[0] = _sample_nb(target_t[prompt_tok], _uniform_nb(key, 0, 0, 0))
            cnt = 1
            t0 = buf[0]
            r = 0
            while cnt < n_tokens:
                r += 1
                tok[0] = t0
                for i in range(1, n_nodes):
                    tok[i] = -1
                for i in range(n_nodes):
                    if tok[i] < 0:
                        continue
                    q = draft_t[tok[i]].copy()
                    for j in range(maxc):
                        c = children[i, j]
                        if c < 0:
                            break
                        mass = 0.0
                        for v in range(q.shape[0]):
                            mass += q[v]
                        if mass <= 0.0:
                            break
                        tok[c] = _sample_nb(q, _uniform_nb(key, r, 1, c))
                        q = _exclude_nb(q, tok[c])
                cur = 0
                length = 0
                p = target_t[tok[0]].copy()
                while True:
                    q = draft_t[tok[cur]].copy()
                    chosen = -1
                    for j in range(maxc):
                        c = children[cur, j]
                        if c < 0 or tok[c] < 0:
                            break
                        x = tok[c]
                        ratio = p[x] / q[x]
                        if ratio > 1.0:
                            ratio = 1.0
                        if _uniform_nb(key, r, 2, c) < ratio:
                            chosen = c
                            break
                        p = _residual_nb(p, q)
                        q = _exclude_nb(q, x)
                    if chosen < 0:
                        break
                    path[length] = tok[chosen]
                    length += 1
                    cur = chosen
                    p = target_t[tok[cur]].copy()
                corr = _sample_nb(p, _uniform_nb(key, r, 3, 0))
                for l in range(length):
                    buf[cnt + l] = path[l]
                buf[cnt + length] = corr
                cnt += length + 1
                hist[length] += 1
                t0 = corr
            rounds[s] = r
            for l in range(n_tokens):
                out[s, l] = buf[l]
        return out, rounds, hist


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def ancestor_mask(parents: np.ndarray) -> np.ndarray:
    parents = np.ascontiguousarray(parents, dtype=np.int64)
    if USE_NUMBA:
        return ancestor_mask_nb(parents)
    return ancestor_mask_np(parents)


def sample_index(p: np.ndarray, u: float) -> int:
    if USE_NUMBA:
        return int(sample_index_nb(np.ascontiguousarray(p, dtype=np.float64), float(u)))
    return sample_index_np(p, u)


def spec_sample_tabular(target_t, draft_t, prompt_tok, n_tokens, keys, depth, branches, top_k,
                        use_numba: bool | None = None):
    """Run ``len(keys)`` independent tabular draft/verify generations.

    ``target_t``/``draft_t`` are already-tempered (V, V) next-token tables.
    The tree topology is fixed, so when a draft row has fewer nonzero tokens
    than a node has children the surplus nodes are left empty (token -1);
    node-indexed draws then differ from the Python path, which compacts them.
    """
    target_t = np.ascontiguousarray(target_t, dtype=np.float64)
    draft_t = np.ascontiguousarray(draft_t, dtype=np.float64)
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        if numba is None:
            raise RuntimeError("numba is not installed")
        parents, _, children = chain_tree_topology(depth, branches, top_k)
        return spec_sample_tabular_nb(target_t, draft_t, int(prompt_tok), int(n_tokens), keys,
                                      parents, children, int(depth))
    return spec_sample_tabular_np(target_t, draft_t, int(prompt_tok), int(n_tokens), keys,
                                  depth, branches, top_k)
