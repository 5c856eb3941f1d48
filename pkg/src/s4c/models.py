"""Target-model backends: a small KV-cached transformer and an exact n-gram table.

Both expose ``forward(tokens, cache, attn_mask=None, positions=None)`` and
``next_token_dists(result, temperature)``, which is all the drafter and the
verifier rely on.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import layers
from .errors import ArgumentError, CapacityError, ModelError, ShapeError
from .mathcore import softmax, temper


@dataclass(frozen=True)
class ModelSpec:
    vocab_size: int = 256
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_limit: int = 512
    backend: str = "transformer"

    def __post_init__(self):
        if self.backend not in ("transformer", "tabular"):
            raise ArgumentError(f"unknown backend {self.backend!r}")
        if self.vocab_size < 2:
            raise ArgumentError("vocab_size must be >= 2")
        if self.context_limit < 1:
            raise ArgumentError("context_limit must be >= 1")
        if self.n_heads < 1 or self.hidden_dim % self.n_heads:
            raise ArgumentError("hidden_dim must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class ForwardResult:
    features: np.ndarray  # (positions, hidden): post-final-norm hidden states
    logits: np.ndarray  # (positions, vocab)
    probs: np.ndarray | None = None  # exact next-token probabilities (tabular backend)

    def __len__(self) -> int:
        return self.features.shape[0]


class KVCache:
    """Per-layer keys/values for already-processed positions, plus their tokens."""

    def __init__(self, n_layers: int, capacity: int, hidden: int):
        self.capacity = capacity
        self.keys = [np.zeros((capacity, hidden)) for _ in range(n_layers)]
        self.values = [np.zeros((capacity, hidden)) for _ in range(n_layers)]
        self.tokens: list[int] = []

    @property
    def length(self) -> int:
        return len(self.tokens)

    def truncate(self, length: int) -> None:
        if not 0 <= length <= self.length:
            raise ArgumentError(f"cannot truncate cache of length {self.length} to {length}")
        del self.tokens[length:]

    def keep(self, indices: Sequence[int]) -> None:
        """Compact the cache down to ``indices`` (ascending), discarding the rest."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.length):
            raise ArgumentError("cache indices must be strictly increasing and in range")
        m = idx.size
        # entries already in place (the usual untouched prefix) need no copy
        moved = np.flatnonzero(idx != np.arange(m))
        if moved.size:
            lo = int(moved[0])
            for store in (self.keys, self.values):
                for arr in store:
                    arr[lo:m] = arr[idx[lo:]]
        self.tokens = [self.tokens[i] for i in idx]

    def reset(self) -> None:
        self.tokens = []

    @property
    def nbytes_used(self) -> int:
        per = sum(a.shape[1] for a in self.keys) * 2 * 8
        return per * self.length


def _check_mask(attn_mask, n):
    mask = np.asarray(attn_mask, dtype=np.bool_)
    if mask.shape != (n, n):
        raise ShapeError(f"attention mask shape {mask.shape} does not match {n} new tokens")
    return mask


def round_f32(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Round every tensor to float32 precision (the on-disk precision), kept as float64."""
    return {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in params.items()}


def checksum(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype=np.float64).tobytes())
    return h.hexdigest()


def init_transformer_params(spec: ModelSpec, seed: int = 0, scale: float = 0.02) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    h = spec.hidden_dim
    p = {
        "tok_emb": rng.normal(0.0, scale, (spec.vocab_size, h)),
        "pos_emb": rng.normal(0.0, scale, (spec.context_limit, h)),
    }
    for layer in range(spec.n_layers):
        p.update(layers.init_block(rng, h, spec.n_layers, f"layers.{layer}.", scale))
    p["final_norm"] = np.ones(h)
    p["lm_head"] = rng.normal(0.0, scale, (h, spec.vocab_size))
    return round_f32(p)


def transformer_param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    h, v = spec.hidden_dim, spec.vocab_size
    shapes = {"tok_emb": (v, h), "pos_emb": (spec.context_limit, h)}
    for layer in range(spec.n_layers):
        pre = f"layers.{layer}."
        shapes.update({pre + "attn_norm": (h,), pre + "wq": (h, h), pre + "wk": (h, h),
                       pre + "wv": (h, h), pre + "wo": (h, h), pre + "mlp_norm": (h,),
                       pre + "w1": (h, 4 * h), pre + "w2": (4 * h, h)})
    shapes["final_norm"] = (h,)
    shapes["lm_head"] = (h, v)
    return shapes


class TransformerModel:
    """Pre-norm decoder-only transformer; weights are frozen (read-only arrays)."""

    def __init__(self, spec: ModelSpec, params: Mapping[str, np.ndarray]):
        if spec.backend != "transformer":
            raise ArgumentError("TransformerModel needs a transformer ModelSpec")
        expected = transformer_param_shapes(spec)
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ModelError(f"weight names mismatch: missing={missing} extra={extra}")
        self.spec = spec
        self.params: dict[str, np.ndarray] = {}
        for name, shape in expected.items():
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ModelError(f"{name}: shape {arr.shape} != {shape}")
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name}: non-finite entries")
            arr.flags.writeable = False
            self.params[name] = arr

    @classmethod
    def random(cls, spec: ModelSpec | None = None, seed: int = 0, scale: float = 0.02):
        spec = spec or ModelSpec()
        return cls(spec, init_transformer_params(spec, seed, scale))

    @property
    def vocab_size(self) -> int:
        return self.spec.vocab_size

    @property
    def hidden_dim(self) -> int:
        return self.spec.hidden_dim

    def new_cache(self) -> KVCache:
        return KVCache(self.spec.n_layers, self.spec.context_limit, self.spec.hidden_dim)

    def checksum(self) -> str:
        return checksum(self.params)

    @property
    def nbytes(self) -> int:
        return sum(a.size for a in self.params.values()) * 4

    def embed(self, token: int) -> np.ndarray:
        if not 0 <= int(token) < self.spec.vocab_size:
            raise ArgumentError(f"token {token} outside vocabulary of {self.spec.vocab_size}")
        return self.params["tok_emb"][int(token)]

    def lm_head(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        if f.shape[-1] != self.spec.hidden_dim:
            raise ShapeError(f"feature dim {f.shape[-1]} != hidden_dim {self.spec.hidden_dim}")
        return f @ self.params["lm_head"]

    def forward(self, tokens: Sequence[int], cache: KVCache, attn_mask=None, positions=None) -> ForwardResult:
        spec = self.spec
        p = self.params
        n = len(tokens)
        h = spec.hidden_dim
        if n == 0:
            return ForwardResult(np.zeros((0, h)), np.zeros((0, spec.vocab_size)))
        start = cache.length
        if start + n > spec.context_limit:
            raise CapacityError(f"context of {start + n} tokens exceeds limit {spec.context_limit}")
        tok = np.asarray(tokens, dtype=np.int64)
        if tok.min() < 0 or tok.max() >= spec.vocab_size:
            raise ArgumentError("token id outside vocabulary")
        if attn_mask is None:
            mask = np.tri(n, dtype=np.bool_)
        else:
            mask = _check_mask(attn_mask, n)
        if positions is None:
            pos = np.arange(start, start + n)
        else:
            pos = np.asarray(positions, dtype=np.int64)
            if pos.shape != (n,):
                raise ShapeError("one position id per new token")
            if pos.min() < 0 or pos.max() >= spec.context_limit:
                raise CapacityError("position id beyond context limit")
        full = np.concatenate([np.ones((n, start), dtype=np.bool_), mask], axis=1)
        x = p["tok_emb"][tok] + p["pos_emb"][pos]
        for layer in range(spec.n_layers):
            x = layers.block_infer(p, f"layers.{layer}.", x, cache.keys[layer], cache.values[layer],
                                   start, full, spec.n_heads)
        cache.tokens.extend(int(t) for t in tok)
        feats = layers.rms_forward(x, p["final_norm"])[0]
        return ForwardResult(feats, feats @ p["lm_head"])

    def next_token_dists(self, result: ForwardResult, temperature: float) -> np.ndarray:
        return softmax(result.logits, temperature)

    def train_forward(self, windows: np.ndarray, params=None):
        """Full causal forward over ``(batch, time)`` windows; returns (features, logits, saved)."""
        return transformer_train_forward(params or self.params, self.spec, windows)


def transformer_train_forward(p, spec: ModelSpec, windows: np.ndarray):
    windows = np.asarray(windows, dtype=np.int64)
    t = windows.shape[1]
    mask = np.tri(t, dtype=np.bool_)
    x = p["tok_emb"][windows] + p["pos_emb"][:t]
    saved = []
    for layer in range(spec.n_layers):
        x, s = layers.block_forward(p, f"layers.{layer}.", x, spec.n_heads, mask)
        saved.append(s)
    feats, s_final = layers.rms_forward(x, p["final_norm"])
    logits = feats @ p["lm_head"]
    return feats, logits, (saved, s_final, feats, windows)


def transformer_train_backward(p, spec: ModelSpec, saved, dlogits, dfeats=None):
    block_saved, s_final, feats, windows = saved
    grads = {"lm_head": feats.reshape(-1, feats.shape[-1]).T @ dlogits.reshape(-1, dlogits.shape[-1])}
    df = dlogits @ p["lm_head"].T
    if dfeats is not None:
        df = df + dfeats
    dx, grads["final_norm"] = layers.rms_backward(df, p["final_norm"], s_final)
    for layer in reversed(range(spec.n_layers)):
        dx, g = layers.block_backward(dx, p, f"layers.{layer}.", block_saved[layer], spec.n_heads)
        grads.update(g)
    t = windows.shape[1]
    dpos = np.zeros_like(p["pos_emb"])
    dpos[:t] = dx.sum(axis=0)
    grads["pos_emb"] = dpos
    demb = np.zeros_like(p["tok_emb"])
    np.add.at(demb, windows.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    grads["tok_emb"] = demb
    return grads


# ---------------------------------------------------------------------------
# tabular backend
# ---------------------------------------------------------------------------


def tabular_next_dist(context: Sequence[int], table: Mapping[tuple, np.ndarray], order: int = 1) -> np.ndarray:
    key = tuple(int(t) for t in context[-order:]) if order else ()
    try:
        return table[key]
    except KeyError:
        raise ModelError(f"no distribution for context {key}") from None


class TabularModel:
    """Exact conditional-table language model over the last ``order`` tokens."""

    def __init__(self, table: Mapping[tuple, Sequence[float]], vocab_size: int, order: int = 1):
        if order < 0:
            raise ArgumentError("order must be >= 0")
        self.order = order
        self.spec = ModelSpec(vocab_size=vocab_size, hidden_dim=1, n_layers=0, n_heads=1,
                              context_limit=1 << 30, backend="tabular")
        self.table: dict[tuple, np.ndarray] = {}
        for ctx, row in table.items():
            r = np.array(row, dtype=np.float64)
            if r.shape != (vocab_size,):
                raise ShapeError(f"row for {ctx} has shape {r.shape}")
            if np.any(r < 0) or abs(r.sum() - 1.0) > 1e-12:
                raise ArgumentError(f"row for {ctx} is not a distribution")
            r.flags.writeable = False
            self.table[tuple(ctx)] = r

    @classmethod
    def from_matrix(cls, matrix) -> "TabularModel":
        """Order-1 model whose row ``i`` is the next-token distribution after token ``i``."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError("an order-1 table is a square matrix")
        return cls({(i,): m[i] for i in range(m.shape[0])}, m.shape[0], order=1)

    @classmethod
    def random(cls, vocab_size: int, seed: int = 0, concentration: float = 1.0) -> "TabularModel":
        rng = np.random.default_rng(seed)
        return cls.from_matrix(rng.dirichlet(np.full(vocab_size, concentration), size=vocab_size))

    @property
    def vocab_size(self) -> int:
        return self.spec.vocab_size

    hidden_dim = 1

    def matrix(self) -> np.ndarray:
        if self.order != 1:
            raise ModelError("matrix form exists only for order-1 tables")
        return np.stack([self.table[(i,)] for i in range(self.vocab_size)])

    def tempered_matrix(self, temperature: float) -> np.ndarray:
        return temper(self.matrix(), temperature)

    def new_cache(self) -> KVCache:
        return KVCache(0, self.spec.context_limit, 1)

    def checksum(self) -> str:
        return checksum({repr(k): v for k, v in self.table.items()})

    @property
    def nbytes(self) -> int:
        return sum(v.nbytes for v in self.table.values())

    def next_dist(self, context: Sequence[int]) -> np.ndarray:
        return tabular_next_dist(context, self.table, self.order)

    def forward(self, tokens: Sequence[int], cache: KVCache, attn_mask=None, positions=None) -> ForwardResult:
        n = len(tokens)
        if n == 0:
            return ForwardResult(np.zeros((0, 1)), np.zeros((0, self.vocab_size)), np.zeros((0, self.vocab_size)))
        mask = np.tri(n, dtype=np.bool_) if attn_mask is None else _check_mask(attn_mask, n)
        tok = [int(t) for t in tokens]
        if min(tok) < 0 or max(tok) >= self.vocab_size:
            raise ArgumentError("token id outside vocabulary")
        probs = np.empty((n, self.vocab_size))
        hist = cache.tokens[-self.order:] if self.order else []
        for i in range(n):
            visible = [tok[j] for j in np.flatnonzero(mask[i, : i + 1])]
            probs[i] = self.next_dist(hist + visible)
        cache.tokens.extend(tok)
        with np.errstate(divide="ignore"):
            logits = np.maximum(np.log(probs), -1e300)
        return ForwardResult(np.zeros((n, 1)), logits, probs)

    def next_token_dists(self, result: ForwardResult, temperature: float) -> np.ndarray:
        return temper(result.probs, temperature)
