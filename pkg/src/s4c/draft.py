"""Multi-head autoregressive draft model.

Each head fuses a token embedding with a feature vector, adds one learned
slot vector per emitted position and runs every slot row through a small
decoder stack in parallel. Rows attend to the session's verified history
but never to each other, so a head's ``tokens_per_head`` outputs carry no
mutual dependency. The next head takes
its input from the previous head's last token and feature, which is where
the cross-head autoregression comes from.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import layers, weights_io
from .errors import ArgumentError, CapacityError, ModelError, ShapeError, WeightFormatError
from .mathcore import softmax, temper, top_k
from .models import KVCache, ModelSpec, TransformerModel, checksum, round_f32
from .rng import Rng
from .tree import DraftTree, expand


@dataclass(frozen=True)
class DraftConfig:
    n_heads: int = 3
    tokens_per_head: int = 2
    head1_branches: int = 2
    horizontal_top_k: int = 3
    draft_layers_per_head: int = 1

    def __post_init__(self):
        for name in ("n_heads", "tokens_per_head", "head1_branches", "horizontal_top_k",
                     "draft_layers_per_head"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ArgumentError(f"{name} must be an integer >= 1, got {value!r}")

    @property
    def max_depth(self) -> int:
        return self.n_heads * self.tokens_per_head

    @property
    def max_nodes(self) -> int:
        """Drafted nodes per round, root excluded."""
        b, k = self.head1_branches, self.horizontal_top_k
        return (b + k - 1) + (self.max_depth - 1) * b * k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DraftConfig":
        return cls(**{k: int(d[k]) for k in cls.__dataclass_fields__ if k in d})


def head_prefix(head: int) -> str:
    return f"heads.{head}."


def draft_param_shapes(hidden: int, cfg: DraftConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for k in range(cfg.n_heads):
        pre = head_prefix(k)
        shapes[pre + "fuse"] = (2 * hidden, hidden)
        shapes[pre + "slot"] = (cfg.tokens_per_head, hidden)
        for j in range(cfg.draft_layers_per_head):
            lp = f"{pre}layers.{j}."
            shapes.update({lp + "attn_norm": (hidden,), lp + "wq": (hidden, hidden),
                           lp + "wk": (hidden, hidden), lp + "wv": (hidden, hidden),
                           lp + "wo": (hidden, hidden), lp + "mlp_norm": (hidden,),
                           lp + "w1": (hidden, 4 * hidden), lp + "w2": (4 * hidden, hidden)})
    return shapes


def init_draft_params(hidden: int, cfg: DraftConfig, seed: int = 0, scale: float = 0.02,
                      emb_gain: float = 0.0, slot_scale: float = 1.0) -> dict[str, np.ndarray]:
    """Fusion starts as ``[emb_gain * I | I]`` plus small noise.

    The identity blocks pass the feature through and lift the token
    embedding to a comparable scale. Slot vectors start at ``slot_scale`` per
    coordinate so the rows of one head are distinguishable from the outset.
    """
    rng = np.random.default_rng(seed)
    p = {}
    for k in range(cfg.n_heads):
        pre = head_prefix(k)
        fuse = rng.normal(0.0, scale, (2 * hidden, hidden))
        fuse[:hidden] += emb_gain * np.eye(hidden)
        fuse[hidden:] += np.eye(hidden)
        p[pre + "fuse"] = fuse
        p[pre + "slot"] = rng.normal(0.0, slot_scale, (cfg.tokens_per_head, hidden))
        for j in range(cfg.draft_layers_per_head):
            p.update(layers.init_block(rng, hidden, cfg.draft_layers_per_head, f"{pre}layers.{j}.", scale))
    return round_f32(p)


def target_init_params(target: TransformerModel, cfg: DraftConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Draft init scaled to ``target``: embeddings lifted to the feature scale."""
    rms = lambda a: float(np.sqrt(np.mean(np.square(a))))  # noqa: E731
    emb_gain = rms(target.params["final_norm"]) / max(rms(target.params["tok_emb"]), 1e-12)
    return init_draft_params(target.hidden_dim, cfg, seed, emb_gain=emb_gain)


class S4CDraft:
    """Draft heads on top of a frozen target's embedding table and LM head."""

    def __init__(self, target: TransformerModel, cfg: DraftConfig, params: Mapping[str, np.ndarray]):
        self.target = target
        self.cfg = cfg
        expected = draft_param_shapes(target.hidden_dim, cfg)
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ModelError(f"draft weight names mismatch: missing={missing} extra={extra}")
        self.params: dict[str, np.ndarray] = {}
        for name, shape in expected.items():
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ModelError(f"{name}: shape {arr.shape} != {shape}")
            arr.flags.writeable = False
            self.params[name] = arr
        self.forward_calls = 0

    @classmethod
    def random(cls, target: TransformerModel, cfg: DraftConfig | None = None, seed: int = 0):
        cfg = cfg or DraftConfig()
        return cls(target, cfg, target_init_params(target, cfg, seed))

    @property
    def hidden_dim(self) -> int:
        return self.target.hidden_dim

    @property
    def nbytes(self) -> int:
        """Size of the draft's own tensors at on-disk (float32) precision."""
        return sum(a.size for a in self.params.values()) * 4

    def checksum(self) -> str:
        return checksum(self.params)

    def _check_head(self, head: int) -> None:
        if not 0 <= head < self.cfg.n_heads:
            raise ArgumentError(f"head {head} outside 0..{self.cfg.n_heads - 1}")

    def fuse(self, e, f, head: int) -> np.ndarray:
        """``concat[e, f] @ W_fuse``; works on single vectors or stacked rows."""
        self._check_head(head)
        e = np.asarray(e, dtype=np.float64)
        f = np.asarray(f, dtype=np.float64)
        h = self.hidden_dim
        if e.shape[-1] != h or f.shape[-1] != h or e.shape != f.shape:
            raise ShapeError(f"fuse needs two matching vectors of dim {h}, got {e.shape} and {f.shape}")
        return np.concatenate([e, f], axis=-1) @ self.params[head_prefix(head) + "fuse"]

    def draft_head_forward(self, h_rows, head: int, cache: KVCache | None = None) -> np.ndarray:
        """Run a head's decoder stack over independent rows.

        Rows never attend to each other. With a history ``cache`` (see
        :meth:`observe`) each row also attends to every cached position;
        without one it sees only itself. The cache is read, never written.
        """
        self._check_head(head)
        x = np.asarray(h_rows, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.ndim != 2 or x.shape[1] != self.hidden_dim:
            raise ShapeError(f"head rows must have dim {self.hidden_dim}, got {x.shape}")
        self.forward_calls += 1
        p = self.params
        n_att = self.target.spec.n_heads
        pre = head_prefix(head)
        for j in range(self.cfg.draft_layers_per_head):
            lp = f"{pre}layers.{j}."
            if cache is None or cache.length == 0:
                x = layers.block_forward(p, lp, x[None], n_att)[0][0]
            else:
                x = layers.block_query(p, lp, x, cache.keys[j], cache.values[j], cache.length, n_att)
        return x[0] if single else x

    def new_cache(self, capacity: int | None = None) -> KVCache:
        return KVCache(self.cfg.draft_layers_per_head, capacity or self.target.spec.context_limit,
                       self.hidden_dim)

    def new_state(self) -> list[KVCache]:
        """One history cache per head for a fresh generation session."""
        return [self.new_cache() for _ in range(self.cfg.n_heads)]

    def observe(self, state: list[KVCache] | None, next_tokens: Sequence[int], features) -> None:
        """Append verified history rows ``concat[e(x[t+1]), F[t]]`` to every head's cache.

        ``next_tokens[r]`` is the token that followed the position whose
        target feature is ``features[r]``.
        """
        if state is None:
            return
        toks = np.asarray(next_tokens, dtype=np.int64)
        feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if toks.size == 0:
            return
        if feats.shape != (toks.size, self.hidden_dim):
            raise ShapeError(f"need one feature row per token, got {feats.shape} for {toks.size}")
        inp = np.concatenate([self.target.params["tok_emb"][toks], feats], axis=-1)
        n_att = self.target.spec.n_heads
        last = self.cfg.draft_layers_per_head - 1
        for head, cache in enumerate(state):
            start, n = cache.length, toks.size
            if start + n > cache.capacity:
                raise CapacityError(f"draft history of {start + n} rows exceeds {cache.capacity}")
            pre = head_prefix(head)
            x = inp @ self.params[pre + "fuse"]
            visible = np.concatenate([np.ones((n, start), dtype=np.bool_), np.tri(n, dtype=np.bool_)], axis=1)
            for j in range(last + 1):
                lp = f"{pre}layers.{j}."
                if j < last:
                    x = layers.block_infer(self.params, lp, x, cache.keys[j], cache.values[j], start, visible, n_att)
                else:
                    k, v, _ = layers.kv_project(self.params, lp, x)
                    cache.keys[j][start:start + n] = k
                    cache.values[j][start:start + n] = v
            cache.tokens.extend(int(t) for t in toks)

    def head_rows(self, token: int, feature, head: int) -> np.ndarray:
        """The ``tokens_per_head`` input rows of one head: fused input plus each slot vector."""
        h = self.fuse(self.target.embed(token), feature, head)
        return h + self.params[head_prefix(head) + "slot"]

    def draft_next(self, f_next, k: int, temperature: float = 1.0) -> list[tuple[int, np.ndarray, float]]:
        """Top-``k`` tokens of ``softmax(lm_head(f) / T)`` with their embeddings and probabilities."""
        if k < 1:
            raise ArgumentError("k must be >= 1")
        logits = self.target.lm_head(f_next)
        dist = softmax(logits, temperature if temperature > 0 else 1.0)
        return [(tok, self.target.embed(tok), prob) for tok, prob in top_k(dist, k)]

    def _dists(self, feats: np.ndarray, temperature: float):
        logits = self.target.lm_head(feats)
        rank = softmax(logits, 1.0)
        return (softmax(logits, temperature) if temperature > 0 else rank), rank

    def draft_round(self, f0, t0: int, temperature: float = 0.0, rng: Rng | None = None,
                    round_idx: int = 0, context: Sequence[int] | None = None,
                    cfg: DraftConfig | None = None, state: list[KVCache] | None = None) -> DraftTree:
        """Grow one round's candidate tree from the frontier feature ``f0`` and pending token ``t0``.

        Head 1's top-``head1_branches`` tokens start separate vertical chains;
        every vertical node also gets ``horizontal_top_k - 1`` leaf siblings.
        """
        cfg = cfg or self.cfg
        caches = state if state is not None else [None] * self.cfg.n_heads
        if cfg.n_heads > self.cfg.n_heads or cfg.tokens_per_head != self.cfg.tokens_per_head:
            raise ArgumentError("round config needs <= trained heads and the trained tokens_per_head")
        if temperature > 0 and rng is None:
            raise ArgumentError("sampled drafting needs an Rng")
        m = cfg.tokens_per_head
        tree = DraftTree.rooted_at(t0)
        feats = self.draft_head_forward(self.head_rows(t0, f0, 0), 0, caches[0])
        dists, ranks = self._dists(feats, temperature)
        branches, _ = expand(tree, 0, dists[0], cfg.head1_branches, cfg.horizontal_top_k - 1,
                             temperature, rng, round_idx, ranks[0])
        # per branch: the current head's (features, dists, ranks); head 1 is shared
        state = [(feats, dists, ranks)] * len(branches)
        for node in branches:
            tree.features[node] = feats[0]
        for depth in range(2, cfg.max_depth + 1):
            slot = (depth - 1) % m
            if slot == 0:
                head = (depth - 1) // m
                if not branches:
                    break
                rows = np.concatenate([self.head_rows(tree.nodes[node].token, tree.features[node], head)
                                       for node in branches])
                out = self.draft_head_forward(rows, head, caches[head])
                state = []
                for b in range(len(branches)):
                    fb = out[b * m:(b + 1) * m]
                    state.append((fb, *self._dists(fb, temperature)))
            grown = []
            for b, parent in enumerate(branches):
                fb, db, rb = state[b]
                vert, _ = expand(tree, parent, db[slot], 1, cfg.horizontal_top_k - 1,
                                 temperature, rng, round_idx, rb[slot])
                if vert:
                    tree.features[vert[0]] = fb[slot]
                    grown.append((vert[0], state[b]))
            branches = [g[0] for g in grown]
            state = [g[1] for g in grown]
        return tree


class TabularDraft:
    """Draft backed by an exact table, growing the same tree shape as ``S4CDraft``.

    Used to test losslessness against closed-form target distributions.
    """

    def __init__(self, model, cfg: DraftConfig | None = None):
        self.model = model
        self.cfg = cfg or DraftConfig()
        self.forward_calls = 0

    @property
    def nbytes(self) -> int:
        return self.model.nbytes

    def _dist(self, context, temperature):
        self.forward_calls += 1
        p = self.model.next_dist(context)
        return (temper(p, temperature) if temperature > 0 else p), p

    def new_state(self) -> None:
        return None

    def observe(self, state, next_tokens, features) -> None:
        pass

    def draft_round(self, f0, t0: int, temperature: float = 0.0, rng: Rng | None = None,
                    round_idx: int = 0, context: Sequence[int] | None = None,
                    cfg: DraftConfig | None = None, state=None) -> DraftTree:
        cfg = cfg or self.cfg
        if temperature > 0 and rng is None:
            raise ArgumentError("sampled drafting needs an Rng")
        history = list(context) if context is not None else [int(t0)]
        if not history or history[-1] != int(t0):
            history.append(int(t0))
        tree = DraftTree.rooted_at(t0)

        def path_context(node):
            toks = []
            while node > 0:
                toks.append(tree.nodes[node].token)
                node = tree.nodes[node].parent
            return history + toks[::-1]

        d, r = self._dist(history, temperature)
        branches, _ = expand(tree, 0, d, cfg.head1_branches, cfg.horizontal_top_k - 1,
                             temperature, rng, round_idx, r)
        for _depth in range(2, cfg.max_depth + 1):
            grown = []
            for parent in branches:
                d, r = self._dist(path_context(parent), temperature)
                vert, _ = expand(tree, parent, d, 1, cfg.horizontal_top_k - 1, temperature, rng, round_idx, r)
                grown.extend(vert)
            branches = grown
        return tree


def run_draft_round(draft, f0, t0: int, cfg: DraftConfig | None = None, temperature: float = 0.0,
                    rng: Rng | None = None, round_idx: int = 0, context=None, state=None) -> DraftTree:
    return draft.draft_round(f0, t0, temperature, rng, round_idx, context, cfg, state)


def save_draft(path, draft: S4CDraft) -> None:
    meta = {"component": "draft", "draft_config": draft.cfg.to_dict(),
            "model_spec": draft.target.spec.to_dict(), "target_checksum": draft.target.checksum()}
    weights_io.save(path, draft.params, meta)


def load_draft(path, target: TransformerModel) -> S4CDraft:
    meta, tensors = weights_io.load(path)
    if meta.get("component") != "draft":
        raise WeightFormatError(f"{path} holds a {meta.get('component')!r} component, not a draft")
    if ModelSpec.from_dict(meta["model_spec"]) != target.spec:
        raise ModelError("draft was trained against a target with a different shape")
    return S4CDraft(target, DraftConfig.from_dict(meta["draft_config"]), tensors)
