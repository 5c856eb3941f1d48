"""Draft-head training: the three-part loss, its analytic gradient, and SGD loops.

Heads are trained as the chain they form at inference. Every head row also
attends to the verified history rows ``concat[e(x[t+1]), F[t]]`` for ``t < i``
(never to its sibling rows). From window position ``i``, head 1 sees ``concat[e(x[i+1]), F[i]]`` (``F`` = frozen target
features); head ``k+1`` sees the true token ``x[i+k*m+1]`` next to head
``k``'s last predicted feature. Slot ``j`` of head ``k`` is pulled towards
``F[i+k*m+j]``, the target's next-token distribution there, and the actual
byte that follows.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import layers
from .draft import DraftConfig, S4CDraft, head_prefix, target_init_params
from .errors import ArgumentError, NumericError, ShapeError, TrainingError
from .mathcore import PROB_FLOOR, softmax
from .models import (
    ModelSpec,
    TransformerModel,
    init_transformer_params,
    round_f32,
    transformer_train_backward,
    transformer_train_forward,
)

DEFAULT_WEIGHTS = (0.1, 1.0, 0.1)


@dataclass(frozen=True)
class LossBreakdown:
    lm: float
    teacher: float
    smooth: float
    total: float
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS

    def to_dict(self) -> dict:
        return {"lm": self.lm, "teacher": self.teacher, "smooth": self.smooth, "total": self.total}


def loss_lm(pred, labels) -> float:
    q = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if q.shape[0] != y.shape[0]:
        raise ShapeError(f"{q.shape[0]} prediction rows for {y.shape[0]} labels")
    return float(np.mean(-np.log(np.maximum(q[np.arange(y.shape[0]), y], PROB_FLOOR))))


def loss_teacher(draft_dist, target_dist) -> float:
    q = np.atleast_2d(np.asarray(draft_dist, dtype=np.float64))
    p = np.atleast_2d(np.asarray(target_dist, dtype=np.float64))
    if q.shape != p.shape:
        raise ShapeError(f"draft rows {q.shape} vs teacher rows {p.shape}")
    return float(np.mean(-np.sum(p * np.log(np.maximum(q, PROB_FLOOR)), axis=-1)))


def loss_smooth(draft_feat, target_feat) -> float:
    a = np.asarray(draft_feat, dtype=np.float64)
    b = np.asarray(target_feat, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"feature shapes differ: {a.shape} vs {b.shape}")
    d = np.abs(a - b)
    return float(np.mean(np.where(d < 1.0, 0.5 * d * d, d - 0.5)))


def total_loss(lm: float, teacher: float, smooth: float,
               weights: Sequence[float] = DEFAULT_WEIGHTS) -> LossBreakdown:
    w1, w2, w3 = (float(w) for w in weights)
    return LossBreakdown(lm, teacher, smooth, w1 * lm + w2 * teacher + w3 * smooth, (w1, w2, w3))


def grad_check(loss_fn: Callable[[Mapping[str, np.ndarray]], float], params: Mapping[str, np.ndarray],
               grads: Mapping[str, np.ndarray], epsilon: float = 1e-5, n_coords: int = 200,
               seed: int = 0) -> float:
    """Max relative error of ``grads`` against central differences on random coordinates."""
    if not 1e-6 <= epsilon <= 1e-3:
        raise ArgumentError("epsilon must lie in [1e-6, 1e-3]")
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(max(n_coords, 200), total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    work = {n: np.array(params[n], dtype=np.float64) for n in names}
    worst = 0.0
    for f in np.sort(flat):
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        name, idx = names[k], int(f - offsets[k])
        arr = work[name].reshape(-1)
        orig = arr[idx]
        arr[idx] = orig + epsilon
        up = loss_fn(work)
        arr[idx] = orig - epsilon
        down = loss_fn(work)
        arr[idx] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError(f"non-finite loss while perturbing {name}[{idx}]")
        numeric = (up - down) / (2.0 * epsilon)
        analytic = float(np.asarray(grads[name]).reshape(-1)[idx])
        worst = max(worst, abs(analytic - numeric) / max(1e-8, abs(numeric)))
    return worst


# ---------------------------------------------------------------------------
# draft objective
# ---------------------------------------------------------------------------


@dataclass
class TeacherBatch:
    """Frozen-target signals for a batch of windows."""

    tokens: np.ndarray  # (B, T)
    feats: np.ndarray  # (B, T, H)
    probs: np.ndarray  # (B, T, V), softmax at temperature 1


def teacher_batch(target: TransformerModel, windows) -> TeacherBatch:
    w = np.asarray(windows, dtype=np.int64)
    feats, logits, _ = transformer_train_forward(target.params, target.spec, w)
    return TeacherBatch(w, feats, softmax(logits, 1.0))


def _chain_views(batch: TeacherBatch, cfg: DraftConfig):
    """Per-head inputs and slot targets for every usable start position ``i``.

    Head ``k`` (0-based) covers tokens ``x[i+k*m+2 .. i+(k+1)*m+1]``; its input
    token is ``x[i+k*m+1]``. Only head 0 reads a target feature (``F[i]``);
    later heads read the previous head's last-slot output.
    """
    m, heads = cfg.tokens_per_head, cfg.n_heads
    b, t = batch.tokens.shape
    n = t - heads * m - 1
    if n < 1:
        raise ArgumentError(f"window of {t} tokens is too short for {heads} heads x {m} tokens")
    h = batch.feats.shape[-1]
    views = []
    for k in range(heads):
        off = k * m
        tok_in = batch.tokens[:, off + 1:off + 1 + n].reshape(-1)
        f_tgt = np.stack([batch.feats[:, off + j:off + j + n] for j in range(1, m + 1)], axis=2)
        p_tgt = np.stack([batch.probs[:, off + j:off + j + n] for j in range(1, m + 1)], axis=2)
        y = np.stack([batch.tokens[:, off + j + 1:off + j + 1 + n] for j in range(1, m + 1)], axis=2)
        views.append((tok_in, f_tgt.reshape(b * n, m, h), p_tgt.reshape(b * n, m, -1), y.reshape(b * n, m)))
    return batch.feats[:, :n].reshape(b * n, h), views


@dataclass
class _History:
    """Verified-history rows ``concat[e(x[t+1]), F[t]]`` and who may see them."""

    inp: np.ndarray  # (B, T-1, 2H)
    causal: np.ndarray  # (T-1, T-1) history rows among themselves
    visible: np.ndarray  # (n*m, T-1): the query for start i sees rows t < i


def _history(batch: TeacherBatch, emb, n: int, m: int) -> _History:
    t = batch.tokens.shape[1]
    inp = np.concatenate([emb[batch.tokens[:, 1:]], batch.feats[:, :t - 1]], axis=-1)
    starts = np.repeat(np.arange(n), m)
    return _History(inp, np.tri(t - 1, dtype=np.bool_), np.arange(t - 1)[None, :] < starts[:, None])


def _chain_forward(params, cfg: DraftConfig, emb, n_att, f0, views, hist: _History):
    """Run the heads in sequence. Returns per head (input rows, history saves, query saves, output features)."""
    m, n_layers = cfg.tokens_per_head, cfg.draft_layers_per_head
    b = hist.inp.shape[0]
    nrow, h = f0.shape
    feat = f0
    out = []
    for k in range(cfg.n_heads):
        pre = head_prefix(k)
        fuse = params[pre + "fuse"]
        inp = np.concatenate([emb[views[k][0]], feat], axis=-1)
        xq = ((inp @ fuse)[:, None, :] + params[pre + "slot"][None]).reshape(b, (nrow // b) * m, h)
        hs = hist.inp @ fuse
        h_saved, q_saved = [], []
        for j in range(n_layers):
            lp = f"{pre}layers.{j}."
            if j < n_layers - 1:
                hs_next, hsv = layers.block_forward(params, lp, hs, n_att, hist.causal)
                mk, mv = hsv[4], hsv[5]
            else:
                mk, mv, hsv = layers.kv_project(params, lp, hs)
            xq, qsv = layers.memory_block_forward(params, lp, xq, mk, mv, hist.visible, n_att)
            h_saved.append(hsv)
            q_saved.append(qsv)
            if j < n_layers - 1:
                hs = hs_next
        x = xq.reshape(nrow, m, h)
        out.append((inp, h_saved, q_saved, x))
        feat = x[:, -1]
    return out


def _accumulate(grads: dict, new: Mapping[str, np.ndarray]) -> None:
    for key, g in new.items():
        grads[key] = grads[key] + g if key in grads else g


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def draft_loss_and_grads(target: TransformerModel, cfg: DraftConfig, params: Mapping[str, np.ndarray],
                         batch: TeacherBatch, weights: Sequence[float] = DEFAULT_WEIGHTS,
                         need_grad: bool = True):
    """Three-part loss averaged over every (head, position, slot) row, and its gradient.

    Gradients flow back through the head chain, so a head is also trained on
    how useful its last feature is to the next head.
    """
    w1, w2, w3 = (float(w) for w in weights)
    emb, head_w = target.params["tok_emb"], target.params["lm_head"]
    n_att = target.spec.n_heads
    f0, views = _chain_views(batch, cfg)
    nrow, h = f0.shape
    m = cfg.tokens_per_head
    rows = nrow * m * cfg.n_heads
    ar = np.arange(nrow)[:, None]
    sl = np.arange(m)[None, :]
    log_floor = np.log(PROB_FLOOR)
    hist = _history(batch, emb, nrow // batch.tokens.shape[0], m)
    chain = _chain_forward(params, cfg, emb, n_att, f0, views, hist)

    lm = teacher = smooth = 0.0
    dlogits_all, dsmooth_all = [], []
    for k, (_, _, _, x) in enumerate(chain):
        _, f_tgt, p_tgt, y = views[k]
        logq = _log_softmax(x @ head_w)
        logq_c = np.maximum(logq, log_floor)
        lm -= float(np.sum(logq_c[ar, sl, y]))
        teacher -= float(np.sum(p_tgt * logq_c))
        d = x - f_tgt
        ad = np.abs(d)
        smooth += float(np.sum(np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)))
        if need_grad:
            q = np.exp(logq)
            live = logq > log_floor
            # d(-log max(q_y, floor))/dz = q - e_y where q_y is above the floor, else 0
            live_y = live[ar, sl, y].astype(np.float64)
            dz = w1 * q * live_y[..., None]
            dz[ar, sl, y] -= w1 * live_y
            # soft labels: only coordinates above the floor contribute
            pm = p_tgt * live
            dz += w2 * (q * pm.sum(axis=-1, keepdims=True) - pm)
            dlogits_all.append(dz / rows)
            dsmooth_all.append((w3 / (rows * h)) * np.clip(d, -1.0, 1.0))
    parts = total_loss(lm / rows, teacher / rows, smooth / (rows * h), (w1, w2, w3))
    if not need_grad:
        return parts, None

    grads: dict[str, np.ndarray] = {}
    dfeat = None  # gradient reaching head k's last-slot output from head k+1
    b = batch.tokens.shape[0]
    for k in reversed(range(cfg.n_heads)):
        pre = head_prefix(k)
        inp, h_saved, q_saved, _ = chain[k]
        dx = dlogits_all[k] @ head_w.T + dsmooth_all[k]
        if dfeat is not None:
            dx[:, -1] += dfeat
        dxq = dx.reshape(b, -1, h)
        dhs = None
        for j in reversed(range(cfg.draft_layers_per_head)):
            lp = f"{pre}layers.{j}."
            dxq, g, dmk, dmv = layers.memory_block_backward(dxq, params, lp, q_saved[j], n_att)
            _accumulate(grads, g)
            if j == cfg.draft_layers_per_head - 1:
                dhs, g = layers.kv_project_backward(dmk, dmv, params, lp, h_saved[j])
            else:
                dhs, g = layers.block_backward(dhs, params, lp, h_saved[j], n_att, dmk, dmv)
            _accumulate(grads, g)
        dx = dxq.reshape(nrow, m, h)
        grads[pre + "slot"] = dx.sum(axis=0)
        dh = dx.sum(axis=1)
        grads[pre + "fuse"] = inp.T @ dh + hist.inp.reshape(-1, 2 * h).T @ dhs.reshape(-1, h)
        dfeat = (dh @ params[pre + "fuse"].T)[:, h:]
    return parts, grads


def top1_agreement(draft: S4CDraft, batch: TeacherBatch) -> float:
    """Share of (head, position, slot) rows where the draft's argmax equals the target's."""
    cfg = draft.cfg
    emb = draft.target.params["tok_emb"]
    f0, views = _chain_views(batch, cfg)
    hist = _history(batch, emb, f0.shape[0] // batch.tokens.shape[0], cfg.tokens_per_head)
    chain = _chain_forward(draft.params, cfg, emb, draft.target.spec.n_heads, f0, views, hist)
    hits = 0
    for (_, _, _, x), (_, _, p_tgt, _) in zip(chain, views):
        hits += int(np.sum(np.argmax(x @ draft.target.params["lm_head"], axis=-1) == np.argmax(p_tgt, axis=-1)))
    return hits / (f0.shape[0] * cfg.tokens_per_head * cfg.n_heads)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    lr: float = 1e-2
    momentum: float = 0.9
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS
    window: int = 128
    batch: int = 8
    seed: int = 0
    eval_windows: int = 32

    def __post_init__(self):
        if self.epochs < 0 or self.lr < 0 or not 0 <= self.momentum < 1:
            raise ArgumentError("need epochs >= 0, lr >= 0 and momentum in [0, 1)")
        if self.window < 4 or self.batch < 1 or self.eval_windows < 1:
            raise ArgumentError("window must be >= 4; batch and eval_windows >= 1")
        if len(self.weights) != 3:
            raise ArgumentError("weights are (w1, w2, w3)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        kw = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if "weights" in kw:
            kw["weights"] = tuple(float(w) for w in kw["weights"])
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def as_tokens(corpus) -> np.ndarray:
    if isinstance(corpus, (bytes, bytearray, memoryview)):
        return np.frombuffer(bytes(corpus), dtype=np.uint8).astype(np.int64)
    return np.asarray(corpus, dtype=np.int64)


def corpus_windows(corpus, window: int) -> np.ndarray:
    """Non-overlapping contiguous windows (the tail that does not fill one is dropped)."""
    toks = as_tokens(corpus)
    n = toks.size // window
    if n == 0:
        raise ArgumentError(f"corpus of {toks.size} tokens is shorter than one {window}-token window")
    return toks[: n * window].reshape(n, window)


def split_windows(windows: np.ndarray, holdout: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Last ``holdout`` share of windows is held out (at least one)."""
    k = max(1, int(round(windows.shape[0] * holdout)))
    if k >= windows.shape[0]:
        raise ArgumentError("corpus too small to hold out windows")
    return windows[:-k], windows[-k:]


def _write_log(log_path, records) -> None:
    if log_path is None:
        return
    with open(log_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _eval_subset(windows: np.ndarray, k: int) -> np.ndarray:
    return windows[: min(k, windows.shape[0])]


def train_draft(corpus, target: TransformerModel, cfg: DraftConfig | None = None,
                train_cfg: TrainConfig | None = None, init: Mapping[str, np.ndarray] | None = None,
                log_path=None, min_tokens: int = 10_000) -> tuple[S4CDraft, list[dict]]:
    """SGD with momentum on the draft heads only; the target is read, never written.

    Returns the trained draft and one log record per epoch; record 0 is the
    loss before any update.
    """
    cfg = cfg or DraftConfig()
    tc = train_cfg or TrainConfig()
    toks = as_tokens(corpus)
    if toks.size < min_tokens:
        raise ArgumentError(f"corpus has {toks.size} tokens; need at least {min_tokens}")
    if toks.min() < 0 or toks.max() >= target.vocab_size:
        raise ArgumentError(f"corpus token outside the target vocabulary of {target.vocab_size}")
    windows = corpus_windows(toks, min(tc.window, target.spec.context_limit))
    params = {k: np.array(v, dtype=np.float64) for k, v in
              (init or target_init_params(target, cfg, tc.seed)).items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    eval_batch = teacher_batch(target, _eval_subset(windows, tc.eval_windows))
    order_rng = np.random.default_rng(tc.seed)

    def record(epoch):
        parts, _ = draft_loss_and_grads(target, cfg, params, eval_batch, tc.weights, need_grad=False)
        if not math.isfinite(parts.total):
            raise TrainingError("non-finite loss", epoch)
        return {"epoch": epoch, **parts.to_dict()}

    log = [record(0)]
    for epoch in range(1, tc.epochs + 1):
        order = order_rng.permutation(windows.shape[0])
        for s in range(0, order.size, tc.batch):
            batch = teacher_batch(target, windows[order[s:s + tc.batch]])
            parts, grads = draft_loss_and_grads(target, cfg, params, batch, tc.weights)
            if not math.isfinite(parts.total):
                raise TrainingError("non-finite loss", epoch)
            if tc.lr == 0:
                continue
            for k in params:
                velocity[k] = tc.momentum * velocity[k] + grads[k]
                params[k] -= tc.lr * velocity[k]
        log.append(record(epoch))
    _write_log(log_path, log)
    return S4CDraft(target, cfg, round_f32(params)), log


def target_loss_and_grads(p: Mapping[str, np.ndarray], spec: ModelSpec, windows: np.ndarray,
                          need_grad: bool = True):
    """Mean next-token cross-entropy over every window position but the last."""
    feats, logits, saved = transformer_train_forward(p, spec, windows)
    q = softmax(logits[:, :-1], 1.0)
    y = windows[:, 1:]
    bsz, t = y.shape
    qy = np.take_along_axis(q, y[..., None], axis=-1)[..., 0]
    loss = float(np.mean(-np.log(np.maximum(qy, PROB_FLOOR))))
    if not need_grad:
        return loss, None
    dz = np.zeros_like(logits)
    dz[:, :-1] = q
    np.put_along_axis(dz[:, :-1], y[..., None], np.take_along_axis(q, y[..., None], axis=-1) - 1.0, axis=-1)
    dz /= bsz * t
    return loss, transformer_train_backward(p, spec, saved, dz)


def train_target(corpus, spec: ModelSpec | None = None, epochs: int = 2, lr: float = 3e-3,
                 seed: int = 0, window: int = 128, batch: int = 8,
                 log_path=None) -> tuple[TransformerModel, list[dict]]:
    """Adam on next-byte prediction; bootstraps a target model for the draft to learn from."""
    spec = spec or ModelSpec()
    windows = corpus_windows(corpus, min(window, spec.context_limit))
    p = {k: np.array(v) for k, v in init_transformer_params(spec, seed).items()}
    m1 = {k: np.zeros_like(v) for k, v in p.items()}
    m2 = {k: np.zeros_like(v) for k, v in p.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    order_rng = np.random.default_rng(seed)
    eval_w = _eval_subset(windows, 32)
    log = [{"epoch": 0, "loss": target_loss_and_grads(p, spec, eval_w, need_grad=False)[0]}]
    step = 0
    for epoch in range(1, epochs + 1):
        order = order_rng.permutation(windows.shape[0])
        for s in range(0, order.size, batch):
            loss, grads = target_loss_and_grads(p, spec, windows[order[s:s + batch]])
            if not math.isfinite(loss):
                raise TrainingError("non-finite loss", epoch)
            step += 1
            c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
            for k in p:
                m1[k] = b1 * m1[k] + (1 - b1) * grads[k]
                m2[k] = b2 * m2[k] + (1 - b2) * grads[k] ** 2
                p[k] -= lr * (m1[k] / c1) / (np.sqrt(m2[k] / c2) + eps)
        log.append({"epoch": epoch, "loss": target_loss_and_grads(p, spec, eval_w, need_grad=False)[0]})
    _write_log(log_path, log)
    return TransformerModel(spec, round_f32(p)), log
