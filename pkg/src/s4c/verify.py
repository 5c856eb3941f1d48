"""Speculative acceptance, the verify round, and the generation loop.

Symbols: ``target`` is the frozen model's distribution, ``draft`` the
drafter's. A drafted token ``x`` survives with probability
``min(1, target[x] / draft[x])``; after a rejection the target distribution
is replaced by its residual ``norm(max(0, target - draft))`` before the next
sibling is tested, and the correction token comes from whatever remains.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ArgumentError, ShapeError
from .mathcore import softmax, temper
from .models import ForwardResult
from .rng import Rng, as_rng
from .stats import GenStats
from .tree import DraftTree, flatten, longest_accepted_path

RESIDUAL = "residual"
MAX_NORM = "max_norm"


@dataclass
class VerifyOutcome:
    accepted_tokens: list[int]
    correction_token: int
    next_feature: np.ndarray
    path: list[int]  # accepted node indices, root excluded
    nodes_verified: int

    @property
    def accepted_length(self) -> int:
        return len(self.accepted_tokens)

    @property
    def emitted(self) -> list[int]:
        return self.accepted_tokens + [self.correction_token]

    @property
    def frontier(self) -> int:
        return self.path[-1] if self.path else 0


def accept_token(p_target: float, p_draft: float, u: float) -> bool:
    if not p_draft > 0.0:
        raise ArgumentError("a drafted token must have positive draft probability")
    return u < min(1.0, p_target / p_draft)


def residual_distribution(target, draft) -> np.ndarray:
    """``norm(max(0, target - draft))``; ``target`` itself when no mass is left."""
    p = np.asarray(target, dtype=np.float64)
    q = np.asarray(draft, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    r = np.maximum(p - q, 0.0)
    s = np.cumsum(r)[-1]  # sequential sum, matching the compiled kernel
    return r / s if s > 0.0 else p.copy()


def max_norm_distribution(target, draft) -> np.ndarray:
    """Ablation correction ``norm(max(target, draft))``; not lossless."""
    p = np.asarray(target, dtype=np.float64)
    q = np.asarray(draft, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    m = np.maximum(p, q)
    return m / m.sum()


_CORRECTIONS = {RESIDUAL: residual_distribution, MAX_NORM: max_norm_distribution}


def _correction_fn(correction: str):
    try:
        return _CORRECTIONS[correction]
    except KeyError:
        raise ArgumentError(f"unknown correction {correction!r}") from None


def exact_output_distribution(target, draft, context: Sequence[int] | None = None,
                              correction: str = RESIDUAL) -> np.ndarray:
    """Closed-form single-step emission law of draft-then-verify.

    ``target``/``draft`` are distributions, or tabular models queried at ``context``.
    """
    if hasattr(target, "next_dist"):
        target = target.next_dist(context)
    if hasattr(draft, "next_dist"):
        draft = draft.next_dist(context)
    p = np.asarray(target, dtype=np.float64)
    q = np.asarray(draft, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    kept = np.minimum(p, q)  # q(x) * min(1, p(x)/q(x))
    return kept + (1.0 - kept.sum()) * _correction_fn(correction)(p, q)


def _row_dists(target_out: ForwardResult, temperature: float) -> np.ndarray:
    if target_out.probs is not None:
        return temper(target_out.probs, temperature)
    return softmax(target_out.logits, temperature)


def verify_round(tree: DraftTree, target_out: ForwardResult, rng: Rng | None, temperature: float,
                 round_idx: int = 0, correction: str = RESIDUAL) -> VerifyOutcome:
    """Accept a root path of ``tree`` given the target pass over its flattened nodes."""
    n = len(tree)
    if target_out.logits.shape[0] != n:
        raise ShapeError(f"target output has {target_out.logits.shape[0]} rows for {n} tree nodes")
    if temperature < 0:
        raise ArgumentError("temperature must be >= 0")
    toks = tree.tokens
    if temperature == 0:
        best = np.argmax(target_out.logits, axis=-1)
        accepted = np.zeros(n, dtype=np.bool_)
        for i in range(1, n):
            accepted[i] = toks[i] == best[tree.nodes[i].parent]
        path = longest_accepted_path(tree, accepted)
        frontier = path[-1] if path else 0
        corr = int(best[frontier])
    else:
        if rng is None:
            raise ArgumentError("sampled verification needs an Rng")
        fix = _correction_fn(correction)
        dists = _row_dists(target_out, temperature)
        kids: list[list[int]] = [[] for _ in range(n)]
        for i in range(1, n):
            kids[tree.nodes[i].parent].append(i)
        cur, path = 0, []
        p = dists[0].copy()
        while kids[cur]:
            # siblings were drawn without replacement: the i-th one came from q with
            # its elder siblings removed, so each test uses that proposal law
            q = tree.child_dists[cur]
            chosen = -1
            for c in kids[cur]:
                x = toks[c]
                if accept_token(p[x], q[x], rng.uniform(round_idx, _kernels.PURPOSE_ACCEPT, c)):
                    chosen = c
                    break
                p = fix(p, q)
                q = _kernels.exclude_np(q, x)
            if chosen < 0:
                break
            path.append(chosen)
            cur = chosen
            p = dists[cur].copy()
        frontier = cur
        corr = _kernels.sample_index(p, rng.uniform(round_idx, _kernels.PURPOSE_CORRECT, 0))
    return VerifyOutcome([toks[i] for i in path], int(corr), target_out.features[frontier],
                         path, n)


def _pick(dist_row: np.ndarray, logits_row: np.ndarray, temperature: float, u: float) -> int:
    if temperature == 0:
        return int(np.argmax(logits_row))
    return _kernels.sample_index(dist_row, u)


def _tree_bytes(tree: DraftTree, kv_bytes_per_position: int) -> int:
    return (len(tree) * kv_bytes_per_position
            + sum(d.nbytes for d in tree.child_dists.values())
            + sum(f.nbytes for f in tree.features.values()))


def _check_prompt(target, prompt) -> list[int]:
    toks = [int(t) for t in prompt]
    if not toks:
        raise ArgumentError("prompt must be non-empty")
    if min(toks) < 0 or max(toks) >= target.vocab_size:
        raise ArgumentError("prompt token outside vocabulary")
    return toks


def generate(target, draft, prompt: Sequence[int], max_new: int, temperature: float = 0.0,
             cfg=None, seed: int | Rng = 0, *, eot: int | None = None,
             correction: str = RESIDUAL) -> tuple[list[int], GenStats]:
    """Draft-then-verify decoding. Returns up to ``max_new`` new tokens and session stats.

    Emission stops early right after ``eot`` when one is given.
    """
    if temperature < 0:
        raise ArgumentError("temperature must be >= 0")
    if max_new < 0:
        raise ArgumentError("max_new must be >= 0")
    toks = _check_prompt(target, prompt)
    rng = as_rng(seed)
    stats = GenStats()
    if max_new == 0:
        return [], stats
    start = time.perf_counter_ns()
    draft_calls0 = draft.forward_calls
    cache = target.new_cache()
    kv_per_pos = 2 * 8 * sum(k.shape[1] for k in cache.keys)

    res = target.forward(toks, cache)
    stats.target_forward_calls = 1
    last = ForwardResult(res.features[-1:], res.logits[-1:], None if res.probs is None else res.probs[-1:])
    dist = _row_dists(last, temperature)[0] if temperature > 0 else None
    t0 = _pick(dist, last.logits[0], temperature, rng.uniform(0, _kernels.PURPOSE_PREFILL, 0))
    f0 = res.features[-1]
    state = draft.new_state()
    draft.observe(state, toks[1:], res.features[:-1])
    out = [t0]
    history = toks + [t0]
    peak = 0
    r = 0
    while len(out) < max_new and (eot is None or out[-1] != eot):
        r += 1
        tree = draft.draft_round(f0, t0, temperature, rng, r, history, cfg, state)
        base = cache.length
        tree_toks, positions, mask = flatten(tree, base)
        tres = target.forward(tree_toks, cache, mask, positions)
        stats.target_forward_calls += 1
        outcome = verify_round(tree, tres, rng, temperature, r, correction)
        peak = max(peak, _tree_bytes(tree, kv_per_pos))
        cache.keep(list(range(base + 1)) + [base + i for i in outcome.path])
        stats.record_round(outcome.accepted_length)
        # the root and every accepted node but the frontier become verified history
        rows = [0] + outcome.path[:-1]
        draft.observe(state, [t0] + outcome.accepted_tokens,
                      np.vstack([f0[None], tres.features[rows]]) if outcome.path else f0[None])
        emitted = outcome.emitted
        if eot is not None and eot in emitted:
            emitted = emitted[: emitted.index(eot) + 1]
        out.extend(emitted)
        history.extend(emitted)
        f0 = outcome.next_feature
        t0 = outcome.correction_token
    stats.wall_time_ns = time.perf_counter_ns() - start
    stats.draft_forward_calls = draft.forward_calls - draft_calls0
    history_bytes = sum(c.nbytes_used for c in state) if state else 0
    stats.peak_extra_bytes = draft.nbytes + peak + history_bytes
    return out[:max_new], stats


def autoregressive_generate(target, prompt: Sequence[int], max_new: int, temperature: float = 0.0,
                            seed: int | Rng = 0, *, eot: int | None = None) -> tuple[list[int], GenStats]:
    """Plain one-token-per-pass decoding; the baseline for speedup and equivalence checks.

    Token ``i`` uses uniform ``(i, PREFILL, 0)``, so its first token matches
    :func:`generate` under the same stream.
    """
    if temperature < 0:
        raise ArgumentError("temperature must be >= 0")
    toks = _check_prompt(target, prompt)
    rng = as_rng(seed)
    stats = GenStats()
    if max_new == 0:
        return [], stats
    start = time.perf_counter_ns()
    cache = target.new_cache()
    res = target.forward(toks, cache)
    out: list[int] = []
    for i in range(max_new):
        stats.target_forward_calls += 1
        last = ForwardResult(res.features[-1:], res.logits[-1:], None if res.probs is None else res.probs[-1:])
        dist = _row_dists(last, temperature)[0] if temperature > 0 else None
        t = _pick(dist, last.logits[0], temperature, rng.uniform(i, _kernels.PURPOSE_PREFILL, 0))
        out.append(t)
        if len(out) == max_new or (eot is not None and t == eot):
            break
        res = target.forward([t], cache)
    stats.rounds = len(out)
    stats.tokens_emitted = len(out)
    stats.accepted_lengths = {0: len(out)}
    stats.wall_time_ns = time.perf_counter_ns() - start
    return out, stats


# ---------------------------------------------------------------------------
# losslessness oracles over explicit tables
# ---------------------------------------------------------------------------


def random_distribution(rng: np.random.Generator, vocab: int, sparsity: float = 0.3) -> np.ndarray:
    """Dirichlet draw with some entries forced to zero (at least one kept)."""
    p = rng.dirichlet(np.ones(vocab))
    zero = rng.random(vocab) < sparsity
    zero[rng.integers(vocab)] = False
    p[zero] = 0.0
    return p / p.sum()


def verify_lossless(trials: int, vocab: int, seed: int = 0, correction: str = RESIDUAL) -> dict:
    """Worst L1 gap between the closed-form emission law and the target over random pairs."""
    if trials < 0:
        raise ArgumentError("trials must be >= 0")
    if not 2 <= vocab <= 16:
        raise ArgumentError("vocab must lie in [2, 16] for exact enumeration")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        p = random_distribution(rng, vocab)
        q = random_distribution(rng, vocab)
        worst = max(worst, float(np.abs(exact_output_distribution(p, q, correction=correction) - p).sum()))
    return {"correction": correction, "max_l1_deviation": worst, "trials": trials, "vocab": vocab,
            "seed": seed, "passed": worst < 1e-10,
            "note": "0 trials: vacuous pass" if trials == 0 else ""}


def enumerate_sequence_distribution(target_table: np.ndarray, prompt_tok: int, n_tokens: int) -> np.ndarray:
    """Probability of each length-``n_tokens`` continuation, indexed base-V (first token most significant)."""
    t = np.asarray(target_table, dtype=np.float64)
    v = t.shape[0]
    probs = t[prompt_tok].copy()
    for _ in range(n_tokens - 1):
        last = np.arange(probs.size) % v
        probs = (probs[:, None] * t[last]).reshape(-1)
    return probs


def encode_sequences(seqs: np.ndarray, vocab: int) -> np.ndarray:
    seqs = np.asarray(seqs, dtype=np.int64)
    code = np.zeros(seqs.shape[0], dtype=np.int64)
    for j in range(seqs.shape[1]):
        code = code * vocab + seqs[:, j]
    return code


def total_variation(seqs: np.ndarray, exact: np.ndarray, vocab: int) -> float:
    counts = np.bincount(encode_sequences(seqs, vocab), minlength=exact.size)
    return 0.5 * float(np.abs(counts / seqs.shape[0] - exact).sum())


def simulate_tabular_sequences(target, draft, prompt_tok: int, n_tokens: int, n_samples: int,
                               temperature: float, cfg, seed: int = 0, use_numba: bool | None = None):
    """Monte-Carlo draft-then-verify runs over order-1 tables; session ``s`` uses ``Rng(seed).split(s)``.

    Returns (sequences, rounds per sample, accepted-length histogram).
    """
    if not temperature > 0:
        raise ArgumentError("Monte-Carlo sampling needs temperature > 0")
    keys = _kernels.stream_keys_np(Rng.from_seed(seed).key, np.arange(n_samples))
    return _kernels.spec_sample_tabular(target.tempered_matrix(temperature), draft.tempered_matrix(temperature),
                                        prompt_tok, n_tokens, keys, cfg.max_depth, cfg.head1_branches,
                                        cfg.horizontal_top_k, use_numba=use_numba)
