from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s4c import _kernels as K
from s4c.draft import DraftConfig, S4CDraft, TabularDraft
from s4c.errors import ArgumentError, ShapeError
from s4c.models import ForwardResult, ModelSpec, TabularModel, TransformerModel
from s4c.rng import Rng
from s4c.tree import VERTICAL, DraftTree
from s4c.verify import (MAX_NORM, accept_token, autoregressive_generate, enumerate_sequence_distribution,
                        exact_output_distribution, generate, max_norm_distribution, random_distribution,
                        residual_distribution, simulate_tabular_sequences, total_variation, verify_lossless,
                        verify_round)


def test_accept_token_examples():
    assert accept_token(0.3, 0.3, 0.999999)
    assert accept_token(0.2, 0.5, 0.39)
    assert not accept_token(0.2, 0.5, 0.41)
    assert all(accept_token(0.9, 0.3, u) for u in np.linspace(0, 0.999, 50))
    with pytest.raises(ArgumentError):
        accept_token(0.5, 0.0, 0.1)


def test_residual_examples():
    assert np.array_equal(residual_distribution([0.5, 0.5], [1.0, 0.0]), [0.0, 1.0])
    assert np.array_equal(residual_distribution([0.3, 0.7], [0.3, 0.7]), [0.3, 0.7])
    assert np.allclose(residual_distribution([0.7, 0.3], [0.5, 0.5]), [1.0, 0.0], atol=1e-15)
    with pytest.raises(ShapeError):
        residual_distribution([1.0], [0.5, 0.5])


def test_exact_output_examples():
    assert np.allclose(exact_output_distribution([0.7, 0.3], [0.5, 0.5]), [0.7, 0.3], atol=1e-15)
    assert np.allclose(exact_output_distribution([0.2, 0.8], [0.2, 0.8]), [0.2, 0.8], atol=1e-15)


@settings(max_examples=300)
@given(st.integers(2, 8), st.integers(0, 2**32))
def test_single_step_emission_equals_target(v, seed):
    rng = np.random.default_rng(seed)
    p, q = random_distribution(rng, v), random_distribution(rng, v)
    assert np.abs(exact_output_distribution(p, q) - p).max() < 1e-12


def _sibling_emission(p, q, k):
    # enumerate every ordered draw of k distinct siblings and every accept/reject outcome
    if k == 0 or q.sum() == 0:
        return p
    out = np.zeros_like(p)
    rest = residual_distribution(p, q)
    for x in np.flatnonzero(q):
        keep = min(1.0, p[x] / q[x])
        out[x] += q[x] * keep
        out += q[x] * (1 - keep) * _sibling_emission(rest, K.exclude_np(q, x), k - 1)
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2**32))
def test_sibling_verification_without_replacement_is_exact(v, k, seed):
    rng = np.random.default_rng(seed)
    p, q = random_distribution(rng, v), random_distribution(rng, v)
    assert np.abs(_sibling_emission(p, q, k) - p).max() < 1e-12


def test_max_norm_correction_is_not_lossless():
    p, q = np.array([0.7, 0.3]), np.array([0.5, 0.5])
    assert np.allclose(max_norm_distribution(p, q), [7 / 12, 5 / 12])
    assert np.abs(exact_output_distribution(p, q, correction=MAX_NORM) - p).sum() > 0.01


def test_verify_lossless_summary():
    ok = verify_lossless(200, 8, seed=1)
    assert ok["passed"] and ok["max_l1_deviation"] < 1e-10
    ablation = verify_lossless(200, 8, seed=1, correction=MAX_NORM)
    assert not ablation["passed"] and ablation["max_l1_deviation"] > 1e-3
    empty = verify_lossless(0, 8)
    assert empty["passed"] and "0 trials" in empty["note"]


def _chain_tree(tokens, dist):
    tree = DraftTree.rooted_at(tokens[0])
    for i, t in enumerate(tokens[1:]):
        tree.child_dists[i] = dist
        tree.add(t, i, dist[t], VERTICAL)
    return tree


def _rows(probs):
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return ForwardResult(np.zeros((len(probs), 1)), np.log(probs), probs)


def test_identical_models_accept_everything():
    dist = np.array([0.1, 0.2, 0.3, 0.4])
    tree = _chain_tree([0, 3, 2, 1], dist)
    out = verify_round(tree, _rows([dist] * 4), Rng.from_seed(0), 1.0, 1)
    assert out.path == [1, 2, 3] and out.accepted_tokens == [3, 2, 1]


def test_zero_target_mass_rejects_immediately():
    tree = _chain_tree([0, 1], np.array([0.5, 0.5, 0.0]))
    target = np.array([0.0, 0.0, 1.0])
    out = verify_round(tree, _rows([target, target]), Rng.from_seed(0), 1.0, 1)
    assert out.accepted_length == 0 and out.correction_token == 2


def test_greedy_verification_follows_argmax():
    dist = np.array([0.1, 0.6, 0.3])
    tree = _chain_tree([0, 1, 2], dist)
    target = [[0.1, 0.8, 0.1], [0.0, 0.1, 0.9], [0.7, 0.2, 0.1]]
    out = verify_round(tree, _rows(target), None, 0.0)
    assert out.accepted_tokens == [1, 2] and out.correction_token == 0
    target[1] = [0.9, 0.05, 0.05]
    out = verify_round(tree, _rows(target), None, 0.0)
    assert out.accepted_tokens == [1] and out.correction_token == 0


def _tabular_pair(v=4, seed=0):
    return TabularModel.random(v, seed=seed, concentration=0.6), TabularModel.random(v, seed=seed + 9, concentration=0.6)


def test_identical_tables_accept_full_depth():
    target, _ = _tabular_pair()
    cfg = DraftConfig()
    _, stats = generate(target, TabularDraft(target, cfg), [0], 70, 1.0, cfg, seed=3)
    assert set(stats.accepted_lengths) == {cfg.max_depth}
    assert stats.tokens_emitted / stats.rounds == cfg.max_depth + 1


def test_greedy_generation_matches_plain_decoding_tabular():
    target, draft = _tabular_pair(6, 2)
    for prompt in ([0], [1, 2], [5]):
        a, _ = autoregressive_generate(target, prompt, 40)
        b, _ = generate(target, TabularDraft(draft), prompt, 40)
        assert a == b


def test_greedy_generation_matches_plain_decoding_transformer():
    spec = ModelSpec(vocab_size=32, hidden_dim=16, n_layers=2, n_heads=2, context_limit=256)
    target = TransformerModel.random(spec, seed=1, scale=0.5)
    draft = S4CDraft.random(target, seed=2)
    for seed in range(5):
        prompt = list(np.random.default_rng(seed).integers(0, 32, 5))
        a, _ = autoregressive_generate(target, prompt, 48)
        b, stats = generate(target, draft, prompt, 48)
        assert a == b
        assert stats.target_forward_calls == stats.rounds + 1


def test_max_new_one_is_a_plain_step():
    target, draft = _tabular_pair()
    for temp in (0.0, 1.0):
        a, _ = autoregressive_generate(target, [2], 1, temp, seed=5)
        b, stats = generate(target, TabularDraft(draft), [2], 1, temp, seed=5)
        assert a == b and len(b) == 1 and stats.rounds == 0


def test_generation_is_seed_deterministic():
    target, draft = _tabular_pair()
    a = generate(target, TabularDraft(draft), [1], 50, 0.8, seed=11)[0]
    b = generate(target, TabularDraft(draft), [1], 50, 0.8, seed=11)[0]
    c = generate(target, TabularDraft(draft), [1], 50, 0.8, seed=12)[0]
    assert a == b and a != c


def test_eot_stops_generation():
    chain = TabularModel.from_matrix(np.roll(np.eye(5), 1, axis=1))
    out, _ = generate(chain, TabularDraft(chain), [1], 50, eot=4)
    assert out == [2, 3, 4]


def test_generate_argument_errors():
    target, draft = _tabular_pair()
    with pytest.raises(ArgumentError):
        generate(target, TabularDraft(draft), [0], 5, -1.0)
    with pytest.raises(ArgumentError):
        generate(target, TabularDraft(draft), [], 5)
    with pytest.raises(ArgumentError):
        generate(target, TabularDraft(draft), [9], 5)


def test_python_generate_matches_compiled_simulation():
    target, draft = _tabular_pair(4, 5)
    cfg = DraftConfig()
    seqs, _, _ = simulate_tabular_sequences(target, draft, 0, 4, 150, 0.9, cfg, seed=2)
    root = Rng.from_seed(2)
    for s in range(150):
        out, _ = generate(target, TabularDraft(draft, cfg), [0], 4, 0.9, cfg, seed=root.split(s))
        assert out == seqs[s].tolist()


def test_multi_step_sequences_follow_target():
    target, draft = _tabular_pair(4, 7)
    cfg = DraftConfig()
    seqs, _, hist = simulate_tabular_sequences(target, draft, 0, 3, 40_000, 1.0, cfg, seed=1)
    exact = enumerate_sequence_distribution(target.matrix(), 0, 3)
    assert abs(exact.sum() - 1.0) < 1e-12
    assert total_variation(seqs, exact, 4) < 0.02
    assert hist.sum() > 0


def test_enumeration_small_case():
    table = np.array([[0.5, 0.5], [1.0, 0.0]])
    assert np.allclose(enumerate_sequence_distribution(table, 0, 2), [0.25, 0.25, 0.5, 0.0])


def test_simulation_kernels_agree():
    if K.numba is None:
        pytest.skip("numba not installed")
    target, draft = _tabular_pair(4, 1)
    a = simulate_tabular_sequences(target, draft, 0, 3, 2000, 0.7, DraftConfig(), 4, use_numba=True)
    b = simulate_tabular_sequences(target, draft, 0, 3, 2000, 0.7, DraftConfig(), 4, use_numba=False)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
