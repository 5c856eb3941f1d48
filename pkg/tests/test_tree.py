from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s4c.errors import StructureError
from s4c.models import ModelSpec, TransformerModel
from s4c.rng import Rng
from s4c.tree import HORIZONTAL, VERTICAL, DraftTree, TreeNode, build_mask, expand, flatten, longest_accepted_path


def random_tree(n: int, seed: int) -> DraftTree:
    rng = np.random.default_rng(seed)
    tree = DraftTree.rooted_at(int(rng.integers(16)))
    for i in range(1, n):
        tree.add(int(rng.integers(16)), int(rng.integers(i)), 0.5, VERTICAL if rng.random() < 0.5 else HORIZONTAL)
    return tree


def closure_oracle(tree: DraftTree) -> np.ndarray:
    n = len(tree)
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        j = i
        while j >= 0:
            mask[i, j] = True
            j = tree.nodes[j].parent
    return mask


def chain(n: int) -> DraftTree:
    tree = DraftTree.rooted_at(0)
    for i in range(1, n):
        tree.add(i, i - 1, 1.0, VERTICAL)
    return tree


def test_mask_examples():
    assert np.array_equal(build_mask(chain(3)), np.tri(3, dtype=bool))
    tree = DraftTree.rooted_at(0)
    a = tree.add(1, 0, 0.5, VERTICAL)
    b = tree.add(2, 0, 0.5, HORIZONTAL)
    m = build_mask(tree)
    assert not m[a, b] and not m[b, a]
    assert m[a, 0] and m[b, 0] and m[a, a] and m[b, b]


@settings(max_examples=100)
@given(st.integers(1, 40), st.integers(0, 2**32))
def test_mask_equals_ancestor_closure(n, seed):
    tree = random_tree(n, seed)
    assert np.array_equal(build_mask(tree), closure_oracle(tree))


def test_flatten_positions():
    tokens, pos, mask = flatten(DraftTree.rooted_at(5), 7)
    assert tokens == [5] and pos.tolist() == [7] and mask.tolist() == [[True]]
    tree = DraftTree.rooted_at(0)
    tree.add(1, 0, 0.5, VERTICAL)
    tree.add(2, 0, 0.5, HORIZONTAL)
    _, pos, mask = flatten(tree, 3)
    assert pos[1] == pos[2] == 4 and not mask[1, 2]
    _, pos, _ = flatten(chain(4), 10)
    assert pos.tolist() == [10, 11, 12, 13]


def test_validate_rejects_bad_structure():
    tree = DraftTree([TreeNode(0, -1, 0, 1.0, "root"), TreeNode(1, 0, 2, 1.0, VERTICAL)])
    with pytest.raises(StructureError):
        tree.validate()
    with pytest.raises(StructureError):
        DraftTree.rooted_at(0).add(1, 3, 0.5, VERTICAL)


def test_accepted_path_examples():
    tree = chain(6)
    assert longest_accepted_path(tree, [True] * 6) == [1, 2, 3, 4, 5]
    assert longest_accepted_path(tree, [True] + [False] * 5) == []


def test_path_routes_through_accepted_sibling():
    # top-1 branch 1 -> 3 -> 5, horizontal 4 beside 3 continues to 6
    tree = DraftTree.rooted_at(0)
    tree.add(10, 0, 0.6, VERTICAL)  # 1
    tree.add(11, 0, 0.3, HORIZONTAL)  # 2
    tree.add(12, 1, 0.5, VERTICAL)  # 3
    tree.add(13, 1, 0.4, HORIZONTAL)  # 4
    tree.add(14, 3, 0.9, VERTICAL)  # 5
    tree.add(15, 4, 0.9, VERTICAL)  # 6
    acc = [True, True, False, False, True, False, True]
    assert longest_accepted_path(tree, acc) == [1, 4, 6]


def all_accepted_paths(tree, acc):
    paths = []

    def walk(node, path):
        paths.append(path)
        for c in tree.children(node):
            if acc[c]:
                walk(c, path + [c])

    walk(0, [])
    return paths


@settings(max_examples=150)
@given(st.integers(1, 30), st.integers(0, 2**32))
def test_accepted_path_is_longest(n, seed):
    tree = random_tree(n, seed)
    acc = np.random.default_rng(seed + 1).random(n) < 0.7
    path = longest_accepted_path(tree, acc)
    best = max(len(p) for p in all_accepted_paths(tree, acc))
    assert len(path) == best
    assert all(acc[i] for i in path)
    assert all(tree.nodes[c].parent == p for p, c in zip([0] + path, path))


def test_expand_greedy_takes_top_k():
    tree = DraftTree.rooted_at(0)
    v, h = expand(tree, 0, np.array([0.1, 0.5, 0.0, 0.4]), 1, 2, 0.0, None, 0)
    assert [tree.nodes[i].token for i in v + h] == [1, 3, 0]
    # zero-probability tokens are never drafted
    v, h = expand(tree, 1, np.array([0.0, 1.0, 0.0, 0.0]), 1, 2, 0.0, None, 0)
    assert len(v) == 1 and h == []


def test_expand_sampled_is_seeded():
    dist = np.array([0.25, 0.25, 0.25, 0.25])
    a, b = DraftTree.rooted_at(0), DraftTree.rooted_at(0)
    expand(a, 0, dist, 2, 2, 1.0, Rng.from_seed(1), 3)
    expand(b, 0, dist, 2, 2, 1.0, Rng.from_seed(1), 3)
    assert a.tokens == b.tokens and len(a) == 5
    assert a.to_json() == b.to_json()


def test_tree_attention_matches_isolated_paths():
    spec = ModelSpec(vocab_size=32, hidden_dim=16, n_layers=2, n_heads=2, context_limit=128)
    model = TransformerModel.random(spec, seed=4, scale=0.3)
    prefix = [1, 2, 3, 4]
    for seed in range(20):
        tree = random_tree(24, seed)
        cache = model.new_cache()
        model.forward(prefix, cache)
        tokens, pos, mask = flatten(tree, cache.length)
        logits = model.forward(tokens, cache, attn_mask=mask, positions=pos).logits
        for i in range(len(tree)):
            path, j = [], i
            while j >= 0:
                path.append(tree.nodes[j].token)
                j = tree.nodes[j].parent
            ref = model.forward(prefix + path[::-1], model.new_cache()).logits[-1]
            assert np.abs(ref - logits[i]).max() < 1e-10
