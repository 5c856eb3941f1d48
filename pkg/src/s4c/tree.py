"""Candidate-token trees: construction, flattening, tree masks, accepted paths.

Node 0 is always the round's root: the last sampled token, which the target
model has not consumed yet. Every other node is a drafted candidate whose
parent precedes it in the node list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import StructureError
from .mathcore import top_k

ROOT = "root"
VERTICAL = "vertical_top1"
HORIZONTAL = "horizontal_alt"


@dataclass
class TreeNode:
    token: int
    parent: int
    depth: int
    draft_prob: float
    kind: str


@dataclass
class DraftTree:
    nodes: list[TreeNode]
    # draft distribution every child of a node was drawn from, keyed by parent index
    child_dists: dict[int, np.ndarray] = field(default_factory=dict)
    # draft-side feature behind each vertical node, reused by the next head
    features: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def rooted_at(cls, token: int) -> "DraftTree":
        return cls([TreeNode(int(token), -1, 0, 1.0, ROOT)])

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def root_token(self) -> int:
        return self.nodes[0].token

    @property
    def tokens(self) -> list[int]:
        return [n.token for n in self.nodes]

    @property
    def parents(self) -> np.ndarray:
        return np.array([n.parent for n in self.nodes], dtype=np.int64)

    @property
    def depths(self) -> np.ndarray:
        return np.array([n.depth for n in self.nodes], dtype=np.int64)

    @property
    def max_depth(self) -> int:
        return max(n.depth for n in self.nodes)

    def add(self, token: int, parent: int, draft_prob: float, kind: str) -> int:
        if not 0 <= parent < len(self.nodes):
            raise StructureError(f"parent {parent} does not precede the new node")
        self.nodes.append(TreeNode(int(token), parent, self.nodes[parent].depth + 1, float(draft_prob), kind))
        return len(self.nodes) - 1

    def children(self, index: int) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.parent == index]

    def validate(self) -> None:
        if not self.nodes:
            raise StructureError("empty tree")
        root = self.nodes[0]
        if root.parent != -1 or root.depth != 0:
            raise StructureError("node 0 must be the root (parent -1, depth 0)")
        for i, n in enumerate(self.nodes[1:], start=1):
            if not 0 <= n.parent < i:
                raise StructureError(f"node {i} has parent {n.parent}; parents must precede children")
            if n.depth != self.nodes[n.parent].depth + 1:
                raise StructureError(f"node {i} depth {n.depth} != parent depth + 1")

    def to_dict(self) -> dict:
        return {
            "root_token": self.root_token,
            "nodes": [{"index": i, "token": n.token, "parent": n.parent, "depth": n.depth,
                       "prob": round(n.draft_prob, 12), "kind": n.kind}
                      for i, n in enumerate(self.nodes)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def build_mask(tree: DraftTree) -> np.ndarray:
    """Boolean (n, n) matrix; entry (i, j) is True iff j is i or an ancestor of i."""
    tree.validate()
    return _kernels.ancestor_mask(tree.parents)


def flatten(tree: DraftTree, cache_length: int = 0):
    """Tokens, position ids and mask for one target pass over the whole tree.

    The root sits at ``cache_length``; siblings share a position id.
    """
    mask = build_mask(tree)
    positions = cache_length + tree.depths
    return tree.tokens, positions, mask


def longest_accepted_path(tree: DraftTree, accepted) -> list[int]:
    """Longest root-originating chain of accepted nodes (root excluded).

    Ties prefer vertical children, then the lowest node index.
    """
    acc = np.asarray(accepted, dtype=np.bool_)
    n = len(tree.nodes)
    if acc.shape != (n,):
        raise StructureError(f"need one accepted flag per node ({n}), got {acc.shape}")
    best_len = np.zeros(n, dtype=np.int64)
    best_next = np.full(n, -1, dtype=np.int64)
    best_key: list[tuple | None] = [None] * n
    for i in range(n - 1, 0, -1):
        if not acc[i]:
            continue
        par = tree.nodes[i].parent
        key = (best_len[i] + 1, tree.nodes[i].kind == VERTICAL, -i)
        if best_key[par] is None or key > best_key[par]:
            best_key[par] = key
            best_len[par] = best_len[i] + 1
            best_next[par] = i
    path = []
    cur = best_next[0]
    while cur >= 0:
        path.append(int(cur))
        cur = best_next[cur]
    return path


def expand(tree: DraftTree, parent: int, dist: np.ndarray, n_vertical: int, n_horizontal: int,
           temperature: float, rng, round_idx: int, rank_dist: np.ndarray | None = None):
    """Attach drafted children to ``parent``; returns (vertical ids, horizontal ids).

    With ``temperature > 0`` children are drawn from ``dist`` without
    replacement (vertical ones first), each draw renormalising over the
    tokens not yet taken. In greedy mode children are the top-ranked tokens
    of ``rank_dist`` (the untempered draft distribution), zero-probability
    tokens skipped.
    """
    verticals, horizontals = [], []
    tree.child_dists[parent] = dist
    total = n_vertical + n_horizontal
    if temperature > 0:
        q = dist
        for c in range(total):
            if not q.any():
                break
            idx = len(tree.nodes)
            tok = _kernels.sample_index(q, rng.uniform(round_idx, _kernels.PURPOSE_DRAFT, idx))
            node = tree.add(tok, parent, dist[tok], VERTICAL if c < n_vertical else HORIZONTAL)
            (verticals if c < n_vertical else horizontals).append(node)
            q = _kernels.exclude_np(q, tok)
    else:
        ranked = rank_dist if rank_dist is not None else dist
        for c, (tok, prob) in enumerate(top_k(ranked, min(total, ranked.shape[0]))):
            if prob <= 0.0:
                break
            node = tree.add(tok, parent, prob, VERTICAL if c < n_vertical else HORIZONTAL)
            (verticals if c < n_vertical else horizontals).append(node)
    return verticals, horizontals
