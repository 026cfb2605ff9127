"""Compatibility scores and tree-factorized assignment probabilities.

Scores are exp(v . x).  Normalizing them within a sibling group is a
log-softmax over the inner products, so everything here runs on log scores
and only exponentiates final probabilities.  Functions accepting ``scores``
take positive scores (e.g. hand-made fixtures); ``log_scores`` variants take
the inner products directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .taxonomy import TaxonomyTree


def log_compat_score(industry_vec, firm_vec) -> float:
    v, x = np.asarray(industry_vec, dtype=float), np.asarray(firm_vec, dtype=float)
    if v.shape != x.shape:
        raise nx.ShapeError(f"vector lengths differ: {v.shape} vs {x.shape}")
    return float(v @ x)


def compat_score(industry_vec, firm_vec) -> float:
    return math.exp(log_compat_score(industry_vec, firm_vec))


def _logsumexp(vals) -> float:
    m = max(vals)
    return m + math.log(sum(math.exp(v - m) for v in vals))


def _logs(scores: Mapping[int, float]) -> dict[int, float]:
    return {k: math.log(v) for k, v in scores.items()}


def log_conditional_prob(tree: TaxonomyTree, node, log_scores: Mapping[int, float]) -> float:
    n = tree.node(node)
    sibs = tree.nodes[n.parent].children
    return log_scores[n.id] - _logsumexp([log_scores[s] for s in sibs])


def conditional_prob(tree: TaxonomyTree, node, scores: Mapping[int, float]) -> float:
    """Score of ``node`` normalized over its sibling group (children of its parent)."""
    return math.exp(log_conditional_prob(tree, node, _logs(scores)))


def hierarchical_prob(tree: TaxonomyTree, node, conditionals: Mapping[int, float]) -> float:
    """Product of conditional probabilities along the root-to-node path."""
    return math.exp(sum(math.log(conditionals[p.id]) for p in tree.path(node)))


def flat_prob(tree: TaxonomyTree, node, scores: Mapping[int, float]) -> float:
    """Score normalized over every node at the same level, ignoring the tree."""
    n = tree.node(node)
    logs = _logs({i: scores[i] for i in tree.levels[n.level]})
    return math.exp(logs[n.id] - _logsumexp(list(logs.values())))


@dataclass
class AssignmentDistribution:
    firm: str
    period: str
    focal: int
    probs: dict[int, float]
    conditionals: dict[int, float] = field(default_factory=dict)


def distribution(tree: TaxonomyTree, focal: int, log_scores: Mapping[int, float],
                 firm: str = "", period: str = "", flat: bool = False) -> AssignmentDistribution:
    """Full focal-level distribution from per-node log scores (levels 1..focal)."""
    if flat:
        ids = tree.levels[focal]
        lse = _logsumexp([log_scores[i] for i in ids])
        probs = {i: math.exp(log_scores[i] - lse) for i in ids}
        return AssignmentDistribution(firm, period, focal, probs, {})
    logc = {}
    for lvl in range(1, focal + 1):
        for nid in tree.levels[lvl]:
            logc[nid] = log_conditional_prob(tree, nid, log_scores)
    probs = {i: math.exp(sum(logc[p.id] for p in tree.path(i))) for i in tree.levels[focal]}
    return AssignmentDistribution(firm, period, focal, probs, {k: math.exp(v) for k, v in logc.items()})


def assign(dist: AssignmentDistribution) -> int:
    """Most probable focal node; ties go to the smallest node id."""
    return min(dist.probs, key=lambda i: (-dist.probs[i], i))


class HierarchyIndex:
    """Column layout for batched scoring of all nodes at levels 1..focal.

    Columns are the selected node ids in level order; ``groups`` gives each
    column's sibling group and ``paths[k]`` the columns on the path to the
    k-th focal node.
    """

    def __init__(self, tree: TaxonomyTree, focal: int):
        self.tree, self.focal = tree, focal
        self.nodes = [nid for lvl in range(1, focal + 1) for nid in tree.levels[lvl]]
        self.col = {nid: c for c, nid in enumerate(self.nodes)}
        parents = sorted({tree.nodes[n].parent for n in self.nodes})
        gid = {p: g for g, p in enumerate(parents)}
        self.groups = np.array([gid[tree.nodes[n].parent] for n in self.nodes], dtype=np.int64)
        self.focal_nodes = list(tree.levels[focal])
        self.focal_pos = {nid: k for k, nid in enumerate(self.focal_nodes)}
        self.focal_cols = np.array([self.col[n] for n in self.focal_nodes], dtype=np.int64)
        self.paths = np.array([[self.col[p.id] for p in tree.path(n)] for n in self.focal_nodes],
                              dtype=np.int64).reshape(len(self.focal_nodes), focal)


def focal_log_probs(logits: nx.Tensor, index: HierarchyIndex, flat: bool = False):
    """logits: (B, n_cols) inner products for ``index.nodes``.

    Returns (log P over focal nodes (B, N_focal), log conditionals (B, n_cols)
    or None when ``flat``).
    """
    if flat:
        return nx.log_softmax(nx.take(logits.T, index.focal_cols).T, axis=-1), None
    logc = nx.group_log_softmax(logits, index.groups)
    per_path = nx.take(logc.T, index.paths)                 # (N_focal, focal, B)
    return nx.sum_(per_path, axis=1).T, logc


def pick(logp: nx.Tensor, targets) -> nx.Tensor:
    """logp[b, targets[b]] for each row b."""
    B, n = logp.shape
    return nx.take(logp.reshape(B * n), np.arange(B) * n + np.asarray(targets, dtype=np.int64))
