"""Dynamic industry representation.

Industry vectors are built bottom-up over the tree (spatial aggregation) and
then across periods (temporal aggregation), both through one attention
primitive, :func:`mha`.  All nodes of a level and all periods are processed as
a single padded batch; padded key slots are masked out of the softmax.

Vectors are stored row-wise: a "matrix of n pieces of knowledge" is an
``(n, d)`` array here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .taxonomy import TaxonomyTree


class MhaParams:
    """Parameters of one attention block: full-width heads (each projection is
    d x d), an output projection d x h*d, and the post-transform W1, b1."""

    def __init__(self, d: int, h: int, rng: np.random.Generator, prefix: str = "theta"):
        self.d, self.h = d, h
        self.WQ = nx.uniform_init(rng, (h, d, d), d, f"{prefix}.WQ")
        self.WK = nx.uniform_init(rng, (h, d, d), d, f"{prefix}.WK")
        self.WV = nx.uniform_init(rng, (h, d, d), d, f"{prefix}.WV")
        self.WO = nx.uniform_init(rng, (d, h * d), h * d, f"{prefix}.WO")
        self.W1 = nx.uniform_init(rng, (d, d), d, f"{prefix}.W1")
        self.b1 = nx.uniform_init(rng, (d,), d, f"{prefix}.b1")

    def parameters(self) -> list[nx.Tensor]:
        return [self.WQ, self.WK, self.WV, self.WO, self.W1, self.b1]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def mha_param_count(d: int, h: int) -> int:
    return (4 * h + 1) * d * d + d


def mha(q, K, V, params: MhaParams, mask=None, return_weights: bool = False):
    """Attention summary of n pieces of knowledge for query ``q``.

    q: (B, d) or (d,); K, V: (B, n, d) or (n, d); mask: (B, n) booleans
    marking real (non-padding) slots.  Returns (B, d), plus the per-head
    attention weights (B, h, n) when ``return_weights``.
    """
    q, K, V = nx.as_tensor(q), nx.as_tensor(K), nx.as_tensor(V)
    single = q.ndim == 1
    if single:
        q, K, V = q.reshape(1, -1), K.reshape(1, *K.shape), V.reshape(1, *V.shape)
        if mask is not None:
            mask = np.asarray(mask)[None]
    B, d = q.shape
    n = K.shape[1]
    if K.shape != (B, n, d) or V.shape != (B, n, d) or d != params.d:
        raise nx.ShapeError(f"mha shapes disagree: q {q.shape}, K {K.shape}, V {V.shape}, d={params.d}")
    h = params.h

    # Every row is computed independently of its batch position (einsum, not
    # BLAS) and sums over the n pieces of knowledge are order-free, so
    # permuting siblings cannot change a parent vector, not even in the last bit.
    qh = nx.einsum("bd,hed->bhe", q, params.WQ)
    kh = nx.einsum("bnd,hed->bhne", K, params.WK)
    vh = nx.einsum("bnd,hed->bhne", V, params.WV)
    scores = nx.einsum("bhe,bhne->bhn", qh, kh) * (1.0 / np.sqrt(d))
    m = None if mask is None else np.asarray(mask, dtype=bool).reshape(B, 1, n)
    w = nx.softmax(scores, axis=-1, mask=m, order_free=True)
    heads = nx.ordered_sum(w.reshape(B, h, n, 1) * vh, axis=2).reshape(B, h * d)   # head-major concat
    summary = nx.einsum("bk,ek->be", heads, params.WO)
    out = nx.relu(nx.einsum("bk,ek->be", q + summary, params.W1) + params.b1)
    if single:
        out = out.reshape(d)
    if return_weights:
        weights = w.data.reshape(B, h, n)
        return out, (weights[0] if single else weights)
    return out


class TreeLayout:
    """Per-level index arrays used to batch the tree computations."""

    def __init__(self, tree: TaxonomyTree):
        self.tree = tree
        self.pos = np.zeros(len(tree.nodes), dtype=np.int64)
        for lvl_nodes in tree.levels:
            for i, nid in enumerate(lvl_nodes):
                self.pos[nid] = i
        self.child_pos: dict[int, np.ndarray] = {}
        self.child_mask: dict[int, np.ndarray] = {}
        for lvl in range(0, tree.L):
            kids = [tree.nodes[nid].children for nid in tree.levels[lvl]]
            width = max(len(k) for k in kids)
            cp = np.zeros((len(kids), width), dtype=np.int64)
            cm = np.zeros((len(kids), width), dtype=bool)
            for i, k in enumerate(kids):
                cp[i, : len(k)] = self.pos[k]
                cm[i, : len(k)] = True
            self.child_pos[lvl] = cp
            self.child_mask[lvl] = cm


@dataclass
class DirCache:
    """Knowledge vectors per level, indexed by position within the level.

    assign[l]: (N_l, T, d) assignment-knowledge vectors
    definition[l]: (N_l, d) definition-knowledge vectors
    dynamic[l]: (N_l, T, d) dynamic industry representations
    weights[(kind, l)]: (attention weights (N_l, [T,] h, n), validity mask)
    """

    T: int
    assign: dict[int, nx.Tensor] = field(default_factory=dict)
    definition: dict[int, nx.Tensor] = field(default_factory=dict)
    dynamic: dict[int, nx.Tensor] = field(default_factory=dict)
    weights: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _masked_mean(Z: nx.Tensor, mask: np.ndarray) -> nx.Tensor:
    m = mask[..., None].astype(np.float64)
    return nx.ordered_sum(Z * m, axis=-2) * (1.0 / m.sum(axis=-2))


def spatial_forward(layout: TreeLayout, gamma: nx.Tensor, definitions: np.ndarray,
                    theta: MhaParams) -> DirCache:
    """Bottom-up assignment and definition aggregation.

    gamma: (N_L, T, d) learnable leaf assignment vectors.
    definitions: (len(tree.nodes), d) pretrained definition vectors by node id.
    """
    tree = layout.tree
    L = tree.L
    NL, T, d = gamma.shape
    if NL != tree.N_l(L):
        raise nx.ShapeError(f"leaf table has {NL} rows, tree has {tree.N_l(L)} leaves")
    cache = DirCache(T)
    cache.assign[L] = gamma
    cache.definition[L] = nx.Tensor(definitions[tree.levels[L]])

    for lvl in range(L - 1, 0, -1):
        cp, cm = layout.child_pos[lvl], layout.child_mask[lvl]
        n_par, width = cp.shape

        # assignment knowledge: query is the mean of the children
        flat = cache.assign[lvl + 1].reshape(-1, d)
        idx = cp[:, None, :] * T + np.arange(T)[None, :, None]           # (n_par, T, width)
        Z = nx.take(flat, idx).reshape(n_par * T, width, d)
        zmask = np.broadcast_to(cm[:, None, :], (n_par, T, width)).reshape(n_par * T, width)
        out, w = mha(_masked_mean(Z, zmask), Z, Z, theta, zmask, return_weights=True)
        cache.assign[lvl] = out.reshape(n_par, T, d)
        cache.weights["assign", lvl] = (w.reshape(n_par, T, theta.h, width), zmask.reshape(n_par, T, width))

        # definition knowledge: own pretrained vector first, then children
        own = nx.Tensor(definitions[tree.levels[lvl]])
        table = nx.concat([own, cache.definition[lvl + 1]], axis=0)
        yidx = np.concatenate([np.arange(n_par)[:, None], n_par + cp], axis=1)
        ymask = np.concatenate([np.ones((n_par, 1), dtype=bool), cm], axis=1)
        Y = nx.take(table, yidx)
        out, w = mha(_masked_mean(Y, ymask), Y, Y, theta, ymask, return_weights=True)
        cache.definition[lvl] = out
        cache.weights["definition", lvl] = (w, ymask)
    return cache


def temporal_forward(cache: DirCache, theta_prime: MhaParams, levels=None) -> DirCache:
    """Fill ``cache.dynamic``: for period t the keys are [v_D, v_A(1..t)] and
    the query is v_A(t)."""
    T = cache.T
    levels = sorted(cache.assign) if levels is None else levels
    step = np.arange(T + 1)[None, :] <= (np.arange(T)[:, None] + 1)        # (T, T+1)
    for lvl in levels:
        A, D = cache.assign[lvl], cache.definition[lvl]
        n, _, d = A.shape
        M = nx.concat([D.reshape(n, 1, d), A], axis=1).reshape(n * (T + 1), d)
        idx = np.arange(n)[:, None, None] * (T + 1) + np.arange(T + 1)[None, None, :]
        idx = np.broadcast_to(idx, (n, T, T + 1))
        mask = np.broadcast_to(step[None], (n, T, T + 1)).reshape(n * T, T + 1)
        keys = nx.take(M, idx).reshape(n * T, T + 1, d)
        out, w = mha(A.reshape(n * T, d), keys, keys, theta_prime, mask, return_weights=True)
        cache.dynamic[lvl] = out.reshape(n, T, d)
        cache.weights["temporal", lvl] = (w.reshape(n, T, theta_prime.h, T + 1), mask.reshape(n, T, T + 1))
    return cache


def dump_attention(cache: DirCache, tree: TaxonomyTree, path) -> None:
    """Write every attention weight as a CSV row for inspection."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["kind", "code", "period", "head", "slot", "weight"])
        for (kind, lvl), (w, mask) in sorted(cache.weights.items()):
            for i, nid in enumerate(tree.levels[lvl]):
                code = tree.nodes[nid].code
                if kind == "definition":
                    rows = [("", w[i], mask[i])]
                else:
                    rows = [(t + 1, w[i, t], mask[i, t]) for t in range(w.shape[1])]
                for period, wt, mk in rows:
                    for head in range(wt.shape[0]):
                        for slot in np.flatnonzero(mk):
                            wr.writerow([kind, code, period, head, slot, repr(float(wt[head, slot]))])
