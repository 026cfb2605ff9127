import numpy as np
import pytest

from conftest import SMALL_TREE_TEXT
from deepia import numerics as nx
from deepia.representation import (MhaParams, TreeLayout, dump_attention, mha, mha_param_count,
                                   spatial_forward, temporal_forward)
from deepia.taxonomy import parse_taxonomy_text
from gradcheck import check


def relu(x):
    return np.maximum(x, 0.0)


def naive_mha(q, K, V, p, mask=None):
    """Loop-by-loop attention: per head score each column, normalize, mix values."""
    d, h, n = p.d, p.h, len(K)
    mask = np.ones(n, dtype=bool) if mask is None else mask
    heads, weights = [], []
    for j in range(h):
        qj = p.WQ.data[j] @ q
        scores = [float(qj @ (p.WK.data[j] @ K[i])) / np.sqrt(d) if mask[i] else -np.inf for i in range(n)]
        top = max(scores)
        e = [np.exp(s - top) for s in scores]
        w = [x / sum(e) for x in e]
        head = np.zeros(d)
        for i in range(n):
            head += w[i] * (p.WV.data[j] @ V[i])
        heads.append(head)
        weights.append(w)
    summary = p.WO.data @ np.concatenate(heads)
    return relu(p.W1.data @ (q + summary) + p.b1.data), np.array(weights)


def identity_params(d):
    p = MhaParams(d, 1, np.random.default_rng(0))
    for W in (p.WQ, p.WK, p.WV):
        W.data[...] = np.eye(d)
    p.WO.data[...] = np.eye(d)
    p.W1.data[...] = np.eye(d)
    p.b1.data[...] = 0
    return p


class TestMha:
    @pytest.mark.parametrize("d, h", [(1, 1), (6, 1), (8, 2), (400, 2)])
    def test_param_count(self, d, h):
        p = MhaParams(d, h, np.random.default_rng(0))
        assert p.n_params() == mha_param_count(d, h) == 4 * h * d * d + d * d + d

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = MhaParams(8, 2, rng)
            q, K, V = rng.normal(size=8), rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
            out, w = mha(q, K, V, p, return_weights=True)
            ref, ref_w = naive_mha(q, K, V, p)
            np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-10)
            np.testing.assert_allclose(w, ref_w, rtol=0, atol=1e-12)

    def test_batched_masked_matches_oracle(self):
        rng = np.random.default_rng(1)
        p = MhaParams(5, 3, rng)
        q, K = rng.normal(size=(4, 5)), rng.normal(size=(4, 6, 5))
        mask = rng.random((4, 6)) < 0.6
        mask[:, 0] = True
        out = mha(q, K, K, p, mask)
        for b in range(4):
            np.testing.assert_allclose(out.data[b], naive_mha(q[b], K[b], K[b], p, mask[b])[0], rtol=0, atol=1e-10)

    def test_single_column_weight_is_one(self):
        rng = np.random.default_rng(2)
        p = MhaParams(4, 3, rng)
        _, w = mha(rng.normal(size=4), rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), p, return_weights=True)
        assert np.all(w == 1.0)

    def test_identical_columns_uniform(self):
        rng = np.random.default_rng(3)
        p = MhaParams(4, 2, rng)
        k = rng.normal(size=4)
        _, w = mha(rng.normal(size=4), np.tile(k, (5, 1)), np.tile(k, (5, 1)), p, return_weights=True)
        np.testing.assert_allclose(w, 0.2, rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        p = MhaParams(4, 1, np.random.default_rng(0))
        with pytest.raises(nx.ShapeError):
            mha(np.zeros(4), np.zeros((2, 3)), np.zeros((2, 3)), p)

    def test_convexity_over_random_calls(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(1000):
            d, h, n, B = (int(rng.integers(1, 7)) for _ in range(4))
            p = MhaParams(d, h, rng)
            scale = rng.uniform(0.1, 30)
            q, K = rng.normal(size=(B, d)) * scale, rng.normal(size=(B, n, d)) * scale
            mask = rng.random((B, n)) < 0.7
            mask[np.arange(B), rng.integers(0, n, size=B)] = True
            _, w = mha(q, K, K, p, mask, return_weights=True)
            assert np.all(w >= 0) and np.all(w[np.broadcast_to(~mask[:, None, :], w.shape)] == 0)
            worst = max(worst, float(np.max(np.abs(w.sum(axis=-1) - 1))))
        assert worst <= 1e-12


def chain_tree(width=1):
    lines = ["1\tp\td"] + [f"1{i}\tc{i}\td" for i in range(1, width + 1)]
    return parse_taxonomy_text("\n".join(lines) + "\n")


class TestSpatial:
    def test_identity_weights_single_child(self):
        d, T = 4, 2
        tree = chain_tree(1)
        gamma = nx.Tensor(np.random.default_rng(0).normal(size=(1, T, d)))
        defs = np.zeros((len(tree.nodes), d))
        cache = spatial_forward(TreeLayout(tree), gamma, defs, identity_params(d))
        np.testing.assert_allclose(cache.assign[1].data[0], relu(2 * gamma.data[0]), rtol=0, atol=1e-15)

    def test_matches_node_by_node_oracle(self, small_tree):
        rng = np.random.default_rng(5)
        d, T = 6, 3
        p = MhaParams(d, 2, rng)
        gamma = nx.Tensor(rng.normal(size=(5, T, d)))
        defs = rng.normal(size=(len(small_tree.nodes), d))
        cache = spatial_forward(TreeLayout(small_tree), gamma, defs, p)
        for i, nid in enumerate(small_tree.levels[1]):
            kids = [small_tree.levels[2].index(c) for c in small_tree.nodes[nid].children]
            for t in range(T):
                Z = gamma.data[kids, t]
                ref, _ = naive_mha(Z.mean(axis=0), Z, Z, p)
                np.testing.assert_allclose(cache.assign[1].data[i, t], ref, rtol=0, atol=1e-10)
            Y = np.vstack([defs[nid], defs[small_tree.nodes[nid].children]])
            ref, _ = naive_mha(Y.mean(axis=0), Y, Y, p)
            np.testing.assert_allclose(cache.definition[1].data[i], ref, rtol=0, atol=1e-10)

    def test_sibling_permutation_invariance(self):
        rng = np.random.default_rng(6)
        d, T = 5, 2
        p = MhaParams(d, 2, rng)
        fwd = parse_taxonomy_text("1\tp\td\n11\ta\td\n12\tb\td\n13\tc\td\n")
        rev = parse_taxonomy_text("1\tp\td\n13\tc\td\n12\tb\td\n11\ta\td\n")
        g = rng.normal(size=(3, T, d))
        defs = rng.normal(size=(5, d))
        a = spatial_forward(TreeLayout(fwd), nx.Tensor(g), defs, p)
        # reversed file order: node ids 2, 3, 4 now hold codes 13, 12, 11
        b = spatial_forward(TreeLayout(rev), nx.Tensor(g[::-1].copy()), defs[[0, 1, 4, 3, 2]], p)
        np.testing.assert_array_equal(a.assign[1].data, b.assign[1].data)
        np.testing.assert_array_equal(a.definition[1].data, b.definition[1].data)

    def test_permutation_invariance_three_levels(self):
        # reorder every sibling group in the file; vectors follow their codes
        rng = np.random.default_rng(13)
        for _ in range(10):
            d, T = int(rng.integers(1, 12)), int(rng.integers(1, 4))
            p = MhaParams(d, int(rng.integers(1, 4)), rng)
            codes = [a + b + c for a in "123" for b in "12" for c in "123"]
            codes = sorted({c[:k] for c in codes for k in (1, 2, 3)}, key=lambda c: (len(c), c))
            gamma = {c: rng.normal(size=(T, d)) for c in codes if len(c) == 3}
            defs = {c: rng.normal(size=d) for c in codes}
            out = []
            for order in (codes, sorted(codes, key=lambda c: (len(c), c[::-1]), reverse=True)):
                order = sorted(order, key=len)
                tree = parse_taxonomy_text("".join(f"{c}\tx\td\n" for c in order))
                g = np.stack([gamma[tree.nodes[i].code] for i in tree.levels[3]])
                dm = np.zeros((len(tree.nodes), d))
                for n in tree.nodes[1:]:
                    dm[n.id] = defs[n.code]
                c = spatial_forward(TreeLayout(tree), nx.Tensor(g), dm, p)
                out.append({tree.nodes[i].code: (c.assign[lvl].data[k].tobytes(), c.definition[lvl].data[k].tobytes())
                            for lvl in (1, 2) for k, i in enumerate(tree.levels[lvl])})
            assert out[0] == out[1]

    def test_duplicate_definition_columns(self):
        rng = np.random.default_rng(7)
        d = 4
        p = MhaParams(d, 2, rng)
        tree = chain_tree(3)
        v = rng.normal(size=d)
        defs = np.tile(v, (len(tree.nodes), 1))
        cache = spatial_forward(TreeLayout(tree), nx.Tensor(rng.normal(size=(3, 1, d))), defs, p)
        single, _ = naive_mha(v, v[None], v[None], p)
        np.testing.assert_allclose(cache.definition[1].data[0], single, rtol=0, atol=1e-12)

    def test_assignment_pass_ignores_definitions(self, small_tree):
        rng = np.random.default_rng(8)
        p = MhaParams(4, 1, rng)
        g = nx.Tensor(rng.normal(size=(5, 2, 4)))
        a = spatial_forward(TreeLayout(small_tree), g, rng.normal(size=(8, 4)), p)
        b = spatial_forward(TreeLayout(small_tree), g, rng.normal(size=(8, 4)), p)
        np.testing.assert_array_equal(a.assign[1].data, b.assign[1].data)
        assert not np.array_equal(a.definition[1].data, b.definition[1].data)


class TestTemporal:
    def test_matches_oracle(self, small_tree):
        rng = np.random.default_rng(9)
        d, T = 8, 3
        theta, theta_p = MhaParams(d, 2, rng), MhaParams(d, 2, rng)
        cache = spatial_forward(TreeLayout(small_tree), nx.Tensor(rng.normal(size=(5, T, d))),
                                rng.normal(size=(8, d)), theta)
        temporal_forward(cache, theta_p)
        for lvl in (1, 2):
            A, D = cache.assign[lvl].data, cache.definition[lvl].data
            w, mask = cache.weights["temporal", lvl]
            for i in range(A.shape[0]):
                for t in range(T):
                    M = np.vstack([D[i], A[i, : t + 1]])
                    ref, ref_w = naive_mha(A[i, t], M, M, theta_p)
                    np.testing.assert_allclose(cache.dynamic[lvl].data[i, t], ref, rtol=0, atol=1e-10)
                    assert mask[i, t].sum() == t + 2
                    np.testing.assert_allclose(w[i, t][:, : t + 2], ref_w, rtol=0, atol=1e-12)

    def test_single_period_duplicate_column(self):
        rng = np.random.default_rng(10)
        d = 4
        theta, theta_p = MhaParams(d, 1, rng), MhaParams(d, 1, rng)
        tree = parse_taxonomy_text("1\ta\td\n")
        v = rng.normal(size=d)
        cache = spatial_forward(TreeLayout(tree), nx.Tensor(v.reshape(1, 1, d)), np.vstack([np.zeros(d), v]), theta)
        temporal_forward(cache, theta_p)
        single, _ = naive_mha(v, v[None], v[None], theta_p)
        np.testing.assert_allclose(cache.dynamic[1].data[0, 0], single, rtol=0, atol=1e-12)

    def test_gradient_flow_toy(self, small_tree):
        rng = np.random.default_rng(11)
        d, T = 6, 2
        theta, theta_p = MhaParams(d, 1, rng), MhaParams(d, 1, rng)
        gamma = nx.uniform_init(rng, (5, T, d), d, "gamma")
        defs = rng.normal(size=(8, d))
        layout = TreeLayout(small_tree)
        w = {lvl: rng.normal(size=(small_tree.N_l(lvl), T, d)) for lvl in (1, 2)}

        def loss():
            c = temporal_forward(spatial_forward(layout, gamma, defs, theta), theta_p)
            return nx.sum_(c.dynamic[1] * w[1]) + nx.sum_(c.dynamic[2] * w[2])

        params = [gamma] + theta.parameters() + theta_p.parameters()
        assert check(loss, params) < 1e-5
        for p in params:
            assert np.any(p.grad != 0), p.name


def test_dump_attention(small_tree, tmp_path):
    rng = np.random.default_rng(12)
    theta, theta_p = MhaParams(4, 2, rng), MhaParams(4, 2, rng)
    cache = temporal_forward(spatial_forward(TreeLayout(small_tree), nx.Tensor(rng.normal(size=(5, 2, 4))),
                                             rng.normal(size=(8, 4)), theta), theta_p)
    path = tmp_path / "att.csv"
    dump_attention(cache, small_tree, path)
    rows = [ln.split(",") for ln in path.read_text().splitlines()[1:]]
    groups = {}
    for kind, code, period, head, _, weight in rows:
        groups.setdefault((kind, code, period, head), []).append(float(weight))
    assert {k[0] for k in groups} == {"assign", "definition", "temporal"}
    assert all(abs(sum(v) - 1) < 1e-12 for v in groups.values())
