import logging

import numpy as np
import pytest

from deepia import numerics as nx
from deepia.embedding import EmbeddingStore
from deepia.knowledge import build_dataset
from deepia.taxonomy import parse_taxonomy_text
from deepia.training import (KINDS, CheckpointError, ConfigError, DeepIA, NumericalError, TrainConfig,
                             build_ablation, case_loss, checkpoint_param_count, full_param_count, infer,
                             load_checkpoint, predict_cases, resolve_cases, save_checkpoint, train)
from gradcheck import check

TOY_TEXT = "1\ta\td\n2\tb\td\n11\taa\td\n12\tab\td\n21\tba\td\n22\tbb\td\n"


def toy(d=6, focal=2, seed=0):
    """Four leaves, six firms over two periods."""
    tree = parse_taxonomy_text(TOY_TEXT)
    rng = np.random.default_rng(seed)
    leaves = ["11", "12", "21", "22", "11", "21"]
    codes = leaves if focal == 2 else [c[0] for c in leaves]
    rows = [(i, f"F{j}", t, codes[j]) for i, (j, t) in enumerate(((j, t) for t in "12" for j in range(6)), start=2)]
    ds = build_dataset(rows, tree, focal)
    firms = {(f"F{j}", t): rng.normal(size=d) for j in range(6) for t in "123"}
    store = EmbeddingStore(d, firms, {n.id: rng.normal(size=d) for n in tree.nodes[1:]})
    return tree, ds, store


@pytest.mark.parametrize("d, h, n_leaves, T, text", [
    (6, 1, 4, 2, TOY_TEXT),
    (5, 2, 3, 1, "1\ta\td\n11\tb\td\n12\tc\td\n13\te\td\n"),
    (4, 3, 6, 4, "1\ta\td\n2\tb\td\n11\tc\td\n12\tc\td\n13\tc\td\n21\tc\td\n22\tc\td\n23\tc\td\n"),
])
def test_parameter_count_formula(d, h, n_leaves, T, text):
    tree = parse_taxonomy_text(text)
    model = DeepIA(tree, T, tree.L, d, h, np.random.default_rng(0))
    assert model.n_params() == full_param_count(d, h, n_leaves, T) == (8 * h + 6) * d * d + (n_leaves * T + 5) * d


def test_ablation_param_counts():
    tree, _, _ = toy()
    cfg = TrainConfig(d=6, h=1, focal=2)
    counts = {k: build_ablation(k, tree, 2, cfg).n_params() for k in KINDS}
    assert counts["full"] == counts["no-ha"] == full_param_count(6, 1, 4, 2)
    assert counts["no-ha-no-dir"] == 4 * 6 + (4 * 36 + 3 * 6)
    with pytest.raises(ConfigError, match="unknown model kind"):
        build_ablation("no-dir", tree, 2, cfg)


def test_full_build_is_reproducible():
    tree, _, _ = toy()
    cfg = TrainConfig(d=6, h=1, focal=2, seed=3)
    a, b = build_ablation("full", tree, 2, cfg), build_ablation("full", tree, 2, cfg)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("focal", [1, 2])
def test_end_to_end_gradient(kind, focal):
    tree, ds, store = toy(focal=focal)
    model = DeepIA(tree, 2, focal, 6, 1, np.random.default_rng(1), kind=kind)
    cases = resolve_cases(ds, store, model.index)
    defs = store.definition_matrix(tree)
    err = check(lambda: case_loss(model, defs, cases.vectors, cases.periods, cases.targets), model.parameters())
    assert err < 1e-4


def test_chain_tree_has_zero_loss_and_gradient():
    tree = parse_taxonomy_text("1\ta\td\n11\tb\td\n")
    ds = build_dataset([(2, "A", "1", "11"), (3, "B", "1", "11")], tree, 2)
    store = EmbeddingStore(3, {("A", "1"): np.ones(3), ("B", "1"): -np.ones(3)},
                           {1: np.ones(3), 2: np.zeros(3)})
    model = DeepIA(tree, 1, 2, 3, 1, np.random.default_rng(0))
    cases = resolve_cases(ds, store, model.index)
    params = model.parameters()
    with nx.Tape() as tape:
        loss = case_loss(model, store.definition_matrix(tree), cases.vectors, cases.periods, cases.targets)
    tape.backward(loss)
    assert float(loss.data) == 0.0
    assert all(p.grad is None or not p.grad.any() for p in params)


def test_memorizes_single_example():
    tree, ds, store = toy()
    model = DeepIA(tree, 2, 2, 6, 1, np.random.default_rng(0), dropout=0.0)
    defs = store.definition_matrix(tree)
    x, period, target = store.firm_vector("F0", "1")[None], np.array([1]), np.array([0])
    params, state = model.parameters(), nx.AdamState(lr=1e-2)
    for step in range(500):
        with nx.Tape() as tape:
            loss = case_loss(model, defs, x, period, target)
        assert np.isfinite(loss.data) and loss.data >= 0
        if loss.data < 1e-3:
            break
        for p in params:
            p.zero_grad()
        tape.backward(loss)
        nx.adam_step(params, [p.grad for p in params], state)
    assert float(loss.data) < 1e-3


def test_training_is_deterministic(tmp_path):
    tree, ds, store = toy()
    cfg = TrainConfig(epochs=3, batch_size=5, lr=1e-2, d=6, h=1, focal=2, seed=11)
    a, b = train(ds, tree, store, cfg), train(ds, tree, store, cfg)
    assert a.batch_losses == b.batch_losses
    assert len(a.batch_losses) == 3 * 3            # 12 cases in batches of 5, last short batch kept
    save_checkpoint(a.model, tmp_path / "a.ckpt", cfg)
    save_checkpoint(b.model, tmp_path / "b.ckpt", cfg)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_first_epoch_improves_on_untrained_loss():
    tree, ds, store = toy()
    cfg = TrainConfig(epochs=1, batch_size=4, lr=1e-2, d=6, h=1, focal=2, seed=2, dropout=0.0)
    base = build_ablation("full", tree, 2, cfg, np.random.default_rng(cfg.seed))
    cases = resolve_cases(ds, store, base.index)
    defs = store.definition_matrix(tree)
    before = float(case_loss(base, defs, cases.vectors, cases.periods, cases.targets).data)
    res = train(ds, tree, store, cfg)
    after = float(case_loss(res.model, defs, cases.vectors, cases.periods, cases.targets).data)
    assert after < before


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    tree, ds, store = toy()
    with pytest.raises(ConfigError, match="empty"):
        train(build_dataset([], tree, 2), tree, store, TrainConfig(d=6, focal=2))


def test_missing_vectors_are_skipped(caplog):
    tree, ds, store = toy()
    del store.firms["F3", "2"]
    with caplog.at_level(logging.WARNING):
        cases = resolve_cases(ds, store, DeepIA(tree, 2, 2, 6, 1, np.random.default_rng(0)).index)
    assert len(cases) == len(ds) - 1
    assert "F3" in caplog.text


def test_nan_loss_names_batch():
    tree, ds, store = toy()
    store.firms["F0", "1"] = np.full(6, np.nan)
    with pytest.raises(NumericalError, match="epoch 1, batch"):
        train(ds, tree, store, TrainConfig(epochs=1, batch_size=100, d=6, h=1, focal=2))


class TestInference:
    def test_surrogate_period_matches_training_scoring(self):
        tree, ds, store = toy()
        res = train(ds, tree, store, TrainConfig(epochs=2, batch_size=6, lr=1e-2, d=6, h=1, focal=2))
        store.firms["NEW", "3"] = store.firm_vector("F2", "2")
        pred = infer(res.model, store, ["F2"], "2")
        _, lp, _ = predict_cases(res.model, store.definition_matrix(tree), store.firm_vector("F2", "2")[None], [2])
        np.testing.assert_array_equal([pred[0].distribution.probs[n] for n in res.model.index.focal_nodes],
                                      np.exp(lp[0]))
        assert pred[0].distribution.probs == infer(res.model, store, ["NEW"], "3")[0].distribution.probs

    def test_missing_vector_is_per_firm(self):
        tree, ds, store = toy()
        res = train(ds, tree, store, TrainConfig(epochs=1, batch_size=6, d=6, h=1, focal=2))
        out = infer(res.model, store, ["F0", "GHOST", "F1"], "3")
        assert [p.error is None for p in out] == [True, False, True]
        assert "GHOST" in out[1].error
        assert infer(res.model, store, [], "3") == []

    @pytest.mark.parametrize("kind", KINDS)
    def test_distributions_normalized(self, kind):
        tree, ds, store = toy()
        res = train(ds, tree, store, TrainConfig(epochs=1, batch_size=6, d=6, h=1, focal=2), kind=kind)
        for p in infer(res.model, store, [f"F{j}" for j in range(6)], "3"):
            assert sum(p.distribution.probs.values()) == pytest.approx(1.0, abs=1e-9)
            if kind == "full":
                for c in p.distribution.conditionals:
                    assert p.distribution.probs.get(c, 0) <= p.distribution.conditionals[c] + 1e-12


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        tree, ds, store = toy()
        cfg = TrainConfig(epochs=1, batch_size=6, d=6, h=1, focal=2)
        res = train(ds, tree, store, cfg)
        path = tmp_path / "m.ckpt"
        save_checkpoint(res.model, path, cfg, ds.period_labels)
        model, header = load_checkpoint(path, tree)
        assert header["period_labels"] == ["1", "2"]
        assert checkpoint_param_count(path) == full_param_count(6, 1, 4, 2)
        for p, q in zip(res.model.parameters(), model.parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_fingerprint_mismatch(self, tmp_path):
        tree, ds, store = toy()
        res = train(ds, tree, store, TrainConfig(epochs=1, d=6, h=1, focal=2))
        path = tmp_path / "m.ckpt"
        save_checkpoint(res.model, path)
        other = parse_taxonomy_text(TOY_TEXT + "# edited\n")
        with pytest.raises(CheckpointError, match=f"{tree.fingerprint}.*{other.fingerprint}"):
            load_checkpoint(path, other)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_checkpoint(path, parse_taxonomy_text(TOY_TEXT))
