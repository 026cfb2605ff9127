"""Model assembly, mini-batch training, inference and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .assignment import (AssignmentDistribution, HierarchyIndex, assign, focal_log_probs, pick)
from .embedding import EmbeddingStore, FirmTransform
from .knowledge import AssignmentDataset
from .representation import MhaParams, TreeLayout, spatial_forward, temporal_forward
from .taxonomy import TaxonomyTree

log = logging.getLogger(__name__)

KINDS = ("full", "no-ha", "no-ha-no-dir")


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 500
    lr: float = 1e-3
    seed: int = 0
    d: int = 400
    h: int = 2
    dropout: float = 0.5
    focal: int = 1
    hidden: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.h < 1 or self.d < 1:
            raise ConfigError("d and h must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


def full_param_count(d: int, h: int, n_leaves: int, T: int) -> int:
    return (8 * h + 6) * d * d + (n_leaves * T + 5) * d


class DeepIA:
    """Parameters and forward pass of one model variant.

    ``full`` is the complete method, ``no-ha`` scores the focal level with a
    flat softmax, and ``no-ha-no-dir`` also replaces the dynamic industry
    vectors with one static learnable vector per focal industry.
    """

    def __init__(self, tree: TaxonomyTree, T: int, focal: int, d: int, h: int,
                 rng: np.random.Generator, kind: str = "full", dropout: float = 0.5,
                 hidden: int | None = None):
        if kind not in KINDS:
            raise ConfigError(f"unknown model kind {kind!r}, expected one of {', '.join(KINDS)}")
        if not 1 <= focal <= tree.L:
            raise ConfigError(f"focal level {focal} outside 1..{tree.L}")
        if T < 1:
            raise ConfigError("need at least one training period")
        self.tree, self.T, self.focal, self.d, self.h, self.kind = tree, T, focal, d, h, kind
        self.layout = TreeLayout(tree)
        self.index = HierarchyIndex(tree, focal)
        self.delta = FirmTransform(d, rng, hidden=hidden, dropout=dropout)
        if kind == "no-ha-no-dir":
            self.static = nx.uniform_init(rng, (tree.N_l(focal), d), d, "static")
        else:
            self.theta = MhaParams(d, h, rng, "theta")
            self.theta_prime = MhaParams(d, h, rng, "theta_prime")
            self.gamma = nx.uniform_init(rng, (tree.N_l(tree.L), T, d), d, "gamma")
            if hidden in (None, 2 * d):
                expected = full_param_count(d, h, tree.N_l(tree.L), T)
                assert self.n_params() == expected, (self.n_params(), expected)

    @property
    def flat(self) -> bool:
        return self.kind != "full"

    def named_parameters(self) -> list[tuple[str, nx.Tensor]]:
        groups = [self.delta.parameters()]
        if self.kind == "no-ha-no-dir":
            groups.append([self.static])
        else:
            groups += [self.theta.parameters(), self.theta_prime.parameters(), [self.gamma]]
        return [(p.name, p) for g in groups for p in g]

    def parameters(self) -> list[nx.Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def dir_forward(self, definitions: np.ndarray):
        cache = spatial_forward(self.layout, self.gamma, definitions, self.theta)
        return temporal_forward(cache, self.theta_prime, levels=range(1, self.focal + 1))

    def industry_vectors(self, definitions: np.ndarray) -> nx.Tensor:
        """(n_cols, T, d) vectors for every scored column of ``self.index``."""
        if self.kind == "no-ha-no-dir":
            raise ConfigError("static variant has no per-period industry vectors")
        cache = self.dir_forward(definitions)
        return nx.concat([cache.dynamic[lvl] for lvl in range(1, self.focal + 1)], axis=0)

    def log_probs(self, industry: nx.Tensor | None, x: nx.Tensor, periods):
        """Focal-level log probabilities (B, N_focal) and log conditionals.

        ``periods`` are 1-based indices into the training periods.
        """
        B, d = x.shape
        if self.kind == "no-ha-no-dir":
            logits = nx.matmul(x, self.static.T)
            return nx.log_softmax(logits, axis=-1), None
        n_cols, T, _ = industry.shape
        periods = np.asarray(periods, dtype=np.int64)
        if periods.min() < 1 or periods.max() > T:
            raise ConfigError(f"period index outside 1..{T}")
        idx = np.arange(n_cols)[None, :] * T + (periods[:, None] - 1)
        V = nx.take(industry.reshape(n_cols * T, d), idx)                    # (B, n_cols, d)
        logits = nx.matmul(V, x.reshape(B, d, 1)).reshape(B, n_cols)
        return focal_log_probs(logits, self.index, flat=self.flat)


def build_ablation(kind: str, tree: TaxonomyTree, T: int, cfg: TrainConfig,
                   rng: np.random.Generator | None = None) -> DeepIA:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return DeepIA(tree, T, cfg.focal, cfg.d, cfg.h, rng, kind=kind, dropout=cfg.dropout, hidden=cfg.hidden)


@dataclass
class Cases:
    """Assignment cases resolved against the embedding store."""
    firms: list[str]
    periods: np.ndarray          # 1-based
    vectors: np.ndarray          # (n, d)
    targets: np.ndarray          # position among focal nodes

    def __len__(self):
        return len(self.firms)


def resolve_cases(data: AssignmentDataset, store: EmbeddingStore, index: HierarchyIndex) -> Cases:
    firms, periods, vecs, targets = [], [], [], []
    skipped = 0
    for r in data.records:
        label = data.label_of(r.period)
        if not store.has_firm(r.firm, label):
            skipped += 1
            log.warning("no document vector for firm %s in period %s; record skipped", r.firm, label)
            continue
        firms.append(r.firm)
        periods.append(r.period)
        vecs.append(store.firm_vector(r.firm, label))
        targets.append(index.focal_pos[r.node])
    if skipped:
        log.warning("skipped %d of %d assignment records without vectors", skipped, len(data.records))
    vecs = np.array(vecs).reshape(len(firms), store.d)
    return Cases(firms, np.array(periods, dtype=np.int64), vecs, np.array(targets, dtype=np.int64))


def case_loss(model: DeepIA, definitions, vectors, periods, targets,
              rng: np.random.Generator | None = None) -> nx.Tensor:
    """Summed negative log-likelihood of the given cases (one batch)."""
    industry = None if model.kind == "no-ha-no-dir" else model.industry_vectors(definitions)
    x = model.delta(nx.Tensor(vectors), rng)
    logp, _ = model.log_probs(industry, x, periods)
    return -nx.sum_(pick(logp, targets))


@dataclass
class TrainResult:
    model: DeepIA
    batch_losses: list[float]
    epoch_losses: list[float]
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int | None = None


def train(data: AssignmentDataset, tree: TaxonomyTree, store: EmbeddingStore, cfg: TrainConfig,
          kind: str = "full", validation: Cases | None = None) -> TrainResult:
    """Mini-batch Adam on the summed NLL; DIR vectors are rebuilt every batch.

    With ``validation`` the epoch with the best validation accuracy is kept.
    """
    if len(data) == 0:
        raise ConfigError("empty assignment dataset")
    if data.focal != cfg.focal:
        raise ConfigError(f"dataset focal level {data.focal} != config focal level {cfg.focal}")
    if store.d != cfg.d:
        raise ConfigError(f"embedding dimension {store.d} != config d {cfg.d}")
    rng = np.random.default_rng(cfg.seed)
    model = build_ablation(kind, tree, data.T, cfg, rng)
    cases = resolve_cases(data, store, model.index)
    if len(cases) == 0:
        raise ConfigError("no assignment record has a document vector")
    definitions = store.definition_matrix(tree)
    params = model.parameters()
    state = nx.AdamState(lr=cfg.lr)
    result = TrainResult(model, [], [])
    best = (-1.0, None)

    for epoch in range(1, cfg.epochs + 1):
        model.delta.train()
        order = rng.permutation(len(cases))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size), start=1):
            sel = order[start: start + cfg.batch_size]
            with nx.Tape() as tape:
                loss = case_loss(model, definitions, cases.vectors[sel], cases.periods[sel],
                                 cases.targets[sel], rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            for p in params:
                p.zero_grad()
            tape.backward(loss)
            nx.adam_step(params, [p.grad for p in params], state)
            result.batch_losses.append(value)
            total += value
        result.epoch_losses.append(total)
        model.delta.eval()
        if validation is not None and len(validation):
            acc = float(np.mean(predict_cases(model, definitions, validation.vectors,
                                              validation.periods)[0] == validation.targets))
            result.val_accuracy.append(acc)
            if acc > best[0]:
                best = (acc, [p.data.copy() for p in params])
                result.best_epoch = epoch
            log.info("epoch %d loss %.6g val-acc %.4f", epoch, total, acc)
        else:
            log.info("epoch %d loss %.6g", epoch, total)
    if best[1] is not None:
        for p, saved in zip(params, best[1]):
            p.data[...] = saved
    return result


def predict_cases(model: DeepIA, definitions, vectors, periods):
    """Eval-mode focal predictions: (positions, log probs (B, N_focal), log conditionals)."""
    was_training = model.delta.training
    model.delta.eval()
    try:
        industry = None if model.kind == "no-ha-no-dir" else model.industry_vectors(definitions)
        x = model.delta(nx.Tensor(np.asarray(vectors, dtype=float).reshape(-1, model.d)))
        logp, logc = model.log_probs(industry, x, periods)
    finally:
        model.delta.training = was_training
    lp = logp.data
    # argmax with ties to the smallest node id; focal positions follow node-id order
    best = np.argmax(lp, axis=1)
    return best, lp, (None if logc is None else logc.data)


@dataclass
class Prediction:
    firm: str
    node: int | None
    probability: float | None
    distribution: AssignmentDistribution | None = None
    error: str | None = None


def infer(model: DeepIA, store: EmbeddingStore, firms, period: str, score_period: int | None = None,
          definitions: np.ndarray | None = None) -> list[Prediction]:
    """Assign each firm's ``period`` document to a focal industry.

    Industry vectors of the last training period stand in for the unseen
    period unless ``score_period`` says otherwise.
    """
    firms = list(firms)
    if not firms:
        return []
    tree, index = model.tree, model.index
    score_period = model.T if score_period is None else score_period
    definitions = store.definition_matrix(tree) if definitions is None else definitions
    ok = [f for f in firms if store.has_firm(f, period)]
    out = {f: Prediction(f, None, None, error=f"no document vector for firm {f!r} in period {period!r}")
           for f in firms if not store.has_firm(f, period)}
    if ok:
        vecs = np.stack([store.firm_vector(f, period) for f in ok])
        _, lp, lc = predict_cases(model, definitions, vecs, np.full(len(ok), score_period))
        for row, f in enumerate(ok):
            probs = {nid: float(np.exp(lp[row, k])) for k, nid in enumerate(index.focal_nodes)}
            conds = {} if lc is None else {nid: float(np.exp(lc[row, c])) for c, nid in enumerate(index.nodes)}
            dist = AssignmentDistribution(f, period, model.focal, probs, conds)
            node = assign(dist)
            out[f] = Prediction(f, node, probs[node], dist)
    return [out[f] for f in firms]


# checkpoints -----------------------------------------------------------------

_MAGIC = b"DEEPIA-CHECKPOINT\n"
_VERSION = 1


def save_checkpoint(model: DeepIA, path, cfg: TrainConfig | None = None,
                    period_labels: list[str] | None = None) -> None:
    named = model.named_parameters()
    header = {
        "version": _VERSION,
        "kind": model.kind,
        "d": model.d,
        "h": model.h,
        "T": model.T,
        "N_L": model.tree.N_l(model.tree.L),
        "focal": model.focal,
        "dropout": model.delta.dropout,
        "hidden": model.delta.hidden,
        "fingerprint": model.tree.fingerprint,
        "period_labels": list(period_labels or []),
        "config": asdict(cfg) if cfg is not None else None,
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in named],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, p in named:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def load_checkpoint(path, tree: TaxonomyTree) -> tuple[DeepIA, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        payload = fh.read()
    if header.get("version") != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if header["fingerprint"] != tree.fingerprint:
        raise CheckpointError(f"taxonomy fingerprint mismatch: checkpoint {header['fingerprint']} "
                              f"vs taxonomy {tree.fingerprint}")
    model = DeepIA(tree, header["T"], header["focal"], header["d"], header["h"], np.random.default_rng(0),
                   kind=header["kind"], dropout=header["dropout"], hidden=header["hidden"])
    data = np.frombuffer(payload, dtype="<f8")
    offset = 0
    named = dict(model.named_parameters())
    for spec in header["tensors"]:
        p = named[spec["name"]]
        if list(p.shape) != spec["shape"]:
            raise CheckpointError(f"{path}: tensor {spec['name']} has shape {spec['shape']}, model expects {p.shape}")
        p.data[...] = data[offset: offset + p.size].reshape(p.shape)
        offset += p.size
    if offset != data.size:
        raise CheckpointError(f"{path}: {data.size - offset} trailing values")
    return model, header


def checkpoint_param_count(path) -> int:
    header = read_checkpoint_header(path)
    return sum(int(np.prod(t["shape"])) for t in header["tensors"])
