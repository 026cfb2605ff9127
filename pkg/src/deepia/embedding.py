"""Pretrained document vectors for firms and industry definitions, and the
learnable firm transformation layer."""

from __future__ import annotations

import csv
import hashlib
import re
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .taxonomy import TaxonomyTree


class EmbeddingError(ValueError):
    pass


@dataclass
class EmbeddingStore:
    d: int
    firms: dict[tuple[str, str], np.ndarray]
    definitions: dict[int, np.ndarray]

    def firm_vector(self, firm: str, period: str) -> np.ndarray:
        try:
            return self.firms[firm, period]
        except KeyError:
            raise KeyError(f"no document vector for firm {firm!r} in period {period!r}") from None

    def has_firm(self, firm: str, period: str) -> bool:
        return (firm, period) in self.firms

    def definition_matrix(self, tree: TaxonomyTree) -> np.ndarray:
        """(len(tree.nodes), d) definition vectors; the root row is zero."""
        out = np.zeros((len(tree.nodes), self.d))
        for nid, vec in self.definitions.items():
            out[nid] = vec
        return out

    def periods(self) -> list[str]:
        return sorted({p for _, p in self.firms})


def _read_vectors(path, key_cols: list[str], d: int):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmbeddingError(f"{path}: empty file")
        header = [h.strip() for h in header]
        expected = key_cols + [f"v{i}" for i in range(d)]
        if header[: len(key_cols)] != key_cols:
            raise EmbeddingError(f"{path}: header must start with {','.join(key_cols)}")
        if len(header) != len(expected):
            raise EmbeddingError(f"{path}: header has {len(header) - len(key_cols)} vector columns, expected d={d}")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            vals = row[len(key_cols):]
            if len(vals) != d:
                raise EmbeddingError(f"{path} row {rowno}: vector length {len(vals)} != d={d}")
            try:
                vec = np.array([float(v) for v in vals])
            except ValueError as exc:
                raise EmbeddingError(f"{path} row {rowno}: {exc}") from None
            yield rowno, tuple(c.strip() for c in row[: len(key_cols)]), vec


def load_embeddings(firm_path, definition_path, d: int, tree: TaxonomyTree) -> EmbeddingStore:
    firms = {}
    for rowno, (firm, period), vec in _read_vectors(firm_path, ["firm_id", "period"], d):
        if (firm, period) in firms:
            raise EmbeddingError(f"{firm_path} row {rowno}: duplicate vector for ({firm}, {period})")
        firms[firm, period] = vec
    defs = {}
    for rowno, (code,), vec in _read_vectors(definition_path, ["code"], d):
        if code not in tree.by_code:
            raise EmbeddingError(f"{definition_path} row {rowno}: unknown industry code {code!r}")
        defs[tree.by_code[code]] = vec
    missing = [tree.nodes[i].code for i in range(1, len(tree.nodes)) if i not in defs]
    if missing:
        raise EmbeddingError(f"{definition_path}: no definition vector for {len(missing)} industries, "
                             f"e.g. {missing[:5]}")
    return EmbeddingStore(d, firms, defs)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_firm_vectors(path, rows, d: int) -> None:
    """rows: iterable of (firm, period label, vector)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["firm_id", "period"] + [f"v{i}" for i in range(d)])
        for firm, period, vec in rows:
            w.writerow([firm, period] + [_fmt(x) for x in vec])


def write_definition_vectors(path, rows, d: int) -> None:
    """rows: iterable of (code, vector)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["code"] + [f"v{i}" for i in range(d)])
        for code, vec in rows:
            w.writerow([code] + [_fmt(x) for x in vec])


class FirmTransform:
    """Two-layer perceptron d -> hidden -> d, ReLU plus dropout on the hidden layer.

    The output layer is linear.  Dropout is active only while ``training``.
    """

    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None, dropout: float = 0.5):
        hidden = 2 * d if hidden is None else hidden
        self.d, self.hidden, self.dropout = d, hidden, dropout
        self.W1 = nx.uniform_init(rng, (hidden, d), d, "delta.W1")
        self.b1 = nx.uniform_init(rng, (hidden,), d, "delta.b1")
        self.W2 = nx.uniform_init(rng, (d, hidden), hidden, "delta.W2")
        self.b2 = nx.uniform_init(rng, (d,), hidden, "delta.b2")
        self.training = False

    def parameters(self) -> list[nx.Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    def train(self, mode: bool = True) -> "FirmTransform":
        self.training = mode
        return self

    def eval(self) -> "FirmTransform":
        return self.train(False)

    def __call__(self, x, rng: np.random.Generator | None = None) -> nx.Tensor:
        """x: (..., d) document vectors -> (..., d) firm representations."""
        h = nx.relu(nx.matmul(x, self.W1.T) + self.b1)
        h = nx.dropout(h, self.dropout, rng, self.training)
        return nx.matmul(h, self.W2.T) + self.b2

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def firm_repr(store: EmbeddingStore, transform: FirmTransform, firm: str, period: str,
              rng: np.random.Generator | None = None) -> nx.Tensor:
    return transform(nx.Tensor(store.firm_vector(firm, period)), rng)


_TOKEN = re.compile(r"\w+", re.UNICODE)


def hash_embed(text: str, d: int, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of a bag of words into ``d`` buckets, L2-normalized.

    Uses a keyed blake2b digest so the result is stable across processes.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    vec = np.zeros(d)
    key = int(seed).to_bytes(8, "little", signed=True)
    for tok in _TOKEN.findall(text.lower()):
        h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8, key=key).digest(), "little")
        vec[h % d] += 1.0 if (h >> 63) & 1 else -1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec
