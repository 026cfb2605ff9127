"""Synthetic taxonomy and firm corpus with known ground truth.

Every non-root node gets its own direction; a node's center is its parent's
center plus a level-dependent step along that direction, so siblings sit
exactly ``separation`` apart when directions are orthonormal (d >= N) and
cousins further.  Firm vectors are their leaf center plus Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import write_definition_vectors, write_firm_vectors
from .knowledge import write_assignments


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    branching: list[int] = field(default_factory=lambda: [3, 4])
    d: int = 32
    firms_per_leaf: int = 20
    T: int = 3
    separation: float = 4.0
    noise: float = 0.5
    drift: float = 0.0
    churn: float = 0.0
    seed: int = 7
    focal: int | None = None
    definition_noise: float = 0.1

    @property
    def L(self) -> int:
        return len(self.branching)

    def __post_init__(self):
        self.branching = [int(b) for b in self.branching]
        if not self.branching or min(self.branching) < 1:
            raise SynthError("every level needs a branching factor of at least 1 (no leaves otherwise)")
        if self.firms_per_leaf < 1 or self.T < 1 or self.d < 1:
            raise SynthError("firms_per_leaf, T and d must be at least 1")
        if not self.separation > 0:
            raise SynthError("separation must be positive")
        if not (np.isfinite(self.noise) and self.noise >= 0 and np.isfinite(self.drift) and self.drift >= 0):
            raise SynthError("noise and drift must be finite and non-negative")
        if not 0.0 <= self.churn < 1.0:
            raise SynthError("churn must lie in [0, 1)")
        if self.focal is not None and not 1 <= self.focal <= self.L:
            raise SynthError(f"focal level {self.focal} outside 1..{self.L}")


@dataclass
class SynthOutput:
    taxonomy: Path
    assignments: Path
    firm_vectors: Path
    definition_vectors: Path
    heldout: Path
    period_labels: list[str]
    leaf_centers: dict[str, np.ndarray]


def _codes(branching: list[int]) -> list[list[tuple[str, str]]]:
    """Per level: (code, parent code) pairs."""
    levels = [[("", None)]]
    for b in branching:
        width = len(str(b))
        levels.append([(parent + str(i).zfill(width), parent)
                       for parent, _ in levels[-1] for i in range(1, b + 1)])
    return levels[1:]


def _directions(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    if n <= d:
        q, _ = np.linalg.qr(rng.standard_normal((d, n)))
        return q.T
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def generate(cfg: SynthConfig, outdir) -> SynthOutput:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    L, d = cfg.L, cfg.d
    focal = L if cfg.focal is None else cfg.focal
    levels = _codes(cfg.branching)
    all_codes = [c for lvl in levels for c, _ in lvl]
    dirs = dict(zip(all_codes, _directions(rng, len(all_codes), d)))

    center = {"": np.zeros(d)}
    for lvl, nodes in enumerate(levels, start=1):
        step = cfg.separation / np.sqrt(2.0) * 2.0 ** (L - lvl)
        for code, parent in nodes:
            center[code] = center[parent] + step * dirs[code]
    leaves = [c for c, _ in levels[-1]]

    labels = [str(t) for t in range(1, cfg.T + 2)]
    leaf_at = {leaf: [center[leaf]] for leaf in leaves}
    for _ in range(cfg.T):
        for leaf in leaves:
            u = rng.standard_normal(d)
            u /= np.linalg.norm(u)
            leaf_at[leaf].append(leaf_at[leaf][-1] + cfg.drift * cfg.separation * u)

    counter = 0

    def new_firm():
        nonlocal counter
        counter += 1
        return f"F{counter:05d}"

    members = {leaf: [new_firm() for _ in range(cfg.firms_per_leaf)] for leaf in leaves}
    firm_rows, assign_rows, heldout_rows = [], [], []
    for t, label in enumerate(labels):
        if t > 0 and cfg.churn > 0:
            for leaf in leaves:
                members[leaf] = [f if rng.random() >= cfg.churn else new_firm() for f in members[leaf]]
        for leaf in leaves:
            target = leaf[: sum(len(str(b)) for b in cfg.branching[:focal])]
            for firm in members[leaf]:
                vec = leaf_at[leaf][t] + cfg.noise * rng.standard_normal(d)
                firm_rows.append((firm, label, vec))
                (heldout_rows if t == cfg.T else assign_rows).append((firm, label, target))

    def_rows = []
    for code in all_codes:
        under = [leaf for leaf in leaves if leaf.startswith(code)]
        base = np.mean([center[leaf] for leaf in under], axis=0)
        def_rows.append((code, base + cfg.definition_noise * cfg.noise * rng.standard_normal(d)))

    out = SynthOutput(outdir / "taxonomy.tsv", outdir / "assignments.csv", outdir / "firm_vectors.csv",
                      outdir / "definition_vectors.csv", outdir / "heldout.csv", labels,
                      {leaf: center[leaf] for leaf in leaves})
    with open(out.taxonomy, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# synthetic taxonomy\n")
        for code in all_codes:
            fh.write(f"{code}\tIndustry {code}\tsynthetic industry {code}\n")
    write_assignments(out.assignments, assign_rows)
    write_assignments(out.heldout, heldout_rows)
    write_firm_vectors(out.firm_vectors, firm_rows, d)
    write_definition_vectors(out.definition_vectors, def_rows, d)
    return out
