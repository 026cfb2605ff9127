"""Classification metrics: accuracy, macro-F1, tree distance, production-rate
accuracy and income-weighted misclassification cost."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Mapping, Sequence

from .taxonomy import TaxonomyTree


class MetricError(ValueError):
    pass


@dataclass
class ClassScore:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


@dataclass
class EvalReport:
    n: int
    accuracy: float
    macro_f1: float
    per_class: dict[str, ClassScore] = field(default_factory=dict)
    mean_tree_distance: float | None = None
    production_rates: list[tuple[float, int, float]] = field(default_factory=list)
    misclassification_cost: float | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["production_rates"] = [{"rate": r, "n": n, "accuracy": a} for r, n, a in self.production_rates]
        return out


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def per_class_scores(pred: Sequence, truth: Sequence, classes: Sequence) -> dict:
    if len(pred) != len(truth):
        raise MetricError(f"{len(pred)} predictions but {len(truth)} truths")
    out = {}
    for c in classes:
        tp = sum(1 for p, t in zip(pred, truth) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, truth) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, truth) if p != c and t == c)
        prec, rec = _safe_div(tp, tp + fp), _safe_div(tp, tp + fn)
        out[c] = ClassScore(tp, fp, fn, prec, rec, _safe_div(2 * prec * rec, prec + rec))
    return out


def accuracy_macro_f1(pred: Sequence, truth: Sequence, classes: Sequence, mode: str = "all"):
    """Accuracy, macro-F1 and the per-class table.

    ``mode="all"`` averages F1 over every class in ``classes`` (undefined
    ratios count as 0); ``mode="present"`` averages only over classes that
    occur in ``pred`` or ``truth``.
    """
    if len(pred) != len(truth):
        raise MetricError(f"{len(pred)} predictions but {len(truth)} truths")
    if mode not in ("all", "present"):
        raise MetricError(f"unknown macro-F1 mode {mode!r}")
    n = len(truth)
    acc = _safe_div(sum(1 for p, t in zip(pred, truth) if p == t), n)
    table = per_class_scores(pred, truth, classes)
    if mode == "present":
        used = set(pred) | set(truth)
        f1s = [s.f1 for c, s in table.items() if c in used]
    else:
        f1s = [s.f1 for s in table.values()]
    return acc, (sum(f1s) / len(f1s) if f1s else 0.0), table


def mean_tree_distance(pred: Sequence, truth: Sequence, tree: TaxonomyTree) -> float:
    if len(pred) != len(truth):
        raise MetricError(f"{len(pred)} predictions but {len(truth)} truths")
    if not truth:
        raise MetricError("no cases")
    return sum(tree.tree_distance(p, t) for p, t in zip(pred, truth)) / len(truth)


def production_rate_accuracy(pred: Sequence, truth: Sequence, scores: Sequence[float],
                             rates: Sequence[float], ids: Sequence | None = None):
    """Accuracy over the ceil(rate * n) most confident cases, for each rate.

    Cases are ranked by descending score; ties go to the smaller id (case
    order when ``ids`` is omitted).  Returns (rate, cases used, accuracy) rows.
    """
    n = len(truth)
    if not n:
        raise MetricError("no cases")
    if not (len(pred) == len(scores) == n):
        raise MetricError("pred, truth and scores must have equal length")
    ids = list(range(n)) if ids is None else list(ids)
    order = sorted(range(n), key=lambda i: (-scores[i], ids[i]))
    rows = []
    for rate in rates:
        if not 0.0 < rate <= 1.0:
            raise MetricError(f"production rate {rate} outside (0, 1]")
        k = min(n, math.ceil(rate * n - 1e-9))
        top = order[:k]
        rows.append((rate, k, sum(1 for i in top if pred[i] == truth[i]) / k))
    return rows


class EtrTable(dict):
    """Effective tax rate (exact decimal as Fraction) per level-1 node id."""


def _expand_code(code: str) -> list[str]:
    if "-" in code:
        lo, hi = code.split("-")
        width = len(lo)
        return [str(c).zfill(width) for c in range(int(lo), int(hi) + 1)]
    return [code]


def read_etr_rows(path=None) -> list[tuple[str, str, Fraction]]:
    """(code, title, rate) rows; defaults to the bundled 2013 NAICS table."""
    if path is None:
        fh = resources.files("deepia").joinpath("data/etr_naics2012_level1_2013.csv").open(encoding="utf-8")
    else:
        fh = open(path, encoding="utf-8", newline="")
    with fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rate = Fraction(rec["etr"].strip())
        if not 0 < rate < 1:
            raise MetricError(f"ETR for {rec['code']} outside (0, 1): {rec['etr']}")
        rows.append((rec["code"].strip(), rec.get("title", ""), rate))
    return rows


def load_etr(tree: TaxonomyTree, path=None) -> EtrTable:
    table = EtrTable()
    for code, _, rate in read_etr_rows(path):
        for c in _expand_code(code):
            if c in tree.by_code and tree.node(c).level == 1:
                table[tree.by_code[c]] = rate
    return table


def misclassification_cost(pred: Sequence, truth: Sequence, incomes: Sequence[float],
                           etr: Mapping) -> float:
    """Mean of |ETR(truth) - ETR(pred)| * income over eligible firms.

    Callers drop firms with non-positive income or industries missing from
    ``etr`` beforehand.  Arithmetic is exact until the final float.
    """
    if not (len(pred) == len(truth) == len(incomes)):
        raise MetricError("pred, truth and incomes must have equal length")
    if not truth:
        raise MetricError("no eligible firms for misclassification cost")
    total = Fraction(0)
    for p, t, income in zip(pred, truth, incomes):
        if income <= 0:
            raise MetricError(f"income must be positive, got {income}")
        if p not in etr or t not in etr:
            raise MetricError(f"industry without ETR: {p if p not in etr else t}")
        total += abs(Fraction(etr[t]) - Fraction(etr[p])) * Fraction(income)
    return float(total / len(truth))


def format_report(report: EvalReport, label: str = "") -> str:
    lines = [f"{label}cases={report.n} accuracy={report.accuracy:.4f} macro_f1={report.macro_f1:.4f}"]
    if report.mean_tree_distance is not None:
        lines.append(f"mean_tree_distance={report.mean_tree_distance:.4f}")
    for rate, k, acc in report.production_rates:
        lines.append(f"production_rate={rate:g} cases={k} accuracy={acc:.4f}")
    if report.misclassification_cost is not None:
        lines.append(f"misclassification_cost={report.misclassification_cost:.6g}")
    return "\n".join(lines)
