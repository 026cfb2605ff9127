"""Time-stamped firm-to-industry assignments and their per-period roll-up."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .taxonomy import TaxonomyTree


class AssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AssignmentRecord:
    firm: str
    period: int
    node: int


@dataclass
class AssignmentDataset:
    records: list[AssignmentRecord]
    T: int
    focal: int
    period_labels: list[str] = field(default_factory=list)

    @property
    def universe(self) -> set[str]:
        return {r.firm for r in self.records}

    def period_of(self, label: str) -> int:
        return self.period_labels.index(label) + 1

    def label_of(self, period: int) -> str:
        return self.period_labels[period - 1]

    def __len__(self) -> int:
        return len(self.records)


def sort_period_labels(labels) -> list[str]:
    """Sorted period labels; all-integer labels sort numerically."""
    labels = sorted(set(labels))
    try:
        return sorted(labels, key=int)
    except ValueError:
        return labels


def build_dataset(rows, tree: TaxonomyTree, focal: int, period_labels=None) -> AssignmentDataset:
    """rows: iterable of (row number, firm, period label, code).

    ``period_labels`` pins the label-to-period mapping (e.g. to reuse a
    training mapping); otherwise it is derived from the rows.
    """
    rows = list(rows)
    if not 1 <= focal <= tree.L:
        raise AssignmentError(f"focal level {focal} outside 1..{tree.L}")
    labels = list(period_labels) if period_labels is not None else sort_period_labels(r[2] for r in rows)
    index = {lab: i + 1 for i, lab in enumerate(labels)}
    seen: dict[tuple[str, str], int] = {}
    records = []
    for rowno, firm, label, code in rows:
        if code not in tree.by_code:
            raise AssignmentError(f"row {rowno}: unknown industry code {code!r}")
        node = tree.node(code)
        if node.level != focal:
            raise AssignmentError(f"row {rowno}: code {code!r} is at level {node.level}, focal level is {focal}")
        if label not in index:
            raise AssignmentError(f"row {rowno}: period {label!r} outside 1..{len(labels)}")
        if (firm, label) in seen:
            raise AssignmentError(f"row {rowno}: duplicate assignment for firm {firm!r} in period {label!r} "
                                  f"(first at row {seen[firm, label]})")
        seen[firm, label] = rowno
        records.append(AssignmentRecord(firm, index[label], node.id))
    return AssignmentDataset(records, len(labels), focal, labels)


def read_assignment_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != ["firm_id", "period", "code"]:
            raise AssignmentError(f"{path}: header must be firm_id,period,code, got {','.join(header)}")
        rows = []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise AssignmentError(f"row {rowno}: expected 3 fields, got {len(row)}")
            rows.append((rowno, row[0].strip(), row[1].strip(), row[2].strip()))
        return rows


def load_assignments(path, tree: TaxonomyTree, focal: int, period_labels=None) -> AssignmentDataset:
    return build_dataset(read_assignment_rows(path), tree, focal, period_labels)


def write_assignments(path, rows) -> None:
    """rows: iterable of (firm, period label, code)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["firm_id", "period", "code"])
        w.writerows(rows)


class KnowledgeIndex:
    """Firms assigned to each industry (directly or through focal-level
    descendants) in each period, for every node at levels 1..focal."""

    def __init__(self, sets: dict[tuple[int, int], frozenset[str]], T: int, focal: int):
        self._sets = sets
        self.T = T
        self.focal = focal

    def get(self, node: int, period: int) -> frozenset[str]:
        try:
            return self._sets[node, period]
        except KeyError:
            raise KeyError(f"no assignment knowledge for node {node} in period {period}") from None

    def __contains__(self, key) -> bool:
        return key in self._sets

    def items(self):
        return self._sets.items()


def rollup_knowledge(data: AssignmentDataset, tree: TaxonomyTree) -> KnowledgeIndex:
    acc: dict[tuple[int, int], set[str]] = {
        (nid, t): set()
        for lvl in range(1, data.focal + 1)
        for nid in tree.levels[lvl]
        for t in range(1, data.T + 1)
    }
    for r in data.records:
        for k in range(0, data.focal):
            acc[tree.ancestor(r.node, k).id, r.period].add(r.firm)
    return KnowledgeIndex({k: frozenset(v) for k, v in acc.items()}, data.T, data.focal)
