"""Command-line entry point: ``deepia {synth,train,predict,eval,ablate}``.

Exit codes: 0 success, 2 input or validation error, 3 numerical failure.
Training options may also come from a ``key = value`` file given with
``--config``; command-line flags override it and it overrides defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .assignment import HierarchyIndex
from .embedding import EmbeddingError, load_embeddings
from .evaluation import (EvalReport, MetricError, accuracy_macro_f1, format_report, load_etr,
                         mean_tree_distance, misclassification_cost, production_rate_accuracy)
from .knowledge import (AssignmentDataset, AssignmentError, load_assignments, read_assignment_rows,
                        sort_period_labels)
from .synth import SynthConfig, SynthError, generate
from .taxonomy import TaxonomyError, TaxonomyTree, parse_taxonomy
from .training import (KINDS, CheckpointError, ConfigError, NumericalError, TrainConfig, infer,
                       load_checkpoint, resolve_cases, save_checkpoint, train)

log = logging.getLogger("deepia")

EXIT_INPUT, EXIT_NUMERIC = 2, 3
INPUT_ERRORS = (TaxonomyError, AssignmentError, EmbeddingError, ConfigError, CheckpointError, MetricError,
                SynthError, OSError)


class InputError(ValueError):
    pass


# configuration ---------------------------------------------------------------

TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
EXTRA_KEYS = {"kind": "str", "val_fraction": "float"}


def _coerce(key: str, value: str):
    kind = str(TRAIN_KEYS.get(key, EXTRA_KEYS.get(key)))
    if value.lower() in ("none", ""):
        return None
    if "int" in kind:
        return int(value)
    if "float" in kind:
        return float(value)
    return value


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path} line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in TRAIN_KEYS and key not in EXTRA_KEYS:
                raise InputError(f"{path} line {lineno}: unknown key {key!r}")
            try:
                out[key] = _coerce(key, value)
            except ValueError:
                raise InputError(f"{path} line {lineno}: bad value {value!r} for {key}") from None
    return out


def resolve_options(args, tree: TaxonomyTree, d_default: int) -> tuple[TrainConfig, dict]:
    """Merge defaults < config file < flags into a TrainConfig plus extras."""
    merged = {"d": d_default, "focal": tree.L, "kind": "full", "val_fraction": 0.0}
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for key in list(TRAIN_KEYS) + list(EXTRA_KEYS):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    extras = {k: merged.pop(k) for k in EXTRA_KEYS if k in merged}
    return TrainConfig(**merged), extras


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file with training options")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--d", type=int, help="embedding dimension (default: read from the vector file)")
    p.add_argument("--h", type=int, help="attention heads")
    p.add_argument("--dropout", type=float)
    p.add_argument("--focal", type=int, help="focal level (default: deepest level)")
    p.add_argument("--hidden", type=int, help="hidden width of the firm transform (default 2d)")


def _add_data_options(p: argparse.ArgumentParser, assignments: bool = True) -> None:
    p.add_argument("--taxonomy", required=True)
    if assignments:
        p.add_argument("--assignments", required=True)
    p.add_argument("--firm-vectors", dest="firm_vectors", required=True)
    p.add_argument("--definition-vectors", dest="definition_vectors", required=True)


# loading ---------------------------------------------------------------------

def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{what} file not found: {path}")
    return path


def vector_dim(path) -> int:
    with open(_require(path, "firm vector"), newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if not header:
        raise InputError(f"{path}: empty vector file")
    return sum(1 for h in header if h.strip().startswith("v"))


@dataclass
class Inputs:
    tree: TaxonomyTree
    data: AssignmentDataset | None
    store: object
    cfg: TrainConfig
    extras: dict


def load_inputs(args, need_assignments: bool = True) -> Inputs:
    tree = parse_taxonomy(_require(args.taxonomy, "taxonomy"))
    cfg, extras = resolve_options(args, tree, vector_dim(args.firm_vectors))
    store = load_embeddings(_require(args.firm_vectors, "firm vector"),
                            _require(args.definition_vectors, "definition vector"), cfg.d, tree)
    data = None
    if need_assignments:
        data = load_assignments(_require(args.assignments, "assignment"), tree, cfg.focal)
    if extras["kind"] not in KINDS:
        raise ConfigError(f"unknown model kind {extras['kind']!r}")
    return Inputs(tree, data, store, cfg, extras)


def split_validation(data: AssignmentDataset, fraction: float, seed: int):
    """Random record split; the generator is separate from the training one."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError("val-fraction must lie in [0, 1)")
    n_val = int(round(fraction * len(data)))
    if n_val == 0:
        return data, None
    perm = np.random.default_rng([seed, 1]).permutation(len(data))
    val_idx = set(perm[:n_val].tolist())
    keep = [r for i, r in enumerate(data.records) if i not in val_idx]
    held = [r for i, r in enumerate(data.records) if i in val_idx]
    mk = lambda recs: AssignmentDataset(recs, data.T, data.focal, data.period_labels)
    return mk(keep), mk(held)


# subcommands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SynthConfig(branching=[int(b) for b in args.branching.split(",")], d=args.d,
                      firms_per_leaf=args.firms_per_leaf, T=args.T, separation=args.separation,
                      noise=args.noise, drift=args.drift, churn=args.churn, seed=args.seed, focal=args.focal)
    out = generate(cfg, args.out)
    for name in ("taxonomy", "assignments", "firm_vectors", "definition_vectors", "heldout"):
        print(f"{name}\t{getattr(out, name)}")
    return 0


def cmd_train(args) -> int:
    inp = load_inputs(args)
    cfg, extras = inp.cfg, inp.extras
    data, val = split_validation(inp.data, extras["val_fraction"], cfg.seed)
    val_cases = None
    if val is not None:
        val_cases = resolve_cases(val, inp.store, HierarchyIndex(inp.tree, cfg.focal))
    res = train(data, inp.tree, inp.store, cfg, kind=extras["kind"], validation=val_cases)
    save_checkpoint(res.model, args.out, cfg, data.period_labels)
    loss_path = Path(args.loss_log) if args.loss_log else Path(str(args.out) + ".loss.csv")
    with open(loss_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"] + (["val_accuracy"] if res.val_accuracy else []))
        for e, loss in enumerate(res.epoch_losses, start=1):
            w.writerow([e, repr(loss)] + ([repr(res.val_accuracy[e - 1])] if res.val_accuracy else []))
    print(f"checkpoint\t{args.out}\nparameters\t{res.model.n_params()}\nloss_log\t{loss_path}")
    if res.best_epoch is not None:
        print(f"best_epoch\t{res.best_epoch}")
    return 0


def _read_firm_list(path) -> list[str]:
    firms = []
    with open(_require(path, "firm list"), encoding="utf-8") as fh:
        for line in fh:
            firm = line.split(",", 1)[0].strip()
            if firm and firm != "firm_id":
                firms.append(firm)
    return firms


def predict_rows(model, store, firms, period: str, explain: bool):
    tree = model.tree
    header = ["firm_id", "period", "code", "probability"]
    if explain:
        for lvl in range(1, model.focal + 1):
            header += [f"code_l{lvl}", f"cond_l{lvl}"]
    header.append("error")
    rows = []
    for p in infer(model, store, firms, period):
        if p.error:
            rows.append([p.firm, period, "", ""] + [""] * (2 * model.focal if explain else 0) + [p.error])
            continue
        row = [p.firm, period, tree.nodes[p.node].code, repr(p.probability)]
        if explain:
            for n in tree.path(p.node):
                cond = p.distribution.conditionals.get(n.id)
                row += [n.code, "" if cond is None else repr(cond)]
        rows.append(row + [""])
    return header, rows


def cmd_predict(args) -> int:
    tree = parse_taxonomy(_require(args.taxonomy, "taxonomy"))
    model, header = load_checkpoint(_require(args.checkpoint, "checkpoint"), tree)
    store = load_embeddings(_require(args.firm_vectors, "firm vector"),
                            _require(args.definition_vectors, "definition vector"), header["d"], tree)
    period = args.period or sort_period_labels(p for _, p in store.firms)[-1]
    firms = _read_firm_list(args.firms) if args.firms else sorted({f for f, p in store.firms if p == period})
    cols, rows = predict_rows(model, store, firms, period, args.explain)
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    for r in rows:
        if r[-1]:
            log.warning("%s", r[-1])
    return 0


def read_predictions(path) -> dict[tuple[str, str], tuple[str, float]]:
    out = {}
    with open(_require(path, "predictions"), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"firm_id", "period", "code", "probability"} - set(reader.fieldnames or [])
        if missing:
            raise InputError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            if row["code"]:
                out[row["firm_id"], row["period"]] = (row["code"], float(row["probability"]))
    return out


def _read_incomes(path) -> dict[str, float]:
    with open(_require(path, "income"), newline="", encoding="utf-8") as fh:
        return {row["firm_id"]: float(row["income"]) for row in csv.DictReader(fh)}


def evaluate(tree: TaxonomyTree, preds: dict, truth_rows, *, mode="all", tree_distance=False,
             rates=(), incomes=None, etr_path=None) -> tuple[EvalReport, dict]:
    """Score predictions keyed by (firm, period) against truth rows."""
    keys = [(firm, period) for _, firm, period, _ in truth_rows]
    absent = [f"{f}@{p}" for f, p in keys if (f, p) not in preds]
    if absent:
        raise MetricError(f"no prediction for {len(absent)} truth rows: {', '.join(absent[:20])}")
    truth = [tree.by_code.get(code) for *_, code in truth_rows]
    if None in truth:
        raise MetricError(f"unknown truth code {truth_rows[truth.index(None)][3]!r}")
    pred = []
    for k in keys:
        if preds[k][0] not in tree.by_code:
            raise MetricError(f"unknown predicted code {preds[k][0]!r} for {k[0]}")
        pred.append(tree.by_code[preds[k][0]])
    if not truth:
        raise MetricError("no cases to evaluate")
    focal = tree.nodes[truth[0]].level
    if any(tree.nodes[i].level != focal for i in truth + pred):
        raise MetricError("predictions and truth must all sit on one level")
    acc, f1, table = accuracy_macro_f1(pred, truth, tree.levels[focal], mode=mode)
    report = EvalReport(len(truth), acc, f1, {tree.nodes[c].code: s for c, s in table.items()})
    extra = {}
    if tree_distance:
        report.mean_tree_distance = mean_tree_distance(pred, truth, tree)
    if rates:
        report.production_rates = production_rate_accuracy(pred, truth, [preds[k][1] for k in keys], rates,
                                                            ids=[f"{f}\t{p}" for f, p in keys])
    if incomes is not None:
        etr = load_etr(tree, etr_path)
        top = lambda n: tree.path(n)[0].id
        chosen = [(top(p), top(t), incomes[f]) for (f, _), p, t in zip(keys, pred, truth)
                  if incomes.get(f, 0) > 0 and top(p) in etr and top(t) in etr]
        if not chosen:
            raise MetricError("no firm with positive income and a taxed industry")
        extra["cost_firms"], extra["cost_dropped"] = len(chosen), len(keys) - len(chosen)
        report.misclassification_cost = misclassification_cost(*zip(*chosen), etr)
    return report, extra


def cmd_eval(args) -> int:
    tree = parse_taxonomy(_require(args.taxonomy, "taxonomy"))
    preds = read_predictions(args.predictions)
    truth_rows = read_assignment_rows(_require(args.truth, "truth"))
    rates = [float(r) for r in args.production_rates.split(",")] if args.production_rates else []
    if args.cost and not args.incomes:
        raise InputError("--cost needs --incomes")
    incomes = _read_incomes(args.incomes) if args.cost else None
    report, extra = evaluate(tree, preds, truth_rows, mode=args.macro_f1, tree_distance=args.tree_distance,
                             rates=rates, incomes=incomes, etr_path=args.etr)
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "tp", "fp", "fn", "precision", "recall", "f1"])
            for code, s in report.per_class.items():
                w.writerow([code, s.tp, s.fp, s.fn, repr(s.precision), repr(s.recall), repr(s.f1)])
    if args.json:
        print(json.dumps({**report.to_dict(), **extra}, indent=2, sort_keys=True))
    else:
        print(format_report(report))
        if "cost_dropped" in extra:
            print(f"cost_firms={extra['cost_firms']} cost_dropped={extra['cost_dropped']}")
    return 0


# ablation --------------------------------------------------------------------

def run_variant(tree, data, store, heldout_rows, cfg: TrainConfig, kind: str, mode: str = "all"):
    """Train one variant and score it on held-out rows: (accuracy, macro-F1)."""
    res = train(data, tree, store, cfg, kind=kind)
    period = heldout_rows[0][2]
    preds = {}
    for p in infer(res.model, store, [r[1] for r in heldout_rows], period):
        if p.error is None:
            preds[p.firm, period] = (tree.nodes[p.node].code, p.probability)
    report, _ = evaluate(tree, preds, heldout_rows, mode=mode)
    return report.accuracy, report.macro_f1


def _ablate_seed(job):
    paths, cfg_dict, seed, mode = job
    tree = parse_taxonomy(paths["taxonomy"])
    cfg = TrainConfig(**{**cfg_dict, "seed": seed})
    store = load_embeddings(paths["firm_vectors"], paths["definition_vectors"], cfg.d, tree)
    data = load_assignments(paths["assignments"], tree, cfg.focal)
    held = read_assignment_rows(paths["heldout"])
    return [(seed, kind, *run_variant(tree, data, store, held, cfg, kind, mode)) for kind in KINDS]


def parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        if "-" in part.strip("-"):
            lo, hi = part.split("-")
            seeds += list(range(int(lo), int(hi) + 1))
        elif part.strip():
            seeds.append(int(part))
    if not seeds:
        raise InputError("empty seed list")
    return seeds


def ablation_summary(rows) -> list[dict]:
    by_kind = {k: [(a, f) for _, kind, a, f in rows if kind == k] for k in KINDS}
    mean = {k: (float(np.mean([a for a, _ in v])), float(np.mean([f for _, f in v]))) for k, v in by_kind.items()}
    full_acc, full_f1 = mean["full"]
    return [{"variant": k, "accuracy": mean[k][0], "macro_f1": mean[k][1],
             "delta_accuracy": full_acc - mean[k][0], "delta_macro_f1": full_f1 - mean[k][1],
             "runs": len(by_kind[k])} for k in KINDS]


def run_ablation(paths: dict, cfg: TrainConfig, seeds, parallel: int = 1, mode: str = "all"):
    jobs = [(paths, asdict(cfg), s, mode) for s in seeds]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_ablate_seed, jobs))
    else:
        results = [_ablate_seed(j) for j in jobs]
    return [row for res in results for row in res]


def cmd_ablate(args) -> int:
    inp = load_inputs(args)
    _require(args.heldout, "held-out assignment")
    paths = {k: str(getattr(args, k)) for k in ("taxonomy", "assignments", "firm_vectors",
                                                 "definition_vectors", "heldout")}
    rows = run_ablation(paths, inp.cfg, parse_seeds(args.seeds), args.parallel_seeds, args.macro_f1)
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "variant", "accuracy", "macro_f1"])
        for seed, kind, acc, f1 in rows:
            w.writerow([seed, kind, repr(acc), repr(f1)])
    finally:
        if args.out:
            fh.close()
    summary = ablation_summary(rows)
    print("variant,accuracy,macro_f1,delta_accuracy,delta_macro_f1,runs")
    for s in summary:
        print(f"{s['variant']},{s['accuracy']!r},{s['macro_f1']!r},{s['delta_accuracy']!r},"
              f"{s['delta_macro_f1']!r},{s['runs']}")
    return 0


# parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepia", description="Hierarchical industry assignment")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic taxonomy and corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--branching", default="3,4")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--firms-per-leaf", dest="firms_per_leaf", type=int, default=20)
    p.add_argument("--T", type=int, default=3, help="training periods (one more is emitted for held-out)")
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--drift", type=float, default=0.0)
    p.add_argument("--churn", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--focal", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_data_options(p)
    _add_train_options(p)
    p.add_argument("--kind", choices=KINDS)
    p.add_argument("--val-fraction", dest="val_fraction", type=float,
                   help="hold out this fraction of records and keep the best epoch")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", dest="loss_log", help="per-epoch loss CSV (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="assign firms with a trained checkpoint")
    _add_data_options(p, assignments=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--period", help="period label of the documents (default: latest in the vector file)")
    p.add_argument("--firms", help="file with one firm id per line (default: every firm in the period)")
    p.add_argument("--explain", action="store_true", help="add per-level conditional probabilities")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against true assignments")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--macro-f1", dest="macro_f1", choices=("all", "present"), default="all",
                   help="average F1 over every class on the level or only classes that occur")
    p.add_argument("--tree-distance", dest="tree_distance", action="store_true")
    p.add_argument("--production-rates", dest="production_rates", help="comma separated, e.g. 0.5,0.6,0.7")
    p.add_argument("--cost", action="store_true", help="misclassification cost (needs --incomes)")
    p.add_argument("--incomes", help="CSV with firm_id,income")
    p.add_argument("--etr", help="CSV with code,title,etr (default: bundled 2013 table)")
    p.add_argument("--json", action="store_true")
    p.add_argument("--csv", help="write the per-class table to this path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare full, no-ha and no-ha-no-dir over seeds")
    _add_data_options(p)
    _add_train_options(p)
    p.add_argument("--heldout", required=True, help="true assignments of the held-out period")
    p.add_argument("--seeds", default="0-9", help="e.g. 0-9 or 1,2,5")
    p.add_argument("--parallel-seeds", dest="parallel_seeds", type=int, default=1)
    p.add_argument("--macro-f1", dest="macro_f1", choices=("all", "present"), default="all")
    p.add_argument("--out", help="per-seed CSV (default: stdout)")
    p.set_defaults(func=cmd_ablate, kind=None, val_fraction=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, *INPUT_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
