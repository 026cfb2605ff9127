"""Multi-seed ablation on freshly generated synthetic data.

Each seed generates its own corpus (synth seed = training seed) and trains
the three model variants on it.  Prints one row per (seed, variant) and the
per-variant means.

    python scripts/ablation_study.py --seeds 0-9 --drift 0.3 --churn 0.1
"""

import argparse
import csv
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from deepia.cli import ablation_summary, parse_seeds, run_variant
from deepia.embedding import load_embeddings
from deepia.knowledge import load_assignments, read_assignment_rows
from deepia.synth import SynthConfig, generate
from deepia.taxonomy import parse_taxonomy
from deepia.training import KINDS, TrainConfig


def one_seed(job):
    seed, synth_kw, train_kw = job
    with tempfile.TemporaryDirectory() as tmp:
        out = generate(SynthConfig(seed=seed, **synth_kw), Path(tmp))
        cfg = TrainConfig(seed=seed, **train_kw)
        tree = parse_taxonomy(out.taxonomy)
        data = load_assignments(out.assignments, tree, cfg.focal)
        store = load_embeddings(out.firm_vectors, out.definition_vectors, cfg.d, tree)
        held = read_assignment_rows(out.heldout)
        return [(seed, kind, *run_variant(tree, data, store, held, cfg, kind)) for kind in KINDS]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", default="0-9")
    p.add_argument("--drift", type=float, default=0.3)
    p.add_argument("--churn", type=float, default=0.1)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=500)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args(argv)

    synth_kw = dict(drift=args.drift, churn=args.churn, noise=args.noise, separation=args.separation, d=args.d)
    train_kw = dict(d=args.d, h=2, focal=2, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
    jobs = [(s, synth_kw, train_kw) for s in parse_seeds(args.seeds)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            rows = [r for res in pool.map(one_seed, jobs) for r in res]
    else:
        rows = [r for job in jobs for r in one_seed(job)]

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["seed", "variant", "accuracy", "macro_f1"])
    for seed, kind, acc, f1 in rows:
        w.writerow([seed, kind, f"{acc:.4f}", f"{f1:.4f}"])
    print()
    w.writerow(["variant", "mean_accuracy", "mean_macro_f1", "delta_accuracy", "std_err"])
    for s in ablation_summary(rows):
        accs = np.array([a for _, k, a, _ in rows if k == s["variant"]])
        w.writerow([s["variant"], f"{s['accuracy']:.4f}", f"{s['macro_f1']:.4f}", f"{s['delta_accuracy']:+.4f}",
                    f"{accs.std(ddof=1) / np.sqrt(len(accs)) if len(accs) > 1 else 0:.4f}"])


if __name__ == "__main__":
    main()
