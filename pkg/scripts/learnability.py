"""Train on the default synthetic corpus and report held-out accuracy.

    python scripts/learnability.py --seed 7 --epochs 50
"""

import argparse
import tempfile
import time
from pathlib import Path

from deepia.cli import run_variant
from deepia.embedding import load_embeddings
from deepia.knowledge import load_assignments, read_assignment_rows
from deepia.synth import SynthConfig, generate
from deepia.taxonomy import parse_taxonomy
from deepia.training import KINDS, TrainConfig


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=7, help="synthetic corpus seed")
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--drift", type=float, default=0.0)
    p.add_argument("--churn", type=float, default=0.0)
    p.add_argument("--kind", choices=KINDS, default="full")
    p.add_argument("--out", help="keep the generated corpus here")
    args = p.parse_args(argv)

    start = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        out = generate(SynthConfig(seed=args.seed, drift=args.drift, churn=args.churn), Path(args.out or tmp))
        cfg = TrainConfig(epochs=args.epochs, seed=args.train_seed, d=32, h=2, focal=2)
        tree = parse_taxonomy(out.taxonomy)
        data = load_assignments(out.assignments, tree, cfg.focal)
        store = load_embeddings(out.firm_vectors, out.definition_vectors, cfg.d, tree)
        acc, f1 = run_variant(tree, data, store, read_assignment_rows(out.heldout), cfg, args.kind)
    print(f"held-out accuracy {acc:.4f}  macro-F1 {f1:.4f}  ({time.perf_counter() - start:.1f}s)")


if __name__ == "__main__":
    main()
