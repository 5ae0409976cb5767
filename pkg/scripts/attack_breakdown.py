"""Per-attack-kind and per-season detection rates for one trained seed.

    python3 scripts/attack_breakdown.py --seed 0
"""
import argparse
from collections import defaultdict
from dataclasses import replace

import numpy as np

from pvguard.domain import Season
from pvguard.evaluation import evaluate
from pvguard.formats import load_run_config
from pvguard.model import init_params
from pvguard.synth import build_dataset
from pvguard.train import fit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = load_run_config(args.config)
    mc, tc = replace(cfg.model, seed=args.seed), replace(cfg.train, seed=args.seed)
    data = build_dataset(cfg.synth)
    result = fit(init_params(mc), data, tc, mc)
    test = data.subset("test")
    metrics, scores = evaluate(result.params, test, result.norm, mc)
    print(metrics.table(), end="\n\n")

    hits = defaultdict(list)
    for r, s in zip(test, scores):
        correct = (s >= 0.5) == (r.label == 1)
        hits[r.attack_kind.value].append(correct)
        hits[Season(r.season).label].append(correct)
    print(f"{'group':<10}{'n':>6}{'correct':>10}")
    for name, vals in hits.items():
        print(f"{name:<10}{len(vals):>6}{np.mean(vals):>10.3f}")


if __name__ == "__main__":
    main()
