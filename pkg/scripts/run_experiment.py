"""Train on a synthetic split and compare against the untrained model.

Usage: python3 scripts/run_experiment.py [--out DIR] [--steps N] [--train-pairs N] [--test-pairs N]
Writes DIR/results.json, DIR/trained.lwck and DIR/loss.csv.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from linewise.experiment import ExperimentConfig, run_learning_experiment


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="experiment_out")
    p.add_argument("--steps", type=int)
    p.add_argument("--train-pairs", type=int)
    p.add_argument("--test-pairs", type=int)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args(argv)

    cfg = ExperimentConfig(threads=args.threads)
    if args.steps is not None:
        cfg.train = dataclasses.replace(cfg.train, steps=args.steps)
    if args.train_pairs is not None:
        cfg.train_pairs = args.train_pairs
    if args.test_pairs is not None:
        cfg.test_pairs = args.test_pairs

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_learning_experiment(cfg, out_dir=out, log=lambda s: print(s, flush=True))
    (out / "results.json").write_text(json.dumps(res.metrics, indent=2))

    m = res.metrics
    print(f"loss      {m['loss_start']:.4f} -> {m['loss_end']:.4f}")
    for name in ("untrained", "trained"):
        match, hom = m[name]["match"], m[name]["homography"]
        terc = " ".join(f"{k} {v['f_score']:.3f}" for k, v in match["terciles"].items())
        print(f"{name:<10} F {match['overall']['f_score']:.3f} ({terc})  AUC {hom['auc']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
