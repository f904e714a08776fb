#!/usr/bin/env python3
"""Desk-scale conditioning experiment: baseline vs auxiliary loss.

Builds a synthetic labeled corpus, trains two identically-seeded models
with the `diff` prompt (beta 0, and beta 0.1 without gradient detachment),
and compares conditioning accuracy / class-index MSE on balanced generated
samples. Small-model analogue of the headline comparison; takes roughly
10-20 minutes on a laptop CPU at the default sizes.

Usage:
    python scripts/run_conditioning_experiment.py --workdir /tmp/sightgen-exp
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path


def run(cmd: list[str]) -> None:
    print("+", " ".join(str(c) for c in cmd), flush=True)
    subprocess.run([str(c) for c in cmd], check=True)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", type=Path, required=True)
    ap.add_argument("--pieces", type=int, default=2100)
    ap.add_argument("--n-per-class", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--temperature", type=float, default=0.9)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    wd = args.workdir
    wd.mkdir(parents=True, exist_ok=True)
    scores = wd / "scores"
    if not scores.exists() or not any(scores.iterdir()):
        run([sys.executable, Path(__file__).parent / "make_demo_corpus.py",
             "--out", scores, "--pieces", args.pieces, "--seed", args.seed])

    run(["sightgen", "fit-gnb", "--out", wd / "gnb.json"])
    run(["sightgen", "dataset", "--input", scores, "--gnb", wd / "gnb.json",
         "--out", wd / "dataset", "--min-count", 10, "--no-augment",
         "--seed", args.seed])

    common = ["--dataset", wd / "dataset", "--prompt-type", "diff",
              "--d-model", 64, "--layers", 2, "--heads", 2, "--d-ff", 128,
              "--max-len", 768, "--lr", 1e-3, "--scheduler", "cosine",
              "--epochs", args.epochs, "--patience", 5, "--seed", args.seed]
    run(["sightgen", "train", *common, "--beta", "0", "--out", wd / "baseline.sgckpt"])
    run(["sightgen", "train", *common, "--beta", "0.1", "--no-detach",
         "--out", wd / "aux.sgckpt"])

    for tag in ("baseline", "aux"):
        run(["sightgen", "eval", "--checkpoint", wd / f"{tag}.sgckpt",
             "--dataset", wd / "dataset", "--gnb", wd / "gnb.json",
             "--n-per-class", args.n_per_class, "--temperature", args.temperature,
             "--seed", args.seed, "--out", wd / f"eval_{tag}.json"])

    print(f"\n{'setup':<12} {'acc':>8} {'mse':>8} {'val CE':>8} {'deg.':>6}")
    for tag in ("baseline", "aux"):
        r = json.loads((wd / f"eval_{tag}.json").read_text())
        print(f"{tag:<12} {r['accuracy']:>8.4f} {r['mse']:>8.4f} "
              f"{r['val_ce']:>8.4f} {r['degeneration']:>6.3f}")


if __name__ == "__main__":
    main()
