"""How the detector threshold trades adapter passes against accuracy.

    python3 demos/early_exit.py [--config configs/default.json] [--seed 0]

Inputs whose clean-adapter confidence clears the threshold skip the
adversarial adapters entirely.  For each threshold this prints accuracy on
a pool with 15% attacked items, how many attacked items slip through
unflagged, and the mean number of adapter forward passes per input.
"""

import argparse

import numpy as np

from adpmixup.harness import build_seed, load_config
from adpmixup.harness.studies import tradeoff_pool

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--config")
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

cfg = load_config(args.config)
run = build_seed(cfg, args.seed, baselines=False)
pool, is_adv = tradeoff_pool(run.test, run.adv_test[cfg.target.kind], cfg.adversarial_ratio, args.seed)
print(f"pool: {len(pool)} items, {int(is_adv.sum())} attacked")
print(f"{'threshold':>9}{'accuracy':>10}{'missed':>8}{'passes':>8}")
for t in cfg.thresholds:
    probs, diags = run.adpmixup(threshold=t).predict_with_diagnostics(pool.texts)
    acc = np.mean(np.argmax(probs, axis=1) == pool.labels)
    missed = sum(not d.flagged_adversarial for d, a in zip(diags, is_adv) if a)
    passes = np.mean([d.adapter_passes for d in diags])
    print(f"{t:>9.1f}{acc:>10.3f}{missed:>8d}{passes:>8.2f}")
