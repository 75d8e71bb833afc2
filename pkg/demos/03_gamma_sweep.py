"""
How much weight should the biased fit get?
==========================================

Sweeps gamma over 0, 0.2, ..., 2 on one simulated world and prints true-label
NDCG next to the validation score that early stopping sees.
"""

import sys

from slfr.experiments import synthetic_trial

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 3
res = synthetic_trial(seed)

base = res.true_ndcg[0]
print(f"seed {seed}  ({res.seconds:.0f}s)")
print(" gamma  true ndcg@10  vs gamma=0  valid ndcg@10  epochs")
for g, t, v, e in zip(res.gammas, res.true_ndcg, res.valid_ndcg, res.epochs):
    print(f"  {g:3.1f}      {t:.4f}      {t / base - 1:+6.1%}       {v:.4f}      {e:3d}")

print("best gamma on true labels:", res.best_gamma())
print("best gamma on validation: ", res.best_gamma("valid"))
# the validation split is drawn from the same biased log, so it tends to favour gamma = 0
