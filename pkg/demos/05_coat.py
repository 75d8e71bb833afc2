"""
Coat, if you have it
====================

Usage: python demos/05_coat.py /path/to/coat   (needs train.ascii and test.ascii)

Ratings >= 4 count as positives; one positive per user is held out for test
and one for validation. MF is compared with SLFR, whose gamma is picked on
validation NDCG@10.
"""

import sys

import numpy as np

from slfr.experiments import coat_trial

if len(sys.argv) < 2:
    sys.exit(__doc__)

runs = [coat_trial(sys.argv[1], seed) for seed in range(5)]
for r in runs:
    print(f"seed {r['seed']}  gamma {r['gamma']:.1f}  MF {r['mf_recall@10']:.2%}  "
          f"SLFR {r['slfr_recall@10']:.2%}")
mf = np.mean([r["mf_recall@10"] for r in runs])
sl = np.mean([r["slfr_recall@10"] for r in runs])
print(f"mean recall@10: MF {mf:.2%}, SLFR {sl:.2%} ({sl / mf - 1:+.1%})")
