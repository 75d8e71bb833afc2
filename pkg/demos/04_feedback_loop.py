"""
Bias that feeds on itself
=========================

Each round a plain MF recommender is refit on everything seen so far and
shows every user its top items. Stronger confounding makes the logged
positives drift away from what users actually like.
"""

import numpy as np

from slfr.synth import SynthConfig, generate_world, simulate_exposure

print(" strength  round   fpr    fnr   positive rate")
for strength in (0.0, 1.0, 2.0):
    rates = []
    for seed in range(3):
        cfg = SynthConfig(conf_strength=strength, rounds=4, seed=seed)
        _, stats = simulate_exposure(generate_world(cfg), cfg)
        rates.append([(s.false_positive_rate, s.false_negative_rate, s.positive_rate) for s in stats])
    mean = np.mean(rates, axis=0)
    for r, (fpr, fnr, pos) in enumerate(mean, start=1):
        print(f"   {strength:3.1f}      {r}    {fpr:.3f}  {fnr:.3f}    {pos:.3f}")
