"""
Three pieces of the VAE's KL term
=================================

The KL to the prior splits into index-code mutual information, total
correlation and a dimension-wise part. This script checks the split on toy
posteriors, then shows what the alpha weight does to a trained block.
"""

import numpy as np

from slfr.data import interaction_matrix
from slfr.experiments import simulate_split
from slfr.vae import LatentGaussian, VaeConfig, analytic_kl, kl_decompose, latent_terms, reparameterize, train_vae

rng = np.random.default_rng(0)

# standard-normal posteriors: nothing to pay for
std = LatentGaussian(np.zeros((256, 8)), np.zeros((256, 8)))
print("standard normal:", kl_decompose(std, rng.normal(size=(256, 8)), 256))

# a single latent dimension has no total correlation
g = LatentGaussian(rng.normal(size=(128, 1)), rng.normal(size=(128, 1)))
print("one dimension:  ", kl_decompose(g, reparameterize(g, rng.normal(size=(128, 1))), 1000))

# with alpha = 1 the three parts should add up to the usual KL (up to estimator bias)
g = LatentGaussian(rng.normal(scale=0.8, size=(1024, 6)), rng.normal(scale=0.3, size=(1024, 6)))
t = kl_decompose(g, reparameterize(g, rng.normal(size=g.mu.shape)), 1024)
print(f"sum of parts {t.total():.4f} vs analytic {analytic_kl(g).mean():.4f}")

# a larger alpha pushes the codes to carry less information about which row they came from
_, split, _ = simulate_split(0)
x = interaction_matrix(split, "by_user")
for alpha in (1.0, 5.0, 10.0):
    block = train_vae(x, VaeConfig(alpha=alpha, epochs=20, seed=0))
    print(f"alpha={alpha:4.1f}  index-code MI {latent_terms(block, x).index_code_mi:.3f}")
