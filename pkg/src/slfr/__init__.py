"""Confounder-aware matrix factorization with VAE-learned confounder representations.

Stage 1 fits a user-side and an item-side VAE whose KL term is split into
index-code mutual information, total correlation and dimension-wise KL, with
the first weighted by ``alpha``. Posterior means become confounder vectors.
Stage 2 trains MF on the usual fit plus ``gamma`` times a fit of the score
composed with the confounder-side scores.
"""

import os as _os

# Thread caps only take effect if set before numpy/BLAS load.
if _os.environ.get("SLFR_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["SLFR_THREADS"])

from .data import (  # noqa: E402
    DataError,
    Dataset,
    Split,
    binarize,
    interaction_matrix,
    leave_one_out_split,
    load_dense_ratings,
    load_interactions,
    load_split,
    sample_negatives,
    save_split,
)
from .evaluation import EvalReport, evaluate, ndcg_at_k, recall_at_k  # noqa: E402
from .model import MfModel, compose_bias, predict, score, score_bias_item, score_bias_user  # noqa: E402
from .optim import Adam, DivergenceError  # noqa: E402
from .synth import SynthConfig, SynthWorld, generate_world, simulate_exposure  # noqa: E402
from .train import TrainConfig, TrainResult, loss_bias, loss_normal, loss_slfr, train_slfr  # noqa: E402
from .vae import (  # noqa: E402
    ConfounderReps,
    KlTerms,
    VaeBlock,
    VaeConfig,
    extract_confounders,
    kl_decompose,
    train_vae,
    vae_loss,
)

__version__ = "0.1.0"

__all__ = [
    "Adam", "ConfounderReps", "DataError", "Dataset", "DivergenceError", "EvalReport", "KlTerms",
    "MfModel", "Split", "SynthConfig", "SynthWorld", "TrainConfig", "TrainResult", "VaeBlock",
    "VaeConfig", "binarize", "compose_bias", "evaluate", "extract_confounders", "generate_world",
    "interaction_matrix", "kl_decompose", "leave_one_out_split", "load_dense_ratings",
    "load_interactions", "load_split", "loss_bias", "loss_normal", "loss_slfr", "ndcg_at_k",
    "predict", "recall_at_k", "sample_negatives", "save_split", "score", "score_bias_item",
    "score_bias_user", "simulate_exposure", "train_slfr", "train_vae", "vae_loss",
]
