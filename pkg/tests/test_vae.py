import math

import numpy as np
import pytest

from slfr.vae import (
    ConfounderReps,
    LatentGaussian,
    VaeBlock,
    VaeConfig,
    analytic_kl,
    decode,
    encode,
    extract_confounders,
    kl_alpha,
    kl_decompose,
    latent_terms,
    reconstruction_loss,
    reparameterize,
    train_vae,
    vae_loss,
)


def log_normal(z, mu, lv):
    return -0.5 * (math.log(2 * math.pi) + lv + (z - mu) ** 2 / math.exp(lv))


def reference_terms(mu, lv, z, n_total):
    """Loop-by-loop minibatch-weighted estimator (row weights sum to one)."""
    m, d = mu.shape
    w_self, w_other = 1.0 / n_total, (n_total - 1) / (n_total * (m - 1))
    mi = tc = dk = 0.0
    for a in range(m):
        per_dim = [[log_normal(z[a, j], mu[b, j], lv[b, j]) for j in range(d)] for b in range(m)]
        joint = [sum(row) for row in per_dim]
        wts = [w_self if b == a else w_other for b in range(m)]
        log_qz = math.log(sum(w * math.exp(s) for w, s in zip(wts, joint)))
        log_qzj = [math.log(sum(wts[b] * math.exp(per_dim[b][j]) for b in range(m))) for j in range(d)]
        log_pz = sum(-0.5 * (math.log(2 * math.pi) + z[a, j] ** 2) for j in range(d))
        mi += joint[a] - log_qz
        tc += log_qz - sum(log_qzj)
        dk += sum(log_qzj) - log_pz
    return mi / m, tc / m, dk / m


@pytest.mark.parametrize("seed", range(3))
def test_kl_terms_match_loop_reference(seed):
    rng = np.random.default_rng(seed)
    mu, lv = rng.normal(size=(6, 3)), rng.normal(scale=0.5, size=(6, 3))
    z = mu + np.exp(0.5 * lv) * rng.normal(size=mu.shape)
    t = kl_decompose(LatentGaussian(mu, lv), z, 50)
    ref = reference_terms(mu, lv, z, 50)
    assert (t.index_code_mi, t.total_correlation, t.dimension_kl) == pytest.approx(ref, rel=1e-10, abs=1e-12)


def test_batch_as_sequence_matches_stacked():
    rng = np.random.default_rng(0)
    mu, lv = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    z = rng.normal(size=(4, 2))
    a = kl_decompose(LatentGaussian(mu, lv), z, 10)
    b = kl_decompose([LatentGaussian(mu[k], lv[k]) for k in range(4)], z, 10)
    assert a == b


@pytest.mark.parametrize("n_total", [256, 1000])
def test_dimension_kl_zero_for_standard_normal(n_total):
    rng = np.random.default_rng(1)
    g = LatentGaussian(np.zeros((256, 8)), np.zeros((256, 8)))
    t = kl_decompose(g, rng.normal(size=(256, 8)), n_total)
    assert t.dimension_kl == 0.0
    assert t.index_code_mi == 0.0


def test_total_correlation_zero_in_one_dimension():
    rng = np.random.default_rng(2)
    mu, lv = rng.normal(size=(64, 1)), rng.normal(size=(64, 1))
    t = kl_decompose(LatentGaussian(mu, lv), rng.normal(size=(64, 1)), 500)
    assert abs(t.total_correlation) <= 1e-10


def test_identical_posteriors_mi_vanishes():
    rng = np.random.default_rng(3)
    mu = np.tile(rng.normal(size=(1, 5)), (256, 1))
    lv = np.tile(rng.normal(scale=0.3, size=(1, 5)), (256, 1))
    z = mu + np.exp(0.5 * lv) * rng.normal(size=mu.shape)
    assert abs(kl_decompose(LatentGaussian(mu, lv), z, 5000).index_code_mi) <= 0.05


def test_batch_of_one_rejected():
    with pytest.raises(ValueError):
        kl_decompose(LatentGaussian(np.zeros((1, 2)), np.zeros((1, 2))), np.zeros((1, 2)), 10)
    with pytest.raises(ValueError):
        kl_decompose(LatentGaussian(np.zeros((4, 2)), np.zeros((4, 2))), np.zeros((4, 2)), 3)


def test_kl_alpha_linear():
    rng = np.random.default_rng(4)
    g = LatentGaussian(rng.normal(size=(8, 3)), rng.normal(size=(8, 3)))
    t = kl_decompose(g, rng.normal(size=(8, 3)), 40)
    assert kl_alpha(t, 1.0) == pytest.approx(t.total())
    assert kl_alpha(t, 3.0) - kl_alpha(t, 1.0) == pytest.approx(2 * t.index_code_mi)


def test_sum_tracks_analytic_kl():
    rng = np.random.default_rng(5)
    mu, lv = rng.normal(scale=0.8, size=(600, 4)), rng.normal(scale=0.3, size=(600, 4))
    g = LatentGaussian(mu, lv)
    t = kl_decompose(g, reparameterize(g, rng.normal(size=mu.shape)), 600)
    want = analytic_kl(g).mean()
    assert abs(t.total() - want) / want < 0.1


def test_analytic_kl_oracle():
    g = LatentGaussian(np.array([[1.0, 0.0]]), np.array([[0.0, math.log(2.0)]]))
    assert analytic_kl(g)[0] == pytest.approx(0.5 + 0.5 * (2 - 1 - math.log(2)))


def test_reconstruction_loss_oracle():
    logits, x = np.array([0.0, 2.0, -1.0]), np.array([1.0, 0.0, 1.0])
    want = -math.log(0.5) - math.log(1 - 1 / (1 + math.exp(-2))) - math.log(1 / (1 + math.exp(1)))
    assert reconstruction_loss(logits, x) == pytest.approx(want)
    with pytest.raises(ValueError):
        reconstruction_loss(np.zeros(3), np.zeros(2))


def test_reparameterize_shape_check():
    g = LatentGaussian(np.zeros((2, 3)), np.zeros((2, 3)))
    np.testing.assert_array_equal(reparameterize(g, np.ones((2, 3))), np.ones((2, 3)))
    with pytest.raises(ValueError):
        reparameterize(g, np.ones((2, 4)))


def test_encode_rejects_wrong_width():
    b = VaeBlock.init(5, 4, 2)
    assert encode(b, np.zeros(5)).mu.shape == (2,)
    assert decode(b, np.zeros((3, 2))).shape == (3, 5)
    with pytest.raises(ValueError):
        encode(b, np.zeros(6))


@pytest.mark.parametrize("alpha", [0.0, 1.0, 5.0])
def test_vae_loss_gradients(alpha):
    rng = np.random.default_rng(6)
    b = VaeBlock.init(7, 5, 3, seed=1)
    x = (rng.random((6, 7)) < 0.4).astype(float)
    eps = rng.normal(size=(6, 3))
    loss, grads, _ = vae_loss(b, x, alpha, eps, 30, return_grads=True)
    assert loss == vae_loss(b, x, alpha, eps, 30)
    h = 1e-5
    for name, p in b.params.items():
        for idx in list(np.ndindex(p.shape))[:12]:
            orig = p[idx]
            p[idx] = orig + h
            up = vae_loss(b, x, alpha, eps, 30)
            p[idx] = orig - h
            down = vae_loss(b, x, alpha, eps, 30)
            p[idx] = orig
            num = (up - down) / (2 * h)
            assert abs(num - grads[name][idx]) <= 1e-4 * max(1e-6, abs(num), abs(grads[name][idx])), name


def test_train_vae_reduces_loss_and_is_seeded():
    rng = np.random.default_rng(7)
    x = (rng.random((40, 12)) < 0.3).astype(float)
    cfg = VaeConfig(d_z=3, hidden=8, lr=1e-2, epochs=60, batch=16, seed=3)
    b1, log = train_vae(x, cfg, return_log=True)
    b2 = train_vae(x, cfg)
    losses = [r["loss"] for r in log]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
    for k in b1.params:
        np.testing.assert_array_equal(b1.params[k], b2.params[k])


def test_train_vae_lone_trailing_row():
    x = (np.random.default_rng(8).random((9, 5)) < 0.5).astype(float)
    train_vae(x, VaeConfig(d_z=2, hidden=3, epochs=2, batch=4))


def test_train_vae_rejects_tiny():
    with pytest.raises(ValueError):
        train_vae(np.zeros((1, 4)), VaeConfig(epochs=1))


def test_extract_confounders_are_posterior_means(tmp_path):
    rng = np.random.default_rng(9)
    x = (rng.random((6, 4)) < 0.5).astype(float)
    ub, ib = VaeBlock.init(4, 3, 2, seed=0), VaeBlock.init(6, 3, 2, seed=1)
    reps = extract_confounders(ub, ib, x, x.T)
    np.testing.assert_array_equal(reps.r_users, encode(ub, x).mu)
    np.testing.assert_array_equal(extract_confounders(ub, ib, x, x.T).r_items, reps.r_items)
    assert not reps.r_users.flags.writeable
    with pytest.raises(ValueError):
        extract_confounders(ub, ib, x, x.T, d=5)
    reps.save(tmp_path / "r.npz")
    np.testing.assert_array_equal(ConfounderReps.load(tmp_path / "r.npz").r_items, reps.r_items)


def test_reps_reject_nan():
    with pytest.raises(ValueError):
        ConfounderReps(np.full((2, 2), np.nan), np.zeros((2, 2)))


def test_block_roundtrip(tmp_path):
    b = VaeBlock.init(5, 4, 3, seed=2)
    b.save(tmp_path / "b.npz")
    back = VaeBlock.load(tmp_path / "b.npz")
    for k in b.params:
        np.testing.assert_array_equal(back.params[k], b.params[k])


def test_latent_terms_runs():
    x = (np.random.default_rng(10).random((20, 6)) < 0.5).astype(float)
    t = latent_terms(VaeBlock.init(6, 4, 2), x, batch=10)
    assert np.isfinite(t.total())
