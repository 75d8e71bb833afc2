import numpy as np
import pytest

from slfr.model import (
    MfModel,
    compose_bias,
    predict,
    score,
    score_bias_item,
    score_bias_user,
    score_bundle,
    sigmoid,
)
from slfr.vae import ConfounderReps


def brute_dot(a, b):
    total = 0.0
    for x, y in zip(a, b):
        total += x * y
    return total


def test_score_arithmetic():
    m = MfModel(np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]]))
    assert score(m, 0, 0) == 1.0
    assert score(MfModel(np.zeros((1, 3)), np.zeros((1, 3))), 0, 0) == 0.0


def test_score_out_of_range():
    m = MfModel.init(2, 3, 4)
    with pytest.raises(IndexError):
        score(m, 2, 0)
    with pytest.raises(IndexError):
        score(m, 0, -1)


@pytest.mark.parametrize("seed", range(5))
def test_dot_products_match_accumulation(seed):
    rng = np.random.default_rng(seed)
    w, v, r = rng.normal(size=(3, 64))
    m = MfModel(w[None], v[None])
    for got, want in [(score(m, 0, 0), brute_dot(w, v)),
                      (score_bias_user(r, v), brute_dot(r, v)),
                      (score_bias_item(r, w), brute_dot(r, w))]:
        assert got == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_bias_scores():
    assert score_bias_user([0.5, 0.5], [3, -1]) == 1.0
    assert score_bias_item([0, 0], [4, 5]) == 0.0
    a, b = np.array([1.0, -2, 3]), np.array([0.5, 4, 1])
    assert score_bias_user(a, b) == score_bias_item(a, b)
    with pytest.raises(ValueError):
        score_bias_user([1, 2], [1, 2, 3])


@pytest.mark.parametrize("args, want", [
    ((1, 1, 1, "explicit"), 3),
    ((1, 1, 1, "implicit"), 1),
    ((2, 0, 5, "implicit"), 0),
])
def test_compose(args, want):
    assert compose_bias(*args) == want


def test_compose_neutral_elements():
    for s in (-2.5, 0.0, 1.7):
        assert compose_bias(s, 0, 0, "explicit") == s
        assert compose_bias(s, 1, 1, "implicit") == s


def test_compose_additive_flag():
    assert compose_bias(2, 3, 4, "implicit", composition="additive") == 9


def test_predict_links():
    m = MfModel(np.zeros((1, 2)), np.zeros((1, 2)))
    assert predict(m, 0, 0, "implicit") == 0.5
    assert predict(m, 0, 0, "explicit") == 0.0


def test_predict_monotone_and_same_argmax():
    rng = np.random.default_rng(0)
    m = MfModel.init(3, 40, 8, seed=1, std=1.0)
    for u in range(3):
        s = np.array([score(m, u, i) for i in range(40)])
        p = np.array([predict(m, u, i) for i in range(40)])
        order = np.argsort(s)
        assert np.all(np.diff(p[order]) >= 0)
        assert np.argmax(s) == np.argmax(p)
    x = np.sort(rng.normal(size=100))
    assert np.all(np.diff(sigmoid(x)) > 0)


def test_ranking_invariant_to_zero_padding():
    m = MfModel.init(4, 30, 6, seed=2, std=1.0)
    padded = MfModel(np.hstack([m.W, np.zeros((4, 3))]), np.hstack([m.V, np.zeros((30, 3))]))
    np.testing.assert_array_equal(np.argsort(-m.all_scores(), kind="stable"),
                                  np.argsort(-padded.all_scores(), kind="stable"))


def test_score_bundle_consistency():
    m = MfModel.init(2, 3, 4, seed=0, std=1.0)
    reps = ConfounderReps(np.ones((2, 4)), np.full((3, 4), 0.5))
    for kind in ("implicit", "explicit"):
        b = score_bundle(m, reps, 1, 2, kind)
        assert b.score_bias == pytest.approx(compose_bias(b.score, b.score_bias_u, b.score_bias_i, kind))


def test_checkpoint_roundtrip(tmp_path):
    m = MfModel.init(5, 7, 3, seed=4)
    m.save(tmp_path / "m.npz", {"seed": 4})
    back = MfModel.load(tmp_path / "m.npz")
    np.testing.assert_array_equal(back.W, m.W)
    np.testing.assert_array_equal(back.V, m.V)


def test_init_is_seeded():
    a, b = MfModel.init(3, 4, 8, seed=9), MfModel.init(3, 4, 8, seed=9)
    np.testing.assert_array_equal(a.W, b.W)
    assert abs(MfModel.init(200, 200, 64, seed=0).W.std() - 0.01) < 1e-3
