import numpy as np
import pytest
from scipy import stats

from calikit import diffcore as ad
from calikit import forecast as F


def test_zero_weight_network_is_constant():
    rng = np.random.default_rng(0)
    params = F.init_params(3, (4, 4), 2, rng)
    params = {k: np.zeros_like(v) for k, v in params.items()}
    params["b2"] = np.array([0.7, -0.4])
    mu, sigma = F.predict_gaussian(params, rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(mu, np.full(5, 0.7))
    np.testing.assert_allclose(sigma, np.log1p(np.exp(-0.4)) + 1e-3, rtol=1e-15)


def test_sigma_floor_and_row_permutation():
    rng = np.random.default_rng(1)
    f = F.Forecaster.create("gaussian", 3, (8, 8), rng=rng)
    f.params["b2"] = np.array([0.0, -80.0])
    x = rng.normal(size=(10, 3))
    g = f.predict(x)
    assert np.all(g.sigma >= 1e-3)
    perm = rng.permutation(10)
    gp = f.predict(x[perm])
    np.testing.assert_array_equal(gp.mu, g.mu[perm])


def test_non_finite_activations():
    params = F.init_params(2, (3,), 2, np.random.default_rng(0))
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        F.predict_gaussian(params, np.array([[np.inf, 0.0]]))


def test_nll_examples():
    assert float(F.gaussian_nll(np.zeros(1), np.ones(1), np.zeros(1))) == pytest.approx(0.5 * np.log(2 * np.pi))
    assert float(F.gaussian_nll(np.zeros(1), np.ones(1), np.ones(1))) == pytest.approx(1.4189385, abs=1e-7)
    mus = np.linspace(-1, 1, 201)
    vals = [float(F.gaussian_nll(np.array([m]), np.ones(1), np.array([0.3]))) for m in mus]
    assert mus[int(np.argmin(vals))] == pytest.approx(0.3)
    with pytest.raises(ValueError):
        F.gaussian_nll(np.zeros(1), np.zeros(1), np.zeros(1))


def test_cdf_icdf():
    assert float(F.gaussian_cdf(1.3, 2.0, 1.3)) == 0.5
    assert float(F.gaussian_cdf(0.0, 1.0, 1.959964)) == pytest.approx(0.975, abs=1e-6)
    assert float(F.gaussian_icdf(0.0, 1.0, 0.5)) == 0.0
    p = np.random.default_rng(2).uniform(0.001, 0.999, size=100)
    np.testing.assert_allclose(F.gaussian_cdf(0.3, 1.7, F.gaussian_icdf(0.3, 1.7, p)), p, atol=1e-8)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            F.gaussian_icdf(0.0, 1.0, bad)


def test_reparam_sample():
    mu, sigma = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    np.testing.assert_array_equal(F.reparam_sample(mu, sigma, np.zeros((2, 4))), np.tile(mu[:, None], (1, 4)))
    rng = np.random.default_rng(3)
    mu, sigma = rng.normal(size=10_000), rng.uniform(0.2, 2.0, size=10_000)
    y = F.reparam_sample(mu, sigma, rng.standard_normal((10_000, 1)))[:, 0]
    assert stats.kstest(F.gaussian_cdf(mu, sigma, y), "uniform").statistic < 0.02


def test_categorical_examples():
    m = 5
    assert F.entropy(np.full((1, m), 1 / m))[0] == pytest.approx(np.log(m))
    assert F.entropy(np.eye(3)[[1]])[0] == 0.0
    assert float(F.xent(np.array([[0.5, 0.5]]), np.array([0]))) == pytest.approx(np.log(2))
    pmf = F.Forecaster.create("categorical", 4, (8,), n_classes=m, rng=np.random.default_rng(4)).predict(
        np.random.default_rng(5).normal(size=(20, 4)) * 10)
    np.testing.assert_allclose(pmf.sum(axis=1), 1.0, atol=1e-12)


def test_xent_clamps_and_counts():
    before = F.xent_clamp_count
    with pytest.warns(UserWarning, match="clamped"):
        val = float(F.xent(np.array([[1.0, 0.0]]), np.array([1])))
    assert val == pytest.approx(-np.log(1e-12))
    assert F.xent_clamp_count == before + 1


def test_xent_gradcheck():
    rng = np.random.default_rng(6)
    f = F.Forecaster.create("categorical", 3, (5, 5), n_classes=4, rng=rng)
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in f.params.items()}
    x, y = rng.normal(size=(7, 3)), rng.integers(0, 4, size=7)
    assert ad.gradcheck(lambda **p: F.xent(F.predict_categorical(p, x), y), params) < 1e-5


def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    params = F.init_params(3, (4,), 2, np.random.default_rng(7))
    F.save_params(tmp_path / "a.ckpt", params)
    F.save_params(tmp_path / "b.ckpt", params)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back = F.load_params(tmp_path / "a.ckpt")
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(ValueError):
        F.load_params(tmp_path / "bad.ckpt")
