import numpy as np
import pytest

from calikit import diffcore as ad
from calikit.forecast import gaussian_nll, init_params, predict_gaussian


def _grad(fn, **inputs):
    tape = ad.forward(fn, inputs)
    ad.backward(tape, tape.output)
    return {k: tape.grads[n.id] for k, n in tape.inputs.items()}, tape


def test_forward_examples():
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(ad.affine(x, np.eye(2), np.zeros(2)), [[1.0, 2.0]])
    assert ad.relu(np.array(-3.0)) == 0.0
    assert ad.relu(np.array(3.0)) == 3.0
    assert ad.softplus(np.array(0.0)) == pytest.approx(np.log(2.0), abs=1e-12)


def test_backward_examples():
    g, _ = _grad(lambda x: ad.square(x), x=np.array(3.0))
    assert g["x"] == pytest.approx(6.0)

    g, _ = _grad(lambda W: ad.sum_(ad.matmul(W, np.ones((2, 1)))), W=np.ones((2, 2)))
    np.testing.assert_array_equal(g["W"], np.ones((2, 2)))

    g, _ = _grad(lambda x: ad.tanh(x), x=np.array(0.0))
    assert g["x"] == pytest.approx(1.0)


def test_loss_seed_is_one_and_unreachable_nodes_are_zero():
    tape = ad.Tape()
    a = tape.var(np.array([1.0, 2.0]), "a")
    b = tape.var(np.array([5.0]), "b")
    loss = ad.sum_(ad.square(a))
    ad.backward(tape, loss)
    assert tape.grads[loss.id] == 1.0
    np.testing.assert_array_equal(tape.grads[b.id], np.zeros(1))


def test_backward_rejects_non_scalar_loss():
    tape = ad.Tape()
    a = tape.var(np.ones(3))
    with pytest.raises(ad.GradientError):
        ad.backward(tape, ad.square(a))


def test_backward_names_node_with_nan_gradient():
    tape = ad.Tape()
    a = tape.var(np.array([0.0]))
    loss = ad.sum_(ad.sqrt(a))
    with pytest.raises(ad.GradientError, match="sqrt"):
        ad.backward(tape, loss)


def test_shape_mismatch_names_node():
    with pytest.raises(ad.ShapeError, match="affine"):
        ad.affine(np.ones((2, 3)), np.ones((2, 2)), np.zeros(2))


def test_backward_linear_in_seed():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(4, 3))

    def f(x):
        return ad.sum_(ad.tanh(ad.matmul(x, ad.transpose(x))))

    tape = ad.forward(f, {"x": x0})
    g1 = dict(ad.backward(tape, tape.output, seed=1.0))[tape.inputs["x"].id].copy()
    tape = ad.forward(f, {"x": x0})
    g3 = ad.backward(tape, tape.output, seed=3.0)[tape.inputs["x"].id]
    np.testing.assert_allclose(g3, 3.0 * g1, rtol=0, atol=1e-12)


def test_gradcheck_examples():
    assert ad.gradcheck(lambda x: ad.square(x), np.array(3.0), eps=1e-5) < 1e-8
    # |x| at the kink: central differences give 0, reverse mode gives +1.
    assert ad.gradcheck(lambda x: ad.abs_(x), np.array(0.0)) > 0.5


UNARY = {
    "relu": (ad.relu, lambda r: r.normal(size=5) + np.sign(r.normal(size=5)) * 0.1),
    "tanh": (ad.tanh, lambda r: r.normal(size=5)),
    "softplus": (ad.softplus, lambda r: 3 * r.normal(size=5)),
    "exp": (ad.exp, lambda r: r.normal(size=5)),
    "log": (ad.log, lambda r: r.uniform(0.5, 3, size=5)),
    "square": (ad.square, lambda r: r.normal(size=5)),
    "sqrt": (ad.sqrt, lambda r: r.uniform(0.5, 3, size=5)),
    "normal_cdf": (ad.normal_cdf, lambda r: r.normal(size=5)),
    "log_softmax": (ad.log_softmax, lambda r: r.normal(size=(3, 4))),
    "softmax": (ad.softmax, lambda r: r.normal(size=(3, 4))),
    "mean": (lambda a: ad.mean(a, axis=0), lambda r: r.normal(size=(3, 4))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_gradcheck_20_points(name):
    op, draw = UNARY[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    weights = None
    for _ in range(20):
        x = draw(rng)
        if weights is None:
            weights = rng.normal(size=np.shape(op(x)))
        w = weights
        err = ad.gradcheck(lambda x: ad.sum_(ad.mul(op(x), w)), x)
        assert err < 1e-5, name


def test_binary_and_structural_gradcheck():
    rng = np.random.default_rng(7)
    for _ in range(20):
        pt = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(3, 2)),
              "W": rng.normal(size=(2, 4)), "c": rng.normal(size=4)}
        w = rng.normal(size=(3, 4))

        def f(a, b, W, c):
            h = ad.affine(ad.add(ad.mul(a, b), ad.sub(a, b)), W, c)
            h = ad.div(h, ad.add(ad.square(ad.affine(b, W, c)), 1.0))
            both = ad.concat([h, ad.transpose(ad.transpose(h))], axis=1)
            return ad.sum_(ad.mul(ad.cols(both, 0, 4), w))

        assert ad.gradcheck(f, pt) < 1e-5


def test_pairwise_ops_gradcheck():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pt = {"U": rng.normal(size=(4, 2)), "V": rng.normal(size=(3, 2))}
        w = rng.normal(size=(4, 3))
        err = ad.gradcheck(lambda U, V: ad.sum_(ad.mul(ad.pairwise_sqdist(U, V), w)), pt)
        assert err < 1e-5
        pt = {"u": rng.uniform(size=(4, 1)), "v": rng.uniform(size=(3, 1))}
        err = ad.gradcheck(lambda u, v: ad.sum_(ad.mul(ad.pairwise_min(u, v), w)), pt)
        assert err < 1e-5


def test_mlp_nll_gradcheck():
    rng = np.random.default_rng(11)
    params = init_params(3, (5, 5, 5), 2, rng)
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}
    x, y = rng.normal(size=(6, 3)), rng.normal(size=6)

    def f(**p):
        mu, sigma = predict_gaussian(p, x)
        return gaussian_nll(mu, sigma, y)

    assert ad.gradcheck(f, params) < 1e-5


def test_forward_backward_bitwise_deterministic():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(5, 5))
    f = lambda x: ad.sum_(ad.log_softmax(ad.matmul(x, x)))
    g1, _ = _grad(f, x=x0)
    g2, _ = _grad(f, x=x0)
    assert g1["x"].tobytes() == g2["x"].tobytes()


def test_plain_arrays_pass_through():
    out = ad.add(np.ones(2), np.ones(2))
    assert isinstance(out, np.ndarray)


# --- Adam ---------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    state = ad.AdamState(step=3, m={"w": np.array([0.5, 0.5])}, v={"w": np.array([1.0, 1.0])})
    new, st = ad.adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_allclose(st.m["w"], 0.9 * 0.5)
    np.testing.assert_allclose(st.v["w"], 0.999 * 1.0)
    # Moments decay but the parameter still moves along the old momentum.
    fresh, _ = ad.adam_step(p, {"w": np.zeros(2)}, ad.AdamState(), lr=0.1)
    np.testing.assert_array_equal(fresh["w"], p["w"])


def test_adam_first_step_is_lr_sign():
    new, _ = ad.adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, ad.AdamState(), lr=0.1)
    assert new["w"][0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_constant_gradient_step_tends_to_lr():
    p, st = {"w": np.array([0.0, 0.0])}, ad.AdamState()
    g = {"w": np.array([2.5, -0.01])}
    for _ in range(500):
        prev = p["w"].copy()
        p, st = ad.adam_step(p, g, st, lr=0.01)
    np.testing.assert_allclose(p["w"] - prev, [-0.01, 0.01], rtol=1e-4)


def test_adam_rejects_non_finite():
    with pytest.raises(ad.GradientError):
        ad.adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, ad.AdamState())
