import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from casa import autodiff as ad
from casa.autodiff import ParamVector


def scalar(v):
    return ParamVector([("x", np.array([float(v)]))])


def test_forward_examples():
    assert ad.forward(ad.const(3.0)) == 3.0
    p = scalar(2.0)
    x = p.leaf("x")
    assert ad.forward(ad.mean(x * x)) == 4.0
    np.testing.assert_array_equal(ad.forward(ad.softmax(ad.const([0.0, 0.0]))), [0.5, 0.5])


def test_backward_linear_and_stop_gradient():
    p = scalar(1.0)
    y = ad.mean(3.0 * p.leaf("x"))
    ad.forward(y)
    assert ad.backward(y, p)[0] == 3.0

    p = scalar(2.0)
    x = p.leaf("x")
    y = ad.mean(ad.sg(x) * x)
    ad.forward(y)
    assert ad.backward(y, p)[0] == 2.0


def test_stop_gradient_forward_identity_and_zero_backward():
    p = ParamVector([("w", np.arange(6.0).reshape(2, 3))])
    w = p.leaf("w")
    s = ad.sg(w)
    assert isinstance(s, ad.StopGrad) and s.inner is w
    y = ad.mean(ad.square(s) * 5.0)
    ad.forward(y)
    np.testing.assert_array_equal(s.value, w.value)
    assert not ad.backward(y, p).any()


def test_shape_error_names_op():
    a, b = ad.const(np.ones(2)), ad.const(np.ones(3))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.forward(a + b)
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.forward(ad.const(np.ones((2, 3))) @ ad.const(np.ones((2, 3))))


def test_backward_requires_forward_and_scalar_root():
    p = scalar(1.0)
    y = ad.mean(p.leaf("x") * 2.0)
    with pytest.raises(ad.GraphError):
        ad.backward(y, p)
    v = ParamVector([("x", np.ones(3))])
    z = v.leaf("x") * 2.0
    ad.forward(z)
    with pytest.raises(ad.GraphError):
        ad.backward(z, v)


def test_gradient_length_and_grad_shapes():
    p = ParamVector([("a", np.ones((2, 2))), ("b", np.ones(3)), ("unused", np.ones(4))])
    y = ad.mean(ad.tanh(p.leaf("a") @ ad.const(np.ones(2))))
    ad.forward(y)
    g = ad.backward(y, p)
    assert g.shape == (p.total_len,)
    assert not g[p.slice_of("unused")].any()


def test_log_clamp_is_reported():
    seen = []
    node = ad.log(ad.const([0.0, 1.0]), on_clamp=seen.append)
    out = ad.forward(node)
    assert seen == [1]
    assert np.isfinite(out).all()


def test_softmax_is_stable_for_large_inputs():
    out = ad.forward(ad.softmax(ad.const([1e4, 0.0, -1e4]), tau=0.5))
    assert np.isfinite(out).all() and out[0] == 1.0


def test_finite_diff_examples():
    p = ParamVector([("t", np.array([3.0, 1.0]))])
    g = ad.finite_diff_grad(lambda q: q["t"][0] ** 2, p)
    assert abs(g[0] - 6.0) < 1e-6 and g[1] == 0.0
    assert not ad.finite_diff_grad(lambda q: 7.0, p).any()
    with pytest.raises(ad.AutodiffError):
        ad.finite_diff_grad(lambda q: np.inf, p)
    with pytest.raises(ValueError):
        ad.finite_diff_grad(lambda q: 0.0, p, step=0.0)


# every op against central differences, 50 seeds

W = np.linspace(-1.0, 1.0, 12).reshape(3, 4)


def _op_graphs():
    w = W

    def pair(f):
        return lambda p: f(p.leaf("x"), p.leaf("y"))

    return {
        "add": pair(lambda x, y: ad.mean(ad.mul(ad.add(x, y), w))),
        "sub": pair(lambda x, y: ad.mean(ad.mul(ad.sub(x, y), w))),
        "mul": pair(lambda x, y: ad.mean(ad.mul(x, y))),
        "matmul": lambda p: ad.mean(ad.square(ad.matmul(p.leaf("x"), ad.const(np.arange(8.0).reshape(4, 2))))),
        "exp": lambda p: ad.mean(ad.exp(p.leaf("x")) * w),
        "log": lambda p: ad.mean(ad.log(ad.square(p.leaf("x")) + 0.5) * w),
        "tanh": lambda p: ad.mean(ad.tanh(p.leaf("x")) * w),
        "square": lambda p: ad.mean(ad.square(p.leaf("x")) * w),
        "softmax": lambda p: ad.mean(ad.softmax(p.leaf("x"), tau=0.7) * w),
        "wsum": pair(lambda x, y: ad.mean(ad.wsum(ad.tanh(x), y))),
        "sg": pair(lambda x, y: ad.mean(ad.sg(x) * y + x * w)),
    }


@pytest.mark.parametrize("op", sorted(_op_graphs()))
def test_every_op_matches_finite_differences(op):
    build = _op_graphs()[op]
    for seed in range(50):
        rng = np.random.default_rng(seed)
        p = ParamVector([("x", rng.normal(size=(3, 4))), ("y", rng.normal(size=(3, 4)))])
        root = build(p)
        ad.forward(root)
        g = ad.backward(root, p)
        if op == "sg":
            base = p.copy()

            def f(q):
                return float(ad.forward(ad.mean(ad.const(base["x"]) * q.leaf("y") + q.leaf("x") * W)))
        else:
            def f(q):
                return float(ad.forward(build(q)))
        fd = ad.finite_diff_grad(f, p)
        assert ad.relative_error(g, fd) < 1e-4, (op, seed)


def test_two_layer_perceptron_matches_finite_differences():
    rng = np.random.default_rng(3)
    p = ParamVector([("w1", rng.normal(size=(4, 5))), ("b1", rng.normal(size=5)),
                     ("w2", rng.normal(size=(5, 2))), ("b2", rng.normal(size=2))])
    x = rng.normal(size=(7, 4))

    def build(q):
        h = ad.tanh(ad.const(x) @ q.leaf("w1") + q.leaf("b1"))
        return ad.mean(ad.square(h @ q.leaf("w2") + q.leaf("b2")))

    root = build(p)
    ad.forward(root)
    assert ad.relative_error(ad.backward(root, p), ad.finite_diff_grad(lambda q: float(ad.forward(build(q))), p)) < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)))
def test_param_vector_flattening_is_a_bijection(values):
    p = ParamVector([("a", values), ("b", values[::-1].copy())])
    flat = p.flat()
    assert flat.size == p.total_len == 2 * values.size
    q = p.with_flat(flat)
    assert q == p and q.names == ["a", "b"]
    np.testing.assert_array_equal(q.flat(), flat)


def test_param_vector_rejects_duplicates_and_bad_lengths():
    with pytest.raises(ValueError):
        ParamVector([("a", [1.0]), ("a", [2.0])])
    with pytest.raises(ValueError):
        ParamVector([("a", [1.0, 2.0])]).with_flat(np.zeros(3))
