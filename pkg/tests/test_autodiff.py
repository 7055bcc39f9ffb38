import numpy as np
import pytest

from tensorpot import autodiff as ad


def _scalar(x):
    return float(np.asarray(x))


def test_silu_value_and_derivative_at_zero():
    g = ad.DiffGraph()
    x = g.leaf(np.array(0.0))
    y = ad.silu(x)
    assert float(y.val) == 0.0
    grads = ad.backward(y)
    assert float(grads.get(x)) == 0.5


def test_sum_reduce_of_copies_and_gradient():
    g = ad.DiffGraph()
    c = 1.7
    x = g.leaf(np.full(5, c))
    y = ad.sum_reduce(x)
    assert _scalar(y.val) == pytest.approx(5 * c, rel=1e-15)
    grads = ad.backward(y)
    assert np.array_equal(grads.get(x), np.ones(5))


def test_matmul3_gradient_formula_and_finite_difference():
    rng = np.random.default_rng(0)
    a0 = rng.normal(size=(3, 3))
    b0 = rng.normal(size=(3, 3))
    gup = rng.normal(size=(3, 3))

    g = ad.DiffGraph()
    a, b, gconst = g.leaf(a0), g.leaf(b0), g.constant(gup)
    out = ad.sum_reduce(ad.mul(ad.matmul3(a, b), gconst))
    grads = ad.backward(out)
    assert np.abs(grads.get(a) - gup @ b0.T).max() < 1e-12
    assert np.abs(grads.get(b) - a0.T @ gup).max() < 1e-12

    report = ad.gradcheck(
        lambda av, bv: ad.sum_reduce(ad.mul(ad.matmul3(av, bv), av.graph.constant(gup))),
        [a0, b0],
        h=1e-6,
    )
    assert report.max_rel_dev < 1e-8


def test_backward_square_and_frobenius():
    g = ad.DiffGraph()
    x = g.leaf(np.array(3.0))
    y = ad.mul(x, x)
    assert float(ad.backward(y).get(x)) == 6.0

    g2 = ad.DiffGraph()
    m0 = np.random.default_rng(1).normal(size=(3, 3))
    m = g2.leaf(m0)
    frob = ad.sum_reduce(ad.mul(m, m))
    grads = ad.backward(frob)
    assert np.abs(grads.get(m) - 2.0 * m0).max() < 1e-14


def test_backward_rejects_nonscalar():
    g = ad.DiffGraph()
    x = g.leaf(np.ones(3))
    with pytest.raises(ad.NonScalarLossError):
        ad.backward(x)


def test_shape_mismatch_error_names_op_and_shapes():
    g = ad.DiffGraph()
    a = g.leaf(np.ones((2, 3, 3)))
    b = g.leaf(np.ones((3, 3, 3)))
    with pytest.raises(ad.ShapeMismatchError) as err:
        ad.matmul3(a, b)
    assert "matmul3" in str(err.value)
    assert "(2, 3, 3)" in str(err.value)


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(4, 3))

    def build():
        g = ad.DiffGraph()
        x = g.leaf(x0)
        h = ad.silu(ad.sum_reduce(ad.mul(x, x), axis=-1))
        return x, ad.sum_reduce(ad.sqrt(ad.add_const(h, 1.0)))

    x, out = build()
    g1 = ad.backward(out).get(x)
    g2 = ad.backward(out).get(x)
    assert np.array_equal(g1, g2)
    x_b, out_b = build()
    g3 = ad.backward(out_b).get(x_b)
    assert np.array_equal(g1, g3)


def test_gather_scatter_mass_conservation():
    rng = np.random.default_rng(2)
    vals = rng.normal(size=(6, 2))
    ids = np.array([0, 2, 2, 1, 0, 2])
    plan = ad.make_group_plan(ids, size=3)

    g = ad.DiffGraph()
    x = g.leaf(vals)
    pooled = ad.scatter_sum(x, plan)
    total = ad.sum_reduce(pooled)
    grads = ad.backward(total)
    # gradient of the sum w.r.t. every contributing row is 1
    assert np.array_equal(grads.get(x), np.ones_like(vals))

    g2 = ad.DiffGraph()
    y = g2.leaf(rng.normal(size=(3, 2)))
    taken = ad.gather(y, plan)
    total2 = ad.sum_reduce(taken)
    grads2 = ad.backward(total2)
    counts = np.bincount(ids, minlength=3).astype(float)[:, None]
    assert np.array_equal(grads2.get(y), counts * np.ones((3, 2)))


def test_scatter_sum_matches_bincount():
    rng = np.random.default_rng(11)
    vals = rng.normal(size=(50, 3))
    ids = rng.integers(0, 7, size=50)
    plan = ad.make_group_plan(ids, size=9)
    g = ad.DiffGraph()
    out = ad.scatter_sum(g.leaf(vals), plan)
    expected = np.zeros((9, 3))
    np.add.at(expected, ids, vals)
    assert np.abs(out.val - expected).max() < 1e-12


def test_segment_tree_sum_values_and_gradient():
    vals = np.arange(7.0)
    g = ad.DiffGraph()
    x = g.leaf(vals)
    out = ad.segment_tree_sum(x, [0, 3])
    assert np.allclose(out.val, [0 + 1 + 2, 3 + 4 + 5 + 6])
    picked = ad.sum_reduce(ad.mul(out, g.constant(np.array([1.0, 0.0]))))
    grads = ad.backward(picked)
    assert np.array_equal(grads.get(x), np.array([1, 1, 1, 0, 0, 0, 0.0]))


def test_segment_tree_sum_exact_doubling():
    rng = np.random.default_rng(4)
    half = rng.normal(size=13)
    doubled = np.concatenate([half, half])
    g = ad.DiffGraph()
    a = ad.segment_tree_sum(g.leaf(half), [0])
    b = ad.segment_tree_sum(g.leaf(doubled), [0])
    assert float(b.val[0]) == 2.0 * float(a.val[0])


@pytest.mark.parametrize("seed", range(5))
def test_composite_gradients_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3, 4))
    w0 = rng.normal(size=(4, 2)) * 0.5
    b0 = rng.normal(size=2) * 0.1

    def f(x, w, b):
        h = ad.silu(ad.linear(x, w, b))
        t = ad.sigmoid(ad.sum_reduce(h, axis=-1))
        return ad.sum_reduce(ad.mul(t, ad.exp(ad.scale(t, 0.3))))

    report = ad.gradcheck(f, [x0, w0, b0], h=1e-6)
    assert report.max_rel_dev < 1e-7


def test_gradcheck_sum_of_squares_tight():
    x0 = np.random.default_rng(8).normal(size=7)
    report = ad.gradcheck(lambda x: ad.sum_reduce(ad.mul(x, x)), [x0], h=1e-6)
    assert report.max_rel_dev < 1e-9
    assert report.passed()


def test_gradcheck_flags_corrupted_rule(monkeypatch):
    # Corrupt the silu derivative helper; gradcheck must report the deviation.
    monkeypatch.setattr(ad, "_dsilu", lambda x, s: s * (1.0 + x * (1.0 - s)) + 0.25)
    x0 = np.linspace(-1.0, 2.0, 5)
    report = ad.gradcheck(lambda x: ad.sum_reduce(ad.silu(x)), [x0], h=1e-6)
    assert report.max_abs_dev > 1e-3
    assert not report.passed(atol=1e-6, rtol=1e-5)


def test_tangent_forward_directional_derivative_and_second_order():
    # T(theta, x) = theta * sum(x^2):
    #   tangent of T along v in x is  theta * 2 x.v
    #   d/dtheta of that tangent is   2 x.v
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=5)
    v = rng.normal(size=5)
    theta0 = 1.7

    g = ad.DiffGraph()
    theta = g.leaf(np.array(theta0))
    x = g.leaf(x0)
    t = ad.sum_reduce(ad.mul(ad.reshape(theta, (1,)), ad.mul(x, x)))
    tan = ad.tangent_forward(t, {x: v})
    assert float(tan.val) == pytest.approx(theta0 * 2.0 * np.dot(x0, v), rel=1e-14)
    grads = ad.backward(tan)
    assert float(grads.get(theta)) == pytest.approx(2.0 * np.dot(x0, v), rel=1e-14)


def test_tangent_forward_through_nonlinearities_matches_fd():
    # Mixed second derivative through silu/sqrt/sigmoid chains:
    # compare d/dw [ v . d f/dx ] against finite differences in w.
    rng = np.random.default_rng(10)
    x0 = rng.normal(size=(4,))
    w0 = rng.normal(size=(4, 3)) * 0.7
    v = rng.normal(size=(4,))

    def scalar_fn(xv, wv):
        g = ad.DiffGraph()
        x = g.leaf(xv)
        w = g.leaf(wv)
        b = g.constant(np.zeros(3))
        h = ad.silu(ad.linear(ad.reshape(x, (1, 4)), w, b))
        t = ad.sqrt(ad.add_const(ad.sum_reduce(ad.mul(h, h)), 1.0))
        return g, x, w, ad.sigmoid(t)

    def mixed_grad(wv):
        g, x, w, out = scalar_fn(x0, wv)
        tan = ad.tangent_forward(out, {x: v})
        return ad.backward(tan).get(w)

    analytic = mixed_grad(w0)
    h = 1e-6
    numeric = np.zeros_like(w0)
    for i in range(w0.size):
        wp, wm = w0.copy().reshape(-1), w0.copy().reshape(-1)
        wp[i] += h
        wm[i] -= h

        def dir_deriv(wflat):
            g, x, w, out = scalar_fn(x0, wflat.reshape(w0.shape))
            grads = ad.backward(out)
            return float(np.dot(grads.get(x), v))

        numeric.reshape(-1)[i] = (dir_deriv(wp) - dir_deriv(wm)) / (2 * h)
    assert np.abs(analytic - numeric).max() < 1e-6


def test_linear_shape_error():
    g = ad.DiffGraph()
    x = g.leaf(np.ones((2, 5)))
    w = g.leaf(np.ones((4, 3)))
    b = g.leaf(np.zeros(3))
    with pytest.raises(ad.ShapeMismatchError):
        ad.linear(x, w, b)


def test_concat_and_slice_roundtrip_gradients():
    rng = np.random.default_rng(3)
    a0 = rng.normal(size=(2, 3))
    b0 = rng.normal(size=(2, 2))
    g = ad.DiffGraph()
    a, b = g.leaf(a0), g.leaf(b0)
    cat = ad.concat_last([a, b])
    back = ad.slice_last(cat, 3, 5)
    out = ad.sum_reduce(ad.mul(back, back))
    grads = ad.backward(out)
    assert np.array_equal(grads.get(a), np.zeros_like(a0))
    assert np.abs(grads.get(b) - 2 * b0).max() < 1e-14
