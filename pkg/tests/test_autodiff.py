import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from egean import autodiff as ad
from gradcheck import cases, check


def grads_of(fn, *arrays_in):
    ts = [ad.Tensor(a, trainable=True) for a in arrays_in]
    with ad.Tape() as tape:
        loss = fn(*ts)
    ad.backward(loss, tape, ts)
    return [t.grad for t in ts]


@pytest.mark.parametrize("seed", [0, 1])
def test_every_op_matches_central_differences(seed):
    for name, fn, inputs, wrt in cases(np.random.default_rng(seed)):
        assert check(fn, inputs, wrt) < 1e-4, name


def test_sigmoid_values():
    assert ad.sigmoid(ad.Tensor(0.0)).item() == 0.5
    (g,) = grads_of(lambda x: ad.sigmoid(x), np.array(0.0))
    assert g == pytest.approx(0.25)


def test_sigmoid_extreme_inputs_stay_finite_and_open():
    out = ad.sigmoid(ad.Tensor([-1e4, -40.0, 40.0, 1e4])).data
    assert np.all(np.isfinite(out))
    assert np.all((out > 0) & (out < 1))


def test_sigmoid_central_difference_tight():
    x = np.random.default_rng(3).uniform(-3, 3, 50)
    (g,) = grads_of(lambda t: ad.sum_(ad.sigmoid(t)), x)
    s = lambda z: 1 / (1 + np.exp(-z))
    fd = (s(x + 1e-5) - s(x - 1e-5)) / 2e-5
    np.testing.assert_allclose(g, fd, rtol=1e-6)


def test_leaky_relu_examples():
    out = ad.leaky_relu(ad.Tensor([-1.0, 2.0, 0.0]), 0.2).data
    np.testing.assert_array_equal(out, [-0.2, 2.0, 0.0])


def test_leaky_relu_subgradient_at_zero_is_slope():
    (g,) = grads_of(lambda x: ad.sum_(ad.leaky_relu(x, 0.2)), np.array([0.0]))
    assert g[0] == pytest.approx(0.2)


@pytest.mark.parametrize("slope", [0.0, 1.0, -0.1, 1.5])
def test_leaky_relu_rejects_bad_slope(slope):
    with pytest.raises(ValueError):
        ad.leaky_relu(ad.Tensor([1.0]), slope)


def test_stop_gradient_contract():
    x = np.array([1.0, -2.0, 3.0])
    w = np.array([0.5, 0.25, -1.0])
    gx, gw = grads_of(lambda a, b: ad.sum_(ad.stop_gradient(a) * b), x, w)
    np.testing.assert_array_equal(gx, 0.0)
    np.testing.assert_array_equal(gw, x)
    np.testing.assert_array_equal(ad.stop_gradient(ad.Tensor(x)).data, x)


def test_stop_gradient_idempotent():
    x = np.array([1.0, 2.0])
    once = grads_of(lambda a, b: ad.sum_(ad.stop_gradient(a) * b), x, x)
    twice = grads_of(lambda a, b: ad.sum_(ad.stop_gradient(ad.stop_gradient(a)) * b), x, x)
    for u, v in zip(once, twice):
        np.testing.assert_array_equal(u, v)


def test_backward_sum_and_quadratic():
    x = np.arange(6.0).reshape(2, 3)
    (g,) = grads_of(lambda t: ad.sum_(t), x)
    np.testing.assert_array_equal(g, np.ones((2, 3)))
    (g,) = grads_of(lambda t: ad.sum_(t * t), x)
    np.testing.assert_array_equal(g, 2 * x)


def test_accumulation_is_sum_of_paths():
    x = np.array([0.3, -0.7])
    (both,) = grads_of(lambda t: ad.sum_(ad.exp(t) + ad.square(t)), x)
    (a,) = grads_of(lambda t: ad.sum_(ad.exp(t)), x)
    (b,) = grads_of(lambda t: ad.sum_(ad.square(t)), x)
    np.testing.assert_allclose(both, a + b, rtol=0, atol=1e-15)


def test_unreached_listed_parameter_gets_zero():
    x = ad.Tensor([1.0, 2.0], trainable=True)
    y = ad.Tensor([3.0], trainable=True)
    with ad.Tape() as tape:
        loss = ad.sum_(x * x)
    ad.backward(loss, tape, [x, y])
    np.testing.assert_array_equal(y.grad, [0.0])


def test_non_trainable_never_gets_grad():
    x = ad.Tensor([1.0, 2.0], trainable=False)
    w = ad.Tensor([1.0, 1.0], trainable=True)
    with ad.Tape() as tape:
        loss = ad.sum_(x * w)
    ad.backward(loss, tape)
    assert x.grad is None


def test_random_three_layer_mlp_gradients():
    rng = np.random.default_rng(7)
    x = rng.uniform(-2, 2, (5, 4))
    shapes = [(4, 6), (6,), (6, 5), (5,), (5, 1), (1,)]
    params = [rng.uniform(-1, 1, s) for s in shapes]

    def mlp(t):
        h = ad.leaky_relu(ad.Tensor(x) @ t[0] + t[1], 0.2)
        h = ad.sigmoid(h @ t[2] + t[3])
        return ad.mean(ad.square(h @ t[4] + t[5]))

    assert check(mlp, params) < 1e-4


def test_backward_rejects_non_scalar():
    x = ad.Tensor([1.0, 2.0], trainable=True)
    with ad.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ad.AutodiffError):
        ad.backward(y, tape)


def test_backward_twice_is_an_error():
    x = ad.Tensor([1.0], trainable=True)
    with ad.Tape() as tape:
        loss = ad.sum_(x * x)
    ad.backward(loss, tape)
    with pytest.raises(ad.AutodiffError):
        ad.backward(loss, tape)


def test_tape_is_topologically_ordered():
    x = ad.Tensor([1.0, 2.0], trainable=True)
    with ad.Tape() as tape:
        ad.sum_(ad.exp(x * 3.0) + x)
    seen = set()
    for node in tape.nodes:
        for parent in node._parents:
            if parent._backward is not None:
                assert id(parent) in seen
        seen.add(id(node))


def test_matmul_shape_mismatch():
    with pytest.raises(ad.AutodiffError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_adam_first_step_magnitude():
    p = ad.Tensor([0.0, 5.0], trainable=True)
    state = ad.AdamState(lr=1e-3, m=[np.zeros(2)], v=[np.zeros(2)])
    ad.adam_step([p], [np.ones(2)], state)
    np.testing.assert_allclose(p.data, [-1e-3, 5.0 - 1e-3], rtol=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_is_fixed_point():
    p = ad.Tensor(np.random.default_rng(0).standard_normal(4), trainable=True)
    before = p.data.copy()
    opt = ad.Adam([p], lr=1e-2)
    for _ in range(5):
        p.grad = np.zeros(4)
        opt.step()
    np.testing.assert_array_equal(p.data, before)
    assert opt.state.step == 5


def test_adam_decoupled_weight_decay():
    p = ad.Tensor([2.0], trainable=True)
    opt = ad.Adam([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adam_shape_mismatch():
    p = ad.Tensor(np.zeros(3), trainable=True)
    state = ad.AdamState(m=[np.zeros(3)], v=[np.zeros(3)])
    with pytest.raises(ad.AutodiffError):
        ad.adam_step([p], [np.zeros(2)], state)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(11)
        p = ad.xavier_init((3, 3), rng)
        opt = ad.Adam([p])
        for _ in range(10):
            with ad.Tape() as tape:
                loss = ad.sum_(ad.square(p @ p))
            ad.backward(loss, tape)
            opt.step()
        return p.data

    np.testing.assert_array_equal(run(), run())


def test_xavier_variance_and_bias():
    w = ad.xavier_init((1000, 1000), np.random.default_rng(0))
    assert abs(w.data.var() / (2 / 2000) - 1) < 0.1
    b = ad.xavier_init((7,), np.random.default_rng(0))
    np.testing.assert_array_equal(b.data, 0.0)
    a1 = ad.xavier_init((4, 5), np.random.default_rng(3)).data
    a2 = ad.xavier_init((4, 5), np.random.default_rng(3)).data
    np.testing.assert_array_equal(a1, a2)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_sigmoid_bounds_and_derivative(x):
    (g,) = grads_of(lambda t: ad.sum_(ad.sigmoid(t)), x)
    s = ad.sigmoid(ad.Tensor(x)).data
    assert np.all((s > 0) & (s < 1))
    np.testing.assert_allclose(g, s * (1 - s), rtol=1e-12, atol=1e-300)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-3, 3)))
def test_sum_mean_gradients_property(x):
    (g,) = grads_of(lambda t: ad.mean(t), x)
    np.testing.assert_allclose(g, np.full(x.shape, 1 / x.size))
