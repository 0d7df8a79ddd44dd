import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recupfl.errors import ConfigError, NumericError, UsageError
from recupfl.numerics import autodiff as ad
from recupfl.numerics import adam_init, adam_step, sgd_step
from oracles import central_difference, max_relative_error, numpy_mlp_loss


def _grad_of(fn, x):
    t = ad.tensor(x, requires_grad=True)
    return ad.grad(fn(t), [t])[0].value


# --- forward ---------------------------------------------------------------


def test_identity_graph():
    g = ad.Graph(lambda x: x, ["x"])
    np.testing.assert_array_equal(ad.forward(g, {"x": [1.0, 2.0]}).value, [1.0, 2.0])


def test_matmul_identity():
    out = ad.matmul(np.eye(2), np.array([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.value, [[3.0], [4.0]])


def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax(np.zeros(2)).value, [0.5, 0.5])


def test_shape_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ConfigError):
        ad.add(np.ones(3), np.ones(4))


def test_non_finite_names_the_primitive():
    with pytest.raises(NumericError, match="log"):
        ad.log(np.array([0.0, 1.0]))


def test_unbound_leaf():
    g = ad.Graph(lambda x, y: x + y, ["x", "y"])
    with pytest.raises(ConfigError):
        g.forward({"x": 1.0})


# --- backward ------------------------------------------------------------


def test_square_gradient():
    assert _grad_of(lambda x: x * x, 3.0) == pytest.approx(6.0)


def test_relu_subgradient_at_kink():
    np.testing.assert_array_equal(_grad_of(lambda x: ad.relu(x).sum(), [-1.0, 2.0]), [0.0, 1.0])
    np.testing.assert_array_equal(_grad_of(lambda x: ad.relu(x).sum(), [0.0]), [0.0])


def test_sign_zero_and_abs_kink():
    np.testing.assert_array_equal(ad.sign(np.array([-2.0, 0.0, 3.0])).value, [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(_grad_of(lambda x: ad.abs(x).sum(), [0.0, -2.0]), [0.0, -1.0])


def test_maxpool_ties_route_to_first_index():
    g = _grad_of(lambda x: ad.maxpool1d(x, 2).sum(), [5.0, 5.0, 1.0, 1.0, 4.0])
    np.testing.assert_array_equal(g, [1.0, 0.0, 1.0, 0.0, 1.0])


def test_segment_maxpool_pools_each_segment_separately():
    out = ad.segment_maxpool(np.array([1.0, 3.0, 2.0, 9.0, 0.0]), [3, 2], 2)
    np.testing.assert_array_equal(out.value, [3.0, 2.0, 9.0])


def test_non_scalar_backward_rejected():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        ad.grad(x * 2.0, [x])


def test_unreached_leaf_gets_zero():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    y = ad.tensor([3.0], requires_grad=True)
    gx, gy = ad.grad((x * x).sum(), [x, y])
    np.testing.assert_array_equal(gy.value, [0.0])


def test_named_backward_map():
    g = ad.Graph(lambda w, x: (w * x).sum(), ["w", "x"])
    out, grads = g.backward({"w": [1.0, 2.0], "x": [3.0, 4.0]})
    assert set(grads) == {"w", "x"}
    np.testing.assert_array_equal(grads["w"].value, [3.0, 4.0])


def test_topological_order_visits_each_node_once():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    z = (y + y * x).sum()
    order = ad.topological_order(z)
    assert len({id(n) for n in order}) == len(order)
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


PRIMITIVES = {
    "exp": lambda x: ad.exp(x * 0.01).sum(),
    "log": lambda x: ad.log(ad.abs(x) + 1.0).sum(),
    "sqrt": lambda x: ad.sqrt(ad.abs(x) + 0.5).sum(),
    "sigmoid": lambda x: ad.sigmoid(x * 0.01).sum(),
    "tanh": lambda x: ad.tanh(x * 0.01).sum(),
    "softmax": lambda x: (ad.softmax(x * 0.01) * np.arange(4.0)).sum(),
    "log_softmax": lambda x: (ad.log_softmax(x * 0.01) * np.arange(4.0)).sum(),
    "div": lambda x: (1.0 / (ad.abs(x) + 1.0)).sum(),
    "power": lambda x: ad.power(x * 0.01, 3.0).sum(),
    "matmul": lambda x: (ad.matmul(ad.reshape(x * 0.01, (2, 2)), np.array([[1.0, 2.0], [3.0, -1.0]])) ** 2).sum(),
    "mean": lambda x: ad.mean(x * x),
    "concat": lambda x: (ad.concat([x, x * 2.0]) * np.arange(8.0)).sum() + (ad.concat([x * 0.01]) ** 2).sum(),
    "getitem": lambda x: ((x * 0.01)[1:3] ** 2).sum(),
    "broadcast": lambda x: ((ad.reshape(x * 0.01, (4, 1)) * np.ones((1, 3))) ** 2).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    rng = np.random.default_rng(7)
    fn = PRIMITIVES[name]
    for _ in range(5):
        mags = 10 ** rng.uniform(-3, 3, size=4)
        x = mags * rng.choice([-1.0, 1.0], size=4)
        analytic = _grad_of(fn, x)
        numeric = central_difference(lambda v: float(fn(ad.tensor(v)).value), x)
        assert max_relative_error(analytic, numeric) < 1e-4


def _random_mlp(rng, n_layers, width, d, c):
    dims = [d] + [int(rng.integers(2, width + 1)) for _ in range(n_layers - 1)] + [c]
    params = []
    for a, b in zip(dims[:-1], dims[1:]):
        params.append(rng.normal(0, 1 / np.sqrt(a), size=(a, b)))
        params.append(rng.normal(0, 0.1, size=b))
    return params


def _mlp_loss_tensor(params, x, y):
    h = ad.tensor(x) if not isinstance(x, ad.Tensor) else x
    n = len(params) // 2
    for i in range(n):
        h = ad.matmul(h, params[2 * i]) + params[2 * i + 1]
        if i < n - 1:
            h = ad.relu(h)
    logp = ad.log_softmax(h)
    onehot = np.eye(logp.shape[1])[y]
    return -(logp * onehot).sum() / float(len(y))


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(0)
    params = _random_mlp(rng, 2, 8, 5, 3)
    x = rng.normal(size=(4, 5))
    y = rng.integers(0, 3, size=4)
    leaves = [ad.tensor(p, requires_grad=True) for p in params]
    grads = ad.grad(_mlp_loss_tensor(leaves, x, y), leaves)
    for i, p in enumerate(params):
        def f(v, i=i):
            ps = list(params)
            ps[i] = v
            return numpy_mlp_loss(ps, x, y)

        assert max_relative_error(grads[i].value, central_difference(f, p)) < 1e-4


# --- nested gradients ------------------------------------------------------


def test_nested_second_derivative_of_cube():
    x = ad.tensor(2.0, requires_grad=True)
    out = ad.nested_grad(x * x * x, [x], lambda g: g[0], x)
    assert out.value == pytest.approx(12.0)


def _cosine_matching_loss(params, x_leaf, y, target):
    grads = ad.grad(_mlp_loss_tensor(params, x_leaf, y), params, create_graph=True)
    dot = sum((g * t).sum() for g, t in zip(grads, target))
    n1 = ad.sqrt(sum((g * g).sum() for g in grads))
    n2 = float(np.sqrt(sum((t * t).sum() for t in target)))
    return 1.0 - dot / (n1 * n2)


def test_matching_loss_gradient_vanishes_at_truth():
    rng = np.random.default_rng(1)
    params = [ad.tensor(p, requires_grad=True) for p in _random_mlp(rng, 2, 6, 4, 3)]
    x0 = rng.normal(size=(1, 4))
    y = np.array([1])
    target = [g.value for g in ad.grad(_mlp_loss_tensor(params, x0, y), params)]
    x = ad.tensor(x0, requires_grad=True)
    out = ad.grad(_cosine_matching_loss(params, x, y, target), [x])[0]
    assert np.max(np.abs(out.value)) < 1e-7


def test_nested_requires_recorded_inner():
    x = ad.tensor(2.0, requires_grad=True)
    with pytest.raises(UsageError):
        ad.nested_grad(x * x, [x], lambda g: ad.tensor(1.0) * g[0].detach(), x)


def test_nested_matching_loss_matches_finite_differences():
    rng = np.random.default_rng(3)
    raw = _random_mlp(rng, 1, 4, 4, 3)
    params = [ad.tensor(p, requires_grad=True) for p in raw]
    y = np.array([2])
    target = [g.value for g in ad.grad(_mlp_loss_tensor(params, rng.normal(size=(1, 4)), y), params)]
    x0 = rng.normal(size=(1, 4))
    x = ad.tensor(x0, requires_grad=True)
    analytic = ad.grad(_cosine_matching_loss(params, x, y, target), [x])[0].value

    def f(v):
        return float(_cosine_matching_loss(params, ad.tensor(v), y, target).value)

    assert max_relative_error(analytic, central_difference(f, x0)) < 1e-3


def test_nested_hessian_vector_product_of_quadratic():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(6, 6))
    H = A + A.T
    v = rng.normal(size=6)
    x = ad.tensor(rng.normal(size=6), requires_grad=True)
    quad = 0.5 * (x * ad.matmul(ad.reshape(x, (1, 6)), H).reshape(6)).sum()
    hvp = ad.nested_grad(quad, [x], lambda g: (g[0] * v).sum(), x).value
    assert max_relative_error(hvp, H @ v) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=12), st.integers(1, 5))
def test_forward_backward_deterministic(values, window):
    fn = lambda t: (ad.maxpool1d(ad.abs(t), window) * ad.sigmoid(ad.maxpool1d(t, window))).sum()  # noqa: E731
    a = _grad_of(fn, values)
    b = _grad_of(fn, values)
    assert a.tobytes() == b.tobytes()


# --- optimizers ----------------------------------------------------------


def test_sgd_step():
    np.testing.assert_array_equal(sgd_step([np.array([1.0])], [np.array([2.0])], 0.5)[0], [0.0])
    np.testing.assert_array_equal(sgd_step([np.array([1.0])], [np.array([2.0])], 0.0)[0], [1.0])
    with pytest.raises(ConfigError):
        sgd_step([np.ones(2)], [np.ones(3)], 0.1)


def test_adam_zero_gradient_keeps_params():
    s = adam_init([np.array([1.0, -2.0])])
    for _ in range(3):
        s = adam_step(s, [np.zeros(2)], lr=0.1)
    np.testing.assert_array_equal(s.params[0], [1.0, -2.0])


def test_adam_single_step_hand_computed():
    eps = 1e-8
    s = adam_step(adam_init([np.array([0.0])]), [np.array([1.0])], lr=0.1, eps=eps)
    # m_hat = 1, v_hat = 1 after bias correction
    assert s.params[0][0] == pytest.approx(-0.1 / (1.0 + eps), rel=1e-15)


def test_adam_constant_gradient_moves_monotonically():
    s = adam_init([np.array([0.0, 0.0])])
    g = np.array([2.0, -0.5])
    prev = s.params[0].copy()
    for _ in range(100):
        s = adam_step(s, [g], lr=0.01)
        step = s.params[0] - prev
        assert np.all(np.sign(step) == -np.sign(g))
        prev = s.params[0].copy()
