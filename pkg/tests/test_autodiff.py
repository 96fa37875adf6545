import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from privsphere import autodiff as ad
from privsphere.errors import ContractError, DimensionError, NumericError


def test_forward_square():
    x = ad.Input("x", 3.0)
    g = ad.Graph(ad.square(x))
    assert ad.forward_eval(g, {"x": 3.0}) == 9.0


def test_forward_relu_negative():
    x = ad.Input("x", -2.0)
    assert ad.forward_eval(ad.Graph(ad.relu(x))) == 0.0


def test_forward_affine_identity():
    W = ad.Parameter(np.eye(2))
    b = ad.Parameter(np.zeros((2, 1)))
    x = ad.Input("x", np.array([[1.0], [2.0]]))
    out = ad.forward_eval(ad.Graph(ad.matmul(W, x) + b))
    np.testing.assert_array_equal(out, [[1.0], [2.0]])


def test_forward_eval_rebinds_inputs():
    x = ad.Input("x", 1.0)
    g = ad.Graph(x * x + 1.0)
    assert ad.forward_eval(g, {"x": 4.0}) == 17.0
    a = ad.forward_eval(g, {"x": 0.3})
    b = ad.forward_eval(g, {"x": 0.3})
    assert a.tobytes() == b.tobytes()


def test_forward_eval_rejects_unknown_binding():
    g = ad.Graph(ad.square(ad.Input("x", 1.0)))
    with pytest.raises(ContractError):
        ad.forward_eval(g, {"y": 1.0})


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        ad.matmul(ad.Constant(np.ones((2, 3))), ad.Constant(np.ones((2, 3))))


def test_non_finite_is_numeric_error():
    with pytest.raises(NumericError):
        ad.log(ad.Constant(np.array([-1.0])))
    with pytest.raises(NumericError):
        ad.Parameter(np.array([np.nan]))


def test_backward_square():
    x = ad.Parameter(np.array(3.0))
    grads = ad.backward(ad.square(x))
    assert grads[x.id] == pytest.approx(6.0)


def test_relu_grad_at_zero_is_zero():
    x = ad.Parameter(np.array(0.0))
    assert ad.backward(ad.relu(x))[x.id] == 0.0


def test_backward_requires_scalar_root():
    x = ad.Parameter(np.ones(3))
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_off_path_parameter_gets_zero_grad():
    x = ad.Parameter(np.array(2.0))
    y = ad.Parameter(np.ones((2, 2)))
    grads = ad.backward(ad.Graph(ad.square(x), [x, y]))
    np.testing.assert_array_equal(grads[y.id], np.zeros((2, 2)))


def test_stop_gradient_blocks_flow():
    x = ad.Parameter(np.array(2.0))
    grads = ad.backward(ad.Graph(ad.square(ad.stop_gradient(x)), [x]))
    assert grads[x.id] == 0.0


def test_parameter_ids_unique():
    ids = {ad.Parameter(np.zeros(1)).id for _ in range(100)}
    assert len(ids) == 100


def test_parameter_assign_checks_shape():
    p = ad.Parameter(np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        p.assign(np.zeros(3))


def test_matmul_sum_matches_finite_differences():
    rng = np.random.default_rng(0)
    A = ad.Parameter(rng.standard_normal((3, 3)))
    B = ad.Parameter(rng.standard_normal((3, 3)))
    err = ad.finite_diff_check(lambda: ad.matmul(A, B).sum(), [A, B])
    assert err <= 1e-5


def test_finite_diff_quadratic():
    p = ad.Parameter(np.array([0.5, -1.2, 2.0]))
    err = ad.finite_diff_check(lambda: (ad.square(p) * np.array([1.0, 2.0, 3.0])).sum(), [p])
    assert err <= 1e-6


def test_finite_diff_constant_loss():
    p = ad.Parameter(np.array([1.0, 2.0]))
    assert ad.finite_diff_check(lambda: ad.Constant(5.0), [p]) == 0.0


def test_finite_diff_rejects_bad_epsilon():
    p = ad.Parameter(np.array([1.0]))
    with pytest.raises(ContractError):
        ad.finite_diff_check(lambda: ad.square(p).sum(), [p], epsilon=0.0)


def test_two_layer_mlp_cross_entropy_gradients():
    rng = np.random.default_rng(1)
    W1 = ad.Parameter(rng.standard_normal((4, 6)))
    b1 = ad.Parameter(rng.standard_normal((6, 1)) * 0.1)
    W2 = ad.Parameter(rng.standard_normal((6, 3)))
    x = rng.standard_normal((4, 10))
    Y = np.eye(3)[rng.integers(0, 3, 10)]

    def loss():
        h = ad.relu(ad.matmul(ad.transpose(W1), x) + b1)
        logp = ad.log_softmax(ad.matmul(ad.transpose(W2), h))
        return -(logp * Y.T).sum() / 10.0

    assert ad.finite_diff_check(loss, [W1, b1, W2]) <= 1e-4


UNARY = {
    "exp": ad.exp,
    "log": lambda a: ad.log(ad.exp(a) + 1.0),
    "square": ad.square,
    "sqrt": lambda a: ad.sqrt(ad.square(a) + 1.0),
    "cos": ad.cos,
    "sin": ad.sin,
    "relu": ad.relu,
    "neg": ad.neg,
    "transpose": lambda a: ad.transpose(a) * np.arange(12.0).reshape(4, 3),
    "log_softmax": ad.log_softmax,
    "sum_axis0": lambda a: ad.reduce_sum(a, axis=0) * np.array([1.0, -2.0, 0.5, 3.0]),
    "sum_axis1": lambda a: ad.reduce_sum(a, axis=1, keepdims=True) * np.array([[1.0], [2.0], [-1.0]]),
    "mean": ad.mean,
}

BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.square(b) + 1.0),
    "sq_dist": lambda a, b: ad.sq_dist(a, b),
    "matmul": lambda a, b: ad.matmul(ad.transpose(a), b),
}


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), name=st.sampled_from(sorted(UNARY)))
def test_unary_op_gradients(seed, name):
    rng = np.random.default_rng(seed)
    value = rng.standard_normal((3, 4))
    if name == "relu":
        value = np.where(np.abs(value) < 1e-2, 0.5, value)
    a = ad.Parameter(value)
    phase = rng.uniform(0, 2 * np.pi)

    def loss():
        out = UNARY[name](a)
        w = np.cos(phase + np.arange(out.value.size)).reshape(out.value.shape)
        return (out * w).sum()

    assert ad.finite_diff_check(loss, [a]) <= 1e-4


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), name=st.sampled_from(sorted(BINARY)))
def test_binary_op_gradients(seed, name):
    rng = np.random.default_rng(seed)
    a = ad.Parameter(rng.standard_normal((3, 4)))
    b = ad.Parameter(rng.standard_normal((3, 4)))

    def loss():
        out = BINARY[name](a, b)
        return (out * np.cos(np.arange(out.value.size)).reshape(out.value.shape)).sum()

    assert ad.finite_diff_check(loss, [a, b]) <= 1e-4


def test_broadcast_add_gradient():
    rng = np.random.default_rng(3)
    a = ad.Parameter(rng.standard_normal((3, 5)))
    b = ad.Parameter(rng.standard_normal((3, 1)))
    err = ad.finite_diff_check(lambda: ad.square(a + b).sum(), [a, b])
    assert err <= 1e-6


def test_solve_spd_gradient():
    rng = np.random.default_rng(4)
    M = rng.standard_normal((4, 4))
    A = ad.Parameter(M @ M.T + 4 * np.eye(4))
    B = ad.Parameter(rng.standard_normal((4, 2)))

    def loss():
        sym = (A + ad.transpose(A)) * 0.5
        return (ad.solve_spd(sym, B) * np.arange(8.0).reshape(4, 2)).sum()

    assert ad.finite_diff_check(loss, [A, B]) <= 1e-6


def test_trace_gradient():
    a = ad.Parameter(np.arange(9.0).reshape(3, 3))
    grads = ad.backward(ad.trace(a))
    np.testing.assert_array_equal(grads[a.id], np.eye(3))


def test_sqrt_clamp_has_zero_grad():
    a = ad.Parameter(np.array([0.0, 4.0]))
    out = ad.sqrt(a, eps=1e-12)
    np.testing.assert_allclose(out.value, [0.0, 2.0])
    grads = ad.backward(out.sum())
    np.testing.assert_allclose(grads[a.id], [0.0, 0.25])


def test_log_softmax_is_stable_for_large_logits():
    out = ad.log_softmax(ad.Constant(np.array([[1000.0], [0.0]])))
    np.testing.assert_allclose(out.value[:, 0], [0.0, -1000.0])


# ----------------------------------------------------------------------------
# input gradients


def test_input_gradient_linear_net():
    w = np.array([[0.6], [-0.8]])
    z = ad.Constant(np.random.default_rng(0).standard_normal((2, 5)))
    G = ad.input_gradient_graph([(ad.Constant(w), None, "linear")], z)
    np.testing.assert_allclose(G.value, np.repeat(w, 5, axis=1))


def test_input_gradient_all_active_equals_weight_product():
    rng = np.random.default_rng(2)
    W1 = np.abs(rng.standard_normal((3, 4)))
    b1 = np.ones((4, 1))
    w2 = rng.standard_normal((4, 1))
    z = np.abs(rng.standard_normal((3, 1)))
    layers = [(ad.Constant(W1), ad.Constant(b1), "relu"), (ad.Constant(w2), None, "linear")]
    G = ad.input_gradient_graph(layers, ad.Constant(z))
    np.testing.assert_allclose(G.value[:, 0], (W1 @ w2)[:, 0])


def _mlp_out(W1, b1, W2, b2, z):
    return W2.T @ np.maximum(W1.T @ z + b1, 0) + b2


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    W1, b1 = rng.standard_normal((3, 8)), rng.standard_normal((8, 1))
    W2, b2 = rng.standard_normal((8, 2)), rng.standard_normal((2, 1))
    Z = rng.standard_normal((3, 6))
    sel = np.eye(2)[rng.integers(0, 2, 6)].T
    layers = [(ad.Constant(W1), ad.Constant(b1), "relu"), (ad.Constant(W2), ad.Constant(b2), "linear")]
    G = ad.input_gradient_graph(layers, ad.Constant(Z), select=sel).value
    eps = 1e-6
    for i in range(6):
        for k in range(3):
            zp, zm = Z[:, [i]].copy(), Z[:, [i]].copy()
            zp[k] += eps
            zm[k] -= eps
            num = (sel[:, i] @ (_mlp_out(W1, b1, W2, b2, zp) - _mlp_out(W1, b1, W2, b2, zm))) / (2 * eps)
            assert abs(G[k, i] - num[0]) <= 1e-5 * max(1.0, abs(num[0]))


def test_dead_unit_contributes_nothing():
    W1 = np.array([[1.0, 1.0], [0.0, 0.0]])
    b1 = np.array([[0.0], [-10.0]])
    w2 = np.array([[2.0], [5.0]])
    z = np.array([[1.0], [3.0]])
    layers = [(ad.Constant(W1), ad.Constant(b1), "relu"), (ad.Constant(w2), None, "linear")]
    G = ad.input_gradient_graph(layers, ad.Constant(z))
    np.testing.assert_allclose(G.value[:, 0], [2.0, 0.0])


def test_input_gradient_rejects_unknown_activation():
    with pytest.raises(ContractError):
        ad.input_gradient_graph([(ad.Constant(np.ones((2, 2))), None, "tanh"),
                                 (ad.Constant(np.ones((2, 1))), None, "linear")],
                                ad.Constant(np.ones((2, 1))))


def test_penalty_gradient_in_weights_matches_finite_differences():
    rng = np.random.default_rng(6)
    W1 = ad.Parameter(rng.standard_normal((3, 5)))
    b1 = ad.Parameter(rng.standard_normal((5, 1)))
    W2 = ad.Parameter(rng.standard_normal((5, 2)))
    b2 = ad.Parameter(rng.standard_normal((2, 1)))
    Z = ad.Constant(rng.standard_normal((3, 7)))
    sel = np.eye(2)[rng.integers(0, 2, 7)].T

    def loss():
        G = ad.input_gradient_graph([(W1, b1, "relu"), (W2, b2, "linear")], Z, select=sel)
        norms = ad.sqrt(ad.square(G).sum(axis=0), eps=1e-12)
        return ad.square(norms - 1.0).sum()

    assert ad.finite_diff_check(loss, [W1, b1, W2, b2], epsilon=1e-6) <= 1e-5
