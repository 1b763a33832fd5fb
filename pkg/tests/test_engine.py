import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from writeradapt import engine as E


def fd_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def scalar(fn, x, proj):
    """sum(fn(x) * proj) as a float, through the engine."""
    with E.no_grad():
        return float(E.sum(E.mul(fn(E.constant(x)), E.constant(proj))).value[0])


UNARY = {
    "tanh": E.tanh,
    "sigmoid": E.sigmoid,
    "exp": E.exp,
    "neg": E.neg,
    "softmax": E.softmax,
    "log": lambda a: E.log(E.add(E.mul(a, a), E.constant([1.0]))),
    "sum_rows": lambda a: E.sum(a, axis=1, keepdims=True),
    "mean_cols": lambda a: E.mean(a, axis=0, keepdims=True),
    "slice": lambda a: E.slice_(a, 1, 1, 3),
    "concat": lambda a: E.concat([a, E.tanh(a)], axis=1),
    "matmul_self_t": lambda a: E.matmul(a, a, tb=True),
    "matmul_t_self": lambda a: E.matmul(a, a, ta=True),
    "row_broadcast": lambda a: E.mul(a, E.slice_(a, 0, 0, 1)),
    "col_broadcast": lambda a: E.add(a, E.sum(a, axis=1, keepdims=True)),
    "log_softmax": E.log_softmax,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_op_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    fn = UNARY[name]
    with E.no_grad():
        shape = fn(E.constant(x)).shape
    proj = rng.normal(size=shape)
    xn = E.param(x)
    loss = E.sum(E.mul(fn(xn), E.constant(proj)))
    (g,) = E.grad(loss, [xn])
    assert g.shape == x.shape
    assert rel_err(g.value, fd_grad(lambda v: scalar(fn, v, proj), x)) < 1e-6


def test_fifty_random_tensors_through_a_composite():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, w = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))

        def f(av, node=False):
            an = E.param(av) if node else E.constant(av)
            out = E.sum(E.log_softmax(E.tanh(an @ w)) * E.constant([0.3]))
            return (out, an) if node else float(out.value[0])

        loss, an = f(a, node=True)
        (g,) = E.grad(loss, [an])
        assert rel_err(g.value, fd_grad(f, a)) < 1e-6


def test_forward_examples():
    assert np.allclose(E.softmax(E.constant([[1.0, 1.0, 1.0]])).value, 1 / 3, atol=1e-15)
    x = np.array([[0.3], [-1.7]])
    assert np.array_equal(E.matmul(E.constant(np.eye(2)), E.constant(x)).value, x)
    assert E.tanh(E.constant([0.5])).value[0] == pytest.approx(np.tanh(0.5), abs=1e-12)
    assert E.tanh(E.constant([0.5])).value[0] == pytest.approx(0.46211715726000974, abs=1e-12)


def test_backward_examples():
    x = E.param([1.0, 2.0, 3.0])
    g = E.backward(E.sum(x * x), [x])
    assert np.array_equal(g[x.id], [2.0, 4.0, 6.0])

    w = E.param([[1.0, 2.0]])
    c = E.sum(E.constant([[3.0, 4.0]]))
    assert np.array_equal(E.backward(c, [w])[w.id], np.zeros((1, 2)))


def test_cross_entropy_gradient_is_p_minus_onehot():
    rng = np.random.default_rng(1)
    z0 = rng.normal(size=(1, 5))
    k = 2
    onehot = np.eye(5)[[k]]

    def ce(zv):
        return float(-E.sum(E.mul(E.log_softmax(E.constant(zv)), E.constant(onehot))).value[0])

    z = E.param(z0)
    (g,) = E.grad(-E.sum(E.mul(E.log_softmax(z), E.constant(onehot))), [z])
    p = np.exp(z0) / np.exp(z0).sum()
    assert np.allclose(g.value, p - onehot, atol=1e-14)
    assert rel_err(g.value, fd_grad(ce, z0)) < 1e-6


def test_non_scalar_loss_rejected():
    x = E.param([1.0, 2.0])
    with pytest.raises(E.ShapeError, match="shape"):
        E.grad(x * x, [x])


def test_shape_error_names_op():
    with pytest.raises(E.ShapeError, match="matmul"):
        E.matmul(E.constant(np.ones((2, 3))), E.constant(np.ones((2, 3))))


def test_duplicate_subexpression_accumulates():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(2, 2))
    a = E.param(v)
    b = E.param(v)
    (ga,) = E.grad(E.sum(E.tanh(a + a)), [a])
    (gb,) = E.grad(E.sum(E.tanh(b * E.constant([2.0]))), [b])
    assert np.array_equal(ga.value, gb.value)


def test_determinism():
    def run():
        rng = np.random.default_rng(3)
        x = E.param(rng.normal(size=(4, 3)))
        w = E.param(rng.normal(size=(3, 2)))
        loss = E.mean(E.sigmoid(x @ w))
        return [loss.value.tobytes()] + [g.value.tobytes() for g in E.grad(loss, [x, w])]

    assert run() == run()


def test_forward_rebinds_inputs():
    x = E.param([[1.0, 2.0]])
    y = E.sum(E.tanh(x))
    (val,) = E.forward([y], {x: np.array([[0.0, 0.0]])})
    assert val[0] == 0.0
    with pytest.raises(ValueError, match="input"):
        E.forward([y], {y: np.array([1.0])})


def test_second_derivative_of_cube():
    x = E.param([1.5])
    (g,) = E.grad(x * x * x, [x], create_graph=True)
    (h,) = E.grad(g, [x])
    assert g.value[0] == pytest.approx(3 * 1.5**2)
    assert h.value[0] == pytest.approx(6 * 1.5)


# --- meta-gradients through an update ---------------------------------------------


def toy(theta0, alpha0, first_order=False):
    theta = E.param([theta0])
    alpha = E.param([alpha0])
    half = E.constant([0.5])
    inner = half * theta * theta
    g = E.backward_through_update(
        {"w": [theta]}, inner, {"w": alpha}, lambda th: half * th["w"][0] * th["w"][0], first_order=first_order
    )
    return g[theta.id][0], g[alpha.id][0]


def test_scalar_toy_closed_form():
    dtheta, dalpha = toy(1.0, 0.1)
    assert abs(dtheta - 0.81) < 1e-10
    assert abs(dalpha - (-0.9)) < 1e-10
    dtheta_fo, dalpha_fo = toy(1.0, 0.1, first_order=True)
    assert abs(dtheta_fo - 0.9) < 1e-10
    assert abs(dalpha_fo - (-0.9)) < 1e-10


def test_zero_rate_gives_plain_outer_gradient():
    rng = np.random.default_rng(4)
    w0, x, y = rng.normal(size=(3, 2)), rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    w = E.param(w0)
    outer = lambda th: E.mean((E.constant(x) @ th["l"][0] - E.constant(y)) * (E.constant(x) @ th["l"][0] - E.constant(y)))
    inner = E.sum(E.tanh(E.constant(x) @ w))
    meta = E.backward_through_update({"l": [w]}, inner, {"l": E.param([0.0])}, outer)
    plain = E.backward(outer({"l": [w]}), [w])
    assert np.allclose(meta[w.id], plain[w.id], atol=1e-15)


def test_alpha_count_must_match_layers():
    w = E.param([1.0])
    with pytest.raises(ValueError, match="alpha"):
        E.backward_through_update({"a": [w], "b": [w]}, w * w, {"a": E.param([0.1])}, lambda th: th["a"][0] * th["a"][0])


def two_layer_meta(params, alphas, xs, first_order=False):
    """Outer loss of a 2-layer tanh net after one inner step, with engine meta-gradients."""
    x_tr, y_tr, x_va, y_va = (E.constant(v) for v in xs)
    nodes = {"l1": [E.param(params[0]), E.param(params[1])], "l2": [E.param(params[2])]}
    rates = {"l1": E.param([alphas[0]]), "l2": E.param([alphas[1]])}

    def loss(th, x, y):
        h = E.tanh(x @ th["l1"][0] + th["l1"][1])
        d = h @ th["l2"][0] - y
        return E.mean(d * d)

    g = E.backward_through_update(nodes, loss(nodes, x_tr, y_tr), rates, lambda th: loss(th, x_va, y_va),
                                  first_order=first_order)
    flat = [p for layer in nodes.values() for p in layer]
    return [g[p.id] for p in flat], [g[rates[k].id][0] for k in ("l1", "l2")]


def composed_outer(params, alphas, xs):
    x_tr, y_tr, x_va, y_va = xs

    def loss_and_grads(W1, b1, W2, x, y):
        h = np.tanh(x @ W1 + b1)
        d = h @ W2 - y
        n = d.size
        gd = 2 * d / n
        gW2 = h.T @ gd
        gh = gd @ W2.T * (1 - h**2)
        return np.mean(d**2), (x.T @ gh, gh.sum(0, keepdims=True), gW2)

    W1, b1, W2 = params
    _, (g1, gb, g2) = loss_and_grads(W1, b1, W2, x_tr, y_tr)
    W1p, b1p, W2p = W1 - alphas[0] * g1, b1 - alphas[0] * gb, W2 - alphas[1] * g2
    return loss_and_grads(W1p, b1p, W2p, x_va, y_va)[0]


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_two_layer_meta_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = [rng.normal(size=(3, 4)), rng.normal(size=(1, 4)) * 0.1, rng.normal(size=(4, 2))]
    alphas = rng.uniform(0.05, 0.3, size=2)
    xs = (rng.normal(size=(6, 3)), rng.normal(size=(6, 2)), rng.normal(size=(6, 3)), rng.normal(size=(6, 2)))
    gp, ga = two_layer_meta(params, alphas, xs)
    for i, p in enumerate(params):
        def f(v, i=i):
            ps = list(params)
            ps[i] = v
            return composed_outer(ps, alphas, xs)
        assert rel_err(gp[i], fd_grad(f, p)) < 1e-4
    fd_alpha = fd_grad(lambda a: composed_outer(params, a, xs), np.array(alphas))
    assert rel_err(np.array(ga), fd_alpha) < 1e-4


def test_first_order_differs_from_full_on_generic_net():
    rng = np.random.default_rng(5)
    params = [rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), rng.normal(size=(4, 2))]
    xs = (rng.normal(size=(6, 3)), rng.normal(size=(6, 2)), rng.normal(size=(6, 3)), rng.normal(size=(6, 2)))
    full, _ = two_layer_meta(params, [0.2, 0.2], xs)
    fo, _ = two_layer_meta(params, [0.2, 0.2], xs, first_order=True)
    assert not np.allclose(full[0], fo[0])


def test_first_order_agrees_when_inner_loss_is_linear():
    rng = np.random.default_rng(6)
    w0, c, x, y = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(4, 3)), rng.normal(size=(4, 2))

    def run(first_order):
        w = E.param(w0)
        inner = E.sum(w * E.constant(c))  # zero Hessian
        outer = lambda th: E.mean(E.tanh(E.constant(x) @ th["l"][0] - E.constant(y)))
        return E.backward_through_update({"l": [w]}, inner, {"l": E.param([0.3])}, outer, first_order=first_order)[w.id]

    assert np.allclose(run(False), run(True), atol=1e-14)
