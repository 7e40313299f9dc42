import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from frbattery.neural import (AdamState, Mlp, actor_grad_chain, adam_step, grad, init_mlp, mae_policy_grad,
                              mae_policy_loss, soft_update, td_mae_grad, td_mae_loss)
from oracles import LD, fd_grad_ld, forward_ld, max_rel_error, random_critic, random_policy, weighted_output_fd


def test_identity_layer():
    net = Mlp([np.eye(3)], [np.zeros(3)], ["identity"])
    x = np.array([1.5, -2.0, 0.25])
    assert np.array_equal(net(x), x)


def test_hand_computed_tiny_net():
    W1 = np.array([[1.0, -1.0], [0.5, 2.0]])
    b1 = np.array([0.0, -1.0])
    W2 = np.array([[2.0, 1.0]])
    b2 = np.array([0.5])
    net = Mlp([W1, W2], [b1, b2], ["relu", "identity"])
    x = np.array([1.0, 1.0])
    # z1 = [0, 1.5] -> relu -> [0, 1.5]; z2 = 1.5 + 0.5 = 2
    assert net(x)[0] == pytest.approx(2.0)
    x = np.array([3.0, -1.0])
    # z1 = [4, -1.5] -> [4, 0]; z2 = 8.5
    assert net(x)[0] == pytest.approx(8.5)
    sq = Mlp([np.array([[2.0]])], [np.array([1.0])], ["square"])
    assert sq(np.array([1.0]))[0] == 9.0


def test_policy_outputs_stay_in_box(rng):
    p = random_policy(rng, P_max=7.0)
    X = rng.normal(size=(10_000, 6)) * 100
    Y = p(X)
    assert np.all(Y[:, 0] >= 0) and np.all(Y[:, 0] <= 7)
    assert np.all(np.abs(Y[:, 1]) <= 7)
    Y = p(X, noise=rng.normal(size=(10_000, 2)) * 50)
    assert np.all(Y[:, 0] >= 0) and np.all(Y[:, 0] <= 7) and np.all(np.abs(Y[:, 1]) <= 7)


@pytest.mark.parametrize("k", range(20))
def test_policy_gradient_matches_finite_differences(k):
    rng = np.random.default_rng(1000 + k)
    p = random_policy(rng)
    X = rng.normal(size=(5, 6)) * 3
    Wt = rng.normal(size=(5, 2))
    _, cache = p.forward_cache(X)
    g, _ = p.backward(cache, Wt)
    num = weighted_output_fd(p, X, Wt, g)
    assert max_rel_error(g, num) < 1e-5


@pytest.mark.parametrize("k", range(20))
def test_critic_gradient_matches_finite_differences(k):
    rng = np.random.default_rng(2000 + k)
    c = random_critic(rng)
    XA = rng.normal(size=(5, 8)) * 4
    Wt = rng.normal(size=(5, 1))
    _, cache = c.forward_cache(XA)
    g, _ = c.backward(cache, Wt)
    num = weighted_output_fd(c, XA, Wt, g)
    assert max_rel_error(g, num) < 1e-5


def test_input_gradient_matches_finite_differences(rng):
    c = random_critic(rng)
    XA = rng.normal(size=(3, 8))
    _, cache = c.forward_cache(XA)
    _, dX = c.backward(cache, np.ones((3, 1)))
    h = 1e-5
    num = np.zeros_like(XA)
    for idx in np.ndindex(XA.shape):
        e = np.zeros(XA.shape, dtype=LD)
        e[idx] = h
        num[idx] = float(np.sum(forward_ld(c, XA.astype(LD) + e) - forward_ld(c, XA.astype(LD) - e)) / (2 * h))
    assert max_rel_error(dX.ravel(), num.ravel()) < 1e-5


@pytest.mark.parametrize("k", range(5))
def test_loss_gradients_match_finite_differences(k):
    rng = np.random.default_rng(3000 + k)
    p = random_policy(rng)
    X = rng.normal(size=(6, 6))
    A = np.column_stack([rng.uniform(0, 10, 6), rng.uniform(-10, 10, 6)])
    loss, g = mae_policy_grad(p, X, A)
    w = (p.out_hi - p.out_lo).astype(LD)
    num = fd_grad_ld(p, lambda ps: np.mean(np.abs((forward_ld(p, X, ps) - A) / w)))
    assert max_rel_error(g, num) < 1e-5
    assert loss == pytest.approx(mae_policy_loss(p, X, A)[0])

    c = random_critic(rng)
    XA = rng.normal(size=(6, 8))
    y = rng.normal(size=6) * 200
    _, g = td_mae_grad(c, XA, y)
    s = c.out_scale.astype(LD)
    num = fd_grad_ld(c, lambda ps: np.mean(np.abs((forward_ld(c, XA, ps)[:, 0] - y) / s)))
    assert max_rel_error(g, num) < 1e-5


@pytest.mark.parametrize("k", range(5))
def test_actor_chain_matches_finite_differences(k):
    rng = np.random.default_rng(4000 + k)
    p, c = random_policy(rng), random_critic(rng)
    X = rng.normal(size=(4, 6)) * 2
    q, g = actor_grad_chain(p, c, X)
    cps = [w.astype(LD) for w in c.params()]

    def f(ps):
        A = forward_ld(p, X, ps)
        return np.mean(forward_ld(c, np.hstack([X.astype(LD), A]), cps))

    num = fd_grad_ld(p, f)
    assert max_rel_error(g, num) < 1e-5
    assert q == pytest.approx(float(f([w.astype(LD) for w in p.params()])), rel=1e-12)


def test_zero_loss_gives_zero_gradient(rng):
    p = random_policy(rng)
    X = rng.normal(size=(5, 6))
    loss, g = mae_policy_grad(p, X, p(X))
    assert loss == 0.0
    assert all(np.all(x == 0) for x in g)
    c = random_critic(rng)
    XA = rng.normal(size=(5, 8))
    loss, g = td_mae_grad(c, XA, c(XA)[:, 0])
    assert loss == 0.0 and all(np.all(x == 0) for x in g)


def test_relu_blocks_gradient_at_negative_preactivation():
    net = Mlp([np.array([[1.0]]), np.array([[1.0]])], [np.array([-5.0]), np.zeros(1)], ["relu", "identity"])
    _, cache = net.forward_cache(np.array([[1.0]]))
    g, dX = net.backward(cache, np.ones((1, 1)))
    assert g[0][0, 0] == 0.0 and g[1][0] == 0.0 and dX[0, 0] == 0.0


def test_constant_critic_gives_zero_actor_gradient(rng):
    p = random_policy(rng)
    c = Mlp([np.zeros((1, 8))], [np.array([3.0])], ["identity"])
    q, g = actor_grad_chain(p, c, rng.normal(size=(4, 6)))
    assert q == 3.0
    assert all(np.all(x == 0) for x in g)


def test_actor_gradient_points_toward_quadratic_optimum():
    # policy a = w * x, critic Q = -(a - a_star)^2 built from a square unit
    a_star = 0.7
    pol = Mlp([np.array([[0.2]])], [np.zeros(1)], ["identity"])
    # Q(x, a) = -1 * (a - a_star)^2: hidden unit (a - a_star)^2, output weight -1
    cri = Mlp([np.array([[0.0, 1.0]]), np.array([[-1.0]])], [np.array([-a_star]), np.zeros(1)],
              ["square", "identity"])
    X = np.array([[1.0]])
    _, g = actor_grad_chain(pol, cri, X)
    # dQ/dw = -2 (w - a_star) = 1.0 at w = 0.2
    assert g[0][0, 0] == pytest.approx(-2 * (0.2 - a_star))
    assert g[0][0, 0] > 0


def test_adam_zero_gradient_is_noop(rng):
    p = random_policy(rng)
    before = p.flat_params().copy()
    st_ = AdamState.for_net(p)
    adam_step(p, st_, [np.zeros_like(x) for x in p.params()])
    assert np.array_equal(before, p.flat_params())


def test_adam_first_step_and_constant_gradient_limit():
    net = Mlp([np.array([[0.0, 0.0]])], [np.zeros(1)], ["identity"])
    g = [np.array([[0.3, -2.0]]), np.array([1e-3])]
    st_ = AdamState.for_net(net, lr=0.01)
    adam_step(net, st_, g)
    # first step: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    expected = -0.01 * np.array([0.3, -2.0]) / (np.abs([0.3, -2.0]) + 1e-8)
    np.testing.assert_allclose(net.W[0][0], expected, rtol=1e-12)
    for _ in range(500):
        prev = net.flat_params().copy()
        adam_step(net, st_, g)
    step = np.abs(net.flat_params() - prev)
    np.testing.assert_allclose(step, 0.01, rtol=1e-4)
    adam_step(net, st_, g, ascend=True)
    assert net.W[0][0, 0] > prev[0] - 0.011


def test_soft_update_contracts(rng):
    a, b = random_critic(rng), random_critic(rng)
    d0 = np.linalg.norm(a.flat_params() - b.flat_params())
    soft_update(a, b, 0.25)
    d1 = np.linalg.norm(a.flat_params() - b.flat_params())
    assert d1 == pytest.approx(0.75 * d0)
    t = a.flat_params().copy()
    soft_update(a, b, 0.0)
    assert np.array_equal(a.flat_params(), t)
    soft_update(a, b, 1.0)
    assert np.array_equal(a.flat_params(), b.flat_params())
    with pytest.raises(ValueError):
        soft_update(a, b, 1.5)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_serialization_round_trip_bitwise(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    p = random_policy(rng)
    path = tmp_path_factory.mktemp("nets") / "p.json"
    p.save(path)
    q = Mlp.load(path)
    X = rng.normal(size=(50, 6)) * 10
    assert np.array_equal(p(X), q(X))
    c = random_critic(rng)
    c2 = Mlp.from_dict(c.to_dict())
    XA = rng.normal(size=(50, 8))
    assert np.array_equal(c(XA), c2(XA))


def test_deterministic_forward_and_seeded_init():
    a = init_mlp((6, 30, 15, 2), ("relu", "relu", "tanh"), 5)
    b = init_mlp((6, 30, 15, 2), ("relu", "relu", "tanh"), 5)
    assert np.array_equal(a.flat_params(), b.flat_params())
    assert all(np.all(x == 0) for x in a.b)
    lim = np.sqrt(6.0 / 6)
    assert np.abs(a.W[0]).max() <= lim
    lim_t = np.sqrt(6.0 / (15 + 2))
    assert np.abs(a.W[2]).max() <= lim_t


def test_validation_and_dispatch(rng):
    with pytest.raises(ValueError):
        Mlp([np.eye(2)], [np.zeros(3)], ["relu"])
    with pytest.raises(ValueError):
        Mlp([np.eye(2)], [np.zeros(2)], ["sigmoid"])
    with pytest.raises(ValueError):
        Mlp([np.eye(2)], [np.zeros(2)], ["relu"], out_lo=[0, 0], out_hi=[1, 1])
    p = random_policy(rng)
    with pytest.raises(ValueError):
        p(np.zeros(5))
    with pytest.raises(ValueError):
        p.set_output_scaler(np.zeros(4))
    with pytest.raises(ValueError):
        grad(p, "huber", (None, None))
    X = rng.normal(size=(3, 6))
    A = p(X) + 0.1
    assert grad(p, "mae_policy", (X, A))[0] == pytest.approx(mae_policy_loss(p, X, A)[0])
    with pytest.raises(ValueError):
        Mlp.from_dict({"format": "other"})
    c = random_critic(rng)
    XA = rng.normal(size=(3, 8))
    assert grad(c, "td_mae", (XA, np.zeros(3)))[0] == pytest.approx(td_mae_loss(c, XA, np.zeros(3))[0])
