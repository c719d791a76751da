import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groklab import optim
from groklab.optim import OptimizerConfig, Schedule


def one_step(algo, theta, g, **kw):
    cfg = OptimizerConfig(algo, **kw)
    st_ = optim.init_state(cfg, np.size(theta))
    return optim.step(st_, np.atleast_1d(np.asarray(theta, float)), np.atleast_1d(np.asarray(g, float)))


def test_lr_warmup():
    s = Schedule(1e-4, 10)
    assert optim.lr_at(s, 0) == 0.0
    assert optim.lr_at(s, 5) == pytest.approx(5e-5)
    assert optim.lr_at(s, 10) == 1e-4
    assert optim.lr_at(s, 10_000) == 1e-4
    lrs = [optim.lr_at(s, t) for t in range(30)]
    assert all(a <= b for a, b in zip(lrs, lrs[1:]))
    assert optim.lr_at(Schedule(1e-3, 0), 0) == 1e-3


def test_clip():
    g = np.array([6.0, 8.0])
    c = optim.clip_grad_norm(g, 1.0)
    assert np.linalg.norm(c) == pytest.approx(1.0)
    assert np.allclose(c / np.linalg.norm(c), g / 10)
    small = np.array([0.3, 0.4])
    assert np.array_equal(optim.clip_grad_norm(small, 1.0), small)
    assert np.array_equal(optim.clip_grad_norm(np.zeros(3), 1.0), np.zeros(3))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(1e-3, 10))
def test_clip_bounded_and_idempotent(vals, eta):
    g = np.array(vals)
    c = optim.clip_grad_norm(g, eta)
    assert np.linalg.norm(c) <= eta * (1 + 1e-12)
    np.testing.assert_allclose(optim.clip_grad_norm(c, eta), c, rtol=1e-12, atol=0)


def test_hand_examples():
    assert one_step("adam", 0.0, 1.0, lr=0.1, weight_decay=0.0)[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-15)
    assert one_step("adamw", 1.0, 0.0, lr=1e-4, weight_decay=1.0)[0] == pytest.approx(1 - 1e-4, rel=1e-15)
    assert one_step("sgd", 2.0, 0.5, lr=0.1, weight_decay=0.0)[0] == pytest.approx(1.95, rel=1e-15)


@pytest.mark.parametrize("algo", optim.ALGOS)
def test_zero_gradient_no_decay_is_fixed_point(algo):
    th = np.array([1.0, -2.0, 3.0])
    cfg = OptimizerConfig(algo, lr=0.1, weight_decay=0.0)
    s = optim.init_state(cfg, 3)
    for _ in range(5):
        th2 = optim.step(s, th, np.zeros(3))
        assert np.array_equal(th2, th)
    assert s.t == 5


def test_rprop_depends_only_on_signs(rng):
    cfg = OptimizerConfig("rprop", lr=0.01, weight_decay=0.0)
    a, b = optim.init_state(cfg, 4), optim.init_state(cfg, 4)
    x = y = np.zeros(4)
    for _ in range(20):
        g = rng.standard_normal(4)
        x = optim.step(a, x, g)
        y = optim.step(b, y, 10 * g)
    assert np.array_equal(x, y)


@pytest.mark.parametrize("lam,lr,stable", [(4.0, 0.4, True), (4.0, 0.49, True), (4.0, 0.51, False)])
def test_sgd_quadratic_stability_threshold(lam, lr, stable):
    cfg = OptimizerConfig("sgd", lr=lr, weight_decay=0.0)
    s = optim.init_state(cfg, 1)
    th = np.array([1.0])
    losses = []
    for _ in range(50):
        losses.append(0.5 * lam * th[0] ** 2)
        th = optim.step(s, th, lam * th)
    if stable:
        assert all(b < a for a, b in zip(losses, losses[1:]))
    else:
        assert losses[-1] > losses[0]


def test_non_finite_gradient_raises():
    s = optim.init_state(OptimizerConfig(), 2)
    with pytest.raises(optim.NonFiniteGradient):
        optim.step(s, np.zeros(2), np.array([1.0, np.nan]))


def test_decay_mask_limits_weight_decay():
    cfg = OptimizerConfig("adamw", lr=0.1, weight_decay=1.0)
    s = optim.init_state(cfg, 2, decay_mask=np.array([True, False]))
    th = optim.step(s, np.array([1.0, 1.0]), np.zeros(2))
    assert th[0] == pytest.approx(0.9) and th[1] == 1.0


def test_schedule_as_lr_argument():
    cfg = OptimizerConfig("sgd", lr=1.0, weight_decay=0.0)
    s = optim.init_state(cfg, 1)
    th = optim.step(s, np.array([1.0]), np.array([1.0]), Schedule(1.0, 10))
    assert th[0] == 1.0  # lr is 0 at t = 0
    th = optim.step(s, th, np.array([1.0]), Schedule(1.0, 10))
    assert th[0] == pytest.approx(0.9)


TORCH_CASES = [
    ("sgd", dict(lr=0.05, weight_decay=0.1), lambda t, p: t.optim.SGD(p, lr=0.05, weight_decay=0.1)),
    ("momentum", dict(lr=0.05, weight_decay=0.1, momentum=0.9),
     lambda t, p: t.optim.SGD(p, lr=0.05, momentum=0.9, weight_decay=0.1)),
    ("rmsprop", dict(lr=0.01, weight_decay=0.1, alpha=0.99, eps=1e-8),
     lambda t, p: t.optim.RMSprop(p, lr=0.01, alpha=0.99, eps=1e-8, weight_decay=0.1)),
    ("rprop", dict(lr=0.01, weight_decay=0.0),
     lambda t, p: t.optim.Rprop(p, lr=0.01, etas=(0.5, 1.2), step_sizes=(1e-6, 50))),
    ("adam", dict(lr=0.01, weight_decay=0.1, betas=(0.9, 0.98)),
     lambda t, p: t.optim.Adam(p, lr=0.01, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.1)),
    ("adamax", dict(lr=0.01, weight_decay=0.1, betas=(0.9, 0.98)),
     lambda t, p: t.optim.Adamax(p, lr=0.01, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.1)),
    ("adamw", dict(lr=0.01, weight_decay=1.0, betas=(0.9, 0.98)),
     lambda t, p: t.optim.AdamW(p, lr=0.01, betas=(0.9, 0.98), eps=1e-8, weight_decay=1.0)),
]


@pytest.mark.parametrize("algo,kw,make", TORCH_CASES, ids=[c[0] for c in TORCH_CASES])
def test_matches_independent_reference_implementation(algo, kw, make):
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(7)
    th0 = rng.standard_normal(6)
    A = rng.standard_normal((6, 6))
    A = A @ A.T / 6
    ours = th0.copy()
    s = optim.init_state(OptimizerConfig(algo, **kw), 6)
    p = torch.tensor(th0.copy(), dtype=torch.float64, requires_grad=True)
    opt = make(torch, [p])
    for _ in range(25):
        g = A @ ours + np.sin(ours)
        ours = optim.step(s, ours, g)
        opt.zero_grad()
        pt = p.detach().numpy()
        p.grad = torch.tensor(A @ pt + np.sin(pt), dtype=torch.float64)
        opt.step()
    np.testing.assert_allclose(ours, p.detach().numpy(), rtol=1e-10, atol=1e-12)
