"""Acceptance checks, one recorded PASS/FAIL line per criterion.

The long training experiments are marked ``slow``; they still run by default.
The full-scale transformer reproduction takes hours on a CPU and only runs
with GROKLAB_FULL=1 in the environment.
"""
import os
import time

import numpy as np
import pytest
from conftest import fast_config, record
from scipy.stats import pearsonr, spearmanr

from groklab import curvature as cv
from groklab import data, harness, landscape as ls, models, spectral, testfn
from groklab import intrinsic_dim as idm
from groklab.config import RunConfig


def rel_inf(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def tiny_mlp():
    ds = data.build_dataset("mod_add", 7)
    x, y = data.batch_encode(np.arange(len(ds)), ds)
    m = models.Model(models.ModelConfig(arch="mlp", width=8, hidden=16, vocab_size=9, n_classes=7))
    return m, m.init_params(0).values, x, y


@pytest.fixture(scope="module")
def grok_run():
    t0 = time.perf_counter()
    # the default 10-step checkpoint stride; the PCA check reads these checkpoints
    res = harness.train(fast_config(checkpoint_stride=10))
    return res, time.perf_counter() - t0


# ---------------------------------------------------------------- 1


@pytest.mark.slow
def test_c01_fast_grokking_variant(grok_run):
    res, elapsed = grok_run
    m = res.marks
    ok = (m.t2 is not None and m.t4 is not None and m.t4 - m.t2 >= 2 * m.t2 and elapsed <= 300)
    record(1, ok, f"fast variant (mlp, p=31, r=0.5, 4k steps): t2={m.t2} t4={m.t4} in {elapsed:.0f}s "
                  f"(need t4 - t2 >= 2 t2, <= 300s)")
    assert ok


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("GROKLAB_FULL") != "1", reason="full-scale run takes hours; set GROKLAB_FULL=1")
def test_c01_reference_transformer():
    good = []
    for seed in (0, 1, 2):
        cfg = RunConfig.from_dict({
            "task": {"op_kind": "mod_add", "p": 97, "q": 97, "r": 0.5, "seed": seed},
            "optimizer": {"algo": "adamw", "lr": 1e-4, "weight_decay": 1.0, "betas": [0.9, 0.98]},
            "warmup_steps": 10, "budget": 10_000, "checkpoint_stride": 0,
        })
        m = harness.train(cfg).marks
        good.append(m.t2 is not None and m.t2 <= 1000 and m.t4 is not None and m.t4 - m.t2 >= 5 * m.t2)
        print(f"seed {seed}: {m}")
    ok = sum(good) >= 2
    record(1, ok, f"reference transformer p=97: {sum(good)}/3 seeds with t2 <= 1000 and t4 - t2 >= 5 t2")
    assert ok


def test_c01_reference_transformer_gate_notice():
    if os.environ.get("GROKLAB_FULL") == "1":
        pytest.skip("full run requested")
    record(1, None, "reference transformer p=97 (hours on CPU) not run; set GROKLAB_FULL=1")


# ---------------------------------------------------------------- 2


@pytest.mark.slow
def test_c02_spectral_activity_rank_correlation():
    base = fast_config(checkpoint_stride=0)
    grid = [(lr, wd, 0.5, 0) for lr in (1e-4, 3e-4, 1e-3, 3e-3) for wd in (0.0, 0.1, 0.3, 1.0)]
    res = harness.sweep(base, grid)
    assert all(s.error is None for s in res)
    rho = spearmanr([s.activity for s in res], [s.final_val_acc for s in res]).statistic
    ok = bool(rho > 0)
    record(2, ok, f"4x4 lr x wd sweep: Spearman(activity, final val_acc) = {rho:.3f} (need > 0)")
    assert ok


# ---------------------------------------------------------------- 3


def test_c03_spectral_exactness():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(int(rng.integers(8, 2000))) * rng.uniform(0.1, 10)
        e = spectral.periodogram(x).energy
        worst = max(worst, abs(e.sum() - x @ x) / (x @ x))
    n, w0 = 4096, 0.3
    sig = spectral.hjorth(np.sin(w0 * np.arange(n)))
    mob, comp = abs(sig.mobility - w0) / w0, abs(sig.complexity - w0) / w0
    y = rng.standard_normal(400).cumsum()
    c = 3.7
    eq = abs(spectral.hjorth(c * y).activity - c**2 * spectral.hjorth(y).activity) / (c**2 * spectral.hjorth(y).activity)
    ok = worst <= 1e-9 and mob <= 0.01 and comp <= 0.01 and eq <= 1e-9
    record(3, ok, f"Parseval {worst:.1e} (<= 1e-9); sine mobility/complexity off by {mob:.1e}/{comp:.1e} (<= 1e-2); "
                  f"scale equivariance {eq:.1e} (<= 1e-9)")
    assert ok


# ---------------------------------------------------------------- 4


def test_c04_gradient_and_hvp():
    m, th, x, y = tiny_mlp()
    g = models.backward(m, th, x, y)
    h = 1e-5
    fd = np.empty_like(th)
    for i in range(th.size):
        e = np.zeros_like(th)
        e[i] = h
        fd[i] = (models.forward_loss(m, th + e, x, y).loss - models.forward_loss(m, th - e, x, y).loss) / (2 * h)
    g_err = rel_inf(g, fd)
    rng = np.random.default_rng(4)
    u, v = rng.standard_normal((2, th.size))
    hv, hu = models.hvp(m, th, x, y, v), models.hvp(m, th, x, y, u)
    hfd = (models.backward(m, th + 1e-4 * v, x, y) - models.backward(m, th - 1e-4 * v, x, y)) / 2e-4
    h_err = rel_inf(hv, hfd)
    sym = abs(u @ hv - v @ hu) / abs(u @ hv)
    ok = g_err <= 1e-6 and h_err <= 1e-4 and sym <= 1e-8
    record(4, ok, f"mlp(width=8): grad rel err {g_err:.1e} (<= 1e-6), hvp {h_err:.1e} (<= 1e-4), "
                  f"symmetry {sym:.1e} (<= 1e-8)")
    assert ok


# ---------------------------------------------------------------- 5


def test_c05_extremal_eigenvalues():
    errs = []
    for d in ([1.0, 5.0, 10.0], [-2.0, 3.0], [0.1, 0.2, 7.0, 40.0]):
        d = np.array(d)
        e = cv.extremal_eigs(lambda v, d=d: d * v, d.size, tol=1e-10, max_iter=5000)
        errs += [abs(e.lambda_max - d.max()), abs(e.lambda_min - d.min())]
    diag_err = max(errs)
    m, th, x, y = tiny_mlp()
    hv = lambda v: models.hvp(m, th, x, y, v)
    lam = np.linalg.eigvalsh(cv.dense_hessian(hv, th.size))[-1]
    e = cv.extremal_eigs(hv, th.size, tol=1e-6, max_iter=3000)
    dense_err = abs(e.lambda_max - lam) / abs(lam)
    rng = np.random.default_rng(5)
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    A = q @ np.diag([0.5, 1, 2, 3, 4]) @ q.T
    b = rng.standard_normal(5)
    quad_gap = max(cv.sgd_expansion_check(lambda t: 0.5 * t @ A @ t + b @ t, lambda t: A @ t + b,
                                          lambda v: A @ v, rng.standard_normal(5), eps).gap
                   for eps in (1e-3, 0.1, 0.5))
    loss = lambda t: models.forward_loss(m, t, x, y).loss
    grad = lambda t: models.backward(m, t, x, y)
    gaps = [cv.sgd_expansion_check(loss, grad, hv, th, eps).gap for eps in (4e-2, 2e-2, 1e-2)]
    ratios = (gaps[0] / gaps[1], gaps[1] / gaps[2])
    cubic = all(abs(r - 8) <= 0.15 * 8 for r in ratios)
    ok = diag_err <= 1e-6 and dense_err <= 1e-5 and quad_gap <= 1e-10 and cubic
    record(5, ok, f"diag oracles {diag_err:.1e} (<= 1e-6); dense-Hessian lambda_max {dense_err:.1e} (<= 1e-5); "
                  f"quadratic expansion gap {quad_gap:.1e} (<= 1e-10); mlp gap ratios at eps/2 "
                  f"{ratios[0]:.2f}, {ratios[1]:.2f} (O(eps^3) -> 8)")
    assert ok


# ---------------------------------------------------------------- 6


def test_c06_filter_normalization():
    m = models.Model(models.ModelConfig(arch="transformer", width=8, depth=1, heads=2, hidden=16, vocab_size=9,
                                        n_classes=7))
    th = m.init_params(0)
    th.values[m.layout["ln_f.b"].offset : m.layout["ln_f.b"].stop] = np.linspace(-1, 1, 8)
    rng = np.random.default_rng(6)
    idem = scale = norms = 0.0
    for _ in range(10):
        d = rng.standard_normal(m.n_params)
        n1 = ls.filter_normalize(d, th).values
        idem = max(idem, rel_inf(ls.filter_normalize(n1, th).values, n1))
        scale = max(scale, rel_inf(ls.filter_normalize(rng.uniform(1e-3, 1e3) * d, th).values, n1))
        for spec in m.layout:
            b = spec.filter_bounds()
            if b:
                for lo, hi in zip(b[:-1], b[1:]):
                    t = np.linalg.norm(th.values[lo:hi])
                    norms = max(norms, abs(np.linalg.norm(n1[lo:hi]) - t) / t)
    fixed = rel_inf(ls.filter_normalize(th.values.copy(), th).values, th.values)
    ok = idem <= 1e-12 and scale <= 1e-12 and norms <= 1e-12 and fixed <= 1e-12
    record(6, ok, f"idempotence {idem:.1e}, scale invariance {scale:.1e}, filter norms {norms:.1e}, "
                  f"self fixed point {fixed:.1e} (all <= 1e-12)")
    assert ok


# ---------------------------------------------------------------- 7


def test_c07_slices():
    m = models.Model(models.ModelConfig(arch="transformer", width=8, depth=1, heads=2, hidden=16, vocab_size=9,
                                        n_classes=7))
    th = m.init_params(0)
    ds = data.build_dataset("mod_add", 7)
    sp = data.split(ds, 0.5, 0)
    tb, vb = data.batch_encode(sp.train, ds), data.batch_encode(sp.val, ds)
    d = ls.filter_normalize(np.random.default_rng(7).standard_normal(m.n_params), th)
    alphas = ls.alpha_grid(-1, 1, 21)
    sl = ls.slice_1d(ls.model_evaluator(m, tb, vb), th, d, alphas)
    anchor = abs(sl.train_loss[np.flatnonzero(alphas == 0)[0]] - models.forward_loss(m, th, *tb).loss)
    quad = ls.function_evaluator(lambda t: 0.5 * float(t @ t))
    u, v = np.eye(6)[2], np.eye(6)[4]
    a = ls.alpha_grid(-3, 3, 201)
    err1 = np.max(np.abs(ls.slice_1d(quad, np.zeros(6), u, a).train_loss - 0.5 * a**2))
    g = ls.alpha_grid(-1, 2, 31)
    A, B = np.meshgrid(g, g, indexing="ij")
    err2 = np.max(np.abs(ls.slice_2d(quad, np.zeros(6), u, v, g, g).train_loss - 0.5 * (A**2 + B**2)))
    ok = anchor <= 1e-9 and err1 <= 1e-9 and err2 <= 1e-9
    record(7, ok, f"f(0) vs anchor loss {anchor:.1e}; quadratic 1D {err1:.1e}, 2D {err2:.1e} (all <= 1e-9)")
    assert ok


# ---------------------------------------------------------------- 8


def test_c08_power_law_noiseless():
    r = np.linspace(0.2, 0.8, 7)
    a, gam, b = 7.5, 2.5, 1400.0
    fit = harness.fit_power_law(zip(r, a * r**-gam + b))
    err = max(abs(fit.a - a) / a, abs(fit.gamma - gam) / gam, abs(fit.b - b) / b)
    ok = err <= 1e-6
    record(8, ok, f"noiseless (a, gamma, b) recovered to {err:.1e} relative (<= 1e-6)")
    assert ok


@pytest.mark.slow
def test_c08_power_law_desk_sweep():
    rs = (0.3, 0.4, 0.5, 0.6, 0.7)
    res = harness.sweep(fast_config(checkpoint_stride=0), [(3e-3, 1.0, r, 0) for r in rs])
    pts = [(s.r, s.marks.t4) for s in res if s.marks.t4 is not None]
    fit = harness.fit_power_law(pts)
    grid = np.linspace(*fit.r_range, 200)
    decreasing = bool(np.all(np.diff(fit.predict(grid)) < 0))
    ok = len(pts) >= 3 and decreasing
    record(8, ok, f"desk r-sweep t4 = {dict(pts)}; fit a={fit.a:.3g} gamma={fit.gamma:.3g} b={fit.b:.4g}, "
                  f"decreasing in r: {decreasing}")
    assert ok


# ---------------------------------------------------------------- 9


def test_c09_intrinsic_dimension():
    t0 = time.perf_counter()
    worst = 0.0
    cases = []
    for kind in ("cube", "gaussian", "sphere", "torus"):
        for d in (1, 2, 4, 8):
            x = idm.sample_manifold(kind, d, 2000, 128, seed=1)
            mle, tw = idm.mle_id(x, 2, "inverse").value, idm.twonn_id(x).value
            err = max(abs(mle - d), abs(tw - d)) / d
            worst = max(worst, err)
            cases.append(f"{kind}{d}")
    hand = abs(idm.mle_local(np.array([1.0, 2.0, 4.0]))[0] - 2 / (3 * np.log(2)))
    rows = idm.synthetic_battery()
    rho = pearsonr([r.mle for r in rows], [r.twonn for r in rows]).statistic
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.15 and hand <= 1e-12 and rho >= 0.95 and elapsed <= 120
    record(9, ok, f"{len(cases)} manifolds d in {{1,2,4,8}}: worst relative error {worst:.3f} (<= 0.15); "
                  f"hand example {hand:.1e}; battery Pearson {rho:.4f} (>= 0.95); {elapsed:.0f}s (<= 120s)")
    assert ok


# ---------------------------------------------------------------- 10


def test_c10_test_functions():
    rng = np.random.default_rng(10)
    worst = 0.0
    for spec in (testfn.TestFnSpec("rosenbrock_chained", 4, log_scale=True), testfn.TestFnSpec("rastrigin", 3),
                 testfn.TestFnSpec("rosenbrock_pairwise", 4)):
        for _ in range(50):
            x = rng.uniform(-2, 2, spec.n)
            _, g = testfn.eval_grad(spec, x)
            fd = np.array([(testfn.value(spec, x + 1e-6 * e) - testfn.value(spec, x - 1e-6 * e)) / 2e-6
                           for e in np.eye(spec.n)])
            worst = max(worst, np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1.0))
    t0 = time.perf_counter()
    ros = testfn.race(testfn.TestFnSpec("rosenbrock_chained", 2, log_scale=True), x0=(-2.0, 2.0), steps=10_000)
    ras = testfn.race(testfn.TestFnSpec("rastrigin", 2, log_scale=True), x0=(2.5, 2.5), steps=10_000)
    elapsed = time.perf_counter() - t0
    quartet = all(ros.entries[k].reached for k in ("rmsprop", "rprop", "adam", "adamax"))
    sgd_short = not ros.entries["sgd"].reached
    none_ras = not any(e.reached for e in ras.entries.values())
    ok = worst <= 1e-7 and quartet and sgd_short and none_ras and elapsed <= 30
    finals = ", ".join(f"{k} {e.final_error:.1e}" for k, e in ros.entries.items())
    record(10, ok, f"grad err {worst:.1e} (<= 1e-7); log-Rosenbrock final errors {finals}; quartet reached "
                   f"{quartet}, sgd short {sgd_short}; log-Rastrigin none reached {none_ras}; {elapsed:.1f}s (<= 30s)")
    assert ok


# ---------------------------------------------------------------- 11


@pytest.mark.slow
def test_c11_trajectory_analysis(grok_run):
    rng = np.random.default_rng(11)
    o, u, v = rng.standard_normal((3, 200))
    plane = cv.pca_trajectory([(t, o + np.sin(t / 5) * u + t * v) for t in range(60)])
    planar = abs(plane.explained.sum() - 1.0)
    res, _ = grok_run
    pca = cv.pca_trajectory([(s, res.checkpoints[s]) for s in res.checkpoint_steps()])
    top2 = float(pca.explained.sum())
    cos = res.trace.column("cos_prev")
    spikes = set(harness.loss_spikes(res.trace.train_loss).tolist())
    calm = np.array([c for t, c in enumerate(cos) if t not in spikes])
    ok = planar <= 1e-9 and res.marks.t4 is not None and top2 >= 0.9 and calm.min() >= 0.999
    record(11, ok, f"planar PCA |sum - 1| {planar:.1e} (<= 1e-9); grokking run top-2 explained {top2:.4f} "
                   f"(>= 0.9); min cos(theta_t, theta_t+1) outside {len(spikes)} spike steps {calm.min():.6f} "
                   f"(>= 0.999)")
    assert ok


# ---------------------------------------------------------------- 12


@pytest.mark.slow
def test_c12_clipping_slows_but_does_not_prevent(grok_run):
    base, _ = grok_run
    clipped = harness.train(fast_config(clip={"enabled": True, "eta": 1e-6}, checkpoint_stride=0))
    t4u, t4c = base.marks.t4, clipped.marks.t4
    ok = t4u is not None and t4c is not None and t4c >= t4u
    record(12, ok, f"gradient-norm clipping eta=1e-6: t4 clipped {t4c} vs unclipped {t4u} (need reached and >=)")
    assert ok
