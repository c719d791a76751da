import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groklab import curvature as cv, data, models


def diag_op(d):
    d = np.asarray(d, dtype=float)
    return lambda v: d * v


def test_diag_quadratic_extremes():
    e = cv.extremal_eigs(diag_op([1, 5, 10]), 3, tol=1e-10, max_iter=2000)
    assert e.lambda_max == pytest.approx(10, abs=1e-6)
    assert e.lambda_min == pytest.approx(1, abs=1e-6)
    assert e.converged and e.residual_max <= 1e-9 and e.residual_min <= 1e-9
    assert e.paper_condition == pytest.approx(0.1, abs=1e-7)


def test_negative_curvature_detected():
    e = cv.extremal_eigs(diag_op([-2, 3]), 2, tol=1e-10, max_iter=2000)
    assert e.lambda_min == pytest.approx(-2, abs=1e-6) and e.lambda_max == pytest.approx(3, abs=1e-6)
    e = cv.extremal_eigs(diag_op([-10, 1, 0.5]), 3, tol=1e-10, max_iter=2000)
    assert e.lambda_min == pytest.approx(-10, abs=1e-6) and e.lambda_max == pytest.approx(1, abs=1e-6)
    assert e.lambda_max >= e.lambda_min


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8, unique=True), st.floats(0.01, 100), st.integers(0, 99))
def test_rotated_spectra_and_scaling(eigs, c, seed):
    eigs = np.array(eigs)
    if np.min(np.abs(np.diff(np.sort(eigs)))) < 1e-2 * max(np.abs(eigs).max(), 1):
        return  # nearly degenerate extremes converge too slowly for this check
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((eigs.size, eigs.size)))
    A = q @ np.diag(eigs) @ q.T
    e = cv.extremal_eigs(lambda v: A @ v, eigs.size, tol=1e-10, max_iter=20000)
    ec = cv.extremal_eigs(lambda v: c * (A @ v), eigs.size, tol=1e-10, max_iter=20000)
    scale = np.abs(eigs).max()
    assert e.lambda_max == pytest.approx(eigs.max(), abs=1e-6 * scale)
    assert e.lambda_min == pytest.approx(eigs.min(), abs=1e-6 * scale)
    assert ec.lambda_max == pytest.approx(c * e.lambda_max, rel=1e-6, abs=1e-6 * c * scale)
    if e.converged:
        assert e.residual_max <= 1e-9 and e.residual_min <= 1e-9


def test_non_convergence_is_flagged():
    e = cv.extremal_eigs(diag_op(np.linspace(1, 1.001, 50)), 50, tol=1e-14, max_iter=3)
    assert not e.converged_max


def test_condition_track_scale_invariant():
    pts = cv.condition_track(lambda th: diag_op([1, 5, 10]), [(0, np.zeros(3)), (10, np.ones(3))], tol=1e-10,
                             max_iter=2000)
    two = cv.condition_track(lambda th: diag_op([2, 10, 20]), [(0, np.zeros(3))], tol=1e-10, max_iter=2000)
    assert [p.step for p in pts] == [0, 10]
    assert pts[0].paper_condition == pytest.approx(0.1, abs=1e-7)
    assert two[0].paper_condition == pytest.approx(pts[0].paper_condition, abs=1e-7)
    zero = cv.condition_track(lambda th: diag_op([0.0, 0.0]), [(0, np.zeros(2))])
    assert zero[0].paper_condition is None


@pytest.fixture(scope="module")
def tiny():
    ds = data.build_dataset("mod_add", 7)
    x, y = data.batch_encode(np.arange(len(ds)), ds)
    m = models.Model(models.ModelConfig(arch="mlp", width=8, hidden=16, vocab_size=9, n_classes=7))
    return m, m.init_params(0).values, x, y


def test_lambda_max_matches_dense_hessian(tiny):
    m, th, x, y = tiny
    hv = lambda v: models.hvp(m, th, x, y, v)
    H = cv.dense_hessian(hv, th.size)
    ev = np.linalg.eigvalsh(H)
    e = cv.extremal_eigs(hv, th.size, tol=1e-6, max_iter=3000)
    assert abs(e.lambda_max - ev[-1]) <= 1e-5 * abs(ev[-1])
    assert abs(e.lambda_min - ev[0]) <= 1e-4 * abs(ev[-1])
    assert e.converged


def test_expansion_exact_on_quadratic(rng):
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    A = q @ np.diag([0.5, 1, 2, 3, 4]) @ q.T
    b = rng.standard_normal(5)
    loss = lambda t: 0.5 * t @ A @ t + b @ t
    grad = lambda t: A @ t + b
    th = rng.standard_normal(5)
    for eps in (1e-3, 0.1, 0.5):
        chk = cv.sgd_expansion_check(loss, grad, lambda v: A @ v, th, eps)
        assert chk.gap <= 1e-10


def test_expansion_instability_threshold():
    lam = 4.0
    loss = lambda t: 0.5 * lam * float(t @ t)
    grad = lambda t: lam * t
    th = np.array([1.0])
    assert cv.sgd_expansion_check(loss, grad, lambda v: lam * v, th, 0.6).predicted > 0
    assert cv.sgd_expansion_check(loss, grad, lambda v: lam * v, th, 0.4).predicted < 0


def test_expansion_gap_is_third_order_on_mlp(tiny):
    m, th, x, y = tiny
    loss = lambda t: models.forward_loss(m, t, x, y).loss
    grad = lambda t: models.backward(m, t, x, y)
    hv = lambda v: models.hvp(m, th, x, y, v)
    gaps = [cv.sgd_expansion_check(loss, grad, hv, th, eps).gap for eps in (4e-2, 2e-2, 1e-2)]
    # halving eps shrinks an O(eps^3) gap by ~8
    assert gaps[0] / gaps[1] == pytest.approx(8, rel=0.15)
    assert gaps[1] / gaps[2] == pytest.approx(8, rel=0.15)
    small = cv.sgd_expansion_check(loss, grad, hv, th, 1e-4)
    assert small.gap <= 1e-3 * small.step_size**2 * abs(small.actual / small.step_size)


def test_pca_planar_and_collinear(rng):
    n = 50
    o, u, v = rng.standard_normal((3, n))
    steps = range(40)
    plane = [(t, o + np.cos(t / 7) * u + t * 0.1 * v) for t in steps]
    p = cv.pca_trajectory(plane)
    assert p.explained.sum() == pytest.approx(1.0, abs=1e-9)
    assert p.explained[0] >= p.explained[1]
    np.testing.assert_allclose(p.directions @ p.directions.T, np.eye(2), atol=1e-12)
    line = [(t, o + t * u) for t in steps]
    q = cv.pca_trajectory(line)
    assert q.explained[0] == pytest.approx(1.0, abs=1e-12)
    assert q.explained[1] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        cv.pca_trajectory(plane[:2])


def test_pca_reconstruction_identity(rng):
    pts = [(t, rng.standard_normal(30) + 0.1 * t) for t in range(25)]
    p = cv.pca_trajectory(pts)
    M = np.stack([v - pts[-1][1] for _, v in pts[:-1]])
    recon = np.outer(p.alpha, p.directions[0]) + np.outer(p.beta, p.directions[1])
    resid = np.sum((M - recon) ** 2)
    assert resid == pytest.approx((1 - p.explained.sum()) * p.total_variance, rel=1e-6)


def test_pca_thinning_keeps_last():
    items = list(range(1234))
    kept = cv.thin(items, 500)
    assert len(kept) <= 500 and kept[-1] == 1233 and kept[0] == 0


def test_cosine_track(rng):
    v = rng.standard_normal(10)
    assert cv.cosine(v, v) == 1.0
    assert cv.cosine(v, -v) == -1.0
    tr = cv.cosine_track([(0, v), (1, 2 * v), (2, -v)])
    assert tr[0] == (0, 1.0, 1.0)
    assert tr[1][1] == -1.0
    with pytest.raises(ValueError):
        cv.cosine(v, np.zeros(10))


def test_csv_outputs(tmp_path, rng):
    pts = cv.condition_track(lambda th: diag_op([1, 2]), [(5, np.zeros(2))])
    cv.write_curvature_csv(tmp_path / "c.csv", pts)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == \
        "step,lambda_max,lambda_min,paper_condition,converged_max,converged_min"
    p = cv.pca_trajectory([(t, rng.standard_normal(5)) for t in range(6)])
    cv.write_pca_csv(tmp_path / "p.csv", p)
    steps, a, b, ex = cv.read_pca_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(a, p.alpha)
    assert ex == list(p.explained)
