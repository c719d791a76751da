"""Extremal Hessian eigenvalues, the SGD expansion diagnostic, trajectory PCA and cosine tracks."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

HVP = Callable[[np.ndarray], np.ndarray]


@dataclass
class PowerResult:
    value: float
    vector: np.ndarray
    iterations: int
    residual: float
    converged: bool


@dataclass
class CurvatureEstimate:
    lambda_max: float
    lambda_min: float
    v_max: np.ndarray
    v_min: np.ndarray
    iterations: tuple[int, int]
    residual_max: float
    residual_min: float
    converged_max: bool
    converged_min: bool

    @property
    def converged(self) -> bool:
        return self.converged_max and self.converged_min

    @property
    def paper_condition(self) -> float | None:
        """lambda_min / lambda_max (the reciprocal of the classical condition number)."""
        if self.lambda_max == 0:
            return None
        return self.lambda_min / self.lambda_max


def power_iteration(op: HVP, n: int, tol: float = 1e-8, max_iter: int = 500, seed: int = 0,
                    scale: float | None = None) -> PowerResult:
    """Dominant eigenpair of a symmetric operator.

    Stops when ||A v - lambda v|| <= tol * scale with scale defaulting to
    |lambda|. The residual reported is that same relative quantity.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    lam, res, it = 0.0, np.inf, 0
    for it in range(1, max_iter + 1):
        w = op(v)
        lam = float(v @ w)
        ref = scale if scale is not None else abs(lam)
        res = float(np.linalg.norm(w - lam * v)) / ref if ref > 0 else float(np.linalg.norm(w - lam * v))
        if res <= tol:
            return PowerResult(lam, v, it, res, True)
        nw = np.linalg.norm(w)
        if nw == 0:
            # v lies in the null space; lambda = 0 exactly
            return PowerResult(0.0, v, it, 0.0, True)
        v = w / nw
    return PowerResult(lam, v, it, res, False)


def extremal_eigs(hvp: HVP, n: int, tol: float = 1e-8, max_iter: int = 500, seed: int = 0) -> CurvatureEstimate:
    """lambda_max and lambda_min of a symmetric operator given only H v products.

    Power iteration finds the eigenvalue of largest magnitude mu. The other
    end of the spectrum comes from a second power iteration on the shifted,
    positive semidefinite operator (mu I - H) when mu >= 0, or (H - mu I) when
    mu < 0. Residuals are relative to |mu| for both ends.
    """
    dom = power_iteration(hvp, n, tol, max_iter, seed)
    mu = dom.value
    scale = abs(mu) if mu != 0 else 1.0
    if mu >= 0:
        shifted = power_iteration(lambda v: mu * v - hvp(v), n, tol, max_iter, seed + 1, scale)
        other = PowerResult(mu - shifted.value, shifted.vector, shifted.iterations, shifted.residual, shifted.converged)
        hi, lo = dom, other
    else:
        shifted = power_iteration(lambda v: hvp(v) - mu * v, n, tol, max_iter, seed + 1, scale)
        other = PowerResult(mu + shifted.value, shifted.vector, shifted.iterations, shifted.residual, shifted.converged)
        hi, lo = other, dom
    # residuals measured directly on H, relative to the spectral scale
    res_hi = float(np.linalg.norm(hvp(hi.vector) - hi.value * hi.vector)) / scale
    res_lo = float(np.linalg.norm(hvp(lo.vector) - lo.value * lo.vector)) / scale
    return CurvatureEstimate(
        hi.value, lo.value, hi.vector, lo.vector, (hi.iterations, lo.iterations),
        res_hi, res_lo, hi.converged and res_hi <= tol * 10, lo.converged and res_lo <= tol * 10,
    )


def dense_hessian(hvp: HVP, n: int) -> np.ndarray:
    """Assemble H column by column from n HVPs (oracle for tiny models)."""
    H = np.empty((n, n))
    e = np.zeros(n)
    for i in range(n):
        e[i] = 1.0
        H[:, i] = hvp(e)
        e[i] = 0.0
    return 0.5 * (H + H.T)


@dataclass
class ConditionPoint:
    step: int
    estimate: CurvatureEstimate

    @property
    def paper_condition(self) -> float | None:
        return self.estimate.paper_condition


def condition_track(hvp_at: Callable[[np.ndarray], HVP], checkpoints, tol: float = 1e-4, max_iter: int = 200,
                    seed: int = 0) -> list[ConditionPoint]:
    """``hvp_at(theta)`` returns the HVP operator at theta; ``checkpoints`` is (step, theta) pairs."""
    out = []
    for step, theta in checkpoints:
        theta = np.asarray(getattr(theta, "values", theta), dtype=np.float64)
        out.append(ConditionPoint(int(step), extremal_eigs(hvp_at(theta), theta.size, tol, max_iter, seed)))
    if not out:
        raise ValueError("need at least one checkpoint")
    return out


@dataclass
class ExpansionCheck:
    step_size: float
    predicted: float
    actual: float

    @property
    def gap(self) -> float:
        return abs(self.predicted - self.actual)

    @property
    def gap_over_eps2(self) -> float:
        return self.gap / self.step_size**2


def sgd_expansion_check(loss: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray], hvp: HVP,
                        theta, step_size: float = 1e-3) -> ExpansionCheck:
    """Second-order prediction of the loss change after one SGD step versus the real change.

    ``hvp`` is the Hessian-vector product at theta.
    """
    theta = np.asarray(getattr(theta, "values", theta), dtype=np.float64)
    g = np.asarray(grad(theta), dtype=np.float64)
    eps = float(step_size)
    predicted = -eps * float(g @ g) + 0.5 * eps**2 * float(g @ hvp(g))
    actual = float(loss(theta - eps * g)) - float(loss(theta))
    return ExpansionCheck(eps, predicted, actual)


@dataclass
class TrajectoryPCA:
    steps: np.ndarray
    directions: np.ndarray  # (2, n), orthonormal rows
    alpha: np.ndarray
    beta: np.ndarray
    explained: np.ndarray  # top-2 explained-variance ratios
    singular_values: np.ndarray
    total_variance: float


def thin(items: list, max_items: int) -> list:
    """Uniform stride so at most ``max_items`` remain; the last item is always kept."""
    if len(items) <= max_items:
        return list(items)
    n = len(items)
    stride = -(-n // max_items)
    idx = list(range(0, n, stride))
    if idx[-1] != n - 1:
        idx = idx[: max_items - 1] + [n - 1]
    return [items[i] for i in idx]


def pca_trajectory(checkpoints, max_checkpoints: int = 500) -> TrajectoryPCA:
    """PCA of M = [theta_t - theta_T] over (step, theta) pairs ordered by step.

    Uses the m x m Gram matrix of the rows, so nothing of size n x n is formed.
    Directions are uncentered: the final checkpoint is the origin.
    """
    items = sorted(((int(s), np.asarray(getattr(v, "values", v), dtype=np.float64)) for s, v in checkpoints),
                   key=lambda p: p[0])
    if len(items) < 3:
        raise ValueError("PCA needs at least 3 checkpoints")
    items = thin(items, max_checkpoints)
    steps = np.array([s for s, _ in items[:-1]])
    final = items[-1][1]
    M = np.stack([v - final for _, v in items[:-1]])
    G = M @ M.T
    evals, evecs = np.linalg.eigh(G)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = float(np.trace(G))
    if total <= 0:
        raise ValueError("all checkpoints coincide with the final one")
    dirs = []
    for i in range(2):
        s = np.sqrt(evals[i]) if i < evals.size else 0.0
        if s > 1e-12 * np.sqrt(total):
            d = M.T @ evecs[:, i] / s
        else:
            # no variance left: any unit vector orthogonal to the previous directions
            d = np.random.default_rng(i).standard_normal(M.shape[1])
        for prev in dirs:
            d = d - (d @ prev) * prev
        dirs.append(d / np.linalg.norm(d))
    D = np.stack(dirs)
    proj = M @ D.T
    sv = np.sqrt(evals[:2]) if evals.size >= 2 else np.append(np.sqrt(evals), 0.0)
    explained = np.array([float(proj[:, 0] @ proj[:, 0]), float(proj[:, 1] @ proj[:, 1])]) / total
    return TrajectoryPCA(steps, D, proj[:, 0], proj[:, 1], explained, sv, total)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_track(checkpoints) -> list[tuple[int, float, float]]:
    """(step, cos(theta_t, theta_next), cos(theta_t, theta_0)) for consecutive checkpoints."""
    items = sorted(((int(s), np.asarray(getattr(v, "values", v), dtype=np.float64)) for s, v in checkpoints),
                   key=lambda p: p[0])
    if len(items) < 2:
        raise ValueError("need at least 2 checkpoints")
    first = items[0][1]
    return [(s, cosine(v, items[i + 1][1]), cosine(v, first)) for i, (s, v) in enumerate(items[:-1])]


def write_curvature_csv(path, points: list[ConditionPoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lambda_max", "lambda_min", "paper_condition", "converged_max", "converged_min"])
        for p in points:
            e = p.estimate
            pc = p.paper_condition
            w.writerow([p.step, repr(e.lambda_max), repr(e.lambda_min), "" if pc is None else repr(pc),
                        int(e.converged_max), int(e.converged_min)])


def write_pca_csv(path, pca: TrajectoryPCA) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# explained_variance={float(pca.explained[0])!r},{float(pca.explained[1])!r}\n")
        w = csv.writer(fh)
        w.writerow(["step", "alpha", "beta"])
        for s, a, b in zip(pca.steps, pca.alpha, pca.beta):
            w.writerow([int(s), repr(float(a)), repr(float(b))])


def read_pca_csv(path):
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().strip()
        explained = [float(x) for x in head.split("=", 1)[1].split(",")]
        rows = list(csv.DictReader(fh))
    steps = np.array([int(r["step"]) for r in rows])
    return steps, np.array([float(r["alpha"]) for r in rows]), np.array([float(r["beta"]) for r in rows]), explained
