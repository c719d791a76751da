"""Loss and accuracy slices along filter-normalized directions."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import models

DIRECTION_KINDS = ("to_optimum", "next_step", "to_init", "random")
METRICS = ("train_loss", "val_loss", "train_acc", "val_acc")
COLLINEAR_COS = 0.99


class ZeroDirection(ValueError):
    pass


@dataclass
class Direction:
    values: np.ndarray
    kind: str
    anchor_step: int | None = None
    normalized: bool = False


@dataclass
class LandscapeSlice:
    alphas: np.ndarray
    betas: np.ndarray | None
    train_loss: np.ndarray
    val_loss: np.ndarray
    train_acc: np.ndarray
    val_acc: np.ndarray
    anchor_step: int | None = None

    def metric(self, name: str) -> np.ndarray:
        return getattr(self, name)


Evaluator = Callable[[np.ndarray], dict]


def make_direction(kind: str, theta, aux=None, seed: int | None = None, anchor_step: int | None = None) -> Direction:
    """Raw (unnormalized) slicing direction at theta.

    ``aux`` is theta* for to_optimum, theta_{t+1} for next_step and theta_0
    for to_init. The random kind draws a standard normal vector from ``seed``.
    """
    theta = np.asarray(getattr(theta, "values", theta), dtype=np.float64)
    if kind == "random":
        if seed is None:
            raise ValueError("random direction needs a seed")
        d = np.random.default_rng(seed).standard_normal(theta.size)
    elif kind in DIRECTION_KINDS:
        if aux is None:
            raise ValueError(f"direction kind {kind!r} needs a reference parameter vector")
        other = np.asarray(getattr(aux, "values", aux), dtype=np.float64)
        if other.shape != theta.shape:
            raise ValueError("reference parameters do not match theta's layout")
        d = other - theta
    else:
        raise ValueError(f"unknown direction kind {kind!r}; expected one of {DIRECTION_KINDS}")
    if not np.any(d):
        raise ZeroDirection(f"{kind} direction is identically zero (theta equals its reference)")
    return Direction(d, kind, anchor_step)


def _groups(layout: models.Layout | None, n: int):
    """Yield (slice, is_filter) blocks: rows of matrices/embeddings, single scalars otherwise."""
    if layout is None:
        yield slice(0, n), True
        return
    if layout.size != n:
        raise ValueError(f"direction of size {n} does not match layout size {layout.size}")
    for spec in layout:
        bounds = spec.filter_bounds()
        if bounds is None:
            for i in range(spec.offset, spec.stop):
                yield slice(i, i + 1), False
        else:
            for lo, hi in zip(bounds[:-1], bounds[1:]):
                yield slice(lo, hi), True


def filter_normalize(direction, theta, layout: models.Layout | None = None, zero_policy: str = "error") -> Direction:
    """Rescale each filter of ``direction`` to the norm of the matching filter of theta.

    Filters are rows of weight matrices and embeddings; biases and norm gains
    are handled per scalar (sign of the direction, magnitude of theta). With
    no layout the whole vector counts as one filter. A zero filter in the
    direction whose theta counterpart is non-zero raises unless
    ``zero_policy='zero'``, which leaves it at zero.
    """
    if zero_policy not in ("error", "zero"):
        raise ValueError("zero_policy must be 'error' or 'zero'")
    if isinstance(theta, models.ParamVector):
        layout = layout or theta.layout
        theta = theta.values
    d_obj = direction if isinstance(direction, Direction) else None
    d = np.asarray(d_obj.values if d_obj else direction, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if d.shape != theta.shape:
        raise ValueError("direction and theta differ in size")
    out = np.zeros_like(d)
    for sl, is_filter in _groups(layout, d.size):
        if is_filter:
            dn = np.linalg.norm(d[sl])
            tn = np.linalg.norm(theta[sl])
            if dn == 0:
                if tn != 0 and zero_policy == "error":
                    raise ZeroDirection(f"zero-norm filter at offsets [{sl.start}, {sl.stop})")
                continue
            out[sl] = d[sl] * (tn / dn)
        else:
            i = sl.start
            if d[i] == 0:
                if theta[i] != 0 and zero_policy == "error":
                    raise ZeroDirection(f"zero bias direction at offset {i} with non-zero parameter")
                continue
            out[i] = np.sign(d[i]) * abs(theta[i])
    return Direction(out, d_obj.kind if d_obj else "custom", d_obj.anchor_step if d_obj else None, True)


def alpha_grid(lo: float = -3.0, hi: float = 3.0, n: int = 201) -> np.ndarray:
    """Uniform grid with the point nearest 0 snapped to exactly 0."""
    if n < 1 or hi < lo:
        raise ValueError("invalid grid")
    g = np.linspace(lo, hi, n)
    if lo <= 0 <= hi:
        i = int(np.argmin(np.abs(g)))
        if abs(g[i]) <= 1e-9 * max(hi - lo, 1.0):
            g[i] = 0.0
    return g


def parse_alphas(spec: str) -> np.ndarray:
    """'lo:hi:n' -> grid."""
    try:
        lo, hi, n = spec.split(":")
        return alpha_grid(float(lo), float(hi), int(n))
    except ValueError as exc:
        raise ValueError(f"bad alpha grid {spec!r}; expected 'lo:hi:n'") from exc


def model_evaluator(model: models.Model, train_batch, val_batch) -> Evaluator:
    xtr, ytr = train_batch
    xva, yva = val_batch

    def evaluate(theta):
        tr = models.forward_loss(model, theta, xtr, ytr)
        va = models.forward_loss(model, theta, xva, yva)
        return {"train_loss": tr.loss, "val_loss": va.loss, "train_acc": tr.accuracy, "val_acc": va.accuracy}

    return evaluate


def function_evaluator(f: Callable[[np.ndarray], float], f_val: Callable | None = None) -> Evaluator:
    """Evaluator for a plain objective; accuracies are reported as NaN."""

    def evaluate(theta):
        v = float(f(theta))
        return {"train_loss": v, "val_loss": float(f_val(theta)) if f_val else v,
                "train_acc": float("nan"), "val_acc": float("nan")}

    return evaluate


def _vec(x):
    if isinstance(x, (Direction, models.ParamVector)):
        x = x.values
    return np.asarray(x, dtype=np.float64)


def slice_1d(evaluate: Evaluator, theta, direction, alphas, anchor_step: int | None = None,
             require_zero: bool = True) -> LandscapeSlice:
    theta, d = _vec(theta), _vec(direction)
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    if d.shape != theta.shape:
        raise ValueError("direction does not match the parameter layout")
    if alphas.size == 0:
        raise ValueError("empty alpha grid")
    if require_zero and not np.any(alphas == 0.0):
        raise ValueError("alpha grid must contain 0")
    rows = [evaluate(theta + a * d) for a in alphas]
    cols = {m: np.array([r[m] for r in rows]) for m in METRICS}
    return LandscapeSlice(alphas, None, anchor_step=anchor_step, **cols)


def slice_2d(evaluate: Evaluator, theta, delta, eta, alphas, betas, anchor_step: int | None = None) -> LandscapeSlice:
    """Grid of evaluations, row-major with alpha outer and beta inner."""
    theta, d, e = _vec(theta), _vec(delta), _vec(eta)
    if d.shape != theta.shape or e.shape != theta.shape:
        raise ValueError("directions do not match the parameter layout")
    cos = float(np.dot(d, e) / (np.linalg.norm(d) * np.linalg.norm(e)))
    if abs(cos) >= COLLINEAR_COS:
        raise ValueError(f"directions are collinear (|cos| = {abs(cos):.4f})")
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    betas = np.asarray(betas, dtype=np.float64).reshape(-1)
    rows = [evaluate(theta + a * d + b * e) for a in alphas for b in betas]
    shape = (alphas.size, betas.size)
    cols = {m: np.array([r[m] for r in rows]).reshape(shape) for m in METRICS}
    return LandscapeSlice(alphas, betas, anchor_step=anchor_step, **cols)


def segment_convexity(alphas, values=None, tol: float = 0.0) -> list[int]:
    """Interior grid indices where f lies above the chord of its two neighbours.

    Accepts a LandscapeSlice (train loss is used) or explicit arrays. On a
    non-uniform grid the chord is evaluated at alpha_i by linear interpolation.
    """
    if isinstance(alphas, LandscapeSlice):
        values = alphas.train_loss if values is None else alphas.metric(values)
        alphas = alphas.alphas
    a = np.asarray(alphas, dtype=np.float64)
    f = np.asarray(values, dtype=np.float64)
    if a.size < 3 or f.shape != a.shape:
        raise ValueError("need at least 3 matching grid points")
    out = []
    for i in range(1, a.size - 1):
        w = (a[i] - a[i - 1]) / (a[i + 1] - a[i - 1])
        chord = (1 - w) * f[i - 1] + w * f[i + 1]
        if f[i] > chord + tol:
            out.append(i)
    return out


def local_minima(values) -> list[int]:
    f = np.asarray(values, dtype=np.float64)
    return [i for i in range(1, f.size - 1) if f[i] < f[i - 1] and f[i] <= f[i + 1]]


def write_slice_csv(path, sl: LandscapeSlice) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if sl.betas is None:
            w.writerow(["alpha", *METRICS])
            for i, a in enumerate(sl.alphas):
                w.writerow([repr(float(a))] + [repr(float(sl.metric(m)[i])) for m in METRICS])
        else:
            w.writerow(["alpha", "beta", *METRICS])
            for i, a in enumerate(sl.alphas):
                for j, b in enumerate(sl.betas):
                    w.writerow([repr(float(a)), repr(float(b))] + [repr(float(sl.metric(m)[i, j])) for m in METRICS])


def read_slice_csv(path) -> LandscapeSlice:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no rows")
    if "beta" not in rows[0]:
        cols = {m: np.array([float(r[m]) for r in rows]) for m in METRICS}
        return LandscapeSlice(np.array([float(r["alpha"]) for r in rows]), None, **cols)
    alphas = np.unique([float(r["alpha"]) for r in rows])
    betas = np.unique([float(r["beta"]) for r in rows])
    shape = (alphas.size, betas.size)
    cols = {m: np.array([float(r[m]) for r in rows]).reshape(shape) for m in METRICS}
    return LandscapeSlice(alphas, betas, **cols)
