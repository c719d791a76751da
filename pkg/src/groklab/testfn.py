"""Rosenbrock and Rastrigin objectives with exact gradients, and an optimizer race."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import optim

KINDS = ("rosenbrock_pairwise", "rosenbrock_chained", "rastrigin")


@dataclass(frozen=True)
class TestFnSpec:
    __test__ = False  # not a pytest class

    kind: str
    n: int = 2
    a: float = 10.0
    log_scale: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.kind == "rosenbrock_pairwise" and self.n % 2:
            raise ValueError("rosenbrock_pairwise needs an even dimension")

    @property
    def minimizer(self) -> np.ndarray:
        return np.zeros(self.n) if self.kind == "rastrigin" else np.ones(self.n)


def _raw(spec: TestFnSpec, x: np.ndarray) -> tuple[float, np.ndarray]:
    if spec.kind == "rastrigin":
        a = spec.a
        tp = 2 * np.pi * x
        value = a * spec.n + float(np.sum(x * x - a * np.cos(tp)))
        return value, 2 * x + 2 * np.pi * a * np.sin(tp)
    if spec.kind == "rosenbrock_pairwise":
        odd, even = x[0::2], x[1::2]
        u = even - odd**2
        value = float(np.sum(100 * u**2 + (1 - odd) ** 2))
        g = np.empty_like(x)
        g[0::2] = -400 * odd * u - 2 * (1 - odd)
        g[1::2] = 200 * u
        return value, g
    head, tail = x[:-1], x[1:]
    u = tail - head**2
    value = float(np.sum(100 * u**2 + (head - 1) ** 2))
    g = np.zeros_like(x)
    g[1:] += 200 * u
    g[:-1] -= 400 * head * u - 2 * (head - 1)
    return value, g


def eval_grad(spec: TestFnSpec, x) -> tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.n,):
        raise ValueError(f"expected a vector of length {spec.n}, got shape {x.shape}")
    value, g = _raw(spec, x)
    if spec.log_scale:
        # log(1 + g) keeps the minimum finite where g == 0
        return math.log1p(value), g / (1.0 + value)
    return value, g


def value(spec: TestFnSpec, x) -> float:
    return eval_grad(spec, x)[0]


DEFAULT_RACE = {
    "sgd": optim.OptimizerConfig("sgd", lr=1e-3, weight_decay=0.0),
    "momentum": optim.OptimizerConfig("momentum", lr=1e-3, weight_decay=0.0, momentum=0.9),
    "rmsprop": optim.OptimizerConfig("rmsprop", lr=1e-3, weight_decay=0.0),
    "rprop": optim.OptimizerConfig("rprop", lr=1e-3, weight_decay=0.0),
    "adam": optim.OptimizerConfig("adam", lr=1e-2, weight_decay=0.0),
    "adamax": optim.OptimizerConfig("adamax", lr=1e-2, weight_decay=0.0),
}


@dataclass
class RaceEntry:
    name: str
    trajectory: np.ndarray  # (steps + 1, n), or shorter after divergence
    values: np.ndarray
    errors: np.ndarray
    reached: bool
    diverged: bool = False
    message: str = ""

    @property
    def final_error(self) -> float:
        return float(self.errors[-1])


@dataclass
class RaceResult:
    spec: TestFnSpec
    x0: np.ndarray
    steps: int
    threshold: float
    entries: dict[str, RaceEntry] = field(default_factory=dict)


def run_optimizer(spec: TestFnSpec, config: optim.OptimizerConfig, x0, steps: int, threshold: float = 1e-2,
                  name: str | None = None) -> RaceEntry:
    x = np.array(x0, dtype=np.float64)
    x_star = spec.minimizer
    state = optim.init_state(config, x.size)
    traj = np.empty((steps + 1, x.size))
    vals = np.empty(steps + 1)
    traj[0] = x
    vals[0], g = eval_grad(spec, x)
    with np.errstate(over="ignore", invalid="ignore"):
        n_done, msg, diverged = _loop(spec, config, state, x, g, traj, vals, steps)
        traj, vals = traj[: n_done + 1], vals[: n_done + 1]
        errors = np.linalg.norm(traj - x_star, axis=1)
    reached = (not diverged) and errors[-1] <= threshold
    return RaceEntry(name or config.algo, traj, vals, errors, bool(reached), diverged, msg)


def _loop(spec, config, state, x, g, traj, vals, steps):
    for t in range(steps):
        try:
            x = optim.step(state, x, g, config.lr)
        except optim.NonFiniteGradient as exc:
            return t, str(exc), True
        if not np.all(np.isfinite(x)):
            return t, f"non-finite iterate at step {t + 1}", True
        traj[t + 1] = x
        vals[t + 1], g = eval_grad(spec, x)
        if not math.isfinite(vals[t + 1]):
            return t + 1, f"non-finite value at step {t + 1}", True
    return steps, "", False


def race(spec: TestFnSpec, configs: dict | None = None, x0=(-2.0, 2.0), steps: int = 10_000,
         threshold: float = 1e-2) -> RaceResult:
    """Run every optimizer from the same start; a diverging optimizer does not stop the others."""
    configs = DEFAULT_RACE if configs is None else configs
    x0 = np.asarray(x0, dtype=np.float64)
    res = RaceResult(spec, x0, steps, threshold)
    for name, cfg in configs.items():
        cfg = replace(cfg, weight_decay=0.0) if cfg.weight_decay else cfg
        res.entries[name] = run_optimizer(spec, cfg, x0, steps, threshold, name)
    return res


def write_race_csv(path, result: RaceResult, every: int = 1) -> None:
    n = result.spec.n
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["optimizer", "step", *[f"x{i}" for i in range(n)], "value", "error"])
        for name, e in result.entries.items():
            last = len(e.values) - 1
            for t in range(0, len(e.values)):
                if t % every and t != last:
                    continue
                w.writerow([name, t, *[repr(float(v)) for v in e.trajectory[t]], repr(float(e.values[t])),
                            repr(float(e.errors[t]))])


def contour_grid(spec: TestFnSpec, xlim=(-2.5, 2.5), ylim=(-1.5, 3.5), n: int = 101):
    if spec.n != 2:
        raise ValueError("contour grids are only defined for n = 2")
    xs = np.linspace(*xlim, n)
    ys = np.linspace(*ylim, n)
    Z = np.array([[value(spec, (x, y)) for x in xs] for y in ys])
    return xs, ys, Z


def write_contour_csv(path, spec: TestFnSpec, **kw) -> None:
    xs, ys, Z = contour_grid(spec, **kw)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value"])
        for j, y in enumerate(ys):
            for i, x in enumerate(xs):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(Z[j, i]))])
