"""First-order optimizers over flat parameter vectors, warmup schedule, clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ALGOS = ("sgd", "momentum", "rmsprop", "rprop", "adam", "adamax", "adamw")


class NonFiniteGradient(FloatingPointError):
    """Raised instead of letting NaN/inf propagate into the parameters."""

    def __init__(self, step: int, n_bad: int, size: int):
        self.step = step
        self.n_bad = n_bad
        super().__init__(f"non-finite gradient at optimizer step {step}: {n_bad}/{size} components")


@dataclass
class OptimizerConfig:
    algo: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 1.0
    betas: tuple[float, float] = (0.9, 0.98)
    momentum: float = 0.9
    alpha: float = 0.99  # rmsprop smoothing
    eps: float = 1e-8
    rprop_etas: tuple[float, float] = (0.5, 1.2)
    rprop_step_bounds: tuple[float, float] = (1e-6, 50.0)
    decay_embeddings: bool = True

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.rprop_etas = tuple(float(b) for b in self.rprop_etas)
        self.rprop_step_bounds = tuple(float(b) for b in self.rprop_step_bounds)
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class Schedule:
    base_lr: float = 1e-4
    warmup_steps: int = 10


@dataclass
class ClipConfig:
    enabled: bool = False
    eta: float = 1.0

    def __post_init__(self):
        if self.enabled and not self.eta > 0:
            raise ValueError("clip eta must be > 0")


@dataclass
class OptState:
    config: OptimizerConfig
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    decay_mask: np.ndarray | None = field(default=None, repr=False)


def lr_at(schedule: Schedule, t: int) -> float:
    if t < 0:
        raise ValueError("step must be >= 0")
    if schedule.warmup_steps <= 0:
        return schedule.base_lr
    return schedule.base_lr * min(1.0, t / schedule.warmup_steps)


def clip_grad_norm(grad: np.ndarray, eta: float) -> np.ndarray:
    if not eta > 0:
        raise ValueError("eta must be > 0")
    norm = float(np.linalg.norm(grad))
    if norm <= eta:
        return grad
    return grad * (eta / norm)


def init_state(config: OptimizerConfig, n: int, decay_mask: np.ndarray | None = None) -> OptState:
    """``decay_mask`` selects coordinates subject to weight decay (default: all)."""
    state = OptState(config, decay_mask=decay_mask)
    if config.algo == "rprop":
        state.m = np.zeros(n)  # previous gradient
        state.v = np.full(n, config.lr)  # per-coordinate step sizes
    elif config.algo != "sgd":
        state.m = np.zeros(n)
        state.v = np.zeros(n) if config.algo in ("rmsprop", "adam", "adamw", "adamax") else None
    return state


def step(state: OptState, params: np.ndarray, grad: np.ndarray, lr: float | Schedule | None = None) -> np.ndarray:
    """Apply one update and return the new parameters; ``state`` is advanced in place.

    ``lr`` may be a number, a Schedule (evaluated at the current step), or None
    for the configured base rate.
    """
    cfg = state.config
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {params.shape}")
    bad = ~np.isfinite(grad)
    if bad.any():
        raise NonFiniteGradient(state.t, int(bad.sum()), grad.size)
    if isinstance(lr, Schedule):
        lr = lr_at(lr, state.t)
    elif lr is None:
        lr = cfg.lr
    state.t += 1
    t = state.t
    b1, b2 = cfg.betas
    wd = cfg.weight_decay
    if wd and state.decay_mask is not None:
        wd = wd * state.decay_mask

    p = params.copy()
    if cfg.algo == "adamw":
        if np.any(wd):
            p -= lr * wd * p
        g = grad
    elif np.any(wd):
        g = grad + wd * params
    else:
        g = grad

    if cfg.algo == "sgd":
        p -= lr * g
    elif cfg.algo == "momentum":
        state.m = cfg.momentum * state.m + g
        p -= lr * state.m
    elif cfg.algo == "rmsprop":
        state.v = cfg.alpha * state.v + (1 - cfg.alpha) * g * g
        p -= lr * g / (np.sqrt(state.v) + cfg.eps)
    elif cfg.algo == "rprop":
        eta_minus, eta_plus = cfg.rprop_etas
        lo, hi = cfg.rprop_step_bounds
        sign = np.sign(g * state.m)
        sizes = state.v
        sizes = np.where(sign > 0, np.minimum(sizes * eta_plus, hi), sizes)
        sizes = np.where(sign < 0, np.maximum(sizes * eta_minus, lo), sizes)
        g = np.where(sign < 0, 0.0, g)
        state.v = sizes
        state.m = g
        p -= np.sign(g) * sizes
    elif cfg.algo in ("adam", "adamw"):
        state.m = b1 * state.m + (1 - b1) * g
        state.v = b2 * state.v + (1 - b2) * g * g
        m_hat = state.m / (1 - b1**t)
        v_hat = state.v / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    elif cfg.algo == "adamax":
        state.m = b1 * state.m + (1 - b1) * g
        state.v = np.maximum(b2 * state.v, np.abs(g) + cfg.eps)
        p -= lr / (1 - b1**t) * state.m / state.v
    return p
