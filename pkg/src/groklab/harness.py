"""Full-batch training loop, phase marks, the t4(r) power law, stop rule and sweeps."""
from __future__ import annotations

import csv
import logging
import math
import os
import shutil
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from . import models, optim, spectral
from .config import RunConfig, validate
from .data import batch_encode, build_dataset, split

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "train_loss", "val_loss", "train_acc", "val_acc", "grad_norm", "lr", "cos_prev", "cos_init")
SWEEP_COLUMNS = ("lr", "weight_decay", "r", "seed", "final_val_acc", "t1", "t2", "t3", "t4", "activity")


class TrainingDiverged(RuntimeError):
    pass


class RunError(RuntimeError):
    pass


@dataclass
class TrainTrace:
    step: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    cos_prev: list = field(default_factory=list)
    cos_init: list = field(default_factory=list)
    n_classes: int | None = None
    n_train: int | None = None
    n_val: int | None = None

    def __len__(self) -> int:
        return len(self.step)

    def append(self, **row) -> None:
        if self.step and row["step"] <= self.step[-1]:
            raise ValueError("trace steps must be strictly increasing")
        for name in TRACE_COLUMNS:
            getattr(self, name).append(row[name])

    def column(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=np.float64)

    @classmethod
    def from_arrays(cls, train_acc, val_acc, train_loss=None, n_classes=None, n_train=None, n_val=None, **cols):
        """Build a trace from column arrays; missing columns are zero-filled."""
        n = len(train_acc)
        tr = cls(n_classes=n_classes, n_train=n_train, n_val=n_val)
        tr.step = list(range(n))
        tr.train_acc = [float(a) for a in train_acc]
        tr.val_acc = [float(a) for a in val_acc]
        tr.train_loss = [float(a) for a in (train_loss if train_loss is not None else np.zeros(n))]
        for name in ("val_loss", "grad_norm", "lr", "cos_prev", "cos_init"):
            setattr(tr, name, [float(a) for a in cols.get(name, np.zeros(n))])
        return tr

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for i in range(len(self)):
                w.writerow([self.step[i]] + [repr(float(getattr(self, c)[i])) for c in TRACE_COLUMNS[1:]])

    @classmethod
    def read_csv(cls, path, n_classes=None, n_train=None, n_val=None) -> TrainTrace:
        tr = cls(n_classes=n_classes, n_train=n_train, n_val=n_val)
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                tr.append(step=int(row["step"]), **{c: float(row[c]) for c in TRACE_COLUMNS[1:]})
        return tr


@dataclass
class PhaseMarks:
    t1: int | None = None
    t2: int | None = None
    t3: int | None = None
    t4: int | None = None


@dataclass
class TrainResult:
    trace: TrainTrace
    out_dir: Path | None
    marks: PhaseMarks
    final_params: models.ParamVector
    checkpoints: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def checkpoint(self, step: int) -> models.ParamVector:
        if step in self.checkpoints:
            return models.ParamVector(self.checkpoints[step], self.final_params.layout)
        if self.out_dir is None:
            raise KeyError(f"no checkpoint at step {step}")
        return models.load_checkpoint(self.out_dir / "checkpoints", step, self.final_params.layout)

    def checkpoint_steps(self) -> list[int]:
        if self.checkpoints:
            return sorted(self.checkpoints)
        return models.checkpoint_steps(self.out_dir / "checkpoints") if self.out_dir else []


def chance_threshold(n_classes: int | None, n: int | None) -> float:
    """Accuracy a random guesser exceeds with ~2.3% probability: 1/q + 2 sigma."""
    if not n_classes:
        return 0.0
    c = 1.0 / n_classes
    sigma = math.sqrt(c * (1 - c) / n) if n else 0.0
    return c + 2 * sigma


def _first(values, pred) -> int | None:
    for i, v in enumerate(values):
        if pred(v):
            return i
    return None


def detect_phases(trace: TrainTrace, train_threshold: float = 1.0, val_threshold: float = 1.0,
                  nonzero_threshold: float | tuple[float, float] | None = None) -> PhaseMarks:
    """First-crossing steps t1..t4.

    ``nonzero_threshold`` defaults to chance + 2 sigma computed per split from
    the trace metadata (plain 0 when the metadata is missing). A pair gives
    separate (train, val) thresholds.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    if nonzero_threshold is None:
        nz_train = chance_threshold(trace.n_classes, trace.n_train)
        nz_val = chance_threshold(trace.n_classes, trace.n_val)
    elif isinstance(nonzero_threshold, tuple):
        nz_train, nz_val = nonzero_threshold
    else:
        nz_train = nz_val = float(nonzero_threshold)
    steps = trace.step

    def at(i):
        return None if i is None else int(steps[i])

    return PhaseMarks(
        at(_first(trace.train_acc, lambda a: a > nz_train)),
        at(_first(trace.train_acc, lambda a: a >= train_threshold)),
        at(_first(trace.val_acc, lambda a: a > nz_val)),
        at(_first(trace.val_acc, lambda a: a >= val_threshold)),
    )


def loss_spikes(losses, factor: float = 2.0, window: int = 50, floor: float = 1e-3) -> np.ndarray:
    """Steps where the loss exceeds ``factor`` times its running minimum over the last ``window`` steps.

    The running minimum is floored so that tiny absolute wiggles near zero loss
    do not register as spikes.
    """
    x = np.asarray(losses, dtype=np.float64)
    out = []
    for i in range(1, x.size):
        ref = max(x[max(0, i - window) : i].min(), floor)
        if x[i] > factor * ref:
            out.append(i)
    return np.asarray(out, dtype=np.int64)


# ------------------------------------------------------------------ training


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(np.dot(a, b) / (na * nb))


def prepare(cfg: RunConfig):
    """Dataset, split, encoded batches and model for a run config."""
    cfg = validate(cfg)
    t = cfg.task
    ds = build_dataset(t.op_kind, t.p, t.q, t.symmetric)
    sp = split(ds, t.r, t.seed)
    train = batch_encode(sp.train, ds)
    val = batch_encode(sp.val, ds)
    return ds, sp, train, val, models.Model(cfg.model)


def train(cfg: RunConfig, out_dir=None, force: bool = False, keep_in_memory: bool | None = None,
          init_params: np.ndarray | None = None) -> TrainResult:
    """Run full-batch training for ``cfg.budget`` steps.

    Row t of the trace holds the metrics of the parameters theta_t before
    update t, the learning rate used for that update, cos(theta_t, theta_t+1)
    and cos(theta_t, theta_0). Checkpoints are written every
    ``checkpoint_stride`` steps, at the first crossing of each phase mark and
    at the end (step == budget). Without ``out_dir`` they are kept in memory.
    """
    cfg = validate(cfg)
    _, _, (xtr, ytr), (xva, yva), model = prepare(cfg)
    if keep_in_memory is None:
        keep_in_memory = out_dir is None
    ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        if out_dir.exists() and any(out_dir.iterdir()):
            if not force:
                raise FileExistsError(f"{out_dir} is not empty (use force to overwrite)")
            shutil.rmtree(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        try:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            cfg.save(out_dir / "config.json")
            models.save_layout(model.layout, ckpt_dir)
        except OSError as exc:
            raise RunError(f"cannot write run directory {out_dir}: {exc}") from exc

    theta0 = model.init_params(cfg.task.seed).values if init_params is None else np.array(init_params, dtype=np.float64)
    decay_mask = None if cfg.optimizer.decay_embeddings else ~model.layout.mask({"embedding"})
    state = optim.init_state(cfg.optimizer, theta0.size, decay_mask)
    schedule = cfg.schedule
    trace = TrainTrace(n_classes=cfg.model.n_classes, n_train=len(ytr), n_val=len(yva))
    saved: dict[int, np.ndarray] = {}

    def save(step, values):
        if keep_in_memory:
            saved[step] = values.copy()
        if ckpt_dir is not None:
            try:
                models.save_checkpoint(values, ckpt_dir, step)
            except OSError as exc:
                raise RunError(f"checkpoint write failed at step {step}: {exc}") from exc

    nz_train = chance_threshold(trace.n_classes, trace.n_train)
    nz_val = chance_threshold(trace.n_classes, trace.n_val)
    crossed = [False] * 4
    theta = theta0.copy()
    save(0, theta)
    stride = cfg.checkpoint_stride
    for t in range(cfg.budget):
        with np.errstate(over="ignore", invalid="ignore"):
            rep, g = models.loss_and_grad(model, theta, xtr, ytr)
        if not math.isfinite(rep.loss):
            raise TrainingDiverged(f"non-finite training loss {rep.loss} at step {t}")
        val = models.forward_loss(model, theta, xva, yva)
        gnorm = float(np.linalg.norm(g))
        if cfg.clip.enabled:
            g = optim.clip_grad_norm(g, cfg.clip.eta)
        lr = optim.lr_at(schedule, t)
        try:
            new = optim.step(state, theta, g, lr)
        except optim.NonFiniteGradient as exc:
            raise TrainingDiverged(str(exc)) from exc
        trace.append(step=t, train_loss=rep.loss, val_loss=val.loss, train_acc=rep.accuracy, val_acc=val.accuracy,
                     grad_norm=gnorm, lr=lr, cos_prev=_cos(theta, new), cos_init=_cos(theta, theta0))

        hits = (rep.accuracy > nz_train, rep.accuracy >= 1.0, val.accuracy > nz_val, val.accuracy >= 1.0)
        forced = False
        for i, h in enumerate(hits):
            if h and not crossed[i]:
                crossed[i] = forced = True
        if t > 0 and (forced or (stride and t % stride == 0)):
            save(t, theta)
        theta = new
    save(cfg.budget, theta)
    if out_dir is not None:
        try:
            trace.write_csv(out_dir / "metrics.csv")
        except OSError as exc:
            raise RunError(f"cannot write metrics: {exc}") from exc
    marks = detect_phases(trace) if len(trace) else PhaseMarks()
    return TrainResult(trace, out_dir, marks, models.ParamVector(theta, model.layout), saved)


# ------------------------------------------------------------------ t4(r)


@dataclass
class PowerLawFit:
    a: float
    gamma: float
    b: float
    residual_rms: float
    points: list[tuple[float, float]]
    gamma_identifiable: bool = True
    converged: bool = True
    message: str = ""

    def predict(self, r) -> np.ndarray:
        return self.a * np.asarray(r, dtype=np.float64) ** (-self.gamma) + self.b

    @property
    def r_range(self) -> tuple[float, float]:
        rs = [p[0] for p in self.points]
        return min(rs), max(rs)


class FitError(RuntimeError):
    pass


GAMMA_GRID = (0.5,) + tuple(float(g) for g in range(1, 17))


def _linear_ab(r, t, gamma):
    X = np.column_stack([r ** (-gamma), np.ones_like(r)])
    coef, *_ = np.linalg.lstsq(X, t, rcond=None)
    res = X @ coef - t
    return coef, float(res @ res)


def fit_power_law(points, gamma_grid=GAMMA_GRID) -> PowerLawFit:
    """Least-squares fit of t4(r) = a * r**(-gamma) + b.

    Grid over gamma with (a, b) solved linearly at each grid value, then a
    joint Levenberg-Marquardt refinement of all three parameters.
    """
    pts = [(float(r), float(t)) for r, t in points]
    if len(pts) < 3:
        raise FitError("need at least 3 (r, t4) points")
    r = np.array([p[0] for p in pts])
    t = np.array([p[1] for p in pts])
    if np.any((r <= 0) | (r >= 1)) or np.any(t <= 0) or not np.all(np.isfinite(t)):
        raise FitError("points need r in (0, 1) and finite t4 > 0")
    if len(np.unique(r)) < 3:
        raise FitError("need at least 3 distinct r values")

    scale = float(np.max(np.abs(t)))
    spread = float(np.ptp(t))
    if spread <= 1e-12 * scale:
        # flat data: a = 0 and gamma carries no information
        return PowerLawFit(0.0, 1.0, float(t.mean()), float(np.sqrt(np.mean((t - t.mean()) ** 2))), pts,
                           gamma_identifiable=False, message="t4 constant in r; gamma unidentifiable")

    best = None
    for g in gamma_grid:
        (a, b), sse = _linear_ab(r, t, g)
        if best is None or sse < best[0]:
            best = (sse, g, a, b)
    _, g0, a0, b0 = best

    # parametrize by log(gamma) so gamma stays positive; a and b are profiled out
    def resid(x):
        g = math.exp(x[0])
        (a, b), _ = _linear_ab(r, t, g)
        return (a * r ** (-g) + b - t) / scale

    sol = least_squares(resid, [math.log(g0)], method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    gamma = math.exp(sol.x[0])
    (a, b), sse = _linear_ab(r, t, gamma)
    # joint polish in (a, log gamma, b)
    def resid3(x):
        return (x[0] * r ** (-math.exp(x[1])) + x[2] - t) / scale

    sol3 = least_squares(resid3, [a, math.log(gamma), b], method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                         max_nfev=5000, x_scale="jac")
    if np.sum(sol3.fun**2) * scale**2 <= sse:
        a, gamma, b = sol3.x[0], math.exp(sol3.x[1]), sol3.x[2]
        sse = float(np.sum(sol3.fun**2) * scale**2)
    converged = bool(sol.success or sol3.success)
    fit = PowerLawFit(float(a), float(gamma), float(b), math.sqrt(sse / len(pts)), pts, converged=converged)

    # gamma is identifiable only if the power term carries a visible share of the variation
    power_share = abs(a) * np.ptp(r ** (-gamma))
    if not np.isfinite(gamma) or power_share < 1e-9 * scale:
        fit.gamma_identifiable = False
        fit.message = "power-law term negligible; gamma unidentifiable"
    if not converged:
        fit.message = (fit.message + "; " if fit.message else "") + f"refinement did not converge: {sol3.message}"
    return fit


@dataclass
class StopRule:
    max_steps: int
    out_of_domain: bool
    message: str = ""


def stop_rule(fit: PowerLawFit, r: float, epsilon: int = 1000) -> StopRule:
    if not 0 < r < 1:
        raise ValueError("r must lie in (0, 1)")
    predicted = float(fit.predict(r))
    lo, hi = fit.r_range
    out = r < lo or r > hi
    msg = ""
    if out:
        msg = f"r={r} outside fitted range [{lo}, {hi}]"
        if r < lo:
            msg += "; the power law is unreliable as r -> 0"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    if not math.isfinite(predicted):
        raise FitError(f"predicted t4({r}) is not finite")
    return StopRule(int(math.ceil(predicted)) + int(epsilon), out, msg)


# ------------------------------------------------------------------ sweeps


@dataclass
class RunSummary:
    config_hash: str
    lr: float
    weight_decay: float
    r: float
    seed: int
    final_val_acc: float | None
    marks: PhaseMarks
    activity: float | None
    grokked: bool
    error: str | None = None


def cell_config(base: RunConfig, lr: float, weight_decay: float, r: float, seed: int,
                budget: int | None = None) -> RunConfig:
    cfg = RunConfig.from_dict(base.to_dict())
    cfg.optimizer = replace(cfg.optimizer, lr=float(lr), weight_decay=float(weight_decay))
    cfg.task = replace(cfg.task, r=float(r), seed=int(seed))
    if budget is not None:
        cfg.budget = int(budget)
    return validate(cfg)


def summarize(cfg: RunConfig, result: TrainResult, val_threshold: float = 1.0) -> RunSummary:
    trace = result.trace
    marks = detect_phases(trace, val_threshold=val_threshold) if len(trace) else PhaseMarks()
    activity = None
    lo, hi = cfg.analysis.spectral_windows[0]
    if len(trace) >= hi:
        activity = spectral.grok_score(trace, (lo, hi), cfg.analysis.spectral_cutoff, cfg.analysis.spectral_log_loss)
    return RunSummary(cfg.hash(), cfg.optimizer.lr, cfg.optimizer.weight_decay, cfg.task.r, cfg.task.seed,
                      trace.val_acc[-1] if len(trace) else None, marks, activity, marks.t4 is not None)


def _run_cell(args):
    cfg_dict, out_dir, force, val_threshold = args
    cfg = RunConfig.from_dict(cfg_dict)
    try:
        res = train(cfg, out_dir, force=force, keep_in_memory=False)
        return summarize(cfg, res, val_threshold)
    except Exception as exc:  # recorded per cell, the sweep goes on
        return RunSummary(cfg.hash(), cfg.optimizer.lr, cfg.optimizer.weight_decay, cfg.task.r, cfg.task.seed,
                          None, PhaseMarks(), None, False, f"{type(exc).__name__}: {exc}")


def sweep(base: RunConfig, grid, out_dir=None, workers: int = 1, budget: int | None = None, force: bool = False,
          val_threshold: float = 1.0) -> list[RunSummary]:
    """Train one run per (lr, weight_decay, r, seed) cell; results keep the grid order."""
    grid = [tuple(c) for c in grid]
    if not grid:
        raise ValueError("empty sweep grid")
    jobs = []
    for lr, wd, r, seed in grid:
        cfg = cell_config(base, lr, wd, r, seed, budget)
        cell_dir = None
        if out_dir is not None:
            cell_dir = Path(out_dir) / f"lr{lr:g}_wd{wd:g}_r{r:g}_s{seed}"
        jobs.append((cfg.to_dict(), cell_dir, force, val_threshold))
    if workers <= 1:
        results = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, os.cpu_count() or 1, len(jobs))) as ex:
            results = list(ex.map(_run_cell, jobs))
    for s in results:
        if s.error:
            log.warning("sweep cell lr=%g wd=%g r=%g seed=%d failed: %s", s.lr, s.weight_decay, s.r, s.seed, s.error)
    if out_dir is not None:
        write_sweep_csv(Path(out_dir) / "sweep.csv", results)
    return results


def _fmt(x) -> str:
    return "" if x is None else repr(x)


def write_sweep_csv(path, summaries) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for s in summaries:
            m = s.marks
            w.writerow([repr(s.lr), repr(s.weight_decay), repr(s.r), s.seed, _fmt(s.final_val_acc),
                        _fmt(m.t1), _fmt(m.t2), _fmt(m.t3), _fmt(m.t4), _fmt(s.activity)])


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
