"""Run configuration: nested dataclasses with JSON round-trip and field-path errors."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import OP_KINDS, S5_ORDER, vocabulary
from .models import ModelConfig
from .optim import ALGOS, ClipConfig, OptimizerConfig, Schedule


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass
class TaskConfig:
    op_kind: str = "mod_add"
    p: int = 97
    q: int = 97
    symmetric: bool = False
    r: float = 0.5
    seed: int = 0


@dataclass
class AnalysisConfig:
    spectral_windows: list[tuple[int, int]] = field(default_factory=lambda: [(0, 400)])
    spectral_cutoff: float = 0.01
    spectral_log_loss: bool = False
    slice_alphas: tuple[float, float, int] = (-3.0, 3.0, 201)
    slice_2d_grid: tuple[float, float, int] = (-1.0, 2.0, 101)
    slice_kind: str = "to_init"
    slice_steps: list[int] = field(default_factory=list)
    curvature_stride: int = 100
    curvature_tol: float = 1e-4
    curvature_max_iter: int = 200
    id_method: str = "mle_inverse"
    id_k: int = 2
    id_stride: int = 100
    id_position: str | int = "final"
    pca_max_checkpoints: int = 500


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    warmup_steps: int = 10
    clip: ClipConfig = field(default_factory=ClipConfig)
    budget: int = 10000
    checkpoint_stride: int = 10
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.optimizer.lr, self.warmup_steps)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        cfg = _build(cls, data, "")
        validate(cfg)
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_NESTED = {
    "task": TaskConfig,
    "model": ModelConfig,
    "optimizer": OptimizerConfig,
    "clip": ClipConfig,
    "analysis": AnalysisConfig,
}
_TUPLES = {"betas", "rprop_etas", "rprop_step_bounds", "slice_alphas", "slice_2d_grid"}


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(_join(prefix, key), "unknown field")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        path = _join(prefix, name)
        if name in _NESTED and cls is RunConfig:
            value = _build(_NESTED[name], value, path)
        elif name in _TUPLES:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(path, "expected a list")
            value = tuple(value)
        elif name == "spectral_windows":
            try:
                value = [tuple(int(x) for x in w) for w in value]
            except (TypeError, ValueError):
                raise ConfigError(path, "expected a list of [start, end] pairs") from None
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        # the nested __post_init__ messages lead with the offending field name
        head = str(exc).split(" ", 1)[0]
        raise ConfigError(_join(prefix, head) if head in known else prefix or "<root>", str(exc)) from None


def _join(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


def _expect(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def validate(cfg: RunConfig) -> RunConfig:
    """Check cross-field constraints and fill in the vocabulary sizes the task implies."""
    t = cfg.task
    _expect(t.op_kind in OP_KINDS, "task.op_kind", f"must be one of {OP_KINDS}")
    _expect(_is_int(t.p) and t.p >= 2, "task.p", "must be an integer >= 2")
    _expect(_is_int(t.q) and t.q >= 2, "task.q", "must be an integer >= 2")
    if t.op_kind == "s5_compose":
        _expect(t.p == S5_ORDER and t.q == S5_ORDER, "task.p", f"s5_compose requires p = q = {S5_ORDER}")
        _expect(not t.symmetric, "task.symmetric", "s5_compose is not commutative")
    _expect(_is_num(t.r) and 0.0 < t.r < 1.0, "task.r", "must lie strictly between 0 and 1")
    _expect(_is_int(t.seed), "task.seed", "must be an integer")

    _, _, eq_tok = vocabulary(t.op_kind, t.p, t.q)
    m = cfg.model
    _expect(m.arch in ("transformer", "mlp"), "model.arch", "must be 'transformer' or 'mlp'")
    _expect(_is_int(m.width) and m.width >= 1, "model.width", "must be a positive integer")
    if m.vocab_size is None:
        m.vocab_size = eq_tok + 1
    if m.n_classes is None:
        m.n_classes = t.q
    _expect(m.vocab_size == eq_tok + 1, "model.vocab_size", f"task implies vocab_size {eq_tok + 1}")
    _expect(m.n_classes == t.q, "model.n_classes", f"task implies n_classes {t.q}")
    _expect(m.context_len == 4, "model.context_len", "equations have 4 context tokens")

    o = cfg.optimizer
    _expect(o.algo in ALGOS, "optimizer.algo", f"must be one of {ALGOS}")
    _expect(_is_num(o.lr) and o.lr > 0, "optimizer.lr", "must be > 0")
    _expect(_is_num(o.weight_decay) and o.weight_decay >= 0, "optimizer.weight_decay", "must be >= 0")
    _expect(len(o.betas) == 2 and all(0 <= b < 1 for b in o.betas), "optimizer.betas", "two values in [0, 1)")
    _expect(_is_int(cfg.warmup_steps) and cfg.warmup_steps >= 0, "warmup_steps", "must be >= 0")
    _expect(not cfg.clip.enabled or cfg.clip.eta > 0, "clip.eta", "must be > 0")
    _expect(_is_int(cfg.budget) and cfg.budget >= 0, "budget", "must be a non-negative integer")
    _expect(_is_int(cfg.checkpoint_stride) and cfg.checkpoint_stride >= 0, "checkpoint_stride", "must be >= 0")

    a = cfg.analysis
    _expect(0 < a.spectral_cutoff < 0.5, "analysis.spectral_cutoff", "must lie in (0, 0.5)")
    for i, (lo, hi) in enumerate(a.spectral_windows):
        _expect(0 <= lo and hi - lo >= 8, f"analysis.spectral_windows[{i}]", "need 0 <= start and >= 8 samples")
    lo, hi, n = a.slice_alphas
    _expect(lo < 0 < hi and _is_int(n) and n >= 3, "analysis.slice_alphas", "need lo < 0 < hi and n >= 3")
    _expect(a.slice_kind in ("to_optimum", "next_step", "to_init", "random"), "analysis.slice_kind", "unknown direction kind")
    _expect(a.id_method in ("mle_mean", "mle_inverse", "twonn"), "analysis.id_method", "unknown estimator")
    _expect(_is_int(a.id_k) and a.id_k >= 2, "analysis.id_k", "must be >= 2")
    _expect(a.id_position in ("final", "all") or (_is_int(a.id_position) and 0 <= a.id_position < m.context_len),
            "analysis.id_position", "must be 'final', 'all' or a token position")
    return cfg
