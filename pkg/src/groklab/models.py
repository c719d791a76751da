"""Parameter vectors, the two model architectures, losses, gradients and HVPs.

Parameters live in one flat float64 vector with a layout manifest. The
forward pass slices named views out of that vector, so gradients and
Hessian-vector products come back in the same flat layout.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

KINDS = ("weight_matrix", "bias", "embedding", "norm_gain")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size

    def filter_bounds(self) -> list[int] | None:
        """Flat offsets delimiting rows, for row-structured parameters."""
        if self.kind not in ("weight_matrix", "embedding"):
            return None
        rows, cols = self.shape[0], int(np.prod(self.shape[1:]))
        return [self.offset + i * cols for i in range(rows + 1)]

    def to_json(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "shape": list(self.shape), "offset": self.offset}
        bounds = self.filter_bounds()
        if bounds is not None:
            d["filters"] = bounds
        return d


class Layout(tuple):
    """Ordered, contiguous sequence of ParamSpec."""

    @classmethod
    def build(cls, entries: list[tuple[str, str, tuple[int, ...]]]) -> Layout:
        specs, offset = [], 0
        for name, kind, shape in entries:
            if kind not in KINDS:
                raise ValueError(f"unknown parameter kind {kind!r}")
            spec = ParamSpec(name, kind, tuple(int(s) for s in shape), offset)
            specs.append(spec)
            offset = spec.stop
        return cls(specs)

    @property
    def size(self) -> int:
        return self[-1].stop if self else 0

    def __getitem__(self, key):
        if isinstance(key, str):
            for spec in self:
                if spec.name == key:
                    return spec
            raise KeyError(key)
        return tuple.__getitem__(self, key)

    def mask(self, kinds) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        for spec in self:
            if spec.kind in kinds:
                m[spec.offset : spec.stop] = True
        return m

    def to_json(self) -> list[dict]:
        return [s.to_json() for s in self]

    @classmethod
    def from_json(cls, items: list[dict]) -> Layout:
        layout = cls.build([(d["name"], d["kind"], tuple(d["shape"])) for d in items])
        for spec, d in zip(layout, items):
            if spec.offset != d["offset"]:
                raise ValueError(f"non-contiguous layout at {spec.name}")
        return layout


@dataclass
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.layout.size:
            raise ValueError(
                f"parameter vector of size {self.values.size} does not match layout size {self.layout.size}"
            )

    def view(self, name: str) -> np.ndarray:
        spec = self.layout[name]
        return self.values[spec.offset : spec.stop].reshape(spec.shape)

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.layout)


@dataclass
class ModelConfig:
    arch: str = "transformer"
    depth: int = 2
    width: int = 128
    heads: int = 4
    vocab_size: int | None = None
    n_classes: int | None = None
    context_len: int = 4
    hidden: int | None = None
    tied_embeddings: bool = True
    init_scale: float = 1.0

    def __post_init__(self):
        if self.arch not in ("transformer", "mlp"):
            raise ValueError(f"arch must be 'transformer' or 'mlp', got {self.arch!r}")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be positive")
        if self.arch == "transformer" and self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if not self.tied_embeddings:
            raise ValueError("only tied embeddings are supported")
        if self.vocab_size is not None and self.n_classes is not None and self.n_classes > self.vocab_size:
            raise ValueError("n_classes cannot exceed vocab_size")

    @property
    def hidden_width(self) -> int:
        if self.hidden is not None:
            return self.hidden
        return 256 if self.arch == "mlp" else 4 * self.width


@dataclass
class LossReport:
    loss: float
    accuracy: float
    logits: np.ndarray | None = field(default=None, repr=False)


class Model:
    """Stateless network definition: a layout plus a forward pass over flat parameters."""

    def __init__(self, config: ModelConfig):
        if config.vocab_size is None or config.n_classes is None:
            raise ValueError("ModelConfig needs vocab_size and n_classes before building a model")
        self.config = config
        self.layout = Layout.build(self._entries())

    def _entries(self):
        c = self.config
        d, h = c.width, c.hidden_width
        entries = [("embed", "embedding", (c.vocab_size, d))]
        if c.arch == "mlp":
            entries += [
                ("fc1.w", "weight_matrix", (h, 2 * d)),
                ("fc1.b", "bias", (h,)),
                ("fc2.w", "weight_matrix", (d, h)),
                ("fc2.b", "bias", (d,)),
            ]
            return entries
        entries.append(("pos", "embedding", (c.context_len, d)))
        for i in range(c.depth):
            p = f"block{i}."
            entries += [
                (p + "ln1.g", "norm_gain", (d,)),
                (p + "ln1.b", "bias", (d,)),
                (p + "attn.qkv.w", "weight_matrix", (3 * d, d)),
                (p + "attn.qkv.b", "bias", (3 * d,)),
                (p + "attn.out.w", "weight_matrix", (d, d)),
                (p + "attn.out.b", "bias", (d,)),
                (p + "ln2.g", "norm_gain", (d,)),
                (p + "ln2.b", "bias", (d,)),
                (p + "ff.fc.w", "weight_matrix", (h, d)),
                (p + "ff.fc.b", "bias", (h,)),
                (p + "ff.proj.w", "weight_matrix", (d, h)),
                (p + "ff.proj.b", "bias", (d,)),
            ]
        entries += [("ln_f.g", "norm_gain", (d,)), ("ln_f.b", "bias", (d,))]
        return entries

    @property
    def n_params(self) -> int:
        return self.layout.size

    @property
    def n_non_embedding(self) -> int:
        return sum(s.size for s in self.layout if s.kind != "embedding")

    def init_params(self, seed: int) -> ParamVector:
        rng = np.random.default_rng(seed)
        values = np.zeros(self.layout.size)
        scale = self.config.init_scale
        for spec in self.layout:
            sl = slice(spec.offset, spec.stop)
            if spec.kind == "weight_matrix":
                bound = scale / np.sqrt(spec.shape[1])
                values[sl] = rng.uniform(-bound, bound, spec.size)
            elif spec.kind == "embedding":
                bound = scale * np.sqrt(3.0 / spec.shape[1])
                values[sl] = rng.uniform(-bound, bound, spec.size)
            elif spec.kind == "norm_gain":
                values[sl] = 1.0
        return ParamVector(values, self.layout)

    # ------------------------------------------------------------ forward

    def _unpack(self, flat: ad.Tensor) -> dict[str, ad.Tensor]:
        return {s.name: ad.reshape(flat[s.offset : s.stop], s.shape) for s in self.layout}

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != self.config.context_len:
            raise ValueError(f"tokens must have shape (n, {self.config.context_len}), got {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ValueError("token id out of vocabulary")
        return tokens.astype(np.int64)

    def features(self, P: dict[str, ad.Tensor], tokens: np.ndarray, collect: dict | None = None):
        """Context representation h(s_<5) for each row of ``tokens``."""
        c = self.config
        E = P["embed"]
        if c.arch == "mlp":
            x = ad.concat([E[tokens[:, 0]], E[tokens[:, 2]]], axis=-1)
            pre = x @ P["fc1.w"].T + P["fc1.b"]
            hid = ad.relu(pre)
            out = hid @ P["fc2.w"].T + P["fc2.b"]
            if collect is not None:
                collect["embed"] = x.data
                collect["hidden"] = hid.data
                collect["final"] = out.data
            return out

        n, T = tokens.shape
        d, H = c.width, c.heads
        dh = d // H
        x = E[tokens] + P["pos"]
        if collect is not None:
            collect["embed"] = x.data
        mask = np.triu(np.full((T, T), -1e30), k=1)
        for i in range(c.depth):
            p = f"block{i}."
            hn = ad.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            qkv = hn @ P[p + "attn.qkv.w"].T + P[p + "attn.qkv.b"]
            qkv = ad.transpose(ad.reshape(qkv, (n, T, 3, H, dh)), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]
            scores = (q @ ad.swap_last(k)) * (1.0 / np.sqrt(dh)) + mask
            att = ad.softmax(scores, axis=-1) @ v
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (n, T, d))
            x = x + att @ P[p + "attn.out.w"].T + P[p + "attn.out.b"]
            hn = ad.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            ff = ad.gelu(hn @ P[p + "ff.fc.w"].T + P[p + "ff.fc.b"])
            x = x + ff @ P[p + "ff.proj.w"].T + P[p + "ff.proj.b"]
            if collect is not None:
                collect[f"block{i}"] = x.data
        out = ad.layer_norm(x[:, -1], P["ln_f.g"], P["ln_f.b"])
        if collect is not None:
            collect["final"] = out.data
        return out

    def logits(self, P: dict[str, ad.Tensor], tokens: np.ndarray, collect: dict | None = None) -> ad.Tensor:
        h = self.features(P, tokens, collect)
        # tied output layer, softmax restricted to the answer classes
        return h @ P["embed"][: self.config.n_classes].T

    def loss_tensor(self, flat: ad.Tensor, tokens, labels):
        tokens = self._check_tokens(tokens)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (tokens.shape[0],):
            raise ValueError("labels must be a vector with one entry per token row")
        if labels.size and (labels.min() < 0 or labels.max() >= self.config.n_classes):
            raise ValueError("label out of class range")
        z = self.logits(self._unpack(flat), tokens)
        n = max(len(labels), 1)
        picked = z[np.arange(len(labels)), labels]
        loss = ad.mul(ad.tsum(ad.logsumexp(z, axis=-1)) - ad.tsum(picked), 1.0 / n)
        return loss, z.data

    def layer_names(self) -> list[str]:
        if self.config.arch == "mlp":
            return ["embed", "hidden", "final"]
        return ["embed"] + [f"block{i}" for i in range(self.config.depth)] + ["final"]


def _values(params) -> np.ndarray:
    return params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def forward_loss(model: Model, params, tokens, labels, keep_logits: bool = False) -> LossReport:
    with ad.no_grad():
        loss, logits = model.loss_tensor(ad.Tensor(_values(params)), tokens, labels)
    return LossReport(
        float(loss.data),
        accuracy_from_logits(logits, np.asarray(labels)),
        logits if keep_logits else None,
    )


def loss_and_grad(model: Model, params, tokens, labels) -> tuple[LossReport, np.ndarray]:
    flat = ad.Tensor(_values(params), requires_grad=True)
    loss, logits = model.loss_tensor(flat, tokens, labels)
    (g,) = ad.grad(loss, [flat])
    return LossReport(float(loss.data), accuracy_from_logits(logits, np.asarray(labels))), g.data


def backward(model: Model, params, tokens, labels) -> np.ndarray:
    """Exact gradient of the mean cross-entropy with respect to the flat parameters."""
    return loss_and_grad(model, params, tokens, labels)[1]


def hvp(model: Model, params, tokens, labels, v) -> np.ndarray:
    """Hessian-vector product H v by differentiating <grad, v> a second time."""
    theta = _values(params)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ValueError(f"vector of shape {v.shape} does not match parameters {theta.shape}")
    flat = ad.Tensor(theta, requires_grad=True)
    loss, _ = model.loss_tensor(flat, tokens, labels)
    (g,) = ad.grad(loss, [flat], create_graph=True)
    (hv,) = ad.grad(ad.dot(g, v), [flat])
    return hv.data


def activations(model: Model, params, tokens, position="final") -> dict[str, np.ndarray]:
    """Per-layer activation vectors, one row per sample.

    For the transformer ``position`` picks the token position: "final" (the
    one the loss reads), an integer index, or "all" to concatenate every
    position into one row. The mlp has a single position and ignores it.
    """
    collect: dict[str, np.ndarray] = {}
    with ad.no_grad():
        model.logits(model._unpack(ad.Tensor(_values(params))), model._check_tokens(tokens), collect)
    out = {}
    for name, a in collect.items():
        if a.ndim == 3:
            if position == "final":
                a = a[:, -1]
            elif position == "all":
                a = a.reshape(a.shape[0], -1)
            else:
                a = a[:, int(position)]
        out[name] = a
    return out


# ---------------------------------------------------------------- checkpoints


def save_layout(layout: Layout, directory) -> Path:
    path = Path(directory) / "layout.json"
    path.write_text(json.dumps(layout.to_json(), indent=1))
    return path


def load_layout(directory) -> Layout:
    return Layout.from_json(json.loads((Path(directory) / "layout.json").read_text()))


def save_checkpoint(values: np.ndarray, directory, step: int) -> Path:
    path = Path(directory) / f"step_{step}.bin"
    tmp = path.with_suffix(".tmp")
    np.asarray(values, dtype="<f8").tofile(tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(directory, step: int, layout: Layout | None = None) -> ParamVector:
    directory = Path(directory)
    if layout is None:
        layout = load_layout(directory)
    path = directory / f"step_{step}.bin"
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return ParamVector(np.fromfile(path, dtype="<f8").astype(np.float64), layout)


def checkpoint_steps(directory) -> list[int]:
    steps = []
    for p in Path(directory).glob("step_*.bin"):
        try:
            steps.append(int(p.stem.split("_", 1)[1]))
        except ValueError:
            continue
    return sorted(steps)


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
