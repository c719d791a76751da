"""Intrinsic dimension of point clouds: k-NN MLE (mean / inverse-average) and TWONN."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import models

METHODS = ("mle_mean", "mle_inverse", "twonn")


class DegenerateCloud(ValueError):
    pass


@dataclass
class IDEstimate:
    method: str
    value: float | None
    n_used: int
    k: int | None = None
    n_duplicates: int = 0
    message: str = ""

    @property
    def defined(self) -> bool:
        return self.value is not None and math.isfinite(self.value) and self.value > 0


def dedup(points) -> tuple[np.ndarray, int]:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("point cloud must be 2-D (n, D)")
    if not np.all(np.isfinite(x)):
        raise ValueError("point cloud contains non-finite values")
    u, first = np.unique(x, axis=0, return_index=True)
    # keep original order of first occurrences
    return x[np.sort(first)], x.shape[0] - u.shape[0]


def knn_distances(points, k: int, block: int = 1024) -> np.ndarray:
    """Exact sorted distances T_1..T_k to the k nearest other points, shape (n, k)."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    out = np.empty((n, k))
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        d = cdist(x[lo:hi], x)
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        part = np.partition(d, k - 1, axis=1)[:, :k]
        out[lo:hi] = np.sort(part, axis=1)
    if np.any(out[:, 0] <= 0):
        raise DegenerateCloud("duplicate points present; deduplicate first")
    return out


def mle_local(T: np.ndarray) -> np.ndarray:
    """Per-point estimate [1/(k-1) * sum_{j<k} log(T_k / T_j)]^{-1} from sorted distances."""
    T = np.asarray(T, dtype=np.float64)
    if T.ndim == 1:
        T = T[None, :]
    k = T.shape[1]
    if k < 2:
        raise ValueError("MLE needs k >= 2")
    s = np.sum(np.log(T[:, -1:] / T[:, :-1]), axis=1) / (k - 1)
    with np.errstate(divide="ignore"):
        return 1.0 / s


def mle_id(points, k: int = 2, mode: str = "inverse") -> IDEstimate:
    if mode not in ("mean", "inverse"):
        raise ValueError("mode must be 'mean' or 'inverse'")
    if k < 2:
        raise ValueError("MLE needs k >= 2")
    x, ndup = dedup(points)
    method = "mle_" + mode
    if x.shape[0] <= k:
        return IDEstimate(method, None, x.shape[0], k, ndup, "too few distinct points")
    T = knn_distances(x, k)
    if mode == "mean":
        local = mle_local(T)
        finite = np.isfinite(local)
        if not finite.any():
            return IDEstimate(method, None, x.shape[0], k, ndup, "all local estimates infinite")
        value = float(np.mean(local[finite]))
        n_used = int(finite.sum())
    else:
        # average of inverses: m = [mean of 1/m_k(x)]^{-1}; ties give 1/m = 0 which is fine
        inv = np.sum(np.log(T[:, -1:] / T[:, :-1]), axis=1) / (k - 1)
        mean_inv = float(np.mean(inv))
        if mean_inv <= 0:
            return IDEstimate(method, None, x.shape[0], k, ndup, "all neighbour distances tied")
        value = 1.0 / mean_inv
        n_used = x.shape[0]
    return IDEstimate(method, value, n_used, k, ndup)


def twonn_from_mu(mu, discard_top_fraction: float = 0.1) -> tuple[float | None, int]:
    """Least-squares slope through the origin of -log(1 - F) against log(mu)."""
    if not 0.0 <= discard_top_fraction < 0.5:
        raise ValueError("discard_top_fraction must lie in [0, 0.5)")
    mu = np.sort(np.asarray(mu, dtype=np.float64))
    n = mu.size
    F = np.arange(1, n + 1) / n
    keep = int(math.floor(n * (1.0 - discard_top_fraction)))
    keep = min(keep, n - 1)  # the i = n term is always infinite
    x = np.log(mu[:keep])
    y = -np.log(1.0 - F[:keep])
    denom = float(x @ x)
    if keep < 1 or denom <= 0:
        return None, keep
    return float(x @ y) / denom, keep


def twonn_id(points, discard_top_fraction: float = 0.1) -> IDEstimate:
    x, ndup = dedup(points)
    if x.shape[0] < 3:
        return IDEstimate("twonn", None, x.shape[0], None, ndup, "need at least 3 distinct points")
    T = knn_distances(x, 2)
    value, n_used = twonn_from_mu(T[:, 1] / T[:, 0], discard_top_fraction)
    if value is None:
        return IDEstimate("twonn", None, n_used, None, ndup, "all mu == 1 (degenerate lattice)")
    return IDEstimate("twonn", value, n_used, None, ndup)


def estimate(points, method: str = "mle_inverse", k: int = 2, discard_top_fraction: float = 0.1) -> IDEstimate:
    if method == "mle_mean":
        return mle_id(points, k, "mean")
    if method == "mle_inverse":
        return mle_id(points, k, "inverse")
    if method == "twonn":
        return twonn_id(points, discard_top_fraction)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


# ------------------------------------------------------------------ layers


@dataclass
class LayerID:
    step: int
    layer: str
    split: str
    estimate: IDEstimate


def layer_id_track(model: models.Model, checkpoints, batches: dict, layers=None, method: str = "mle_inverse",
                   k: int = 2, position="final") -> list[LayerID]:
    """ID of each selected layer's activations at every checkpoint.

    ``batches`` maps split name to a token matrix (or (tokens, labels)).
    """
    names = list(layers) if layers is not None else model.layer_names()
    unknown = set(names) - set(model.layer_names())
    if unknown:
        raise ValueError(f"unknown layers {sorted(unknown)}; available {model.layer_names()}")
    out = []
    for step, theta in checkpoints:
        for split_name, batch in batches.items():
            tokens = batch[0] if isinstance(batch, tuple) else batch
            if len(tokens) == 0:
                raise ValueError(f"empty {split_name} batch")
            acts = models.activations(model, theta, tokens, position)
            for name in names:
                cloud = acts[name].reshape(len(tokens), -1)
                try:
                    est = estimate(cloud, method, k)
                except DegenerateCloud as exc:
                    est = IDEstimate(method, None, 0, k, message=str(exc))
                out.append(LayerID(int(step), name, split_name, est))
    return out


def write_id_csv(path, rows: list[LayerID]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "layer", "split", "method", "k", "value", "n_used"])
        for r in rows:
            e = r.estimate
            w.writerow([r.step, r.layer, r.split, e.method, "" if e.k is None else e.k,
                        "" if e.value is None else repr(e.value), e.n_used])


# ------------------------------------------------------------------ synthetic manifolds


def _random_isometry(rng, d: int, D: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((D, d)))
    return q.T  # (d, D), orthonormal rows


def sample_manifold(kind: str, d: int, n: int, D: int = 128, seed: int = 0) -> np.ndarray:
    """n points on a d-dimensional manifold isometrically placed in R^D.

    kinds: 'cube' (uniform in [0,1]^d), 'gaussian' (standard normal), 'sphere'
    (uniform on S^d, sampled in R^{d+1}), 'torus' (flat torus, each angle
    mapped to a circle of radius 1/(2 pi)).
    """
    rng = np.random.default_rng(seed)
    if kind == "cube":
        z = rng.uniform(size=(n, d))
    elif kind == "gaussian":
        z = rng.standard_normal((n, d))
    elif kind == "sphere":
        z = rng.standard_normal((n, d + 1))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
    elif kind == "torus":
        ang = rng.uniform(0, 2 * np.pi, size=(n, d))
        z = np.concatenate([np.cos(ang), np.sin(ang)], axis=1) / (2 * np.pi)
    else:
        raise ValueError(f"unknown manifold kind {kind!r}")
    if z.shape[1] > D:
        raise ValueError(f"manifold needs {z.shape[1]} coordinates but D = {D}")
    return z @ _random_isometry(rng, z.shape[1], D)


@dataclass
class BatteryRow:
    kind: str
    d: int
    n: int
    mle: float
    twonn: float


def synthetic_battery(D: int = 128, seed: int = 0) -> list[BatteryRow]:
    """20 manifolds with d in 1..8 and varying n, each scored by MLE(k=2, inverse) and TWONN."""
    specs = []
    kinds = ("cube", "sphere", "torus", "gaussian")
    dims = (1, 2, 3, 4, 5, 6, 7, 8)
    sizes = (500, 1000, 2000)
    for i in range(20):
        specs.append((kinds[i % 4], dims[i % 8], sizes[i % 3]))
    rows = []
    for i, (kind, d, n) in enumerate(specs):
        x = sample_manifold(kind, d, n, D, seed + i)
        rows.append(BatteryRow(kind, d, n, mle_id(x, 2, "inverse").value, twonn_id(x).value))
    return rows
