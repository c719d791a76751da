"""Modular binary-operation datasets: enumeration, splitting, and encoding."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

OP_KINDS = ("mod_add", "s5_compose")
S5_ORDER = 120


@dataclass(frozen=True)
class EquationSample:
    a: int
    b: int
    result: int
    tokens: tuple[int, int, int, int, int]


@dataclass(frozen=True)
class Dataset:
    op_kind: str
    p: int
    q: int
    symmetric: bool
    samples: tuple[EquationSample, ...]
    vocab_size: int
    op_token: int
    eq_token: int

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def token_array(self) -> np.ndarray:
        return np.array([s.tokens for s in self.samples], dtype=np.int64).reshape(-1, 5)


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    r: float
    seed: int


@lru_cache(maxsize=None)
def s5_elements() -> tuple[tuple[int, ...], ...]:
    """The 120 permutations of 5 symbols in lexicographic order (index == rank)."""
    return tuple(itertools.permutations(range(5)))


@lru_cache(maxsize=None)
def _s5_table() -> np.ndarray:
    elems = s5_elements()
    rank = {perm: i for i, perm in enumerate(elems)}
    table = np.empty((S5_ORDER, S5_ORDER), dtype=np.int64)
    for i, a in enumerate(elems):
        for j, b in enumerate(elems):
            # (a . b)(x) = a(b(x))
            table[i, j] = rank[tuple(a[b[x]] for x in range(5))]
    return table


def s5_compose(i: int, j: int) -> int:
    return int(_s5_table()[i, j])


def apply_op(op_kind: str, a: int, b: int, q: int) -> int:
    if op_kind == "mod_add":
        return (a + b) % q
    if op_kind == "s5_compose":
        return s5_compose(a, b)
    raise ValueError(f"unknown op_kind {op_kind!r}")


def vocabulary(op_kind: str, p: int, q: int) -> tuple[int, int, int]:
    """Return (operand_offset, op_token, eq_token); vocab size is eq_token + 1."""
    operand_offset = 0 if p == q else q
    base = q if p == q else q + p
    return operand_offset, base, base + 1


def build_dataset(op_kind: str, p: int, q: int | None = None, symmetric: bool = False) -> Dataset:
    if op_kind not in OP_KINDS:
        raise ValueError(f"op_kind must be one of {OP_KINDS}, got {op_kind!r}")
    if q is None:
        q = p
    if p is None or p <= 1 or q <= 1:
        raise ValueError(f"p and q must be >= 2, got p={p}, q={q}")
    if op_kind == "s5_compose":
        if p != S5_ORDER or q != S5_ORDER:
            raise ValueError(f"s5_compose has exactly {S5_ORDER} elements; use p = q = {S5_ORDER}")
        if symmetric:
            raise ValueError("symmetric=True is invalid for the non-commutative s5_compose")

    offset, op_tok, eq_tok = vocabulary(op_kind, p, q)
    samples = []
    for a in range(p):
        for b in range(a if symmetric else 0, p):
            c = apply_op(op_kind, a, b, q)
            samples.append(EquationSample(a, b, c, (a + offset, op_tok, b + offset, eq_tok, c)))
    return Dataset(op_kind, p, q, symmetric, tuple(samples), eq_tok + 1, op_tok, eq_tok)


def split(dataset_or_n, r: float, seed: int) -> Split:
    """Uniform shuffle then prefix split; |train| = floor(r * n)."""
    n = dataset_or_n if isinstance(dataset_or_n, int) else len(dataset_or_n)
    if not 0.0 < r < 1.0:
        raise ValueError(f"training fraction r must lie in (0, 1), got {r}")
    n_train = math.floor(r * n)
    if n_train < 1 or n - n_train < 1:
        raise ValueError(f"split of {n} samples at r={r} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return Split(np.sort(perm[:n_train]), np.sort(perm[n_train:]), r, seed)


def batch_encode(indices, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Token matrix (n x 4, the equation up to '=') and answer labels."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= len(dataset)):
        raise IndexError("sample index out of range")
    toks = dataset.token_array[idx]
    return toks[:, :4].copy(), toks[:, 4].copy()
