"""Domain types shared across the package.

Times are seconds (floats) everywhere.  Feature ids live in a fixed space
``[0, n_features)``; string tokens are hashed into it with a seed-free hash so
that datasets are reproducible across processes.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

DEFAULT_N_FEATURES = 2 ** 18
ATTRIBUTION_WINDOW = 9 * 3600.0


class ContractError(ValueError):
    """An input violates the documented contract of an operation."""


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SparseVector:
    """Sorted, duplicate-free (feature_id, value) pairs with no explicit zeros."""

    ids: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if len(self.ids) != len(self.values):
            raise ContractError("ids and values differ in length")
        prev = -1
        for i, v in zip(self.ids, self.values):
            if not isinstance(i, (int, np.integer)) or i < 0:
                raise ContractError(f"feature id must be a non-negative int, got {i!r}")
            if i <= prev:
                raise ContractError("feature ids must be strictly increasing")
            if not math.isfinite(v) or v == 0.0:
                raise ContractError(f"feature value must be finite and non-zero, got {v!r}")
            prev = i

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple]) -> "SparseVector":
        """Canonicalize arbitrary pairs: duplicates are summed, zeros dropped."""
        acc: dict[int, float] = {}
        for i, v in pairs:
            i = int(i)
            acc[i] = acc.get(i, 0.0) + float(v)
        items = sorted((i, v) for i, v in acc.items() if v != 0.0)
        return cls(tuple(i for i, _ in items), tuple(v for _, v in items))

    @classmethod
    def binary(cls, ids: Iterable[int]) -> "SparseVector":
        return cls.from_pairs((i, 1.0) for i in set(ids))

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(zip(self.ids, self.values))

    def max_id(self) -> int:
        return self.ids[-1] if self.ids else -1

    def format(self) -> str:
        return " ".join(f"{i}:{v!r}" for i, v in self)

    @classmethod
    def parse(cls, text: str) -> "SparseVector":
        text = text.strip()
        if not text:
            return cls()
        pairs = []
        for tok in text.split():
            i, v = tok.split(":")
            pairs.append((int(i), float(v)))
        return cls(tuple(i for i, _ in pairs), tuple(v for _, v in pairs))


def dot(v: SparseVector, w) -> float:
    """Sparse-dense inner product; raises IndexError for ids outside ``w``."""
    w = np.asarray(w, dtype=np.float64)
    if len(v) == 0:
        return 0.0
    if v.max_id() >= w.shape[0]:
        raise IndexError(f"feature id {v.max_id()} out of range for dimension {w.shape[0]}")
    return float(np.dot(np.asarray(v.values), w[list(v.ids)]))


def hash_token(token: str, n_features: int) -> int:
    """Deterministic, process-independent hash of ``token`` into [0, n_features)."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % n_features


def to_csr(vectors: Sequence[SparseVector], n_features: int) -> sp.csr_matrix:
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for k, v in enumerate(vectors):
        indptr[k + 1] = indptr[k] + len(v)
    indices = np.fromiter((i for v in vectors for i in v.ids), dtype=np.int64, count=indptr[-1])
    data = np.fromiter((x for v in vectors for x in v.values), dtype=np.float64, count=indptr[-1])
    if indices.size and indices.max() >= n_features:
        raise IndexError(f"feature id {indices.max()} out of range for dimension {n_features}")
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), n_features))


def from_csr_row(X: sp.csr_matrix, k: int) -> SparseVector:
    lo, hi = X.indptr[k], X.indptr[k + 1]
    return SparseVector.from_pairs(zip(X.indices[lo:hi].tolist(), X.data[lo:hi].tolist()))


@dataclass(frozen=True)
class ImpressionEvent:
    impression_id: int
    impression_time: float
    features: SparseVector
    converts: bool
    delay: Optional[float] = None

    def __post_init__(self):
        if self.impression_time < 0:
            raise ContractError("impression_time must be non-negative")
        if self.converts != (self.delay is not None):
            raise ContractError("delay must be present exactly when the impression converts")
        if self.delay is not None and not self.delay > 0:
            raise ContractError("delay must be positive")


def _fmt_opt(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def _parse_opt(s: str) -> Optional[float]:
    return float(s) if s else None


@dataclass(frozen=True)
class TrainingExample:
    features: SparseVector
    label: int
    weight: float = 1.0
    elapsed: Optional[float] = None
    time_to_click: Optional[float] = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ContractError(f"label must be 0 or 1, got {self.label!r}")
        if not self.weight > 0:
            raise ContractError("weight must be positive")
        if self.time_to_click is not None:
            if self.label != 1:
                raise ContractError("time_to_click requires label 1")
            if not self.time_to_click > 0:
                raise ContractError("time_to_click must be positive")
        if self.elapsed is not None and self.elapsed < 0:
            raise ContractError("elapsed must be non-negative")

    def format(self) -> str:
        """Canonical tab-separated line: label, weight, elapsed, time_to_click, id:value..."""
        cols = [str(self.label), repr(float(self.weight)), _fmt_opt(self.elapsed),
                _fmt_opt(self.time_to_click)]
        cols.extend(f"{i}:{v!r}" for i, v in self.features)
        return "\t".join(cols)

    @classmethod
    def parse(cls, line: str) -> "TrainingExample":
        cols = line.rstrip("\n").split("\t")
        if len(cols) < 4:
            raise DataError(f"expected at least 4 columns, got {len(cols)}")
        feats = SparseVector.parse(" ".join(cols[4:]))
        return cls(feats, int(cols[0]), float(cols[1]), _parse_opt(cols[2]), _parse_opt(cols[3]))


@dataclass(frozen=True)
class ModelSnapshot:
    """Immutable copy of trained parameters emitted by the trainer.

    ``model`` and ``delay_model`` hold read-only arrays; ``calibrate`` marks a
    model of the biased stream whose outputs go through ``fn_calibrate``.
    """

    version: int
    step: int
    model: object
    delay_model: object = None
    calibrate: bool = False


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.02
    decay: float = 1e-6
    batch_size: int = 128
    df_learning_rate: float = 0.005
    df_l2_alpha: float = 2.0
    deep_layers: tuple = (400, 300, 200, 100)
    negative_downsample_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "deep_layers", tuple(int(n) for n in self.deep_layers))
        if not self.learning_rate > 0 or not self.df_learning_rate > 0:
            raise ConfigError("learning rates must be positive")
        if self.decay < 0 or self.df_l2_alpha < 0:
            raise ConfigError("decay and df_l2_alpha must be non-negative")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be a positive integer")
        if any(n < 1 for n in self.deep_layers):
            raise ConfigError("deep layer sizes must be positive")
        if not 0 < self.negative_downsample_rate <= 1:
            raise ConfigError("negative_downsample_rate must be in (0, 1]")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["deep_layers"] = list(self.deep_layers)
        return d


@dataclass
class Batch:
    """Column-oriented view of a list of examples, as consumed by the trainer."""

    X: sp.csr_matrix
    y: np.ndarray
    weight: np.ndarray
    elapsed: np.ndarray = field(default=None)
    time_to_click: np.ndarray = field(default=None)

    def __len__(self):
        return self.X.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.X[idx], self.y[idx], self.weight[idx],
                     None if self.elapsed is None else self.elapsed[idx],
                     None if self.time_to_click is None else self.time_to_click[idx])


def make_batch(examples: Sequence[TrainingExample], n_features: int) -> Batch:
    """Stack examples; absent optional times become NaN."""
    X = to_csr([ex.features for ex in examples], n_features)
    y = np.array([ex.label for ex in examples], dtype=np.float64)
    w = np.array([ex.weight for ex in examples], dtype=np.float64)
    e = np.array([np.nan if ex.elapsed is None else ex.elapsed for ex in examples])
    d = np.array([np.nan if ex.time_to_click is None else ex.time_to_click for ex in examples])
    return Batch(X, y, w, e, d)
