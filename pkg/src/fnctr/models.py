"""Prediction functions: logistic regression, wide-and-deep, exponential delay.

Models expose ``forward(X) -> (logits, cache)`` and
``backward(cache, d_logit) -> {name: grad}`` over CSR batches.  Gradients of
large tables (linear weights, embeddings) are returned as ``(rows, values)``
pairs touching only the rows active in the batch.
"""
from __future__ import annotations

import copy
import io
import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .core import ConfigError, ModelSnapshot, SparseVector, to_csr

MAX_EXP_ARG = float(np.log(np.finfo(np.float64).max))

_U64 = np.uint64


def sigmoid(z):
    return expit(z)


def leaky_relu(a, slope=0.01):
    return np.where(a > 0, a, slope * a)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(sizes: Sequence[int], seed, prefix="layer") -> dict:
    """Glorot-uniform weights for a dense chain ``sizes[0] -> sizes[1] -> ...``.

    Returns ``{f"{prefix}{k}_W": (n_in, n_out), f"{prefix}{k}_b": zeros}``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = {}
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if n_in < 1 or n_out < 1:
            raise ConfigError(f"invalid layer size {n_in}->{n_out}")
        bound = glorot_bound(n_in, n_out)
        out[f"{prefix}{k}_W"] = rng.uniform(-bound, bound, size=(n_in, n_out))
        out[f"{prefix}{k}_b"] = np.zeros(n_out)
    return out


class _Model:
    kind = "base"

    def params(self) -> dict:
        raise NotImplementedError

    def frozen_copy(self):
        m = copy.deepcopy(self)
        for arr in m.params().values():
            arr.setflags(write=False)
        return m

    def writable_copy(self):
        m = copy.deepcopy(self)
        for arr in m.params().values():
            arr.setflags(write=True)
        return m

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.logits(X))

    def logits(self, X) -> np.ndarray:
        return self.forward(_as_csr(X, self.n_features))[0]


def _as_csr(X, n_features):
    if isinstance(X, SparseVector):
        return to_csr([X], n_features)
    if isinstance(X, (list, tuple)):
        return to_csr(X, n_features)
    X = sp.csr_matrix(X)
    if X.shape[1] != n_features:
        raise ConfigError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def _active(X: sp.csr_matrix):
    cols = np.unique(X.indices)
    return cols, X[:, cols]


@dataclass
class LogisticModel(_Model):
    w: np.ndarray
    bias: np.ndarray = field(default_factory=lambda: np.zeros(1))
    kind = "logistic"

    @classmethod
    def zeros(cls, n_features: int) -> "LogisticModel":
        return cls(np.zeros(n_features), np.zeros(1))

    @property
    def n_features(self):
        return self.w.shape[0]

    def params(self):
        return {"w": self.w, "bias": self.bias}

    def forward(self, X):
        cols, Xs = _active(X)
        z = Xs @ self.w[cols] + self.bias[0]
        return z, (cols, Xs)

    def backward(self, cache, g):
        cols, Xs = cache
        return {"w": (cols, Xs.T @ g), "bias": np.array([g.sum()])}


@dataclass
class DelayModel(_Model):
    w: np.ndarray
    kind = "delay"

    @classmethod
    def zeros(cls, n_features: int) -> "DelayModel":
        return cls(np.zeros(n_features))

    @property
    def n_features(self):
        return self.w.shape[0]

    def params(self):
        return {"w": self.w}

    def forward(self, X):
        cols, Xs = _active(X)
        return Xs @ self.w[cols], (cols, Xs)

    def backward(self, cache, g):
        cols, Xs = cache
        return {"w": (cols, Xs.T @ g)}

    def rate(self, X) -> np.ndarray:
        return delay_rate_from_logit(self.logits(X))


def delay_rate_from_logit(s):
    s = np.asarray(s, dtype=np.float64)
    if np.any(s > MAX_EXP_ARG):
        warnings.warn("delay logit exceeds exp range; rate saturated", RuntimeWarning)
        s = np.minimum(s, MAX_EXP_ARG)
    return np.exp(s)


# ---------------------------------------------------------------------------
# cross-product features

def _mix64(h):
    # splitmix64 finalizer, wrapping uint64 arithmetic
    with np.errstate(over="ignore"):
        h = (h ^ (h >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
        h = (h ^ (h >> _U64(27))) * _U64(0x94D049BB133111EB)
        return h ^ (h >> _U64(31))


def _cross_hash(pair_index: int, a_ids, b_ids, n_buckets: int):
    a = np.asarray(a_ids, dtype=np.uint64)
    b = np.asarray(b_ids, dtype=np.uint64)
    h = _mix64(np.full(a.shape, pair_index + 1, dtype=np.uint64) ^ _U64(0x9E3779B97F4A7C15))
    h = _mix64(h ^ a)
    h = _mix64(h ^ (b + _U64(0x632BE59BD9B4E019)))
    return (h % _U64(n_buckets)).astype(np.int64)


@dataclass(frozen=True)
class CrossSpec:
    """Feature-field pairs to cross.

    A field is a half-open id range ``(lo, hi)``.  Crossed features are hashed
    into ``[offset, offset + n_buckets)``, disjoint from raw ids when
    ``offset`` equals the raw dimension.
    """

    pairs: tuple = ()
    n_buckets: int = 2 ** 16

    def __post_init__(self):
        pairs = tuple((tuple(map(int, a)), tuple(map(int, b))) for a, b in self.pairs)
        for a, b in pairs:
            for lo, hi in (a, b):
                if not 0 <= lo < hi:
                    raise ConfigError(f"invalid field range {(lo, hi)}")
        object.__setattr__(self, "pairs", pairs)
        if self.n_buckets < 1:
            raise ConfigError("n_buckets must be positive")

    def to_dict(self):
        return {"pairs": [list(map(list, p)) for p in self.pairs], "n_buckets": self.n_buckets}

    @classmethod
    def from_dict(cls, d):
        if d is None:
            return cls()
        return cls(tuple(tuple(map(tuple, p)) for p in d.get("pairs", ())), d.get("n_buckets", 2 ** 16))


def cross_product_matrix(X: sp.csr_matrix, spec: CrossSpec) -> sp.csr_matrix:
    """Crossed features for every row, as a CSR matrix of width ``spec.n_buckets``."""
    n = X.shape[0]
    if not spec.pairs:
        return sp.csr_matrix((n, spec.n_buckets))
    coo = X.tocoo()
    rows, ids, vals = coo.row, coo.col, coo.data
    order = np.lexsort((ids, rows))
    rows, ids, vals = rows[order], ids[order], vals[order]
    out_r, out_c, out_v = [], [], []
    for k, ((alo, ahi), (blo, bhi)) in enumerate(spec.pairs):
        ma = (ids >= alo) & (ids < ahi)
        mb = (ids >= blo) & (ids < bhi)
        ar, ai, av = rows[ma], ids[ma], vals[ma]
        br, bi, bv = rows[mb], ids[mb], vals[mb]
        start = np.searchsorted(br, ar, "left")
        count = np.searchsorted(br, ar, "right") - start
        total = int(count.sum())
        if total == 0:
            continue
        rep = np.repeat(np.arange(ar.size), count)
        within = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
        bidx = np.repeat(start, count) + within
        out_r.append(ar[rep])
        out_c.append(_cross_hash(k, ai[rep], bi[bidx], spec.n_buckets))
        out_v.append(av[rep] * bv[bidx])
    if not out_r:
        return sp.csr_matrix((n, spec.n_buckets))
    m = sp.coo_matrix(
        (np.concatenate(out_v), (np.concatenate(out_r), np.concatenate(out_c))),
        shape=(n, spec.n_buckets),
    ).tocsr()
    m.sum_duplicates()
    m.eliminate_zeros()
    return m


def cross_product_transform(x: SparseVector, spec: CrossSpec, offset: int = 0) -> SparseVector:
    """Crossed features of one vector, ids shifted by ``offset``."""
    width = max(x.max_id() + 1, 1)
    m = cross_product_matrix(to_csr([x], width), spec)
    return SparseVector.from_pairs((int(i) + offset, v) for i, v in zip(m.indices, m.data))


# ---------------------------------------------------------------------------

@dataclass
class WideDeepModel(_Model):
    """Wide linear part over ``[x, cross(x)]`` plus a leaky-ReLU MLP over pooled embeddings."""

    w_wide: np.ndarray
    embeddings: np.ndarray
    layers: list
    w_deep: np.ndarray
    b: np.ndarray
    cross_spec: CrossSpec = field(default_factory=CrossSpec)
    leak: float = 0.01
    pooling: str = "sum"
    kind = "wide_deep"

    def __post_init__(self):
        if self.pooling not in ("sum", "mean"):
            raise ConfigError(f"pooling must be 'sum' or 'mean', got {self.pooling!r}")
        width = self.embeddings.shape[1]
        for W, bvec in self.layers:
            if W.shape[0] != width or bvec.shape != (W.shape[1],):
                raise ConfigError("deep layer dimensions do not chain")
            width = W.shape[1]
        if self.w_deep.shape != (width,):
            raise ConfigError("w_deep does not match the final layer width")
        if self.w_wide.shape[0] != self.n_features + self.n_cross:
            raise ConfigError("w_wide must cover raw plus crossed features")

    @classmethod
    def init(cls, n_features, deep_layers=(400, 300, 200, 100), embedding_dim=16,
             cross_spec=None, seed=0, leak=0.01, pooling="sum"):
        rng = np.random.default_rng(seed)
        cross_spec = cross_spec or CrossSpec()
        n_cross = cross_spec.n_buckets if cross_spec.pairs else 0
        bound = glorot_bound(n_features, embedding_dim)
        emb = rng.uniform(-bound, bound, size=(n_features, embedding_dim))
        sizes = [embedding_dim, *deep_layers]
        dense = init_params(sizes, rng)
        layers = [(dense[f"layer{k}_W"], dense[f"layer{k}_b"]) for k in range(len(deep_layers))]
        out = init_params([sizes[-1], 1], rng, prefix="out")
        return cls(np.zeros(n_features + n_cross), emb, layers, out["out0_W"][:, 0].copy(),
                   np.zeros(1), cross_spec, leak, pooling)

    @property
    def n_features(self):
        return self.embeddings.shape[0]

    @property
    def n_cross(self):
        return self.cross_spec.n_buckets if self.cross_spec.pairs else 0

    def params(self):
        p = {"w_wide": self.w_wide, "embeddings": self.embeddings}
        for k, (W, bvec) in enumerate(self.layers):
            p[f"layer{k}_W"] = W
            p[f"layer{k}_b"] = bvec
        p["w_deep"] = self.w_deep
        p["b"] = self.b
        return p

    def wide_input(self, X):
        if not self.n_cross:
            return X
        return sp.hstack([X, cross_product_matrix(X, self.cross_spec)], format="csr")

    def forward(self, X):
        if X.shape[1] != self.n_features:
            raise ConfigError(f"expected {self.n_features} features, got {X.shape[1]}")
        wcols, Xw = _active(self.wide_input(X))
        z = Xw @ self.w_wide[wcols]
        cols, Xs = _active(X)
        h = np.asarray(Xs @ self.embeddings[cols])
        scale = None
        if self.pooling == "mean":
            nnz = np.diff(X.indptr).astype(np.float64)
            scale = np.where(nnz > 0, 1.0 / np.maximum(nnz, 1.0), 0.0)
            h = h * scale[:, None]
        hs, pre = [h], []
        for W, bvec in self.layers:
            a = h @ W + bvec
            h = leaky_relu(a, self.leak)
            pre.append(a)
            hs.append(h)
        z = z + h @ self.w_deep + self.b[0]
        return z, (wcols, Xw, cols, Xs, scale, hs, pre)

    def backward(self, cache, g):
        wcols, Xw, cols, Xs, scale, hs, pre = cache
        grads = {"w_wide": (wcols, Xw.T @ g), "b": np.array([g.sum()])}
        grads["w_deep"] = hs[-1].T @ g
        dh = np.outer(g, self.w_deep)
        for k in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[k]
            da = dh * np.where(pre[k] > 0, 1.0, self.leak)
            grads[f"layer{k}_W"] = hs[k].T @ da
            grads[f"layer{k}_b"] = da.sum(axis=0)
            dh = da @ W.T
        if scale is not None:
            dh = dh * scale[:, None]
        grads["embeddings"] = (cols, np.asarray(Xs.T @ dh))
        return grads

    def meta(self):
        return {"cross_spec": self.cross_spec.to_dict(), "leak": self.leak,
                "pooling": self.pooling, "n_layers": len(self.layers)}


def predict_logit_logistic(m: LogisticModel, x: SparseVector) -> float:
    return float(m.logits(x)[0])


def predict_logit_wide_deep(m: WideDeepModel, x: SparseVector) -> float:
    return float(m.logits(x)[0])


def predict_delay_rate(m: DelayModel, x: SparseVector) -> float:
    return float(m.rate(x)[0])


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"FNCTRCKPT1\n"


def save_arrays(fh, arrays: dict, meta: dict) -> None:
    """Write named float arrays plus JSON metadata; byte-deterministic and bit-exact."""
    header = json.dumps({"meta": meta, "names": list(arrays)}, sort_keys=True).encode()
    fh.write(CKPT_MAGIC)
    fh.write(len(header).to_bytes(8, "little"))
    fh.write(header)
    for name in arrays:
        np.save(fh, np.ascontiguousarray(arrays[name]), allow_pickle=False)


def load_arrays(fh) -> tuple[dict, dict]:
    if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    n = int.from_bytes(fh.read(8), "little")
    header = json.loads(fh.read(n))
    arrays = {name: np.load(fh, allow_pickle=False) for name in header["names"]}
    return arrays, header["meta"]


def model_to_arrays(model) -> tuple[dict, dict]:
    meta = {"kind": model.kind}
    if isinstance(model, WideDeepModel):
        meta.update(model.meta())
    return dict(model.params()), meta


def model_from_arrays(arrays: dict, meta: dict):
    kind = meta["kind"]
    if kind == "logistic":
        return LogisticModel(arrays["w"].copy(), arrays["bias"].copy())
    if kind == "delay":
        return DelayModel(arrays["w"].copy())
    if kind == "wide_deep":
        layers = [(arrays[f"layer{k}_W"].copy(), arrays[f"layer{k}_b"].copy())
                  for k in range(meta["n_layers"])]
        return WideDeepModel(arrays["w_wide"].copy(), arrays["embeddings"].copy(), layers,
                             arrays["w_deep"].copy(), arrays["b"].copy(),
                             CrossSpec.from_dict(meta["cross_spec"]), meta["leak"], meta["pooling"])
    raise ValueError(f"unknown model kind {kind!r}")


def save_snapshot(path, snapshot) -> None:
    arrays, meta = model_to_arrays(snapshot.model)
    arrays = {f"model/{k}": v for k, v in arrays.items()}
    full_meta = {"version": snapshot.version, "step": snapshot.step,
                 "calibrate": snapshot.calibrate, "model": meta}
    if snapshot.delay_model is not None:
        d_arrays, d_meta = model_to_arrays(snapshot.delay_model)
        arrays.update({f"delay/{k}": v for k, v in d_arrays.items()})
        full_meta["delay"] = d_meta
    buf = io.BytesIO()
    save_arrays(buf, arrays, full_meta)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_snapshot(path):
    with open(path, "rb") as fh:
        arrays, meta = load_arrays(fh)

    def group(prefix):
        return {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith(prefix + "/")}

    model = model_from_arrays(group("model"), meta["model"]).frozen_copy()
    delay = None
    if "delay" in meta:
        delay = model_from_arrays(group("delay"), meta["delay"]).frozen_copy()
    return ModelSnapshot(meta["version"], meta["step"], model, delay, meta["calibrate"])
