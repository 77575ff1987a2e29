"""Minibatch SGD in offline (multi-epoch) and continuous (single-pass) modes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .core import Batch, ConfigError, ContractError, Hyperparams, ModelSnapshot, make_batch
from .losses import compute_loss, fn_calibrate, resolve_loss
from .models import CrossSpec, DelayModel, LogisticModel, WideDeepModel
from .stream import StreamEvent

log = logging.getLogger(__name__)

MODEL_KINDS = ("logistic", "wide_deep")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, reason: str):
        self.step = step
        super().__init__(f"training diverged at step {step}: {reason}")


@dataclass
class TrainerState:
    model: Union[LogisticModel, WideDeepModel]
    hyper: Hyperparams
    loss: str = "log"
    delay_model: Optional[DelayModel] = None
    step: int = 0
    calibrate: bool = False
    rng: np.random.Generator = None
    next_version: int = 1
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.loss, flag = resolve_loss(self.loss)
        self.calibrate = self.calibrate or flag
        if self.rng is None:
            self.rng = np.random.default_rng(self.hyper.seed)
        if self.loss == "delayed_feedback" and self.delay_model is None:
            self.delay_model = DelayModel.zeros(self.model.n_features)

    @property
    def n_features(self) -> int:
        return self.model.n_features

    def snapshot(self) -> ModelSnapshot:
        snap = ModelSnapshot(
            self.next_version, self.step, self.model.frozen_copy(),
            None if self.delay_model is None else self.delay_model.frozen_copy(),
            self.calibrate,
        )
        self.next_version += 1
        return snap


def build_model(kind: str, n_features: int, hyper: Hyperparams, embedding_dim: int = 16,
                cross_spec: Optional[CrossSpec] = None, pooling: str = "sum", leak: float = 0.01):
    if kind == "logistic":
        return LogisticModel.zeros(n_features)
    if kind == "wide_deep":
        return WideDeepModel.init(n_features, hyper.deep_layers, embedding_dim, cross_spec,
                                  seed=hyper.seed, leak=leak, pooling=pooling)
    raise ConfigError(f"unknown model {kind!r}; expected one of {', '.join(MODEL_KINDS)}")


def make_state(kind: str, loss: str, n_features: int, hyper: Hyperparams = Hyperparams(),
               **model_kw) -> TrainerState:
    return TrainerState(build_model(kind, n_features, hyper, **model_kw), hyper, loss)


def _as_batch(data, n_features) -> Batch:
    if isinstance(data, Batch):
        return data
    data = list(data)
    if data and isinstance(data[0], StreamEvent):
        data = [ev.example for ev in data]
    return make_batch(data, n_features)


def _apply(params: dict, grads: dict, eta: float, step: int) -> None:
    for name, g in grads.items():
        p = params[name]
        if isinstance(g, tuple):
            rows, vals = g
            p[rows] -= eta * vals
            touched = p[rows]
        else:
            p -= eta * g
            touched = p
        if not np.all(np.isfinite(touched)):
            raise DivergenceError(step, f"non-finite parameter {name}")


def learning_rate(state: TrainerState) -> float:
    h = state.hyper
    eta0 = h.df_learning_rate if state.loss == "delayed_feedback" else h.learning_rate
    return eta0 / (1.0 + h.decay * state.step)


def sgd_step(state: TrainerState, batch, loss: Optional[str] = None) -> TrainerState:
    """One SGD update with the mean per-example gradient of ``batch``."""
    batch = _as_batch(batch, state.n_features)
    n = len(batch)
    if n == 0:
        raise ContractError("batch must be non-empty")
    name = state.loss if loss is None else resolve_loss(loss)[0]
    df = name == "delayed_feedback"
    if df and state.delay_model is None:
        state.delay_model = DelayModel.zeros(state.n_features)

    with np.errstate(over="ignore", invalid="ignore"):
        z, cache = state.model.forward(batch.X)
        s = dcache = None
        if df:
            s, dcache = state.delay_model.forward(batch.X)
        values, dz, ds = compute_loss(name, z, batch.y, batch.weight, batch.elapsed,
                                      batch.time_to_click, s)
        mean_loss = float(values.sum() / n)
    if not np.isfinite(mean_loss) or not np.all(np.isfinite(dz)) or not np.all(np.isfinite(ds)):
        raise DivergenceError(state.step, "non-finite loss or gradient")

    eta = learning_rate(state)
    with np.errstate(over="ignore", invalid="ignore"):
        grads = state.model.backward(cache, dz / n)
        if df:
            d_grads = state.delay_model.backward(dcache, ds / n)
            shrink = 1.0 - eta * 2.0 * state.hyper.df_l2_alpha
            if shrink != 1.0:
                for m in (state.model, state.delay_model):
                    for p in m.params().values():
                        p *= shrink
            _apply(state.delay_model.params(), d_grads, eta, state.step)
        _apply(state.model.params(), grads, eta, state.step)
    state.trace.append((state.step, mean_loss))
    state.step += 1
    return state


def train_offline(state: TrainerState, dataset, epochs: int, shuffle: bool = True) -> TrainerState:
    """``epochs`` passes over ``dataset`` in minibatches, reshuffled each epoch."""
    if epochs == 0:
        return state
    batch = _as_batch(dataset, state.n_features)
    n = len(batch)
    if n == 0:
        raise ContractError("dataset must be non-empty")
    bs = state.hyper.batch_size
    for epoch in range(epochs):
        order = state.rng.permutation(n) if shuffle else np.arange(n)
        for lo in range(0, n, bs):
            sgd_step(state, batch.take(order[lo:lo + bs]))
        log.debug("epoch %d done at step %d", epoch, state.step)
    return state


def check_ordered(stream: Sequence[StreamEvent]) -> None:
    prev = None
    for k, ev in enumerate(stream):
        key = ev.sort_key()
        if prev is not None and key < prev:
            raise ContractError(f"stream out of order at event {k}")
        prev = key


def train_continuous(state: TrainerState, stream: Sequence[StreamEvent],
                     snapshot_every: int) -> List[ModelSnapshot]:
    """Single pass over an ordered stream in consecutive minibatches.

    A snapshot is emitted whenever the step count reaches a multiple of
    ``snapshot_every``.  A trailing partial batch is trained as a short batch.
    """
    if snapshot_every < 1:
        raise ConfigError("snapshot_every must be positive")
    stream = list(stream)
    check_ordered(stream)
    if not stream:
        return []
    return train_pass(state, _as_batch(stream, state.n_features), snapshot_every)


def train_pass(state: TrainerState, batch: Batch, snapshot_every: Optional[int] = None
               ) -> List[ModelSnapshot]:
    """Consecutive minibatches over ``batch`` in its given order."""
    if snapshot_every is not None and snapshot_every < 1:
        raise ConfigError("snapshot_every must be positive")
    bs = state.hyper.batch_size
    snaps = []
    for lo in range(0, len(batch), bs):
        sgd_step(state, batch.take(slice(lo, lo + bs)))
        if snapshot_every and state.step % snapshot_every == 0:
            snaps.append(state.snapshot())
    return snaps


def init_delay_from_data(state: TrainerState, batch: Batch) -> None:
    """Start the delay model at the rate implied by the mean observed time-to-click."""
    d = batch.time_to_click[(batch.y == 1) & np.isfinite(batch.time_to_click)]
    if d.size == 0 or state.delay_model is None:
        return
    nnz = np.diff(batch.X.indptr)
    mean_nnz = float(nnz[nnz > 0].mean()) if np.any(nnz > 0) else 1.0
    state.delay_model.w[:] = -np.log(d.mean()) / mean_nnz


def predict_snapshot(snapshot: ModelSnapshot, X) -> np.ndarray:
    """CTR predictions of a snapshot, applying the fake-negative calibration when flagged."""
    p = snapshot.model.predict_proba(X)
    if snapshot.calibrate:
        p = fn_calibrate(np.minimum(p, np.nextafter(1.0, 0.0)))
    return p
