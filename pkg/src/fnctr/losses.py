"""Per-example losses in logit space, with analytic gradients.

Every loss has a vectorized form ``*_arrays(z, y, w, ...)`` returning
``(value, d_value_d_logit, d_value_d_delay_logit)`` arrays, used by the
trainer, and a scalar form taking a :class:`LossInput`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .core import ConfigError, ContractError

TRAINING_LOSSES = ("log", "delayed_feedback", "pu", "fn_weighted")
LOSS_NAMES = TRAINING_LOSSES + ("fn_calibration",)


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class LossInput:
    logit: float
    label: int
    weight: float = 1.0
    elapsed: Optional[float] = None
    time_to_click: Optional[float] = None
    delay_logit: Optional[float] = None


@dataclass(frozen=True)
class LossOutput:
    value: float
    d_loss_d_logit: float
    d_loss_d_delay_logit: float = 0.0


def log_loss_arrays(z, y, w):
    z, y, w = (np.asarray(a, dtype=np.float64) for a in (z, y, w))
    value = w * (y * _softplus(-z) + (1 - y) * _softplus(z))
    grad = w * (expit(z) - y)
    return value, grad, np.zeros_like(z)


def delayed_feedback_arrays(z, y, w, elapsed, time_to_click, delay_logit):
    """Exponential-delay likelihood; negatives use the logsumexp form.

    For a negative observed ``e`` seconds after the impression,
    ``1 - f + f exp(-rate e) = (exp(-z) + exp(-rate e)) / (1 + exp(-z))``,
    so its loss is ``softplus(-z) - logaddexp(-z, -rate e)``.
    """
    z, y, w, s = (np.asarray(a, dtype=np.float64) for a in (z, y, w, delay_logit))
    e = np.asarray(elapsed, dtype=np.float64)
    d = np.asarray(time_to_click, dtype=np.float64)
    pos = y == 1
    if np.any(np.isnan(s)):
        raise ContractError("delayed-feedback loss requires delay_logit")
    if np.any(pos & np.isnan(d)):
        raise ContractError("delayed-feedback loss requires time_to_click on positives")
    if np.any(~pos & np.isnan(e)):
        raise ContractError("delayed-feedback loss requires elapsed on negatives")
    rate = np.exp(s)
    d0 = np.where(pos, d, 0.0)
    e0 = np.where(pos, 0.0, e)
    re = rate * e0

    v_pos = _softplus(-z) - s + rate * d0
    dz_pos = -expit(-z)
    ds_pos = rate * d0 - 1.0

    v_neg = _softplus(-z) - np.logaddexp(-z, -re)
    dz_neg = expit(re - z) - expit(-z)
    ds_neg = re * expit(z - re)

    value = w * np.where(pos, v_pos, v_neg)
    dz = w * np.where(pos, dz_pos, dz_neg)
    ds = w * np.where(pos, ds_pos, ds_neg)
    return value, dz, ds


def delayed_feedback_direct(z, y, elapsed, time_to_click, delay_logit):
    """Literal evaluation of the delayed-feedback likelihood (unweighted).

    Reference only: underflows/overflows for extreme inputs.
    """
    z, y, s = (np.asarray(a, dtype=np.float64) for a in (z, y, delay_logit))
    f = 1.0 / (1.0 + np.exp(-z))
    rate = np.exp(s)
    with np.errstate(invalid="ignore", divide="ignore"):
        pos = -(np.log(f) + np.log(rate) - rate * np.asarray(time_to_click, dtype=np.float64))
        neg = -np.log(1.0 - f + f * np.exp(-rate * np.asarray(elapsed, dtype=np.float64)))
    return np.where(y == 1, pos, neg)


def pu_arrays(z, y, w):
    z, y, w = (np.asarray(a, dtype=np.float64) for a in (z, y, w))
    pos = y == 1
    # log f - log(1 - f) is exactly the logit
    value = w * np.where(pos, -z, _softplus(z))
    grad = w * np.where(pos, -1.0, expit(z))
    return value, grad, np.zeros_like(z)


def fn_weighted_arrays(z, y, w, stop_prob=None):
    """Importance-weighted log loss for the fake-negative stream.

    Positives are weighted by ``1 + f`` and negatives by ``(1 - f)(1 + f)``
    with ``f`` held constant (``stop_prob``, defaulting to ``sigmoid(z)``):
    no gradient flows through the weights.
    """
    z, y, w = (np.asarray(a, dtype=np.float64) for a in (z, y, w))
    if stop_prob is None:
        f, one_minus_f = expit(z), expit(-z)
    else:
        f = np.asarray(stop_prob, dtype=np.float64)
        one_minus_f = 1.0 - f
    pos = y == 1
    w_pos = 1.0 + f
    w_neg = one_minus_f * (1.0 + f)
    value = w * np.where(pos, w_pos * _softplus(-z), w_neg * _softplus(z))
    grad = w * np.where(pos, -w_pos * expit(-z), w_neg * expit(z))
    return value, grad, np.zeros_like(z)


def fn_weighted_grad_wrt_prob(f, p):
    """Expected gradient wrt the prediction ``f`` on a stream with true CTR ``p``."""
    return (1.0 + f) * (f - p) / ((1.0 + p) * f)


def fn_calibrate(b):
    """Map a prediction of the biased stream back to a CTR: ``min(b / (1 - b), 1)``."""
    arr = np.asarray(b, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr >= 1) or np.any(np.isnan(arr)):
        raise ValueError("fn_calibrate needs probabilities in [0, 1)")
    out = np.minimum(arr / (1.0 - arr), 1.0)
    return float(out) if out.ndim == 0 else out


def resolve_loss(name: str) -> tuple[str, bool]:
    """Return (training loss, calibrate-at-prediction flag) for a loss name."""
    if name == "fn_calibration":
        return "log", True
    if name not in TRAINING_LOSSES:
        raise ConfigError(f"unknown loss {name!r}; expected one of {', '.join(LOSS_NAMES)}")
    return name, False


def compute_loss(name, z, y, w, elapsed=None, time_to_click=None, delay_logit=None):
    name, _ = resolve_loss(name)
    if name == "log":
        return log_loss_arrays(z, y, w)
    if name == "pu":
        return pu_arrays(z, y, w)
    if name == "fn_weighted":
        return fn_weighted_arrays(z, y, w)
    n = np.shape(z)
    if delay_logit is None:
        raise ContractError("delayed-feedback loss requires delay_logit")
    nan = np.full(n, np.nan)
    return delayed_feedback_arrays(
        z, y, w,
        nan if elapsed is None else elapsed,
        nan if time_to_click is None else time_to_click,
        delay_logit,
    )


def _scalar(name, inp: LossInput) -> LossOutput:
    def opt(x):
        return np.nan if x is None else x

    v, dz, ds = compute_loss(
        name, inp.logit, inp.label, inp.weight,
        opt(inp.elapsed), opt(inp.time_to_click),
        None if inp.delay_logit is None else inp.delay_logit,
    )
    return LossOutput(float(v), float(dz), float(ds))


def log_loss(inp: LossInput) -> LossOutput:
    return _scalar("log", inp)


def delayed_feedback_loss(inp: LossInput) -> LossOutput:
    return _scalar("delayed_feedback", inp)


def pu_loss(inp: LossInput) -> LossOutput:
    return _scalar("pu", inp)


def fn_weighted_loss(inp: LossInput) -> LossOutput:
    return _scalar("fn_weighted", inp)


def loss_by_name(name: str, inp: LossInput) -> LossOutput:
    return _scalar(name, inp)
