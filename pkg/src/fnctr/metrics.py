"""Offline metrics: cross entropy, RCE, PR-AUC, pooled RCE and calibration bins."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import stats

from .core import ContractError

CLIP = 1e-7


def _arrays(preds, labels, weights):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    weights = np.ones_like(preds) if weights is None else np.asarray(weights, dtype=np.float64)
    if not (preds.shape == labels.shape == weights.shape) or preds.ndim != 1:
        raise ContractError("preds, labels and weights must be 1-d arrays of equal length")
    return preds, labels, weights


def cross_entropy(preds, labels, weights=None) -> float:
    """Weighted mean negative log-likelihood with predictions clipped to [1e-7, 1 - 1e-7]."""
    p, y, w = _arrays(preds, labels, weights)
    if p.size == 0:
        raise ContractError("cross_entropy of an empty set")
    p = np.clip(p, CLIP, 1 - CLIP)
    nll = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    return float(np.sum(w * nll) / np.sum(w))


def naive_baseline(labels, weights=None) -> float:
    """Constant prediction equal to the weighted average label."""
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise ContractError("naive_baseline needs at least one example")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(np.clip(np.sum(w * y) / np.sum(w), CLIP, 1 - CLIP))


def rce(ce_pred: float, ce_naive: float) -> float:
    if not ce_naive > 0:
        raise ValueError("ce_naive must be positive")
    # scaling before subtracting keeps decimal hand values exact, e.g. (0.4, 0.5) -> 20.0
    return (100.0 * ce_naive - 100.0 * ce_pred) / ce_naive


def pr_auc(preds, labels, weights=None) -> float:
    """Area under the step-interpolated precision-recall curve.

    Thresholds are the distinct scores in descending order; tied scores
    enter together.  Each threshold contributes precision times the recall
    gained there.
    """
    p, y, w = _arrays(preds, labels, weights)
    total_pos = float(np.sum(w * y))
    if not total_pos > 0:
        raise ValueError("pr_auc needs at least one positive")
    order = np.argsort(-p, kind="stable")
    p, y, w = p[order], y[order], w[order]
    last = np.r_[p[1:] != p[:-1], True]
    tp = np.cumsum(w * y)[last]
    pp = np.cumsum(w)[last]
    recall = tp / total_pos
    gain = np.diff(np.r_[0.0, recall])
    return math.fsum((tp / pp * gain).tolist())


def pooled_rce(models: Sequence[Callable], X, labels, weights=None,
               baseline: Optional[float] = None) -> List[float]:
    """RCE of every model on one shared example set against one shared baseline.

    ``models`` are callables mapping ``X`` to CTR predictions.  The baseline
    defaults to the weighted average label of the shared set.
    """
    if baseline is None:
        baseline = naive_baseline(labels, weights)
    y = np.asarray(labels, dtype=np.float64)
    ce_naive = cross_entropy(np.full(y.shape, baseline), y, weights)
    return [rce(cross_entropy(m(X), y, weights), ce_naive) for m in models]


@dataclass(frozen=True)
class CalibrationBin:
    lo: float
    hi: float
    mean_prediction: Optional[float]
    positive_rate: Optional[float]
    count: int


def calibration_report(preds, labels, n_bins: int = 20, weights=None) -> List[CalibrationBin]:
    """Equal-width bins over [0, 1]; empty bins report ``None`` means."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    p, y, w = _arrays(preds, labels, weights)
    idx = np.minimum((p * n_bins).astype(np.int64), n_bins - 1)
    out = []
    for k in range(n_bins):
        m = idx == k
        cnt = int(m.sum())
        if cnt == 0:
            out.append(CalibrationBin(k / n_bins, (k + 1) / n_bins, None, None, 0))
            continue
        ws = w[m].sum()
        out.append(CalibrationBin(k / n_bins, (k + 1) / n_bins, float(np.sum(w[m] * p[m]) / ws),
                                  float(np.sum(w[m] * y[m]) / ws), cnt))
    return out


@dataclass
class MetricsReport:
    model_id: str
    loss: str
    n_examples: int
    ce: float
    rce: float
    pr_auc: float
    calibration: list = field(default_factory=list)
    model: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True)


def evaluate(preds, labels, weights=None, *, baseline: float, model_id: str = "",
             loss: str = "", n_bins: int = 20) -> MetricsReport:
    y = np.asarray(labels, dtype=np.float64)
    ce = cross_entropy(preds, y, weights)
    ce_naive = cross_entropy(np.full(y.shape, baseline), y, weights)
    return MetricsReport(model_id, loss, int(y.size), ce, rce(ce, ce_naive),
                         pr_auc(preds, y, weights),
                         [asdict(b) for b in calibration_report(preds, y, n_bins, weights)])


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Unpaired t-test without the equal-variance assumption."""
    res = stats.ttest_ind(np.asarray(a, dtype=float), np.asarray(b, dtype=float), equal_var=False)
    return float(res.statistic), float(res.pvalue)
