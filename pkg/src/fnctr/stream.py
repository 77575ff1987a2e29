"""Synthetic ground truth, fake-negative streams, snapshot labeling, Criteo ingestion."""
from __future__ import annotations

import bz2
import gzip
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .core import (
    ATTRIBUTION_WINDOW,
    ConfigError,
    DataError,
    ImpressionEvent,
    SparseVector,
    TrainingExample,
    hash_token,
)


@dataclass(frozen=True)
class StreamEvent:
    emit_time: float
    example: TrainingExample
    impression_id: int

    def sort_key(self):
        return (self.emit_time, self.impression_id, self.example.label)

    def format(self) -> str:
        return f"{self.emit_time!r}\t{self.impression_id}\t{self.example.format()}"

    @classmethod
    def parse(cls, line: str) -> "StreamEvent":
        t, iid, rest = line.rstrip("\n").split("\t", 2)
        return cls(float(t), TrainingExample.parse(rest), int(iid))


@dataclass
class GroundTruth:
    """True CTR and delay-rate weights over independent categorical fields.

    Field ``k`` occupies ids ``[offset_k, offset_k + cardinalities[k])``; every
    impression activates exactly one id per field with value 1.
    """

    w_star: np.ndarray
    w_d_star: np.ndarray
    cardinalities: tuple
    field_probs: Optional[list] = None
    horizon: float = 86400.0

    def __post_init__(self):
        self.cardinalities = tuple(int(c) for c in self.cardinalities)
        if not self.cardinalities or any(c < 1 for c in self.cardinalities):
            raise ConfigError("every field needs a positive cardinality")
        self.w_star = np.asarray(self.w_star, dtype=np.float64)
        self.w_d_star = np.asarray(self.w_d_star, dtype=np.float64)
        if self.w_star.shape != (self.n_features,) or self.w_d_star.shape != (self.n_features,):
            raise ConfigError(f"weights must have length {self.n_features}")
        if self.field_probs is not None:
            probs = []
            for c, p in zip(self.cardinalities, self.field_probs):
                p = np.asarray(p, dtype=np.float64)
                if p.shape != (c,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                    raise ConfigError("field_probs must be distributions matching cardinalities")
                probs.append(p)
            self.field_probs = probs
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")

    @property
    def n_features(self) -> int:
        return int(sum(self.cardinalities))

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.cardinalities)[:-1]]).astype(np.int64)

    def field_ranges(self) -> list:
        return [(int(o), int(o + c)) for o, c in zip(self.offsets, self.cardinalities)]

    def ctr(self, ids) -> np.ndarray:
        """True CTR for rows of active ids, shape (n, n_fields)."""
        return expit(self.w_star[np.asarray(ids)].sum(axis=-1))

    def rate(self, ids) -> np.ndarray:
        return np.exp(self.w_d_star[np.asarray(ids)].sum(axis=-1))

    def patterns(self) -> np.ndarray:
        """Every combination of one id per field, shape (n_patterns, n_fields)."""
        grids = np.meshgrid(*[np.arange(c) for c in self.cardinalities], indexing="ij")
        cats = np.stack([g.ravel() for g in grids], axis=1)
        return cats + self.offsets

    def to_dict(self) -> dict:
        return {
            "w_star": self.w_star.tolist(),
            "w_d_star": self.w_d_star.tolist(),
            "cardinalities": list(self.cardinalities),
            "field_probs": None if self.field_probs is None else [p.tolist() for p in self.field_probs],
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(np.array(d["w_star"]), np.array(d["w_d_star"]), tuple(d["cardinalities"]),
                   d.get("field_probs"), d.get("horizon", 86400.0))

    @classmethod
    def from_pattern_table(cls, ctrs, rates, horizon=86400.0) -> "GroundTruth":
        """Single field with one pattern per entry: exact per-pattern CTR and delay rate."""
        ctrs = np.asarray(ctrs, dtype=np.float64)
        rates = np.asarray(rates, dtype=np.float64)
        return cls(np.log(ctrs / (1 - ctrs)), np.log(rates), (len(ctrs),), None, horizon)


def _draw_categories(gt: GroundTruth, n: int, rng) -> np.ndarray:
    cols = []
    for k, c in enumerate(gt.cardinalities):
        p = None if gt.field_probs is None else gt.field_probs[k]
        cols.append(rng.choice(c, size=n, p=p))
    return np.stack(cols, axis=1) + gt.offsets


def gen_synthetic(gt: GroundTruth, n: int, seed, start_id: int = 0) -> List[ImpressionEvent]:
    """Impressions with hidden conversions drawn from the ground truth."""
    if n <= 0:
        raise ConfigError("n must be positive")
    rng = np.random.default_rng(seed)
    times = rng.uniform(0.0, gt.horizon, size=n)
    ids = _draw_categories(gt, n, rng)
    converts = rng.random(n) < gt.ctr(ids)
    delays = rng.exponential(1.0 / gt.rate(ids))
    delays = np.maximum(delays, np.finfo(np.float64).tiny)
    out = []
    ones = (1.0,) * ids.shape[1]
    for k in range(n):
        # ids of distinct fields are disjoint and offsets ascend, so rows are already sorted
        x = SparseVector(tuple(int(i) for i in ids[k]), ones)
        c = bool(converts[k])
        out.append(ImpressionEvent(start_id + k, float(times[k]), x, c, float(delays[k]) if c else None))
    return out


def to_fake_negative_stream(impressions: Iterable[ImpressionEvent]) -> List[StreamEvent]:
    """Every impression is emitted as a negative; conversions are replayed as positives."""
    events = []
    for imp in impressions:
        events.append(StreamEvent(imp.impression_time,
                                  TrainingExample(imp.features, 0, 1.0, elapsed=0.0),
                                  imp.impression_id))
        if imp.converts:
            events.append(StreamEvent(imp.impression_time + imp.delay,
                                      TrainingExample(imp.features, 1, 1.0, elapsed=imp.delay,
                                                      time_to_click=imp.delay),
                                      imp.impression_id))
    events.sort(key=StreamEvent.sort_key)
    return events


def snapshot_label(impressions: Iterable[ImpressionEvent], snapshot_time: float,
                   window: Optional[float] = ATTRIBUTION_WINDOW) -> List[TrainingExample]:
    """Label impressions as observed at ``snapshot_time``.

    Impressions served after the snapshot are not yet visible and are skipped.
    ``window=None`` disables the attribution window.
    """
    limit = math.inf if window is None else window
    out = []
    for imp in impressions:
        if imp.impression_time > snapshot_time:
            continue
        seen = (imp.converts and imp.impression_time + imp.delay <= snapshot_time
                and imp.delay <= limit)
        out.append(TrainingExample(imp.features, int(seen), 1.0,
                                   elapsed=snapshot_time - imp.impression_time,
                                   time_to_click=imp.delay if seen else None))
    return out


def downsample_negatives(examples: Sequence[TrainingExample], rate: float = 0.05,
                         seed=0) -> List[TrainingExample]:
    """Keep each negative with probability ``rate`` and up-weight it by ``1 / rate``."""
    if not 0 < rate <= 1:
        raise ConfigError("rate must be in (0, 1]")
    if rate == 1:
        return list(examples)
    rng = np.random.default_rng(seed)
    u = rng.random(len(examples))
    out = []
    for ex, ui in zip(examples, u):
        if ex.label == 1:
            out.append(ex)
        elif ui < rate:
            out.append(TrainingExample(ex.features, 0, ex.weight / rate, ex.elapsed, ex.time_to_click))
    return out


# ---------------------------------------------------------------------------
# Criteo conversion logs

@dataclass(frozen=True)
class CriteoSchema:
    """Column layout: click ts, conversion ts, integer features, categorical features."""

    n_int: int = 8
    n_cat: int = 9

    @property
    def n_columns(self) -> int:
        return 2 + self.n_int + self.n_cat


class CriteoParseError(DataError):
    def __init__(self, msg, line_no=None):
        self.line_no = line_no
        super().__init__(msg if line_no is None else f"line {line_no}: {msg}")


@dataclass(frozen=True)
class CriteoRecord:
    click_time: float
    conversion_time: Optional[float] = None
    integer_features: tuple = field(default_factory=tuple)
    categorical_features: tuple = field(default_factory=tuple)

    @property
    def converts(self) -> bool:
        return self.conversion_time is not None


def _fmt_num(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def format_criteo_record(rec: CriteoRecord) -> str:
    cols = [_fmt_num(rec.click_time), _fmt_num(rec.conversion_time)]
    cols += ["" if v is None else str(v) for v in rec.integer_features]
    cols += ["" if v is None else v for v in rec.categorical_features]
    return "\t".join(cols)


def parse_criteo_line(line: str, line_no: Optional[int] = None,
                      schema: CriteoSchema = CriteoSchema()) -> CriteoRecord:
    cols = line.rstrip("\r\n").split("\t")
    if len(cols) != schema.n_columns:
        raise CriteoParseError(f"expected {schema.n_columns} columns, got {len(cols)}", line_no)
    try:
        click = float(cols[0])
        conv = float(cols[1]) if cols[1] else None
        ints = tuple(int(v) if v else None for v in cols[2:2 + schema.n_int])
    except ValueError as exc:
        raise CriteoParseError(str(exc), line_no) from None
    cats = tuple(v if v else None for v in cols[2 + schema.n_int:])
    return CriteoRecord(click, conv, ints, cats)


def _open_text(path):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rt")
    if path.endswith(".bz2"):
        return bz2.open(path, "rt")
    return open(path)


def read_criteo(path, schema: CriteoSchema = CriteoSchema()) -> List[CriteoRecord]:
    with _open_text(path) as fh:
        return [parse_criteo_line(line, k, schema) for k, line in enumerate(fh, 1) if line.strip()]


def _int_bucket(v: int) -> str:
    if v < 2:
        return str(v)
    return f"b{int(math.log(v) ** 2)}"


def criteo_features(rec: CriteoRecord, n_features: int) -> SparseVector:
    """Hashed one-hot encoding; integer features are log-squared binned first."""
    ids = [hash_token(f"i{k}={_int_bucket(v)}", n_features)
           for k, v in enumerate(rec.integer_features) if v is not None]
    ids += [hash_token(f"c{k}={v}", n_features)
            for k, v in enumerate(rec.categorical_features) if v is not None]
    return SparseVector.binary(ids)


_MIN_DELAY = 1e-3


def _snapshot_time(records: Sequence[CriteoRecord]) -> float:
    latest = -math.inf
    for k, r in enumerate(records):
        if r.conversion_time is not None and r.conversion_time < r.click_time:
            raise DataError(f"record {k}: conversion before click")
        latest = max(latest, r.conversion_time if r.converts else r.click_time)
    return latest


def derive_criteo_fn_dataset(records: Sequence[CriteoRecord],
                             n_features: int = 2 ** 18) -> List[StreamEvent]:
    """Fake-negative version of a conversion log, ordered by event time.

    Every record becomes a negative at its click time; converting records
    are replayed as a positive at the conversion time.  Elapsed times are
    measured against the latest timestamp in the log.  Same-second
    conversions get a 1 ms delay so that time-to-click stays positive.
    """
    snap = _snapshot_time(records)
    events = []
    for k, r in enumerate(records):
        x = criteo_features(r, n_features)
        e = snap - r.click_time
        events.append(StreamEvent(r.click_time, TrainingExample(x, 0, 1.0, elapsed=e), k))
        if r.converts:
            d = max(r.conversion_time - r.click_time, _MIN_DELAY)
            events.append(StreamEvent(r.conversion_time,
                                      TrainingExample(x, 1, 1.0, elapsed=e, time_to_click=d), k))
    events.sort(key=StreamEvent.sort_key)
    return events


def criteo_snapshot_dataset(records: Sequence[CriteoRecord],
                            n_features: int = 2 ** 18) -> List[TrainingExample]:
    """The log as labeled at its latest timestamp, one example per record."""
    snap = _snapshot_time(records)
    out = []
    for r in records:
        d = max(r.conversion_time - r.click_time, _MIN_DELAY) if r.converts else None
        out.append(TrainingExample(criteo_features(r, n_features), int(r.converts), 1.0,
                                   elapsed=snap - r.click_time, time_to_click=d))
    return out
