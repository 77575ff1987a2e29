import bz2
import gzip
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fnctr.core import ConfigError, DataError, ImpressionEvent, SparseVector, TrainingExample
from fnctr.stream import (
    CriteoParseError,
    CriteoRecord,
    CriteoSchema,
    GroundTruth,
    StreamEvent,
    criteo_features,
    criteo_snapshot_dataset,
    derive_criteo_fn_dataset,
    downsample_negatives,
    format_criteo_record,
    gen_synthetic,
    parse_criteo_line,
    read_criteo,
    snapshot_label,
    to_fake_negative_stream,
)

X = SparseVector((0,), (1.0,))
HOUR = 3600.0


def imp(i, t, delay=None):
    return ImpressionEvent(i, t, X, delay is not None, delay)


def test_synthetic_rates_match_ground_truth():
    gt = GroundTruth(np.array([0.0, math.log(0.1 / 0.9)]), np.array([math.log(1 / 60), math.log(1 / 600)]), (2,))
    np.testing.assert_allclose(gt.ctr([[0], [1]]), [0.5, 0.1])
    imps = gen_synthetic(gt, 60_000, seed=5)
    for pid, ctr, mean_delay in [(0, 0.5, 60.0), (1, 0.1, 600.0)]:
        rows = [i for i in imps if i.features.ids == (pid,)]
        conv = np.array([i.converts for i in rows])
        se = math.sqrt(ctr * (1 - ctr) / len(rows))
        assert abs(conv.mean() - ctr) < 3 * se
        d = np.array([i.delay for i in rows if i.converts])
        assert abs(d.mean() - mean_delay) < 3 * mean_delay / math.sqrt(d.size)


def test_gen_synthetic_is_seeded():
    gt = GroundTruth.from_pattern_table([0.2, 0.4], [0.1, 0.1])
    assert gen_synthetic(gt, 50, 3) == gen_synthetic(gt, 50, 3)
    assert gen_synthetic(gt, 50, 3) != gen_synthetic(gt, 50, 4)
    with pytest.raises(ConfigError):
        gen_synthetic(gt, 0, 3)


def test_ground_truth_layout_and_round_trip():
    gt = GroundTruth(np.zeros(5), np.zeros(5), (3, 2), field_probs=[[0.5, 0.25, 0.25], [0.9, 0.1]])
    assert gt.field_ranges() == [(0, 3), (3, 5)]
    assert gt.patterns().tolist() == [[0, 3], [0, 4], [1, 3], [1, 4], [2, 3], [2, 4]]
    back = GroundTruth.from_dict(gt.to_dict())
    assert back.to_dict() == gt.to_dict()
    with pytest.raises(ConfigError):
        GroundTruth(np.zeros(4), np.zeros(4), (3, 2))
    with pytest.raises(ConfigError):
        GroundTruth(np.zeros(2), np.zeros(2), (2,), field_probs=[[0.7, 0.7]])


def test_fake_negative_stream_example():
    events = to_fake_negative_stream([imp(7, 100.0, 50.0)])
    assert [(e.emit_time, e.example.label) for e in events] == [(100.0, 0), (150.0, 1)]
    assert events[0].example.elapsed == 0.0 and events[0].example.time_to_click is None
    assert events[1].example.time_to_click == 50.0
    assert all(e.impression_id == 7 for e in events)
    assert [e.example.label for e in to_fake_negative_stream([imp(1, 5.0)])] == [0]


def test_fake_negative_stream_counts_and_order():
    gt = GroundTruth.from_pattern_table([0.3], [1 / 30.0], horizon=1000.0)
    imps = gen_synthetic(gt, 1000, seed=1)
    events = to_fake_negative_stream(imps)
    n_conv = sum(i.converts for i in imps)
    assert len(events) == 1000 + n_conv
    assert abs(len(events) - 1300) < 3 * math.sqrt(1000 * 0.3 * 0.7)
    keys = [e.sort_key() for e in events]
    assert keys == sorted(keys)
    # every impression has exactly one negative, emitted at serve time
    negs = {e.impression_id: e.emit_time for e in events if e.example.label == 0}
    assert negs == {i.impression_id: i.impression_time for i in imps}
    for e in events:
        if e.example.label == 1:
            assert e.emit_time > negs[e.impression_id]


def test_fake_negative_stream_positive_share_per_pattern():
    ctrs = np.array([0.1, 0.2, 0.3, 0.4])
    gt = GroundTruth.from_pattern_table(ctrs, [1 / 60.0] * 4, horizon=86400.0)
    events = to_fake_negative_stream(gen_synthetic(gt, 80_000, seed=2))
    pid = np.array([e.example.features.ids[0] for e in events])
    y = np.array([e.example.label for e in events])
    for k, p in enumerate(ctrs):
        b = p / (1 + p)
        m = pid == k
        assert abs(y[m].mean() - b) < 3 * math.sqrt(b * (1 - b) / m.sum())


def test_stream_event_line_round_trip():
    for e in to_fake_negative_stream([imp(3, 10.5, 2.25)]):
        assert StreamEvent.parse(e.format()) == e


def test_snapshot_label_examples():
    snap = 12 * HOUR
    imps = [imp(0, 0.0, 1 * HOUR), imp(1, 0.0, 10 * HOUR), imp(2, 11 * HOUR, 2 * HOUR),
            imp(3, 1 * HOUR), imp(4, 13 * HOUR, 1.0)]
    out = snapshot_label(imps, snap)
    assert [e.label for e in out] == [1, 0, 0, 0]
    assert [e.elapsed for e in out] == [12 * HOUR, 12 * HOUR, 1 * HOUR, 11 * HOUR]
    assert out[0].time_to_click == HOUR and out[1].time_to_click is None
    # without the window the 10h conversion counts
    assert [e.label for e in snapshot_label(imps, snap, window=None)] == [1, 1, 0, 0]


def test_snapshot_label_with_no_window_recovers_truth():
    gt = GroundTruth.from_pattern_table([0.2, 0.5], [0.01, 0.01], horizon=1000.0)
    imps = gen_synthetic(gt, 500, seed=9)
    late = max(i.impression_time + (i.delay or 0.0) for i in imps)
    labels = [e.label for e in snapshot_label(imps, late, window=None)]
    assert labels == [int(i.converts) for i in imps]


def test_downsampling():
    exs = [TrainingExample(X, k % 2) for k in range(40_000)]
    assert downsample_negatives(exs, 1.0) == exs
    out = downsample_negatives(exs, 0.05, seed=0)
    assert sum(e.label for e in out) == 20_000
    negs = [e for e in out if e.label == 0]
    assert all(e.weight == 20.0 for e in negs)
    # weighted negative count is unbiased
    kept = len(negs)
    assert abs(kept * 20.0 - 20_000) < 3 * 20.0 * math.sqrt(20_000 * 0.05 * 0.95)
    assert downsample_negatives(exs, 0.05, seed=0) == out
    with pytest.raises(ConfigError):
        downsample_negatives(exs, 0.0)


# -- Criteo ----------------------------------------------------------------------

SCHEMA = CriteoSchema(n_int=2, n_cat=2)

records = st.builds(
    CriteoRecord,
    click_time=st.integers(0, 10 ** 6).map(float),
    conversion_time=st.one_of(st.none(), st.integers(0, 10 ** 6).map(float)),
    integer_features=st.tuples(*[st.one_of(st.none(), st.integers(0, 10 ** 5))] * 2),
    categorical_features=st.tuples(*[st.one_of(st.none(), st.text("abcdef0123", min_size=1, max_size=8))] * 2),
)


@given(records)
def test_criteo_line_round_trip(rec):
    assert parse_criteo_line(format_criteo_record(rec), schema=SCHEMA) == rec


def test_criteo_parse_errors_carry_line_number(tmp_path):
    path = tmp_path / "log.txt"
    path.write_text("10\t\t1\t2\ta\tb\n10\t\t1\ta\tb\n")
    with pytest.raises(CriteoParseError) as info:
        read_criteo(path, SCHEMA)
    assert info.value.line_no == 2
    assert "line 2" in str(info.value)
    with pytest.raises(DataError):
        parse_criteo_line("x\t\t1\t2\ta\tb", 1, SCHEMA)


@pytest.mark.parametrize("opener, suffix", [(open, ".txt"), (gzip.open, ".gz"), (bz2.open, ".bz2")])
def test_read_criteo_compressed(tmp_path, opener, suffix):
    path = tmp_path / f"log{suffix}"
    with opener(path, "wt") as fh:
        fh.write("10\t20\t1\t\ta\t\n")
    assert read_criteo(path, SCHEMA) == [CriteoRecord(10.0, 20.0, (1, None), ("a", None))]


def test_derive_criteo_fn_dataset():
    recs = [CriteoRecord(0.0, 100.0, (1, 5), ("a", "b")), CriteoRecord(50.0, None, (2, None), ("a", "c")),
            CriteoRecord(60.0, 60.0, (None, None), (None, "c")), CriteoRecord(70.0, None, (0, 0), ("z", "z"))]
    events = derive_criteo_fn_dataset(recs, 1 << 12)
    assert len(events) == 4 + 2
    assert [(e.emit_time, e.impression_id, e.example.label) for e in events] == [
        (0.0, 0, 0), (50.0, 1, 0), (60.0, 2, 0), (60.0, 2, 1), (70.0, 3, 0), (100.0, 0, 1)]
    pos = {e.impression_id: e.example for e in events if e.example.label == 1}
    assert pos[0].time_to_click == 100.0
    assert pos[2].time_to_click == pytest.approx(1e-3)
    # elapsed is measured against the latest timestamp in the log
    assert {e.impression_id: e.example.elapsed for e in events} == {0: 100.0, 1: 50.0, 2: 40.0, 3: 30.0}
    snap = criteo_snapshot_dataset(recs, 1 << 12)
    assert [e.label for e in snap] == [1, 0, 1, 0]
    with pytest.raises(DataError):
        derive_criteo_fn_dataset([CriteoRecord(10.0, 5.0, (None, None), (None, None))])


def test_criteo_features_are_hashed_one_hot():
    rec = CriteoRecord(0.0, None, (3, None), ("a", "b"))
    v = criteo_features(rec, 1 << 20)
    assert len(v) == 3 and set(v.values) == {1.0}
    assert criteo_features(rec, 1 << 20) == v
    # integers in the same log-squared bucket share an id
    assert criteo_features(CriteoRecord(0.0, None, (30, None), (None, None)), 1 << 20) == \
        criteo_features(CriteoRecord(0.0, None, (31, None), (None, None)), 1 << 20)
