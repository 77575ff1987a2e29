import numpy as np
import pytest

from fnctr.core import ContractError, Hyperparams, SparseVector, TrainingExample, make_batch
from fnctr.metrics import cross_entropy
from fnctr.models import LogisticModel
from fnctr.stream import GroundTruth, StreamEvent, gen_synthetic, snapshot_label, to_fake_negative_stream
from fnctr.trainer import (
    DivergenceError,
    TrainerState,
    init_delay_from_data,
    learning_rate,
    make_state,
    predict_snapshot,
    sgd_step,
    train_continuous,
    train_offline,
    train_pass,
)

X0 = SparseVector((0,), (1.0,))


def example(y=1):
    return TrainingExample(X0, y)


def stream_of(n, dim=4):
    return [StreamEvent(float(k), TrainingExample(SparseVector((k % dim,), (1.0,)), k % 2), k)
            for k in range(n)]


def test_sgd_step_example():
    st = make_state("logistic", "log", 4)
    sgd_step(st, [example()])
    assert st.model.w[0] == pytest.approx(0.01)
    assert st.model.bias[0] == pytest.approx(0.01)
    np.testing.assert_array_equal(st.model.w[1:], 0.0)
    assert st.step == 1
    assert st.trace == [(0, pytest.approx(np.log(2.0)))]


def test_sgd_step_zero_gradient_leaves_parameters():
    st = TrainerState(LogisticModel(np.array([800.0, 0.0]), np.zeros(1)), Hyperparams(), "log")
    before = st.model.w.copy()
    sgd_step(st, [example(1)])
    np.testing.assert_array_equal(st.model.w, before)
    assert st.model.bias[0] == 0.0


def test_learning_rate_schedule():
    st = make_state("logistic", "log", 2, Hyperparams(learning_rate=0.5, decay=0.1))
    assert learning_rate(st) == 0.5
    st.step = 10
    assert learning_rate(st) == pytest.approx(0.25)
    df = make_state("logistic", "delayed_feedback", 2, Hyperparams(df_learning_rate=0.3))
    assert learning_rate(df) == pytest.approx(0.3)


def test_sgd_step_rejects_empty_batch():
    with pytest.raises(ContractError):
        sgd_step(make_state("logistic", "log", 2), [])


def test_delayed_feedback_step_requires_times():
    st = make_state("logistic", "delayed_feedback", 2)
    with pytest.raises(ContractError):
        sgd_step(st, [TrainingExample(X0, 0)])
    sgd_step(st, [TrainingExample(X0, 0, elapsed=5.0), TrainingExample(X0, 1, elapsed=5.0, time_to_click=2.0)])
    assert st.delay_model.w[0] != 0.0


def test_delayed_feedback_l2_shrinks_both_blocks():
    hyper = Hyperparams(df_learning_rate=0.1, df_l2_alpha=0.5)
    st = make_state("logistic", "delayed_feedback", 3, hyper)
    st.model.w[2] = 1.0
    st.delay_model.w[2] = -2.0
    sgd_step(st, [TrainingExample(X0, 0, elapsed=0.0)])
    # untouched coordinates only see the shrink factor 1 - eta * 2 * alpha
    assert st.model.w[2] == pytest.approx(0.9)
    assert st.delay_model.w[2] == pytest.approx(-1.8)


def test_divergence_raises_with_step():
    st = TrainerState(LogisticModel(np.array([np.inf, 0.0]), np.zeros(1)), Hyperparams(), "log")
    st.step = 7
    with pytest.raises(DivergenceError) as info:
        sgd_step(st, [example(0)])
    assert info.value.step == 7


def _synthetic_dataset(n=4000, seed=0):
    gt = GroundTruth(np.array([-1.0, 0.5, -2.0, 0.0, 1.0]), np.zeros(5), (3, 2))
    imps = gen_synthetic(gt, n, seed)
    return make_batch(snapshot_label(imps, gt.horizon * 10, window=None), gt.n_features)


def test_offline_training_reduces_cross_entropy():
    data = _synthetic_dataset()
    st = make_state("logistic", "log", 5, Hyperparams(learning_rate=0.5, batch_size=64))
    ces = []
    for _ in range(3):
        ces.append(cross_entropy(st.model.predict_proba(data.X), data.y))
        train_offline(st, data, epochs=1)
    ces.append(cross_entropy(st.model.predict_proba(data.X), data.y))
    assert ces == sorted(ces, reverse=True) and ces[-1] < ces[0]
    assert st.step == 3 * int(np.ceil(4000 / 64))


def test_offline_zero_epochs_is_a_no_op():
    st = make_state("logistic", "log", 5)
    train_offline(st, _synthetic_dataset(100), epochs=0)
    assert st.step == 0 and not st.model.w.any()


@pytest.mark.parametrize("kind", ["logistic", "wide_deep"])
def test_training_is_deterministic(kind):
    data = _synthetic_dataset(1000)
    hyper = Hyperparams(learning_rate=0.1, batch_size=32, deep_layers=(6, 4), seed=3)
    runs = []
    for _ in range(2):
        st = make_state(kind, "fn_weighted", 5, hyper, embedding_dim=3)
        train_offline(st, data, epochs=2)
        runs.append({k: v.tobytes() for k, v in st.model.params().items()})
    assert runs[0] == runs[1]


def test_continuous_snapshot_cadence():
    st = make_state("logistic", "log", 4, Hyperparams(batch_size=1))
    snaps = train_continuous(st, stream_of(1000), snapshot_every=100)
    assert [s.version for s in snaps] == list(range(1, 11))
    assert [s.step for s in snaps] == list(range(100, 1001, 100))
    st = make_state("logistic", "log", 4, Hyperparams(batch_size=1))
    assert train_continuous(st, stream_of(99), snapshot_every=100) == []
    assert st.step == 99


def test_continuous_trailing_partial_batch():
    st = make_state("logistic", "log", 4, Hyperparams(batch_size=128))
    train_continuous(st, stream_of(300), snapshot_every=10)
    assert st.step == 3


def test_continuous_rejects_unordered_stream():
    events = stream_of(10)
    events[3], events[4] = events[4], events[3]
    st = make_state("logistic", "log", 4)
    with pytest.raises(ContractError):
        train_continuous(st, events, snapshot_every=1)
    assert st.step == 0


def test_snapshots_are_immutable_copies():
    st = make_state("logistic", "log", 4, Hyperparams(batch_size=1))
    snap = train_continuous(st, stream_of(10), snapshot_every=5)[0]
    w = snap.model.w.copy()
    train_pass(st, make_batch([e.example for e in stream_of(10)], 4))
    np.testing.assert_array_equal(snap.model.w, w)
    with pytest.raises(ValueError):
        snap.model.w[0] = 3.0


def test_fn_calibration_snapshot_applies_correction():
    st = make_state("logistic", "fn_calibration", 2)
    assert st.loss == "log" and st.calibrate
    st.model.w[0] = np.log(0.25 / 0.75)
    snap = st.snapshot()
    X = make_batch([example()], 2).X
    assert predict_snapshot(snap, X)[0] == pytest.approx(1 / 3)
    st.model.w[0] = 50.0
    assert predict_snapshot(st.snapshot(), X)[0] == 1.0


def test_init_delay_from_data():
    st = make_state("logistic", "delayed_feedback", 3)
    b = make_batch([TrainingExample(SparseVector((0, 1), (1.0, 1.0)), 1, elapsed=9.0, time_to_click=4.0),
                    TrainingExample(SparseVector((0, 1), (1.0, 1.0)), 1, elapsed=9.0, time_to_click=16.0),
                    TrainingExample(SparseVector((0, 2), (1.0, 1.0)), 0, elapsed=9.0)], 3)
    init_delay_from_data(st, b)
    # two active features sum to log(1 / mean delay)
    assert 2 * st.delay_model.w[0] == pytest.approx(-np.log(10.0))


def test_fake_negative_stream_trains_end_to_end():
    gt = GroundTruth.from_pattern_table([0.3], [1.0], horizon=5000.0)
    events = to_fake_negative_stream(gen_synthetic(gt, 5000, seed=4))
    st = make_state("logistic", "fn_weighted", 1, Hyperparams(learning_rate=1.0, decay=0.01))
    snaps = train_continuous(st, events, snapshot_every=10)
    assert len(snaps) == len(events) // 128 // 10
    assert snaps[-1].model.predict_proba(make_batch([example()], 1).X)[0] == pytest.approx(0.3, abs=0.05)
