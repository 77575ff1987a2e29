import numpy as np
import pytest
import scipy.sparse as sp
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fnctr.core import ConfigError, ContractError
from fnctr.estimator import CTRClassifier, check_ctr_input
from fnctr.stream import GroundTruth, gen_synthetic, snapshot_label, to_fake_negative_stream


def onehot_data(n=3000, seed=0):
    rng = np.random.default_rng(seed)
    cat = rng.integers(0, 4, n)
    X = sp.csr_matrix((np.ones(n), (np.arange(n), cat)), shape=(n, 4))
    y = (rng.random(n) < np.array([0.1, 0.2, 0.3, 0.4])[cat]).astype(int)
    return X, y


def test_get_params_and_clone():
    est = CTRClassifier(loss="pu", n_features=4, learning_rate=0.3)
    params = est.get_params()
    assert params["loss"] == "pu" and params["learning_rate"] == 0.3
    c = clone(est)
    assert c.get_params() == params and c is not est
    est.set_params(loss="fn_weighted")
    assert est.loss == "fn_weighted"


def test_fit_predict_proba():
    X, y = onehot_data()
    est = CTRClassifier(n_features=4, learning_rate=1.0, decay=0.01, epochs=5).fit(X, y)
    proba = est.predict_proba(X)
    assert proba.shape == (X.shape[0], 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    eye = sp.identity(4, format="csr")
    np.testing.assert_allclose(est.predict_proba(eye)[:, 1], [0.1, 0.2, 0.3, 0.4], atol=0.05)
    assert set(est.predict(X)) <= {0, 1}
    assert est.decision_function(eye).shape == (4,)
    assert len(est.snapshots_) == 1


def test_not_fitted():
    with pytest.raises(NotFittedError):
        CTRClassifier(n_features=4).predict_proba(sp.identity(4, format="csr"))


def test_input_validation():
    X, y = onehot_data(10)
    with pytest.raises(ValueError):
        check_ctr_input(X, y[:5])
    with pytest.raises(ValueError):
        check_ctr_input(X, np.full(10, 2))
    with pytest.raises(ValueError):
        check_ctr_input(X, y, sample_weight=np.zeros(10))
    with pytest.raises(ValueError):
        check_ctr_input(X, y, n_features=5)
    with pytest.raises(ContractError):
        check_ctr_input(X, np.zeros(10), time_to_click=np.ones(10))
    with pytest.raises(ConfigError):
        CTRClassifier(loss="hinge", n_features=4).fit(X, y)


def test_fn_calibration_on_fake_negative_stream():
    gt = GroundTruth.from_pattern_table([0.1, 0.3], [1.0, 1.0], horizon=50_000.0)
    events = to_fake_negative_stream(gen_synthetic(gt, 40_000, seed=1))
    eye = sp.identity(2, format="csr")
    kw = dict(n_features=2, learning_rate=1.0, decay=0.01, snapshot_every=50)
    biased = CTRClassifier(loss="log", **kw).fit_stream(events).predict_proba(eye)[:, 1]
    calibrated = CTRClassifier(loss="fn_calibration", **kw).fit_stream(events).predict_proba(eye)[:, 1]
    np.testing.assert_allclose(biased, [0.1 / 1.1, 0.3 / 1.3], atol=0.02)
    np.testing.assert_allclose(calibrated, [0.1, 0.3], atol=0.03)


def test_delayed_feedback_estimator_learns_rates():
    gt = GroundTruth.from_pattern_table([0.3, 0.3], [0.5, 2.0], horizon=20.0)
    examples = snapshot_label(gen_synthetic(gt, 20_000, seed=2), 20.0, window=None)
    est = CTRClassifier(loss="delayed_feedback", n_features=2, df_learning_rate=0.5, decay=0.002,
                        df_l2_alpha=0.0, epochs=5).fit(examples)
    eye = sp.identity(2, format="csr")
    np.testing.assert_allclose(est.delay_rate(eye), [0.5, 2.0], rtol=0.15)
    np.testing.assert_allclose(est.predict_proba(eye)[:, 1], [0.3, 0.3], atol=0.03)
    with pytest.raises(AttributeError):
        CTRClassifier(n_features=2).fit(examples).delay_rate(eye)


def test_partial_fit_accumulates_steps():
    X, y = onehot_data(512)
    est = CTRClassifier(n_features=4, batch_size=64, snapshot_every=4)
    est.partial_fit(X, y).partial_fit(X, y)
    assert est.state_.step == 16
    assert [s.version for s in est.snapshots_] == [1, 2, 3, 4]


def test_wide_deep_estimator_runs():
    X, y = onehot_data(1000)
    est = CTRClassifier(model="wide_deep", n_features=4, deep_layers=(6,), embedding_dim=3,
                        learning_rate=0.2, cross_spec={"pairs": [[[0, 2], [2, 4]]], "n_buckets": 8})
    p = est.fit(X, y).predict_proba(X)[:, 1]
    assert np.all((p > 0) & (p < 1))
