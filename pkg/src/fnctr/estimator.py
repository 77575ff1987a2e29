"""scikit-learn compatible CTR classifier over sparse feature matrices."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .core import Batch, ContractError, Hyperparams, ModelSnapshot, TrainingExample, make_batch
from .losses import resolve_loss
from .models import CrossSpec, delay_rate_from_logit
from .stream import StreamEvent
from .trainer import (
    TrainerState,
    build_model,
    check_ordered,
    init_delay_from_data,
    predict_snapshot,
    train_offline,
    train_pass,
)


def _optional_times(values, n, name):
    if values is None:
        return np.full(n, np.nan)
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape[0] != n:
        raise ValueError(f"{name} has {arr.shape[0]} entries, expected {n}")
    return arr


def check_ctr_input(X, y=None, sample_weight=None, elapsed=None, time_to_click=None,
                    n_features=None) -> Batch:
    """Validate estimator inputs and stack them into a :class:`Batch`.

    ``X`` is a sparse/dense matrix, or a sequence of ``TrainingExample`` /
    ``StreamEvent`` (labels and times are then read from the examples).
    """
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], (TrainingExample, StreamEvent)):
        if y is not None:
            raise ValueError("y must be omitted when X holds training examples")
        examples = [ex.example if isinstance(ex, StreamEvent) else ex for ex in X]
        return make_batch(examples, n_features)
    X = sp.csr_matrix(X, dtype=np.float64)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, expected {n_features}")
    if not np.all(np.isfinite(X.data)):
        raise ValueError("X contains non-finite values")
    n = X.shape[0]
    if y is None:
        yv = np.zeros(n)
    else:
        yv = np.asarray(y, dtype=np.float64).reshape(-1)
        if yv.shape[0] != n:
            raise ValueError(f"y has {yv.shape[0]} entries, X has {n} rows")
        if not np.all((yv == 0) | (yv == 1)):
            raise ValueError("labels must be 0 or 1")
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    if w.shape != (n,) or np.any(w <= 0):
        raise ValueError("sample_weight must be positive with one entry per row")
    d = _optional_times(time_to_click, n, "time_to_click")
    if np.any(np.isfinite(d) & (yv != 1)):
        raise ContractError("time_to_click given for a negative example")
    return Batch(X, yv, w, _optional_times(elapsed, n, "elapsed"), d)


class CTRClassifier(ClassifierMixin, BaseEstimator):
    """Logistic or wide-and-deep CTR model trained with one of the delayed-feedback losses.

    ``fit`` runs offline minibatch SGD for ``epochs`` passes; ``partial_fit``
    and ``fit_stream`` consume examples once, in order, like a continuous
    trainer.  With ``loss="fn_calibration"`` the model is trained with log
    loss and its probabilities pass through ``p = b / (1 - b)``.
    """

    def __init__(self, model="logistic", loss="log", n_features=2 ** 18, learning_rate=0.02,
                 decay=1e-6, batch_size=128, df_learning_rate=0.005, df_l2_alpha=2.0,
                 deep_layers=(400, 300, 200, 100), embedding_dim=16, cross_spec=None,
                 pooling="sum", leaky_slope=0.01, epochs=1, shuffle=True, snapshot_every=None,
                 delay_init="data", random_state=0):
        self.model = model
        self.loss = loss
        self.n_features = n_features
        self.learning_rate = learning_rate
        self.decay = decay
        self.batch_size = batch_size
        self.df_learning_rate = df_learning_rate
        self.df_l2_alpha = df_l2_alpha
        self.deep_layers = deep_layers
        self.embedding_dim = embedding_dim
        self.cross_spec = cross_spec
        self.pooling = pooling
        self.leaky_slope = leaky_slope
        self.epochs = epochs
        self.shuffle = shuffle
        self.snapshot_every = snapshot_every
        self.delay_init = delay_init
        self.random_state = random_state

    def _hyper(self) -> Hyperparams:
        return Hyperparams(self.learning_rate, self.decay, self.batch_size, self.df_learning_rate,
                           self.df_l2_alpha, tuple(self.deep_layers), seed=self.random_state)

    def _init_state(self, batch: Batch):
        hyper = self._hyper()
        resolve_loss(self.loss)
        cross = self.cross_spec
        if isinstance(cross, dict):
            cross = CrossSpec.from_dict(cross)
        model = build_model(self.model, self.n_features, hyper, self.embedding_dim, cross,
                            self.pooling, self.leaky_slope)
        self.state_ = TrainerState(model, hyper, self.loss)
        if self.state_.loss == "delayed_feedback" and self.delay_init == "data":
            init_delay_from_data(self.state_, batch)
        self.snapshots_ = []
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = self.n_features

    def fit(self, X, y=None, sample_weight=None, elapsed=None, time_to_click=None):
        batch = check_ctr_input(X, y, sample_weight, elapsed, time_to_click, self.n_features)
        self._init_state(batch)
        train_offline(self.state_, batch, self.epochs, shuffle=self.shuffle)
        self.snapshots_.append(self.state_.snapshot())
        return self

    def partial_fit(self, X, y=None, sample_weight=None, elapsed=None, time_to_click=None):
        batch = check_ctr_input(X, y, sample_weight, elapsed, time_to_click, self.n_features)
        if not hasattr(self, "state_"):
            self._init_state(batch)
        self.snapshots_.extend(train_pass(self.state_, batch, self.snapshot_every))
        return self

    def fit_stream(self, stream):
        """Continuous training over time-ordered ``StreamEvent`` objects."""
        stream = list(stream)
        check_ordered(stream)
        return self.partial_fit(stream)

    def decision_function(self, X):
        check_is_fitted(self, "state_")
        return self.state_.model.logits(check_ctr_input(X, n_features=self.n_features).X)

    def predict_proba(self, X):
        check_is_fitted(self, "state_")
        X = check_ctr_input(X, n_features=self.n_features).X
        p = predict_snapshot(self.snapshot(), X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def delay_rate(self, X):
        """Per-row exponential delay rate; only for ``loss="delayed_feedback"``."""
        check_is_fitted(self, "state_")
        if self.state_.delay_model is None:
            raise AttributeError("delay rates are only learned with the delayed_feedback loss")
        X = check_ctr_input(X, n_features=self.n_features).X
        return delay_rate_from_logit(self.state_.delay_model.forward(X)[0])

    def snapshot(self):
        """Current parameters as a snapshot (does not advance the version counter)."""
        check_is_fitted(self, "state_")
        st = self.state_
        return ModelSnapshot(st.next_version, st.step, st.model, st.delay_model, st.calibrate)
