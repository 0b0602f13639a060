"""Scikit-learn style estimator wrapping the detector and trainer.

X is a list of 1-D arrays of RR intervals in milliseconds (one per record);
y is a list of matching binary label arrays.  Ragged lengths are expected, so
X is a Python list rather than a 2-D matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import RhythmRecord
from .model import DetectorConfig
from .predict import evaluate_records, predict_record, predict_record_proba
from .training import TrainConfig, train


def validate_sequences(X, y=None):
    """Coerce X (and optionally y) into per-record float/binary arrays."""
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise ValueError("X must be a non-empty list of 1-D RR-interval arrays")
    xs = []
    for i, x in enumerate(X):
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError(f"X[{i}] must be a non-empty 1-D array")
        if not np.isfinite(arr).all():
            raise ValueError(f"X[{i}] contains non-finite values")
        xs.append(arr)
    if y is None:
        return xs
    if not isinstance(y, (list, tuple)) or len(y) != len(xs):
        raise ValueError("y must be a list matching X record for record")
    ys = []
    for i, labels in enumerate(y):
        arr = np.asarray(labels)
        if arr.shape != xs[i].shape:
            raise ValueError(f"y[{i}] does not match X[{i}] in length")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"y[{i}] must contain only 0 and 1")
        ys.append(arr.astype(np.int64))
    return xs, ys


def _as_records(xs, ys):
    return [RhythmRecord(str(i), x, lab, np.cumsum(x))
            for i, (x, lab) in enumerate(zip(xs, ys))]


class CardioSpikeDetector(BaseEstimator):
    """Dilated-convolution spike detector for RR rhythmograms.

    Parameters mirror the architecture and optimizer settings; see
    DetectorConfig and TrainConfig for their meaning.  The estimator follows
    scikit-learn conventions (get_params/set_params/clone-compatible).
    """

    def __init__(self, kernel_size=3, base_channels=32, hidden_channels=40,
                 side_channels=72, layers_per_block=4, num_stacks=2,
                 segment_len=32, pad=4, focal_alpha=0.25, focal_gamma=2.0,
                 learning_rate=1e-3, weight_decay=1e-2, beta1=0.9, beta2=0.999,
                 epsilon=1e-8, epochs=50, batch_size=64, threshold=0.5,
                 random_state=0):
        self.kernel_size = kernel_size
        self.base_channels = base_channels
        self.hidden_channels = hidden_channels
        self.side_channels = side_channels
        self.layers_per_block = layers_per_block
        self.num_stacks = num_stacks
        self.segment_len = segment_len
        self.pad = pad
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.epochs = epochs
        self.batch_size = batch_size
        self.threshold = threshold
        self.random_state = random_state

    def _detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            kernel_size=self.kernel_size,
            base_channels=self.base_channels,
            hidden_channels=self.hidden_channels,
            side_channels=self.side_channels,
            layers_per_block=self.layers_per_block,
            num_stacks=self.num_stacks,
            segment_len=self.segment_len,
            pad=self.pad,
            num_classes=1,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            epochs=self.epochs,
            batch_size=self.batch_size,
            threshold=self.threshold,
            seed=self.random_state,
        )

    def fit(self, X, y):
        """Train on a list of RR sequences with per-sample binary labels."""
        xs, ys = validate_sequences(X, y)
        records = _as_records(xs, ys)
        self.config_ = self._detector_config()
        self.params_, self.history_ = train(records, self.config_, self._train_config())
        return self

    def predict_proba(self, X) -> list[np.ndarray]:
        """Per-sample spike probabilities, one array per input record."""
        check_is_fitted(self, "params_")
        xs = validate_sequences(X)
        records = _as_records(xs, [np.zeros(len(x), dtype=np.int64) for x in xs])
        return [predict_record_proba(r, self.params_, self.config_) for r in records]

    def predict(self, X) -> list[np.ndarray]:
        """Per-sample binary spike calls at the configured threshold."""
        check_is_fitted(self, "params_")
        xs = validate_sequences(X)
        records = _as_records(xs, [np.zeros(len(x), dtype=np.int64) for x in xs])
        return [predict_record(r, self.params_, self.threshold, self.config_)
                for r in records]

    def score(self, X, y) -> float:
        """F-score of the spike class, pooled over all samples."""
        check_is_fitted(self, "params_")
        xs, ys = validate_sequences(X, y)
        records = _as_records(xs, ys)
        return evaluate_records(records, self.params_, self.threshold, self.config_).f_score
