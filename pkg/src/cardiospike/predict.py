"""Whole-record inference: window, run the detector, stitch, threshold.

Both the offline paths (evaluation, the detect command) and the streaming
detector build segments through :func:`cardiospike.data.segment_input`, so a
replayed stream reproduces offline probabilities bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .autodiff import Value
from .data import RhythmRecord, stitch, window
from .model import DetectorConfig, DetectorParams, detector_forward


def segment_proba(inp: np.ndarray, params: DetectorParams) -> np.ndarray:
    """Spike probabilities for one normalized input window (binary head)."""
    logits = detector_forward(Value(inp.reshape(-1, 1)), params)
    return expit(logits.data[:, 0])


def predict_record_proba(record: RhythmRecord, params: DetectorParams,
                         config: DetectorConfig | None = None) -> np.ndarray:
    """Per-sample spike probability over a whole record.

    Segments are scored one at a time, the same way the online detector
    scores them, so streaming and offline probabilities agree exactly.
    """
    cfg = config if config is not None else params.config
    segs = window(record, cfg.segment_len, cfg.pad)
    return stitch(segs, [segment_proba(s.input, params) for s in segs])


def predict_record_proba_batched(record: RhythmRecord, params: DetectorParams,
                                 config: DetectorConfig | None = None) -> np.ndarray:
    """Like predict_record_proba but one forward pass per record.

    Faster for evaluation loops; may differ from the segment-at-a-time path
    in the last float bits (different BLAS shapes), never materially.
    """
    cfg = config if config is not None else params.config
    segs = window(record, cfg.segment_len, cfg.pad)
    inputs = np.stack([s.input for s in segs])[:, :, None]
    logits = detector_forward(Value(inputs), params).data[:, :, 0]
    return stitch(segs, list(expit(logits)))


def predict_record(record: RhythmRecord, params: DetectorParams,
                   threshold: float = 0.5,
                   config: DetectorConfig | None = None) -> np.ndarray:
    """Binary per-sample decisions at the given probability threshold."""
    return (predict_record_proba(record, params, config) > threshold).astype(np.int64)


def predict_events(record: RhythmRecord, params: DetectorParams,
                   threshold: float = 0.5,
                   config: DetectorConfig | None = None) -> list[tuple[int, float]]:
    """(sample index, probability) for every sample above threshold."""
    proba = predict_record_proba(record, params, config)
    return [(int(i), float(proba[i])) for i in np.flatnonzero(proba > threshold)]


@dataclass(frozen=True)
class Scores:
    """Pooled per-sample confusion counts and the derived P/R/F."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f_score(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def score_binary(pred: np.ndarray, truth: np.ndarray) -> Scores:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"score_binary: shape mismatch {pred.shape} vs {truth.shape}")
    return Scores(
        tp=int((pred & truth).sum()),
        fp=int((pred & ~truth).sum()),
        fn=int((~pred & truth).sum()),
        tn=int((~pred & ~truth).sum()),
    )


def evaluate_records(records, params: DetectorParams, threshold: float = 0.5,
                     config: DetectorConfig | None = None) -> Scores:
    """Confusion counts pooled over all samples of all records."""
    tp = fp = fn = tn = 0
    for rec in records:
        proba = predict_record_proba_batched(rec, params, config)
        s = score_binary((proba > threshold).astype(np.int64), rec.labels)
        tp += s.tp
        fp += s.fp
        fn += s.fn
        tn += s.tn
    return Scores(tp, fp, fn, tn)
