"""Cardiospike: spike detection in RR-interval rhythmograms.

A self-contained toolkit around a dilated-convolution segmenter: synthetic
corpus generation, CSV ingestion, cross-validated training, whole-record
inference, and an online detector over a binary sensor-packet protocol.
"""

from .autodiff import Value, grad_check
from .data import (RhythmRecord, Segment, SynthConfig, corpus_stats, normalize,
                   parse_csv, stitch, synth_corpus, synth_record, window, write_csv)
from .estimator import CardioSpikeDetector
from .model import (DetectorConfig, DetectorParams, detector_forward,
                    dilation_for_layer, init_params, load_checkpoint,
                    param_count, receptive_field, save_checkpoint)
from .predict import (Scores, evaluate_records, predict_events, predict_record,
                      predict_record_proba, score_binary)
from .stream import (Event, OnlineDetector, SensorPacket, StreamState,
                     decode_packet, encode_end_marker, encode_packet,
                     replay_sensor, serve_once)
from .training import (FoldReport, OptimizerState, TrainConfig, adamw_step,
                       cross_validate, focal_loss, kfold_split, train)

__version__ = "0.1.0"

__all__ = [
    "Value", "grad_check",
    "RhythmRecord", "Segment", "SynthConfig", "corpus_stats", "normalize",
    "parse_csv", "stitch", "synth_corpus", "synth_record", "window", "write_csv",
    "CardioSpikeDetector",
    "DetectorConfig", "DetectorParams", "detector_forward", "dilation_for_layer",
    "init_params", "load_checkpoint", "param_count", "receptive_field",
    "save_checkpoint",
    "Scores", "evaluate_records", "predict_events", "predict_record",
    "predict_record_proba", "score_binary",
    "Event", "OnlineDetector", "SensorPacket", "StreamState", "decode_packet",
    "encode_end_marker", "encode_packet", "replay_sensor", "serve_once",
    "FoldReport", "OptimizerState", "TrainConfig", "adamw_step", "cross_validate",
    "focal_loss", "kfold_split", "train",
]
