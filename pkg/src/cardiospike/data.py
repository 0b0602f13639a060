"""RR-interval records: CSV ingestion, segment windowing, synthetic corpora.

The on-disk format is comma-separated with columns
``identifier,rr_ms,markup,time_ms`` (markup 1 marks a spike maximum).  Records
are windowed into overlapping length-T segments whose central T-2P samples
carry the training targets; ``stitch`` reassembles per-record sequences from
per-segment predictions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict

import numpy as np

logger = logging.getLogger(__name__)

RR_SCALE_MS = 100.0  # fixed normalization scale: +-100 ms maps to +-1.0
RR_MIN_MS = 200.0    # physiological plausibility gate (exclusive)
RR_MAX_MS = 3000.0


@dataclass
class RhythmRecord:
    """One subject's RR sequence with per-sample spike-maximum labels."""

    record_id: str
    rr: np.ndarray      # milliseconds
    labels: np.ndarray  # {0, 1}, 1 = spike maximum
    times: np.ndarray   # cumulative milliseconds, strictly increasing

    def __post_init__(self):
        self.rr = np.asarray(self.rr, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=np.float64)
        n = len(self.rr)
        if n < 1:
            raise ValueError(f"record {self.record_id}: empty")
        if len(self.labels) != n or len(self.times) != n:
            raise ValueError(f"record {self.record_id}: rr/labels/times lengths differ")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError(f"record {self.record_id}: labels must be 0 or 1")
        if (self.rr <= RR_MIN_MS).any() or (self.rr >= RR_MAX_MS).any():
            raise ValueError(
                f"record {self.record_id}: rr outside ({RR_MIN_MS:g}, {RR_MAX_MS:g}) ms")
        if n > 1 and (np.diff(self.times) <= 0).any():
            raise ValueError(f"record {self.record_id}: times not strictly increasing")

    def __len__(self):
        return len(self.rr)

    def __eq__(self, other):
        if not isinstance(other, RhythmRecord):
            return NotImplemented
        return (self.record_id == other.record_id
                and np.array_equal(self.rr, other.rr)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.times, other.times))


@dataclass
class Segment:
    """A length-T window; ``target`` aligns with source samples start..start+valid."""

    record_id: str
    start: int            # index of the first target sample in the source record
    input: np.ndarray     # T normalized values
    target: np.ndarray    # T - 2P binary labels (zero over any padded tail)
    median: float         # subtracted median, for invertibility
    valid: int            # how many target entries map to real samples


def normalize(rr: np.ndarray, median: float | None = None) -> np.ndarray:
    """Median-center and scale to the fixed 100 ms unit."""
    rr = np.asarray(rr, dtype=np.float64)
    if rr.size < 1:
        raise ValueError("normalize: empty input")
    if median is None:
        median = float(np.median(rr))
    return (rr - median) / RR_SCALE_MS


def segment_input(rr: np.ndarray, start: int, seg_len: int, pad: int):
    """Normalized input window for the segment whose targets begin at ``start``.

    Indices outside the record are clamped to the boundary sample, which is
    exactly the replicate padding the windowing scheme prescribes.
    """
    idx = np.clip(np.arange(start - pad, start - pad + seg_len), 0, len(rr) - 1)
    raw = rr[idx]
    median = float(np.median(raw))
    return (raw - median) / RR_SCALE_MS, median


def window(record: RhythmRecord, seg_len: int, pad: int) -> list[Segment]:
    """Split a record into segments of ``seg_len`` overlapping by ``2*pad``.

    Segment targets tile the record without gaps or overlap: segment i covers
    source samples [i*Ts, (i+1)*Ts) with Ts = seg_len - 2*pad; the record is
    replicate-padded at both ends so every sample lands in exactly one target
    slice.  Padded tail targets are labeled 0.
    """
    if pad < 0 or seg_len <= 2 * pad:
        raise ValueError(f"window: need seg_len > 2*pad >= 0, got {seg_len}, {pad}")
    n = len(record)
    if n < 1:
        raise ValueError("window: empty record")
    ts = seg_len - 2 * pad
    segments = []
    for i in range(math.ceil(n / ts)):
        start = i * ts
        inp, median = segment_input(record.rr, start, seg_len, pad)
        valid = min(ts, n - start)
        target = np.zeros(ts, dtype=np.int64)
        target[:valid] = record.labels[start:start + valid]
        segments.append(Segment(record.record_id, start, inp, target, median, valid))
    return segments


def stitch(segments: list[Segment], values: list[np.ndarray]) -> np.ndarray:
    """Reassemble one value per source sample from per-segment target values.

    Segments may arrive in any order; they must tile one record completely.
    """
    if len(segments) != len(values):
        raise ValueError("stitch: segments and values differ in length")
    if not segments:
        raise ValueError("stitch: no segments")
    ids = {s.record_id for s in segments}
    if len(ids) != 1:
        raise ValueError(f"stitch: segments from multiple records {sorted(ids)}")
    ts = len(segments[0].target)
    pairs = sorted(zip(segments, values), key=lambda p: p[0].start)
    out = []
    for i, (seg, vals) in enumerate(pairs):
        if seg.start != i * ts:
            raise ValueError(f"stitch: missing segment before sample {i * ts}")
        if len(vals) < seg.valid:
            raise ValueError(f"stitch: segment at {seg.start} carries too few values")
        out.append(np.asarray(vals)[:seg.valid])
    return np.concatenate(out)


# --- CSV format ---------------------------------------------------------------

def parse_csv(path) -> list[RhythmRecord]:
    """Read records from the 4-column CSV format.

    Malformed rows are skipped and logged with their line number; a record
    whose times are not strictly increasing is rejected as a whole.  A fifth
    column, if present, is ignored.
    """
    groups: dict[str, list[tuple[float, int, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if lineno == 1 and not _is_number(fields[min(1, len(fields) - 1)]):
                continue  # header line
            if len(fields) < 4:
                logger.warning("%s:%d: expected 4 columns, got %d; row skipped",
                               path, lineno, len(fields))
                continue
            rid = fields[0].strip()
            try:
                rr = float(fields[1])
            except ValueError:
                logger.warning("%s:%d: non-numeric RR %r; row skipped", path, lineno, fields[1])
                continue
            try:
                markup = float(fields[2])
            except ValueError:
                markup = -1.0
            if markup not in (0.0, 1.0):
                logger.warning("%s:%d: markup %r outside {0,1}; row skipped",
                               path, lineno, fields[2])
                continue
            try:
                t = float(fields[3])
            except ValueError:
                logger.warning("%s:%d: non-numeric time %r; row skipped",
                               path, lineno, fields[3])
                continue
            if not (RR_MIN_MS < rr < RR_MAX_MS):
                logger.warning("%s:%d: implausible RR %g ms; row skipped", path, lineno, rr)
                continue
            groups.setdefault(rid, []).append((rr, int(markup), t))
    records = []
    for rid, rows in groups.items():
        times = np.array([r[2] for r in rows])
        if len(times) > 1 and (np.diff(times) <= 0).any():
            logger.warning("%s: record %s has non-monotonic times; record rejected", path, rid)
            continue
        records.append(RhythmRecord(
            rid,
            np.array([r[0] for r in rows]),
            np.array([r[1] for r in rows]),
            times,
        ))
    return records


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def format_number(v: float) -> str:
    f = float(v)
    return str(int(f)) if f.is_integer() else repr(f)


def write_csv(records: list[RhythmRecord], path) -> None:
    """Emit the 4-column CSV format; exact inverse of parse_csv for valid data."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for rec in records:
            for rr, label, t in zip(rec.rr, rec.labels, rec.times):
                fh.write(f"{rec.record_id},{format_number(rr)},{int(label)},{format_number(t)}\n")


# --- synthetic corpus ---------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for format-compatible synthetic rhythmograms.

    Spikes follow the characteristic pattern: one elongated interval (the
    labeled maximum), an undershoot, then a geometric relaxation back to
    baseline, with amplitudes capped at 100 ms.
    """

    num_records: int = 74
    samples_per_record: int = 1491
    baseline_ms: float = 800.0
    jitter_ms: float = 12.0
    spike_rate_per_100: float = 2.5
    amplitude_range: tuple[float, float] = (40.0, 100.0)
    relaxation_len: int = 3
    undershoot: float = 0.8
    relaxation_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.amplitude_range
        if not (0.0 < lo <= hi <= 100.0):
            raise ValueError(f"amplitude_range must lie within (0, 100] ms, got {self.amplitude_range}")
        if self.spike_rate_per_100 < 0:
            raise ValueError("spike_rate_per_100 must be >= 0")
        if self.num_records < 1 or self.samples_per_record < 1:
            raise ValueError("num_records and samples_per_record must be positive")
        if self.relaxation_len < 0:
            raise ValueError("relaxation_len must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["amplitude_range"] = list(self.amplitude_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["amplitude_range"] = tuple(d["amplitude_range"])
        return cls(**d)


def spike_template(amplitude: float, undershoot: float, relaxation_factor: float,
                   relaxation_len: int) -> np.ndarray:
    """Deviation-from-baseline sequence of one spike; index 0 is the maximum."""
    dev = [amplitude, -undershoot * amplitude]
    for i in range(1, relaxation_len + 1):
        dev.append(undershoot * amplitude * relaxation_factor ** i)
    return np.array(dev)


def synth_record(cfg: SynthConfig, seed: int, record_id: str = "1") -> RhythmRecord:
    """One synthetic record; RR values are whole milliseconds (sensor units)."""
    rng = np.random.default_rng(seed)
    n = cfg.samples_per_record
    rr = cfg.baseline_ms + rng.normal(0.0, cfg.jitter_ms, size=n)
    labels = np.zeros(n, dtype=np.int64)
    footprint = 2 + cfg.relaxation_len
    if cfg.spike_rate_per_100 > 0:
        mean_gap = max(1.0, 100.0 / cfg.spike_rate_per_100 - footprint)
        pos = int(round(rng.exponential(mean_gap)))
        while pos + footprint <= n:
            lo, hi = cfg.amplitude_range
            amp = rng.uniform(lo, hi)
            dev = spike_template(amp, cfg.undershoot, cfg.relaxation_factor, cfg.relaxation_len)
            rr[pos:pos + footprint] += dev
            labels[pos] = 1
            pos += footprint + max(1, int(round(rng.exponential(mean_gap))))
    rr = np.round(rr)
    return RhythmRecord(record_id, rr, labels, np.cumsum(rr))


def synth_corpus(cfg: SynthConfig) -> list[RhythmRecord]:
    """Deterministic corpus of ``cfg.num_records`` records, ids "1".."N"."""
    return [synth_record(cfg, seed=cfg.seed + i, record_id=str(i + 1))
            for i in range(cfg.num_records)]


@dataclass(frozen=True)
class CorpusStats:
    record_count: int
    sample_count: int
    positive_count: int

    @property
    def positive_rate(self) -> float:
        return self.positive_count / self.sample_count if self.sample_count else 0.0


def corpus_stats(records: list[RhythmRecord]) -> CorpusStats:
    return CorpusStats(
        record_count=len(records),
        sample_count=sum(len(r) for r in records),
        positive_count=sum(int(r.labels.sum()) for r in records),
    )


def write_manifest(cfg: SynthConfig, path) -> None:
    """Serialize the generator settings next to the CSV for provenance."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
