"""Sensor packet protocol and the online spike detector.

Wire layout (big-endian), 17-byte header then payload:

    magic "RR" (2) | sensor id, space-padded ASCII (8) | seq u16 | time offset
    ms u32 (4) | interval count u8 (1) | count x RR u16 | XOR checksum (1)

Each packet carries the sensor's sliding window of up to 15 recent RR
intervals; ``seq`` counts beats, so the delta between packets says how many
window entries are new.  A count of zero marks the end of a stream.

The online detector consumes assembled samples and reproduces the offline
segmentation exactly: replaying a record without data loss yields bit-for-bit
the probabilities ``predict_record_proba`` computes.
"""

from __future__ import annotations

import logging
import math
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import segment_input
from .model import DetectorConfig, DetectorParams
from .predict import segment_proba

logger = logging.getLogger(__name__)

MAGIC = b"RR"
SENSOR_ID_LEN = 8
MAX_WINDOW = 15
HEADER_LEN = 2 + SENSOR_ID_LEN + 2 + 4 + 1  # through the count byte
SEQ_MOD = 1 << 16


class PacketError(ValueError):
    """Base for wire-format failures."""


class NotAPacket(PacketError):
    """The buffer does not start with the protocol magic."""


class ShortRead(PacketError):
    """The buffer or stream ended before the frame was complete."""


class CorruptPacket(PacketError):
    """Framing is intact but contents fail validation (checksum, fields)."""


@dataclass(frozen=True)
class SensorPacket:
    """One sensor transmission: a window of recent RR intervals."""

    sensor_id: str
    rr: tuple[int, ...]          # newest-last, 1..15 intervals, whole ms
    time_offset: int             # ms since the session began
    seq: int                     # beat counter modulo 2**16

    def __post_init__(self):
        _check_sensor_id(self.sensor_id)
        if not 1 <= len(self.rr) <= MAX_WINDOW:
            raise ValueError(f"packet window must hold 1..{MAX_WINDOW} intervals")
        for v in self.rr:
            if not 0 <= int(v) <= 0xFFFF:
                raise ValueError(f"RR interval {v} does not fit u16")
        if not 0 <= self.time_offset <= 0xFFFFFFFF:
            raise ValueError("time_offset does not fit u32")
        if not 0 <= self.seq < SEQ_MOD:
            raise ValueError("seq must be a u16")


def _check_sensor_id(sid: str) -> None:
    if not sid or len(sid) > SENSOR_ID_LEN or not sid.isascii() or sid != sid.strip():
        raise ValueError(f"sensor id must be 1..{SENSOR_ID_LEN} ASCII chars, got {sid!r}")


def _xor(buf: bytes) -> int:
    c = 0
    for b in buf:
        c ^= b
    return c


def _header(sensor_id: str, seq: int, time_offset: int, count: int) -> bytes:
    return (MAGIC
            + sensor_id.ljust(SENSOR_ID_LEN).encode("ascii")
            + struct.pack(">HIB", seq, time_offset, count))


def encode_packet(p: SensorPacket) -> bytes:
    body = _header(p.sensor_id, p.seq, p.time_offset, len(p.rr))
    body += struct.pack(f">{len(p.rr)}H", *(int(v) for v in p.rr))
    return body + bytes([_xor(body)])


def encode_end_marker(sensor_id: str, seq: int = 0, time_offset: int = 0) -> bytes:
    """A zero-count frame announcing the clean end of a stream."""
    _check_sensor_id(sensor_id)
    body = _header(sensor_id, seq % SEQ_MOD, time_offset, 0)
    return body + bytes([_xor(body)])


def decode_packet(buf: bytes) -> SensorPacket | None:
    """Parse one complete frame; returns None for an end marker."""
    if len(buf) < len(MAGIC):
        raise ShortRead(f"{len(buf)} bytes is shorter than the magic")
    if buf[:2] != MAGIC:
        raise NotAPacket(f"bad magic {buf[:2]!r}")
    if len(buf) < HEADER_LEN:
        raise ShortRead(f"header truncated at {len(buf)} bytes")
    count = buf[HEADER_LEN - 1]
    expected = HEADER_LEN + 2 * count + 1
    if len(buf) < expected:
        raise ShortRead(f"frame needs {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise CorruptPacket(f"{len(buf) - expected} trailing bytes after frame")
    if _xor(buf[:-1]) != buf[-1]:
        raise CorruptPacket("checksum mismatch")
    if count > MAX_WINDOW:
        raise CorruptPacket(f"window of {count} exceeds {MAX_WINDOW}")
    sensor_id = buf[2:2 + SENSOR_ID_LEN].decode("ascii").rstrip(" ")
    seq, time_offset, _ = struct.unpack(">HIB", buf[2 + SENSOR_ID_LEN:HEADER_LEN])
    if count == 0:
        return None
    rr = struct.unpack(f">{count}H", buf[HEADER_LEN:HEADER_LEN + 2 * count])
    return SensorPacket(sensor_id, rr, time_offset, seq)


def read_frame(reader) -> bytes | None:
    """Read one frame from a blocking binary stream; None on clean EOF."""
    head = reader.read(HEADER_LEN)
    if not head:
        return None
    if len(head) < HEADER_LEN:
        raise ShortRead(f"stream ended {HEADER_LEN - len(head)} bytes into a header")
    if head[:2] != MAGIC:
        raise NotAPacket(f"stream desynchronized: {head[:2]!r}")
    count = head[-1]
    body = reader.read(2 * count + 1)
    if len(body) < 2 * count + 1:
        raise ShortRead("stream ended inside a frame body")
    return head + body


# --- sample assembly ------------------------------------------------------------

@dataclass
class StreamState:
    """Samples assembled from one sensor's packets, with gap markers."""

    sensor_id: str | None = None
    samples: list[int] = field(default_factory=list)
    seq: int | None = None
    discontinuities: list[int] = field(default_factory=list)

    def ingest(self, p: SensorPacket) -> list[int]:
        """Fold one packet in; returns the newly appended samples.

        The seq delta determines how many of the packet's window entries are
        unseen.  A delta beyond the window size means data was lost: the whole
        window is kept and the boundary is recorded as a discontinuity.
        """
        if self.sensor_id is None:
            self.sensor_id = p.sensor_id
        elif p.sensor_id != self.sensor_id:
            raise ValueError(f"packet from {p.sensor_id!r} on a {self.sensor_id!r} stream")
        if self.seq is None:
            new = list(p.rr)
        else:
            delta = (p.seq - self.seq) % SEQ_MOD
            if delta == 0:
                return []
            if delta <= len(p.rr):
                new = list(p.rr[len(p.rr) - delta:])
            else:
                self.discontinuities.append(len(self.samples))
                new = list(p.rr)
        self.samples.extend(new)
        self.seq = p.seq
        return new


class Event(NamedTuple):
    """A spike call: absolute sample index plus the model probability."""

    index: int
    probability: float


def format_event(sensor_id: str, ev: Event) -> str:
    return f"{sensor_id},{ev.index},{ev.probability:.6f}"


class OnlineDetector:
    """Incremental segmentation and scoring over a StreamState.

    Windows are emitted as soon as their full input context has arrived, so a
    sample's verdict lags its arrival by at most T - P samples.  Streams are
    re-segmented from scratch after each discontinuity; the final partial
    window is scored at flush time with the same replicate padding the
    offline path applies.
    """

    def __init__(self, params: DetectorParams, threshold: float = 0.5,
                 config: DetectorConfig | None = None):
        self.params = params
        self.config = config if config is not None else params.config
        self.threshold = threshold
        self._run_start = 0
        self._emitted = 0        # target samples scored in the current run
        self._disc_done = 0

    def process(self, state: StreamState) -> list[Event]:
        """Emit events for every window completed by newly ingested samples."""
        events: list[Event] = []
        while self._disc_done < len(state.discontinuities):
            boundary = state.discontinuities[self._disc_done]
            events.extend(self._finish_run(state.samples, boundary))
            self._run_start = boundary
            self._emitted = 0
            self._disc_done += 1
        ts = self.config.target_len
        pad = self.config.pad
        run_len = len(state.samples) - self._run_start
        while run_len >= self._emitted + ts + pad:
            i = self._emitted // ts
            events.extend(self._score_window(state.samples, len(state.samples), i, ts))
            self._emitted += ts
        return events

    def flush(self, state: StreamState) -> list[Event]:
        """Score whatever remains of the current run, padding the tail."""
        events = self._finish_run(state.samples, len(state.samples))
        self._run_start = len(state.samples)
        self._emitted = 0
        return events

    def _finish_run(self, samples: list[int], end: int) -> list[Event]:
        events: list[Event] = []
        run_len = end - self._run_start
        if run_len <= 0:
            return events
        ts = self.config.target_len
        for i in range(self._emitted // ts, math.ceil(run_len / ts)):
            events.extend(self._score_window(samples, end, i, ts))
        return events

    def _score_window(self, samples: list[int], end: int, i: int, ts: int) -> list[Event]:
        run = np.asarray(samples[self._run_start:end], dtype=np.float64)
        inp, _ = segment_input(run, i * ts, self.config.segment_len, self.config.pad)
        probs = segment_proba(inp, self.params)
        valid = min(ts, len(run) - i * ts)
        return [Event(self._run_start + i * ts + j, float(probs[j]))
                for j in range(valid) if probs[j] > self.threshold]


def handle_session(conn: socket.socket, params: DetectorParams, threshold: float,
                   sink, config: DetectorConfig | None = None) -> tuple[int, StreamState]:
    """Drive one connection to completion; ``sink`` receives one line per event.

    An abrupt disconnect is tolerated: everything ingested so far is kept and
    the tail is flushed exactly as if the stream had ended cleanly.
    """
    state = StreamState()
    detector = OnlineDetector(params, threshold=threshold, config=config)
    count = 0
    with conn.makefile("rb") as reader:
        try:
            while True:
                frame = read_frame(reader)
                if frame is None:
                    logger.info("stream closed without end marker")
                    break
                try:
                    packet = decode_packet(frame)
                except CorruptPacket as err:
                    logger.warning("dropping corrupt frame: %s", err)
                    continue
                if packet is None:
                    logger.info("end marker received")
                    break
                state.ingest(packet)
                for ev in detector.process(state):
                    sink(format_event(state.sensor_id, ev))
                    count += 1
        except ShortRead as err:
            logger.warning("disconnect mid-frame (%s); keeping %d samples",
                           err, len(state.samples))
    for ev in detector.flush(state):
        sink(format_event(state.sensor_id or "?", ev))
        count += 1
    return count, state


def serve_once(listener: socket.socket, params: DetectorParams, threshold: float,
               sink, config: DetectorConfig | None = None) -> tuple[int, StreamState]:
    """Accept a single connection on a bound listener and handle it."""
    conn, peer = listener.accept()
    logger.info("connection from %s", peer)
    with conn:
        return handle_session(conn, params, threshold, sink, config)


# --- replay ------------------------------------------------------------------

def packets_for_record(record, window: int = MAX_WINDOW,
                       sensor_id: str | None = None):
    """Yield the packet sequence a live sensor would emit for a record.

    One packet per beat, carrying the newest ``window`` intervals; the seq
    field counts beats and the time offset is the running sum of intervals.
    """
    if not 1 <= window <= MAX_WINDOW:
        raise ValueError(f"window must lie in 1..{MAX_WINDOW}")
    sid = sensor_id if sensor_id is not None else record.record_id
    _check_sensor_id(sid)
    rr = np.rint(np.asarray(record.rr, dtype=np.float64)).astype(np.int64)
    offset = 0
    for b in range(len(rr)):
        offset += int(rr[b])
        lo = max(0, b + 1 - window)
        yield SensorPacket(sid, tuple(int(v) for v in rr[lo:b + 1]),
                           time_offset=offset, seq=(b + 1) % SEQ_MOD)


def replay_sensor(record, host: str, port: int, *, speed: float = 1.0,
                  window: int = MAX_WINDOW, drop: float = 0.0, drop_burst: int = 1,
                  seed: int = 0, sensor_id: str | None = None) -> int:
    """Transmit a record as a live sensor would; returns packets sent.

    One packet goes out per beat, carrying the newest ``window`` intervals.
    ``drop`` is the per-packet probability of starting a dropped burst of
    ``drop_burst`` consecutive packets (losses happen in transit, so the beat
    counter keeps advancing).  ``speed`` scales the 1 s cadence; pass
    ``float("inf")`` to replay as fast as possible.  The end marker is always
    sent.
    """
    if not 0.0 <= drop < 1.0:
        raise ValueError("drop must lie in [0, 1)")
    if drop_burst < 1:
        raise ValueError("drop_burst must be >= 1")
    sid = sensor_id if sensor_id is not None else record.record_id
    delay = 1.0 / speed if (speed > 0 and math.isfinite(speed)) else 0.0
    rng = np.random.default_rng(seed)
    sent = 0
    skip = 0
    last = None
    with socket.create_connection((host, port)) as sock:
        for packet in packets_for_record(record, window, sid):
            last = packet
            if skip > 0:
                skip -= 1
                continue
            if drop > 0.0 and rng.random() < drop:
                skip = drop_burst - 1
                continue
            sock.sendall(encode_packet(packet))
            sent += 1
            if delay:
                time.sleep(delay)
        end_seq = last.seq if last is not None else 0
        end_offset = last.time_offset if last is not None else 0
        sock.sendall(encode_end_marker(sid, seq=end_seq, time_offset=end_offset))
    return sent
