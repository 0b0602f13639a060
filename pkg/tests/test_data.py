"""CSV format, windowing, stitching, synthetic generation."""

import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cardiospike.data import (RhythmRecord, SynthConfig, corpus_stats, normalize,
                              parse_csv, segment_input, spike_template, stitch,
                              synth_corpus, synth_record, window, write_csv)


def make_record(rr, labels=None, rid="r"):
    rr = np.asarray(rr, dtype=float)
    if labels is None:
        labels = np.zeros(len(rr), dtype=int)
    return RhythmRecord(rid, rr, labels, np.cumsum(rr))


# --- record validation ------------------------------------------------------------

def test_record_validation():
    with pytest.raises(ValueError):
        RhythmRecord("a", [], [], [])
    with pytest.raises(ValueError):
        RhythmRecord("a", [800, 810], [0], [800, 1610])
    with pytest.raises(ValueError):
        RhythmRecord("a", [800, 810], [0, 2], [800, 1610])
    with pytest.raises(ValueError):
        RhythmRecord("a", [800, 5000], [0, 0], [800, 5800])
    with pytest.raises(ValueError):
        RhythmRecord("a", [800, 810], [0, 0], [800, 800])
    rec = make_record([800, 810, 790])
    assert len(rec) == 3


# --- normalization ------------------------------------------------------------------

def test_normalize_median_and_scale():
    x = np.array([700.0, 800.0, 900.0])
    out = normalize(x)
    np.testing.assert_array_equal(out, [-1.0, 0.0, 1.0])
    out2 = normalize(x, median=700.0)
    np.testing.assert_array_equal(out2, [0.0, 1.0, 2.0])


def test_segment_input_replicates_boundaries():
    rr = np.array([800.0, 900.0, 1000.0])
    inp, med = segment_input(rr, start=0, seg_len=7, pad=2)
    # indices clamp to [-2..4] -> [800 800 800 900 1000 1000 1000]
    raw = np.array([800, 800, 800, 900, 1000, 1000, 1000], dtype=float)
    assert med == float(np.median(raw))
    np.testing.assert_array_equal(inp, (raw - med) / 100.0)


# --- windowing ----------------------------------------------------------------------

def test_window_tiles_record():
    rec = make_record(800 + np.arange(50.0))
    segs = window(rec, seg_len=32, pad=4)
    assert len(segs) == math.ceil(50 / 24)
    assert [s.start for s in segs] == [0, 24, 48]
    assert segs[-1].valid == 2
    for s in segs:
        assert s.input.shape == (32,)
        assert s.target.shape == (24,)


def test_window_targets_match_labels():
    labels = (np.arange(50) % 7 == 0).astype(int)
    rec = make_record(800 + np.arange(50.0), labels)
    segs = window(rec, 32, 4)
    for s in segs:
        np.testing.assert_array_equal(s.target[:s.valid],
                                      labels[s.start:s.start + s.valid])
        np.testing.assert_array_equal(s.target[s.valid:],
                                      np.zeros(len(s.target) - s.valid, dtype=int))


def test_window_validation():
    rec = make_record([800.0, 810.0])
    with pytest.raises(ValueError):
        window(rec, 8, 4)
    with pytest.raises(ValueError):
        window(rec, 8, -1)


def test_stitch_inverts_window():
    labels = (np.arange(100) % 11 == 0).astype(int)
    rec = make_record(800 + np.cos(np.arange(100.0)) * 50, labels)
    segs = window(rec, 32, 4)
    out = stitch(segs, [s.target for s in segs])
    np.testing.assert_array_equal(out, labels)


def test_stitch_sorts_segments():
    rec = make_record(800 + np.arange(60.0))
    segs = window(rec, 32, 4)
    shuffled = [segs[1], segs[2], segs[0]]
    out = stitch(shuffled, [s.target for s in shuffled])
    np.testing.assert_array_equal(out, rec.labels)


def test_stitch_detects_gap():
    rec = make_record(800 + np.arange(60.0))
    segs = window(rec, 32, 4)
    with pytest.raises(ValueError, match="missing segment"):
        stitch([segs[0], segs[2]], [segs[0].target, segs[2].target])


def test_stitch_rejects_mixed_records():
    a = window(make_record(800 + np.arange(30.0), rid="a"), 32, 4)
    b = window(make_record(800 + np.arange(30.0), rid="b"), 32, 4)
    with pytest.raises(ValueError, match="multiple records"):
        stitch(a + b, [s.target for s in a + b])


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 200),
       st.integers(0, 6), st.integers(1, 30))
def test_window_stitch_identity_property(seed, length, pad, ts):
    seg_len = ts + 2 * pad
    r = np.random.default_rng(seed)
    rr = 800 + r.integers(-80, 80, size=length).astype(float)
    labels = (r.random(length) < 0.1).astype(int)
    rec = make_record(rr, labels)
    segs = window(rec, seg_len, pad)
    assert sum(s.valid for s in segs) == length
    np.testing.assert_array_equal(stitch(segs, [s.target for s in segs]), labels)


# --- CSV ---------------------------------------------------------------------------

def test_csv_roundtrip_exact(tmp_path):
    recs = [
        make_record([812.5, 800.0, 933.25], [0, 1, 0], rid="7"),
        make_record([650.0, 700.125], [1, 0], rid="xyz"),
    ]
    path = tmp_path / "data.csv"
    write_csv(recs, path)
    back = parse_csv(path)
    assert back == recs
    # integral floats are written as integers, fractional ones exactly
    text = path.read_text()
    assert "800,1," in text
    assert "812.5" in text


def test_parse_csv_header_and_interleaved(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text(
        "id,rr,markup,time\n"
        "b,800,0,800\n"
        "a,700,1,700\n"
        "b,820,0,1620\n"
        "a,710,0,1410\n")
    recs = parse_csv(path)
    assert [r.record_id for r in recs] == ["b", "a"]
    np.testing.assert_array_equal(recs[0].rr, [800, 820])
    np.testing.assert_array_equal(recs[1].labels, [1, 0])


def test_parse_csv_skips_bad_rows(tmp_path, caplog):
    path = tmp_path / "bad.csv"
    path.write_text(
        "a,800,0,800\n"
        "a,oops,0,1600\n"      # non-numeric rr
        "a,810,2,1610\n"       # markup outside {0,1}
        "a,820,0,nan?\n"       # non-numeric time
        "a,80,0,1650\n"        # implausible rr
        "a,830,1,2430\n"
        "short,row\n")
    with caplog.at_level(logging.WARNING, logger="cardiospike.data"):
        recs = parse_csv(path)
    assert len(recs) == 1
    np.testing.assert_array_equal(recs[0].rr, [800, 830])
    np.testing.assert_array_equal(recs[0].labels, [0, 1])
    joined = "\n".join(m for m in caplog.messages)
    assert "row skipped" in joined
    assert len(caplog.records) == 5


def test_parse_csv_rejects_nonmonotonic_record(tmp_path, caplog):
    path = tmp_path / "mono.csv"
    path.write_text(
        "a,800,0,800\n"
        "a,810,0,700\n"    # time goes backwards
        "b,900,0,900\n"
        "b,910,0,1810\n")
    with caplog.at_level(logging.WARNING, logger="cardiospike.data"):
        recs = parse_csv(path)
    assert [r.record_id for r in recs] == ["b"]
    assert any("non-monotonic" in m for m in caplog.messages)


def test_parse_csv_ignores_fifth_column(tmp_path):
    path = tmp_path / "five.csv"
    path.write_text("a,800,0,800,extra\na,810,1,1610,0\n")
    recs = parse_csv(path)
    assert len(recs) == 1
    np.testing.assert_array_equal(recs[0].labels, [0, 1])


def test_parse_csv_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    assert parse_csv(path) == []


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 40))
def test_csv_roundtrip_property(tmp_path_factory, seed, n):
    r = np.random.default_rng(seed)
    rr = np.round(800 + 120 * r.standard_normal(n), 3)
    rr = np.clip(rr, 250, 2900)
    labels = (r.random(n) < 0.2).astype(int)
    rec = RhythmRecord("p1", rr, labels, np.cumsum(rr))
    path = tmp_path_factory.mktemp("csv") / "round.csv"
    write_csv([rec], path)
    assert parse_csv(path) == [rec]


# --- synthesis -----------------------------------------------------------------------

def test_spike_template_oracle():
    # amplitude 80, undershoot 0.8, relaxation 0.5^i over 3 samples:
    # [80, -64, 32, 16, 8]
    np.testing.assert_array_equal(spike_template(80, 0.8, 0.5, 3),
                                  [80.0, -64.0, 32.0, 16.0, 8.0])


def test_synth_record_spike_shape():
    cfg = SynthConfig(samples_per_record=400, jitter_ms=0.0,
                      amplitude_range=(80.0, 80.0), spike_rate_per_100=2.0)
    rec = synth_record(cfg, seed=9)
    pos = np.flatnonzero(rec.labels)
    assert pos.size > 0
    base = cfg.baseline_ms
    for p in pos:
        # with zero jitter the sample pattern is the rounded template
        np.testing.assert_array_equal(
            rec.rr[p:p + 5] - base, [80.0, -64.0, 32.0, 16.0, 8.0])
    # footprints never overlap
    assert (np.diff(pos) > 2 + cfg.relaxation_len).all()


def test_synth_record_integer_ms():
    rec = synth_record(SynthConfig(samples_per_record=200), seed=1)
    assert np.array_equal(rec.rr, np.rint(rec.rr))
    np.testing.assert_array_equal(rec.times, np.cumsum(rec.rr))


def test_synth_record_amplitude_bounds():
    cfg = SynthConfig(samples_per_record=2000, jitter_ms=0.0, spike_rate_per_100=3.0)
    rec = synth_record(cfg, seed=4)
    pos = np.flatnonzero(rec.labels)
    devs = rec.rr[pos] - cfg.baseline_ms
    assert devs.min() >= cfg.amplitude_range[0] - 0.5
    assert devs.max() <= cfg.amplitude_range[1] + 0.5


def test_synth_corpus_defaults_and_determinism():
    cfg = SynthConfig(num_records=4, samples_per_record=300, seed=6)
    a = synth_corpus(cfg)
    b = synth_corpus(cfg)
    assert a == b
    assert [r.record_id for r in a] == ["1", "2", "3", "4"]
    stats = corpus_stats(a)
    assert stats.record_count == 4
    assert stats.sample_count == 1200
    assert 0.0 < stats.positive_rate < 0.1


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(amplitude_range=(0.0, 50.0))
    with pytest.raises(ValueError):
        SynthConfig(amplitude_range=(20.0, 150.0))
    with pytest.raises(ValueError):
        SynthConfig(spike_rate_per_100=-1.0)
    with pytest.raises(ValueError):
        SynthConfig(num_records=0)


def test_synth_config_dict_roundtrip():
    cfg = SynthConfig(num_records=3, amplitude_range=(50.0, 60.0), seed=12)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_rate_means_no_spikes():
    rec = synth_record(SynthConfig(samples_per_record=300, spike_rate_per_100=0.0), seed=2)
    assert rec.labels.sum() == 0
