"""Command line interface: gen-data, train, detect, serve, replay.

Option precedence is flags over config-file values over built-in defaults.
The --config file is flat JSON whose keys match the long option names with
underscores.  Every run logs the fully resolved settings and seed up front;
outputs are written to a temporary file and renamed, so failures never leave
partial files behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import socket
import sys
from pathlib import Path

from .data import (SynthConfig, corpus_stats, format_number, parse_csv,
                   synth_corpus, write_csv)
from .model import DetectorConfig, load_checkpoint, save_checkpoint
from .predict import predict_record_proba
from .stream import PacketError, replay_sensor, serve_once
from .training import (REPORT_HEADER, TrainConfig, TrainingDiverged, cross_validate,
                       format_report, train)

logger = logging.getLogger("cardiospike.cli")

ARCH_KEYS = ("kernel_size", "base_channels", "hidden_channels", "side_channels",
             "layers_per_block", "num_stacks", "segment_len", "pad")
TRAIN_KEYS = ("focal_alpha", "focal_gamma", "learning_rate", "weight_decay",
              "beta1", "beta2", "epsilon", "epochs", "batch_size", "threshold")


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.parent / (path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults, then --config file values, then explicit flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_values = json.load(fh)
        for key, value in file_values.items():
            if key not in merged:
                raise ValueError(f"unknown config key {key!r} in {args.config}")
            merged[key] = value
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    logger.info("resolved settings: %s", json.dumps(merged, sort_keys=True, default=str))
    return merged


def _detector_config(opts: dict) -> DetectorConfig:
    return DetectorConfig(num_classes=1, **{k: opts[k] for k in ARCH_KEYS})


def _train_config(opts: dict) -> TrainConfig:
    return TrainConfig(seed=opts["seed"], **{k: opts[k] for k in TRAIN_KEYS})


# --- gen-data ------------------------------------------------------------------

GEN_DEFAULTS = {
    "records": SynthConfig.num_records,
    "samples": SynthConfig.samples_per_record,
    "baseline": SynthConfig.baseline_ms,
    "jitter": SynthConfig.jitter_ms,
    "spike_rate": SynthConfig.spike_rate_per_100,
    "amp_min": SynthConfig.amplitude_range[0],
    "amp_max": SynthConfig.amplitude_range[1],
    "relax_len": SynthConfig.relaxation_len,
    "undershoot": SynthConfig.undershoot,
    "relax_factor": SynthConfig.relaxation_factor,
    "seed": 0,
}


def cmd_gen_data(args: argparse.Namespace) -> int:
    opts = _resolve(args, GEN_DEFAULTS)
    cfg = SynthConfig(
        num_records=opts["records"],
        samples_per_record=opts["samples"],
        baseline_ms=opts["baseline"],
        jitter_ms=opts["jitter"],
        spike_rate_per_100=opts["spike_rate"],
        amplitude_range=(opts["amp_min"], opts["amp_max"]),
        relaxation_len=opts["relax_len"],
        undershoot=opts["undershoot"],
        relaxation_factor=opts["relax_factor"],
        seed=opts["seed"],
    )
    corpus = synth_corpus(cfg)
    stats = corpus_stats(corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / "corpus.csv.tmp"
    write_csv(corpus, tmp)
    os.replace(tmp, out / "corpus.csv")
    manifest = {
        "config": cfg.to_dict(),
        "stats": {
            "record_count": stats.record_count,
            "sample_count": stats.sample_count,
            "positive_count": stats.positive_count,
            "positive_rate": stats.positive_rate,
        },
    }
    _atomic_write_text(out / "manifest.json",
                       json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {stats.record_count} records, {stats.sample_count} samples "
          f"({stats.positive_rate:.2%} positive) to {out}")
    return 0


# --- train ---------------------------------------------------------------------

TRAIN_DEFAULTS = {
    **{k: getattr(DetectorConfig, k) for k in ARCH_KEYS},
    **{k: getattr(TrainConfig, k) for k in TRAIN_KEYS},
    "cv": 0,
    "seed": 0,
}


def cmd_train(args: argparse.Namespace) -> int:
    opts = _resolve(args, TRAIN_DEFAULTS)
    records = parse_csv(args.data)
    if not records:
        logger.error("no usable records in %s", args.data)
        return 1
    dcfg = _detector_config(opts)
    tcfg = _train_config(opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if opts["cv"] >= 2:
        reports = cross_validate(records, dcfg, tcfg, opts["cv"])
        param_sets = {f"fold{r.fold}_epoch{len(r.history)}": r.params for r in reports}
        report_text = format_report(reports)
        mean_f = sum(r.f_score for r in reports) / len(reports)
        print(f"mean f_score over {len(reports)} folds: {mean_f:.6f}")
    else:
        params, history = train(records, dcfg, tcfg)
        param_sets = {f"fold0_epoch{len(history)}": params}
        lines = [REPORT_HEADER]
        lines += [f"0\t{st.epoch}\t{st.mean_loss:.6f}\t{st.f_score:.6f}" for st in history]
        final_f = history[-1].f_score if history else float("nan")
        lines.append(f"# final eval f_score: {final_f:.6f}")
        report_text = "\n".join(lines) + "\n"
        print(f"final eval f_score: {final_f:.6f}")
    save_checkpoint(out / "checkpoint.ckpt", dcfg, param_sets)
    _atomic_write_text(out / "report.txt", report_text)
    return 0


# --- detect --------------------------------------------------------------------

DETECT_DEFAULTS = {"threshold": 0.5, "key": None, "plot_data": False, "seed": 0}


def _pick_params(param_sets: dict, key: str | None):
    if key is not None:
        if key not in param_sets:
            raise ValueError(f"checkpoint has no parameter set {key!r}; "
                             f"available: {sorted(param_sets)}")
        return key, param_sets[key]
    if len(param_sets) == 1:
        return next(iter(param_sets.items()))
    first = sorted(param_sets)[0]
    logger.warning("checkpoint holds %d parameter sets; using %r",
                   len(param_sets), first)
    return first, param_sets[first]


def cmd_detect(args: argparse.Namespace) -> int:
    opts = _resolve(args, {**DETECT_DEFAULTS, **{k: None for k in ARCH_KEYS}})
    config, param_sets = load_checkpoint(args.checkpoint)
    for k in ARCH_KEYS:
        if opts[k] is not None and opts[k] != getattr(config, k):
            logger.error("flag %s=%s conflicts with checkpoint config %s=%s",
                         k, opts[k], k, getattr(config, k))
            return 1
    key, params = _pick_params(param_sets, opts["key"])
    logger.info("using parameter set %r", key)
    records = parse_csv(args.data)
    if not records:
        logger.error("no usable records in %s", args.data)
        return 1
    threshold = opts["threshold"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred_lines = []
    plot_lines = ["identifier,time_ms,rr_ms,probability"]
    total_calls = 0
    for rec in records:
        proba = predict_record_proba(rec, params, config)
        calls = (proba > threshold).astype(int)
        total_calls += int(calls.sum())
        for rr, label, t, c, p in zip(rec.rr, rec.labels, rec.times, calls, proba):
            pred_lines.append(f"{rec.record_id},{format_number(rr)},{int(label)},"
                              f"{format_number(t)},{int(c)}")
            plot_lines.append(f"{rec.record_id},{format_number(t)},{format_number(rr)},"
                              f"{p:.6f}")
    _atomic_write_text(out / "predictions.csv", "\n".join(pred_lines) + "\n")
    if opts["plot_data"]:
        _atomic_write_text(out / "plot.csv", "\n".join(plot_lines) + "\n")
    print(f"wrote predictions for {len(records)} records "
          f"({total_calls} spike calls) to {out}")
    return 0


# --- serve / replay --------------------------------------------------------------

SERVE_DEFAULTS = {"host": "127.0.0.1", "threshold": 0.5, "key": None, "seed": 0}


def cmd_serve(args: argparse.Namespace) -> int:
    opts = _resolve(args, SERVE_DEFAULTS)
    config, param_sets = load_checkpoint(args.checkpoint)
    key, params = _pick_params(param_sets, opts["key"])
    logger.info("using parameter set %r", key)
    collected = []

    def sink(line: str) -> None:
        print(line, flush=True)
        collected.append(line)

    try:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((opts["host"], args.port))
        listener.listen(1)
    except OSError as err:
        logger.error("cannot listen on %s:%d: %s", opts["host"], args.port, err)
        return 1
    logger.info("listening on %s:%d", opts["host"], args.port)
    try:
        with listener:
            count, state = serve_once(listener, params, opts["threshold"], sink, config)
    except KeyboardInterrupt:
        logger.info("interrupted; exiting")
        return 0
    if args.out:
        _atomic_write_text(Path(args.out), "\n".join(collected) + ("\n" if collected else ""))
    print(f"{count} events from sensor {state.sensor_id!r} "
          f"({len(state.samples)} samples)", file=sys.stderr)
    return 0


REPLAY_DEFAULTS = {"host": "127.0.0.1", "speed": float("inf"), "window": 15,
                   "drop": 0.0, "drop_burst": 1, "record_id": None,
                   "sensor_id": None, "seed": 0}


def cmd_replay(args: argparse.Namespace) -> int:
    opts = _resolve(args, REPLAY_DEFAULTS)
    records = parse_csv(args.data)
    if not records:
        logger.error("no usable records in %s", args.data)
        return 1
    if opts["record_id"] is not None:
        matches = [r for r in records if r.record_id == opts["record_id"]]
        if not matches:
            logger.error("record %r not found in %s", opts["record_id"], args.data)
            return 1
        record = matches[0]
    else:
        record = records[0]
    sent = replay_sensor(record, opts["host"], args.port, speed=opts["speed"],
                         window=opts["window"], drop=opts["drop"],
                         drop_burst=opts["drop_burst"], seed=opts["seed"],
                         sensor_id=opts["sensor_id"])
    print(f"sent {sent} packets from record {record.record_id}")
    return 0


# --- parser ---------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="RNG seed (default 0)")
    p.add_argument("--config", help="JSON file with default option values")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="more logging (-v debug)")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings only")


def _add_arch_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kernel-size", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--hidden-channels", type=int)
    p.add_argument("--side-channels", type=int)
    p.add_argument("--layers-per-block", type=int)
    p.add_argument("--num-stacks", type=int)
    p.add_argument("--segment-len", type=int)
    p.add_argument("--pad", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardiospike",
        description="Train and run the RR-interval spike detector.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--records", type=int)
    p.add_argument("--samples", type=int, help="samples per record")
    p.add_argument("--baseline", type=float, help="baseline RR mean, ms")
    p.add_argument("--jitter", type=float, help="baseline jitter sigma, ms")
    p.add_argument("--spike-rate", type=float, help="spikes per 100 samples")
    p.add_argument("--amp-min", type=float)
    p.add_argument("--amp-max", type=float)
    p.add_argument("--relax-len", type=int)
    p.add_argument("--undershoot", type=float)
    p.add_argument("--relax-factor", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit the detector, optionally cross-validated")
    p.add_argument("--data", required=True, help="input corpus CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cv", type=int, help="number of folds (0 = single run)")
    _add_arch_flags(p)
    p.add_argument("--focal-alpha", type=float)
    p.add_argument("--focal-gamma", type=float)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--threshold", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run a checkpoint over a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--key", help="parameter set name inside the checkpoint")
    p.add_argument("--threshold", type=float)
    p.add_argument("--plot-data", action="store_const", const=True,
                   help="also write time/rr/probability CSV")
    _add_arch_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("serve", help="score one live sensor stream over TCP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--host")
    p.add_argument("--key")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help="also write event lines to this file")
    _add_common(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="stream a record to a serve instance")
    p.add_argument("--data", required=True)
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--host")
    p.add_argument("--record-id")
    p.add_argument("--sensor-id")
    p.add_argument("--speed", type=float, help="replay speed factor (inf = no pacing)")
    p.add_argument("--window", type=int, help="intervals per packet (1..15)")
    p.add_argument("--drop", type=float, help="probability of dropping a packet")
    p.add_argument("--drop-burst", type=int, help="consecutive packets per drop")
    _add_common(p)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO
    if args.quiet:
        level = logging.WARNING
    if args.verbose:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, PacketError, TrainingDiverged) as err:
        logger.error("%s", err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
