"""``wrnse`` command line: augment, train, enhance, evaluate.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure,
5 no inputs matched.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import config, manifest, metrics, reconstruct, room, trainer
from .audio import AudioError, Waveform, load_waveform, write_waveform
from .frontend import FeatureError
from .model import CheckpointError, load_checkpoint, read_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_NO_INPUT = 0, 2, 3, 4, 5

log = logging.getLogger("wrnse")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# augment


def _class_weights(text):
    names = sorted(room.ROOM_CLASSES, key=lambda k: ("small", "medium", "large").index(k)
                   if k in ("small", "medium", "large") else 9)
    if not text:
        return names, np.full(len(names), 1.0 / len(names))
    try:
        w = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise CliError(f"--weights must be comma-separated numbers, got {text!r}", EXIT_CONFIG) from None
    if w.shape[0] != len(names) or np.any(w < 0) or w.sum() <= 0:
        raise CliError(f"--weights needs {len(names)} non-negative values ({','.join(names)}) with a positive sum",
                       EXIT_CONFIG)
    return names, w / w.sum()


def cmd_augment(args):
    try:
        records = manifest.read(args.manifest)
    except manifest.ManifestError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    if not records:
        raise CliError("no inputs matched", EXIT_NO_INPUT)
    names, weights = _class_weights(args.weights)
    bank = trainer.NoiseBank(args.noise_dir or "", seed=args.seed)
    out = Path(args.out_dir)
    rows, failed = [], []
    for i, rec in enumerate(records):
        uid = str(rec.get("id") or Path(rec["clean"]).stem)
        rng = trainer.substream(args.seed, "augment", i)
        try:
            clean = load_waveform(rec["clean"])
            cls = str(names[int(rng.choice(len(names), p=weights))])
            noisy, info = trainer.corrupt_utterance(clean, rng, bank, room_class=cls)
        except (AudioError, room.RoomError, KeyError) as exc:
            failed.append(uid)
            log.error("skipping %s: %s", uid, exc)
            continue
        path = out / "corrupted" / f"{uid}.wav"
        write_waveform(path, noisy)
        rows.append({"id": uid, "clean": str(Path(rec["clean"]).resolve()), "corrupted": str(path.resolve()),
                     "room": info["room"], "room_class": cls, "snr_db": info["snr_db"], "noise": info["noise"],
                     "first_tap": info["first_tap"], "peak_gain": info["peak_gain"], "seed": args.seed, "index": i})
    if failed:
        log.warning("%d unreadable or failed entries: %s", len(failed), ", ".join(failed))
    if not rows:
        raise CliError("every input failed", EXIT_IO)
    manifest.write(out / "manifest.jsonl", rows, kind="corrupted")
    print(f"wrote {len(rows)} corrupted files to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    overrides = {"seed": args.seed} if args.seed_given else {}
    try:
        values = config.load(args.config, overrides=overrides)
    except config.ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    if args.resume:
        try:
            ckpt = read_checkpoint(args.resume)
        except (CheckpointError, OSError) as exc:
            raise CliError(f"cannot resume: {exc}", EXIT_IO) from exc
        if ckpt.train_step >= values["max_steps"]:
            print(f"nothing to do: checkpoint is at step {ckpt.train_step}, max_steps={values['max_steps']}")
            return EXIT_OK
    try:
        result = trainer.train_from_config(values, resume=args.resume)
    except (manifest.ManifestError, AudioError) as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    except trainer.TrainingError as exc:
        code = EXIT_NUMERIC if "non-finite" in str(exc) else EXIT_IO
        raise CliError(str(exc), code) from exc
    last = result.losses[-1] if result.losses else float("nan")
    print(f"trained to step {result.step}; final cost {last:.6g}; skipped blocks {result.skipped}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# enhance


def _expand(patterns):
    paths = []
    for p in patterns:
        hits = sorted(glob.glob(p)) if any(ch in p for ch in "*?[") else ([p] if Path(p).exists() else [])
        paths.extend(hits)
    return list(dict.fromkeys(paths))


def cmd_enhance(args):
    try:
        model = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}", EXIT_IO) from exc
    inputs = _expand(args.inputs)
    if not inputs:
        raise CliError("no inputs matched", EXIT_NO_INPUT)
    out = Path(args.out_dir)
    failed = 0
    for n, path in enumerate(inputs, 1):
        t0 = time.perf_counter()
        try:
            noisy = load_waveform(path)
            enh = reconstruct.enhance_waveform(noisy, model).samples
        except (AudioError, FeatureError, FloatingPointError, ValueError) as exc:
            failed += 1
            log.error("failed on %s: %s", path, exc)
            continue
        # frame-covered span, zero-padded to the input length
        n_in = noisy.samples.shape[0]
        enh = np.pad(enh, (0, max(0, n_in - enh.shape[0])))[:n_in]
        write_waveform(out / Path(path).name, Waveform(enh))
        if args.stats:
            print(f"[{n}/{len(inputs)}] {path}: {n_in / 16000:.2f} s audio in {time.perf_counter() - t0:.2f} s")
    if failed:
        log.warning("%d of %d inputs failed", failed, len(inputs))
        return EXIT_IO
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

INTRUSIVE = ("cd", "llr", "fwsegsnr_db", "srmr")


def _test_path(rec):
    for key in ("test", "enhanced", "corrupted", "noisy"):
        if rec.get(key):
            return rec[key]
    return rec.get("clean")


def _group_value(rec, key):
    value = rec.get(key)
    if isinstance(value, dict):
        value = value.get("room_class", json.dumps(value, sort_keys=True))
    if value is None and key == "room":
        value = rec.get("room_class")
    return "?" if value is None else str(value)


def cmd_evaluate(args):
    try:
        records = manifest.read(args.manifest)
    except manifest.ManifestError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    if not records:
        raise CliError("no inputs matched", EXIT_NO_INPUT)
    columns = ("srmr",) if args.mode == "srmr-only" else INTRUSIVE
    keys = [k for k in (args.group_by or "").split(",") if k]
    rows, skipped = [], 0
    for rec in records:
        uid = str(rec.get("id") or Path(_test_path(rec) or "?").stem)
        ref_path = rec.get("reference") or (rec.get("clean") if _test_path(rec) != rec.get("clean") else None)
        if args.mode == "intrusive" and not ref_path:
            skipped += 1
            log.warning("%s: no reference, row skipped", uid)
            continue
        try:
            test = load_waveform(_test_path(rec))
            if args.mode == "intrusive":
                report = metrics.score(test, load_waveform(ref_path))
            else:
                report = metrics.MetricReport(srmr=metrics.srmr(test))
        except (AudioError, metrics.MetricError, FeatureError, TypeError) as exc:
            skipped += 1
            log.warning("%s: %s, row skipped", uid, exc)
            continue
        row = {"id": uid, **{k: _group_value(rec, k) for k in keys}}
        row.update({c: getattr(report, c) for c in columns})
        rows.append(row)
    if not rows:
        raise CliError(f"no rows could be scored ({skipped} skipped)", EXIT_IO)
    groups = defaultdict(list)
    for row in rows:
        groups[tuple(row[k] for k in keys)].append(row)
    aggregates = []
    if keys:
        for gkey in sorted(groups):
            aggregates.append(_aggregate(dict(zip(keys, gkey)), groups[gkey], columns))
    aggregates.append(_aggregate({k: "all" for k in keys}, rows, columns))
    out = Path(args.out) if args.out else None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            for row in rows:
                fh.write(json.dumps({"kind": "utterance", **row}, sort_keys=True) + "\n")
            for agg in aggregates:
                fh.write(json.dumps({"kind": "aggregate", **agg}, sort_keys=True) + "\n")
    print(_table(aggregates, keys, columns))
    if skipped:
        print(f"skipped rows: {skipped}")
    return EXIT_OK


def _aggregate(group, rows, columns):
    agg = dict(group)
    agg["n"] = len(rows)
    for c in columns:
        vals = [r[c] for r in rows if r[c] is not None]
        agg[c] = float(np.mean(vals)) if vals else None
    return agg


def _table(aggregates, keys, columns):
    header = [*keys, "n", *columns]
    lines = ["  ".join(f"{h:>12}" for h in header)]
    for agg in aggregates:
        cells = [f"{agg[k]:>12}" for k in keys] + [f"{agg['n']:>12d}"]
        cells += [f"{agg[c]:>12.3f}" if agg[c] is not None else f"{'-':>12}" for c in columns]
        lines.append("  ".join(cells))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="wrnse", description="Speech enhancement with a 1-D wide residual network.")
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, sequential processing")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("augment", help="corrupt clean speech with simulated rooms and noise")
    a.add_argument("manifest", help="manifest or path list of clean WAV files")
    a.add_argument("out_dir")
    a.add_argument("--weights", default="", help="room class mix small,medium,large (default equal)")
    a.add_argument("--noise-dir", default="", help="directory of noise WAVs (default: synthetic noise)")
    a.set_defaults(func=cmd_augment)

    t = sub.add_parser("train", help="train a network from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance WAV files with a trained checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("inputs", nargs="+", help="WAV paths or glob patterns")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--stats", action="store_true", help="print per-file timing")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("evaluate", help="objective quality metrics over a manifest")
    v.add_argument("manifest")
    v.add_argument("--mode", choices=["intrusive", "srmr-only"], default="intrusive")
    v.add_argument("--group-by", default="", help="comma-separated record keys, e.g. room,distance")
    v.add_argument("--out", default=None, help="JSON-lines report path")
    v.set_defaults(func=cmd_evaluate)
    return p


def _limit_threads(n):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    args.seed = 0 if args.seed is None else args.seed
    if args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    threads = 1 if args.deterministic else args.threads
    limiter = _limit_threads(threads) if threads else None
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
