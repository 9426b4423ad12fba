"""Command-line entry point: ``chemdetect <command> ...``.

Exit codes: 0 success, 2 input error (bad arguments, missing or unreadable
files, unknown names), 3 validation failure (the input parses but fails an
integrity or consistency check).
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

from . import baseline as bl
from .channel import (ChannelModel, DatasetFormatError, DatasetValidationError, ModulationScheme, generate_dataset,
                      read_dataset, write_dataset)
from .evaluate import BerReport, detector_label, dump_trace, report_table, sweep_csv, sweep_seq_len, sweep_trends
from .framing import NoSyncFound, TruncatedTrace, frame_dataset
from .nn.network import ARCHITECTURES, UnknownArchitecture
from .train import (TEST, TRAIN, ChecksumError, DescriptorError, ModelFormatError, ShapeMismatchError, TrainConfig,
                    fit_detector, load_model, save_model, split_dataset)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_VALIDATION = 3


class ValidationFailure(Exception):
    pass


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _digest(path) -> str:
    return hashlib.blake2b(Path(path).read_bytes(), digest_size=8).hexdigest()


def _load_data(path):
    return read_dataset(path)


def _require(dataset, split):
    if not dataset.partition(split):
        raise ValidationFailure(f"dataset has no records tagged {split!r}")


# -- commands --------------------------------------------------------------------

def cmd_generate(args) -> int:
    overrides = {k: v for k, v in {
        "ph_baseline": args.ph_baseline, "injection_amplitude": args.amplitude, "decay_tau_ms": args.decay_tau_ms,
        "nonlinearity_scale": args.nonlinearity_scale, "noise_std": args.noise_std, "jitter_ms": args.jitter_ms,
        "sensor_lag_ms": args.sensor_lag_ms}.items() if v is not None}
    model = ChannelModel(**overrides)
    schemes = [ModulationScheme.for_interval(iv, sample_rate_hz=args.sample_rate) for iv in args.intervals]
    ds = generate_dataset(schemes, model, args.n_seq, args.seq_len, args.seed)
    split_seed = args.seed if args.split_seed is None else args.split_seed
    ds = split_dataset(ds, args.train_fraction, split_seed)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.records)} records to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _load_data(args.data)
    _require(ds, TRAIN)
    trunk = load_model(args.trunk) if args.trunk else None
    cfg = TrainConfig(args.arch, epochs=args.epochs, batch_size=args.batch, tau=args.tau, seed=args.seed,
                      fine_tune_trunk=args.fine_tune_trunk)

    def progress(epoch, loss):
        if args.verbose:
            print(f"epoch {epoch + 1}/{cfg.epochs} loss {loss:.6f}", file=sys.stderr)

    result = fit_detector(ds, cfg, trunk=trunk, on_epoch=progress)
    save_model(result.network, args.out)
    h = result.history
    print(f"trained {detector_label(result.network)}: loss {h[0]:.4f} -> {h[-1]:.4f}; wrote {args.out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    ds = _load_data(args.data)
    _require(ds, TRAIN)
    det = bl.fit_baseline(ds, pooled=args.pooled)
    det.save(args.out)
    for k, p in sorted(det.params.items()):
        where = "pooled" if det.pooled else f"{k} ms"
        print(f"{where}: B={p.B} gamma={p.gamma} train BER={p.train_ber:.4f}")
    return EXIT_OK


def _report(detectors, ds, args, extra) -> BerReport:
    _require(ds, TEST)
    meta = {"dataset_digest": _digest(args.data), **extra}
    report = report_table(detectors, ds, metadata=meta)
    report.write(args.out)
    sys.stdout.write(report.to_text())
    return report


def cmd_eval(args) -> int:
    ds = _load_data(args.data)
    net = load_model(args.model)
    _report([net], ds, args, {"models": {detector_label(net): _digest(args.model)}})
    return EXIT_OK


def cmd_report(args) -> int:
    ds = _load_data(args.data)
    detectors, digests = [], {}
    if args.baseline:
        detectors.append(bl.BaselineDetector.load(args.baseline))
        digests["Baseline"] = _digest(args.baseline)
    for path in args.models:
        net = load_model(path)
        detectors.append(net)
        digests[detector_label(net)] = _digest(path)
    if not detectors:
        raise ValueError("nothing to report: give --models and/or --baseline")
    _report(detectors, ds, args, {"models": digests})
    return EXIT_OK


def cmd_sweep(args) -> int:
    ds = _load_data(args.data)
    _require(ds, TRAIN)
    _require(ds, TEST)

    def progress(row):
        print(f"{row.arch} length={row.length} seed={row.seed} BER={row.ber:.4f}", file=sys.stderr)

    rows = sweep_seq_len(ds, args.archs, args.lengths, args.seeds, epochs=args.epochs, batch_size=args.batch,
                         on_model=progress)
    Path(args.out).write_text(sweep_csv(rows))
    for arch, t in sweep_trends(rows).items():
        print(f"{arch}: mean BER {t['mean_ber']:.4f}, Spearman(BER, length) {t['spearman']:+.3f}")
    return EXIT_OK


def cmd_dump_trace(args) -> int:
    ds = _load_data(args.data)
    dump_trace(ds, args.id, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chemdetect", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a labelled dataset")
    g.add_argument("--intervals", type=_ints, default=[250, 334, 380, 500])
    g.add_argument("--n-seq", type=int, default=100)
    g.add_argument("--seq-len", type=int, default=120)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--train-fraction", type=float, default=0.84)
    g.add_argument("--split-seed", type=int, default=None, help="defaults to --seed")
    g.add_argument("--sample-rate", type=int, default=200)
    for flag in ("ph-baseline", "amplitude", "decay-tau-ms", "nonlinearity-scale", "noise-std", "jitter-ms",
                 "sensor-lag-ms"):
        g.add_argument(f"--{flag}", type=float, default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one neural detector")
    t.add_argument("--arch", choices=ARCHITECTURES, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch", type=int, default=10)
    t.add_argument("--tau", type=int, default=None, help="window length for recurrent nets (default 120, bilstm3 8)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--trunk", default=None, help="trained cnn model to use as the cnn_lstm3 trunk")
    t.add_argument("--fine-tune-trunk", action="store_true")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("baseline", help="fit the bin-difference detector")
    b.add_argument("--data", required=True)
    b.add_argument("--pooled", action="store_true", help="one (B, gamma) for all intervals")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("eval", help="BER of one model on the test partition")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="BER table over several detectors")
    r.add_argument("--models", type=_names, default=[])
    r.add_argument("--baseline", default=None)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("sweep", help="BER against training window length")
    s.add_argument("--archs", type=_names, default=["lstm3", "bilstm3"])
    s.add_argument("--lengths", type=_ints, default=[4, 8, 16, 32])
    s.add_argument("--data", required=True)
    s.add_argument("--seeds", type=_ints, default=[0])
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("dump-trace", help="write one record's trace with annotations as CSV")
    d.add_argument("--data", required=True)
    d.add_argument("--id", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationFailure, DatasetValidationError, ChecksumError, DescriptorError, ShapeMismatchError,
            NoSyncFound, TruncatedTrace) as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, DatasetFormatError, ModelFormatError, UnknownArchitecture, KeyError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
