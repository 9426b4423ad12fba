"""Bit decisions, BER tables, sequence-length sweeps and trace dumps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .baseline import BaselineDetector
from .channel import Dataset
from .framing import RecordFrames, frame_dataset
from .nn.network import Network
from .train import TEST, TrainConfig, fit_detector, predict_pmfs_many

DETECTOR_ORDER = ("Baseline", "Dense-Net", "CNN-Net", "LSTM3-Net8", "BiLSTM3-Net8", "LSTM3-Net120",
                  "CNN-LSTM3-Net120")
SEQUENCE_DETECTORS = ("LSTM3-Net8", "BiLSTM3-Net8", "LSTM3-Net120", "CNN-LSTM3-Net120")
SYMBOL_DETECTORS = ("Baseline", "Dense-Net", "CNN-Net")
_LABEL = {"dense": "Dense-Net", "cnn": "CNN-Net", "lstm3": "LSTM3-Net", "bilstm3": "BiLSTM3-Net",
          "cnn_lstm3": "CNN-LSTM3-Net"}


def detector_label(detector) -> str:
    """Display name, with the window length appended for recurrent networks."""
    if isinstance(detector, BaselineDetector):
        return "Baseline"
    label = _LABEL[detector.name]
    return f"{label}{detector.tau}" if detector.recurrent else label


def pmf_to_bits(pmf) -> np.ndarray:
    """Most probable symbol per row; an exact tie goes to bit-0."""
    pmf = np.asarray(pmf)
    return (pmf[..., 1] > pmf[..., 0]).astype(np.uint8)


def predict_bits(detector, frames: list[RecordFrames]) -> list[np.ndarray]:
    """Per-record bit decisions of a network or the baseline."""
    if isinstance(detector, BaselineDetector):
        return [detector.predict(f).astype(np.uint8) for f in frames]
    if isinstance(detector, Network):
        return [pmf_to_bits(p) for p in predict_pmfs_many(detector, frames)]
    raise TypeError(f"not a detector: {type(detector).__name__}")


def bit_errors(predicted, truth) -> int:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    return int(np.count_nonzero(predicted != truth))


def compute_ber(predicted, truth) -> float:
    """Fraction of positions where the bit sequences differ."""
    n = np.asarray(truth).size
    if n == 0:
        raise ValueError("cannot compute a BER over zero bits")
    return bit_errors(predicted, truth) / n


# -- reports -------------------------------------------------------------------

@dataclass
class BerRow:
    detector: str
    interval_ms: int
    bit_errors: int
    total_bits: int
    ber: float


@dataclass
class BerReport:
    rows: list[BerRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def ber(self, detector: str, interval_ms: int) -> float:
        for r in self.rows:
            if r.detector == detector and r.interval_ms == interval_ms:
                return r.ber
        raise KeyError((detector, interval_ms))

    @property
    def detectors(self) -> list[str]:
        return list(dict.fromkeys(r.detector for r in self.rows))

    @property
    def intervals(self) -> list[int]:
        return sorted({r.interval_ms for r in self.rows})

    def mean_ber(self, detector: str) -> float:
        """Mean over intervals of the per-interval BER."""
        return float(np.mean([r.ber for r in self.rows if r.detector == detector]))

    def to_text(self) -> str:
        """Long table, one row per (detector, interval), then a wide
        interval-by-detector grid."""
        head = ("detector", "interval_ms", "bit_errors", "total_bits", "ber")
        body = [(r.detector, str(r.interval_ms), str(r.bit_errors), str(r.total_bits), f"{r.ber:.4f}")
                for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        fmt = "  ".join(f"{{:<{w}}}" if j == 0 else f"{{:>{w}}}" for j, w in enumerate(widths))
        lines = [fmt.format(*head)] + [fmt.format(*row) for row in body]
        dets = self.detectors
        grid_head = ["interval_ms"] + dets
        grid = [[str(iv)] + [f"{self.ber(d, iv):.4f}" for d in dets] for iv in self.intervals]
        gw = [max(len(x) for x in col) for col in zip(grid_head, *grid)]
        gfmt = "  ".join(f"{{:>{w}}}" for w in gw)
        lines += ["", gfmt.format(*grid_head)] + [gfmt.format(*row) for row in grid]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {"metadata": self.metadata, "rows": [asdict(r) for r in self.rows]}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> tuple[Path, Path]:
        """Text table at ``path`` and the machine-readable copy at ``path.json``."""
        path = Path(path)
        json_path = path.with_name(path.name + ".json")
        path.write_text(self.to_text())
        json_path.write_text(self.to_json())
        return path, json_path

    @classmethod
    def from_json(cls, text: str) -> "BerReport":
        payload = json.loads(text)
        return cls([BerRow(**r) for r in payload["rows"]], payload["metadata"])


def evaluate_detector(detector, frames: list[RecordFrames], label: str | None = None) -> list[BerRow]:
    """One row per interval present in ``frames``."""
    label = label or detector_label(detector)
    predicted = predict_bits(detector, frames)
    rows = []
    for interval in sorted({f.interval_ms for f in frames}):
        idx = [k for k, f in enumerate(frames) if f.interval_ms == interval]
        errs = sum(bit_errors(predicted[k], frames[k].record.bits) for k in idx)
        total = sum(len(frames[k].record.bits) for k in idx)
        rows.append(BerRow(label, interval, errs, total, errs / total))
    return rows


def report_table(detectors, dataset: Dataset, frames: list[RecordFrames] | None = None,
                 metadata: dict | None = None) -> BerReport:
    """Evaluate every detector on the test partition of every interval.

    ``detectors`` is a list of detectors or of ``(label, detector)`` pairs.
    Rows follow the detector order given, intervals ascending.
    """
    if frames is None:
        records = dataset.partition(TEST)
        if not records:
            raise ValueError("dataset has no records tagged test")
        frames = frame_dataset(dataset, records)
    missing = set(dataset.intervals) - {f.interval_ms for f in frames}
    if missing:
        raise ValueError(f"no test records for intervals {sorted(missing)}")
    if not detectors:
        raise ValueError("no detectors to evaluate")
    rows = []
    for item in detectors:
        label, det = item if isinstance(item, tuple) else (None, item)
        rows += evaluate_detector(det, frames, label)
    meta = {"dataset_seed": dataset.seed, "n_sequences": dataset.n_sequences, "seq_len": dataset.seq_len,
            "intervals": dataset.intervals, "test_records": len(frames)}
    meta.update(metadata or {})
    return BerReport(rows, meta)


# -- sequence-length sweep ---------------------------------------------------------

@dataclass
class SweepRow:
    arch: str
    length: int
    seed: int
    bit_errors: int
    total_bits: int
    ber: float


def sweep_seq_len(dataset: Dataset, archs=("lstm3", "bilstm3"), lengths=(4, 8, 16, 32), seeds=(0,),
                  train_frames=None, test_frames=None, epochs: int = 50, batch_size: int = 32,
                  on_model=None) -> list[SweepRow]:
    """Train one model per (arch, length, seed) and measure its test BER
    pooled over all intervals."""
    for n in lengths:
        if int(n) < 1:
            raise ValueError(f"invalid sequence length {n}")
    if train_frames is None:
        train_frames = frame_dataset(dataset, dataset.partition("train"))
    if test_frames is None:
        test_frames = frame_dataset(dataset, dataset.partition(TEST))
    rows = []
    for seed in seeds:
        for arch in archs:
            if arch not in ("lstm3", "bilstm3", "cnn_lstm3"):
                raise ValueError(f"{arch} is not a sequence detector")
            for n in lengths:
                cfg = TrainConfig(arch, epochs=epochs, batch_size=batch_size, tau=int(n), seed=seed)
                net = fit_detector(dataset, cfg, frames=train_frames).network
                pred = predict_bits(net, test_frames)
                errs = sum(bit_errors(p, f.record.bits) for p, f in zip(pred, test_frames))
                total = sum(len(f.record.bits) for f in test_frames)
                rows.append(SweepRow(arch, int(n), seed, errs, total, errs / total))
                if on_model is not None:
                    on_model(rows[-1])
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arch", "length", "seed", "bit_errors", "total_bits", "ber"])
    for r in rows:
        w.writerow([r.arch, r.length, r.seed, r.bit_errors, r.total_bits, repr(r.ber)])
    return buf.getvalue()


def sweep_trends(rows: list[SweepRow]) -> dict:
    """Per-architecture mean BER over lengths and Spearman correlation of
    BER against length, each averaged over seeds."""
    out = {}
    for arch in dict.fromkeys(r.arch for r in rows):
        means, rhos = [], []
        for seed in dict.fromkeys(r.seed for r in rows):
            sel = sorted((r.length, r.ber) for r in rows if r.arch == arch and r.seed == seed)
            if not sel:
                continue
            lengths, bers = zip(*sel)
            means.append(float(np.mean(bers)))
            # a flat BER curve has no rank order; count it as no increase
            rho = spearmanr(lengths, bers).statistic if len(set(bers)) > 1 else 0.0
            rhos.append(float(rho))
        out[arch] = {"mean_ber": float(np.mean(means)), "spearman": float(np.mean(rhos))}
    return out


# -- trace dump ------------------------------------------------------------------

def dump_trace(dataset: Dataset, record_id: str, path=None) -> str:
    """CSV of ``time_ms, ph, marker`` per sample for plotting.

    Markers are ``sync`` at the detected sync onset and ``symbol=k bit=b`` at
    the first sample of each symbol window.
    """
    rec = dataset.record(record_id)
    frames = RecordFrames(rec, dataset.scheme_for(rec.interval_ms))
    markers: dict[int, list[str]] = {frames.sync_index: ["sync"]}
    for k, start in enumerate(frames.window_starts()):
        markers.setdefault(int(start), []).append(f"symbol={k} bit={int(rec.bits[k])}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_ms", "ph", "marker"])
    times = rec.trace.times_ms
    for j, (t, v) in enumerate(zip(times, rec.trace.samples)):
        w.writerow([repr(float(t)), repr(float(v)), ";".join(markers.get(j, []))])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_trace_dump(text: str):
    """Parse :func:`dump_trace` output into (times, ph, markers)."""
    rows = list(csv.reader(io.StringIO(text)))[1:]
    times = np.array([float(r[0]) for r in rows])
    ph = np.array([float(r[1]) for r in rows])
    markers = [m for r in rows if r[2] for m in r[2].split(";")]
    return times, ph, markers
