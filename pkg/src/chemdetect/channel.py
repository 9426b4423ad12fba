"""Simulated pH channel: modulation, trace synthesis and dataset files.

The physical platform is replaced by a first-order tank model. Excess acid
concentration ``x(t)`` obeys ``dx/dt = -x / tau + u(t)`` where ``u`` is a
constant pump rate ``+A / d`` during acid injections and ``-A / d`` during
base injections, ``d`` being the per-bit injection time. The sensor reads

    pH(t) = ph_baseline - nonlinearity_scale * asinh(z(t)) + noise

where ``z`` is ``x`` seen through a first-order sensor lag,
``dz/dt = (x - z) / sensor_lag_ms`` (``z = x`` when the lag is 0). The lag
stands in for dispersion along the tube and the electrode response; it
spreads each injection over the following symbols. The channel is
nonlinear, has memory, and moves down for acid and up for base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .numerics import STREAM_DATA, PrngState, seed_stream

ACID = "acid"
BASE = "base"

FORMAT_VERSION = 1
DEFAULT_INTERVALS = (250, 334, 380, 500)


class DatasetFormatError(ValueError):
    """Malformed dataset header or record block."""


class DatasetVersionError(DatasetFormatError):
    """Dataset file written by an unsupported format version."""


class TruncatedDatasetError(DatasetFormatError):
    """Dataset file ends early or a samples line is cut short."""


class DatasetValidationError(DatasetFormatError):
    """Record content violates an invariant (e.g. bits vs trace length)."""


@dataclass(frozen=True)
class ModulationScheme:
    injection_ms: int = 30
    pause_ms: int = 220
    sync_pulse_ms: int = 100
    sync_silence_ms: int = 900
    sample_rate_hz: int = 200

    def __post_init__(self):
        for name in ("injection_ms", "pause_ms", "sync_pulse_ms", "sync_silence_ms", "sample_rate_hz"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sample_rate_hz * self.symbol_interval_ms < 30 * 1000:
            raise ValueError("fewer than 30 samples per symbol interval")

    @property
    def symbol_interval_ms(self) -> int:
        return self.injection_ms + self.pause_ms

    @property
    def preamble_ms(self) -> int:
        return self.sync_pulse_ms + self.sync_silence_ms

    @classmethod
    def for_interval(cls, interval_ms: int, **kw) -> "ModulationScheme":
        injection = kw.pop("injection_ms", 30)
        return cls(injection_ms=injection, pause_ms=interval_ms - injection, **kw)


def default_schemes() -> list[ModulationScheme]:
    return [ModulationScheme.for_interval(t) for t in DEFAULT_INTERVALS]


@dataclass(frozen=True)
class ChannelModel:
    ph_baseline: float = 7.0
    injection_amplitude: float = 1.0
    decay_tau_ms: float = 400.0
    nonlinearity_scale: float = 1.0
    noise_std: float = 0.5
    jitter_ms: float = 10.0
    sensor_lag_ms: float = 300.0

    def __post_init__(self):
        if self.decay_tau_ms <= 0:
            raise ValueError("decay_tau_ms must be positive")
        if self.injection_amplitude <= 0:
            raise ValueError("injection_amplitude must be positive")
        if self.noise_std < 0 or self.jitter_ms < 0 or self.sensor_lag_ms < 0:
            raise ValueError("noise_std, jitter_ms and sensor_lag_ms must be non-negative")


@dataclass(frozen=True)
class InjectionEvent:
    start_ms: float
    duration_ms: float
    polarity: str


@dataclass(eq=False)
class PhTrace:
    sample_rate_hz: int
    samples: np.ndarray
    symbol_interval_ms: int
    sequence_id: str = ""

    def __eq__(self, other):
        if not isinstance(other, PhTrace):
            return NotImplemented
        return (
            self.sample_rate_hz == other.sample_rate_hz
            and self.symbol_interval_ms == other.symbol_interval_ms
            and self.sequence_id == other.sequence_id
            and np.array_equal(self.samples, other.samples)
        )

    def __len__(self):
        return len(self.samples)

    @property
    def times_ms(self) -> np.ndarray:
        return np.arange(len(self.samples)) * (1000.0 / self.sample_rate_hz)


@dataclass(eq=False)
class SequenceRecord:
    id: str
    bits: np.ndarray
    interval_ms: int
    trace: PhTrace
    split: str | None = None

    def __eq__(self, other):
        if not isinstance(other, SequenceRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.interval_ms == other.interval_ms
            and self.split == other.split
            and np.array_equal(self.bits, other.bits)
            and self.trace == other.trace
        )


@dataclass(eq=False)
class Dataset:
    records: list[SequenceRecord]
    schemes: list[ModulationScheme]
    model: ChannelModel = field(default_factory=ChannelModel)
    n_sequences: int = 0
    seq_len: int = 0
    seed: int = 0

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schemes == other.schemes
            and self.model == other.model
            and (self.n_sequences, self.seq_len, self.seed)
            == (other.n_sequences, other.seq_len, other.seed)
            and self.records == other.records
        )

    @property
    def intervals(self) -> list[int]:
        return [s.symbol_interval_ms for s in self.schemes]

    def scheme_for(self, interval_ms: int) -> ModulationScheme:
        for s in self.schemes:
            if s.symbol_interval_ms == interval_ms:
                return s
        raise KeyError(f"no modulation scheme with interval {interval_ms} ms")

    def partition(self, split: str | None) -> list[SequenceRecord]:
        if split is None:
            return list(self.records)
        return [r for r in self.records if r.split == split]

    def record(self, record_id: str) -> SequenceRecord:
        for r in self.records:
            if r.id == record_id:
                return r
        raise KeyError(f"unknown record id {record_id!r}")


def modulate(bits, scheme: ModulationScheme) -> list[InjectionEvent]:
    """Turn a bit sequence into the injection schedule (sync pulse first)."""
    events = [InjectionEvent(0.0, float(scheme.sync_pulse_ms), ACID)]
    for k, bit in enumerate(bits):
        if bit not in (0, 1):
            raise ValueError(f"bit {k} is {bit!r}, expected 0 or 1")
        start = scheme.preamble_ms + k * scheme.symbol_interval_ms
        events.append(InjectionEvent(float(start), float(scheme.injection_ms), BASE if bit else ACID))
    return events


def trace_length(n_bits: int, scheme: ModulationScheme) -> int:
    """Sample count for an ``n_bits`` transmission.

    The trace covers the preamble, every symbol interval and one extra
    interval of tail.
    """
    duration_ms = scheme.preamble_ms + (n_bits + 1) * scheme.symbol_interval_ms
    return math.ceil(duration_ms * scheme.sample_rate_hz / 1000)


def _step_response(t: np.ndarray, tau: float, lag: float) -> np.ndarray:
    """Sensed concentration for a unit-rate input switched on at t = 0."""
    if lag <= 0:
        return tau * (1.0 - np.exp(-t / tau))
    if abs(tau - lag) < 1e-9 * tau:
        return tau * (1.0 - (1.0 + t / tau) * np.exp(-t / tau))
    return tau * (1.0 - (tau * np.exp(-t / tau) - lag * np.exp(-t / lag)) / (tau - lag))


def excess_concentration(events, model: ChannelModel, t_ms: np.ndarray, pump_ms: float) -> np.ndarray:
    """Closed-form concentration at the sensor, summed over events.

    The pump runs at ``injection_amplitude / pump_ms`` per ms, so a bit
    injection of ``pump_ms`` adds ``injection_amplitude`` and the longer sync
    pulse proportionally more. Each event is a rate step up at its start and
    down at its end; both the tank and the sensor lag are linear, so the
    responses superpose.
    """
    tau, lag = model.decay_tau_ms, model.sensor_lag_ms
    x = np.zeros_like(t_ms, dtype=np.float64)
    for ev in events:
        rate = model.injection_amplitude / pump_ms
        if ev.polarity == BASE:
            rate = -rate
        lo = np.searchsorted(t_ms, ev.start_ms, side="left")
        if lo >= len(t_ms):
            continue
        tt = t_ms[lo:]
        on = _step_response(tt - ev.start_ms, tau, lag)
        off = _step_response(np.maximum(tt - ev.start_ms - ev.duration_ms, 0.0), tau, lag)
        x[lo:] += rate * (on - off)
    return x


def simulate_trace(events, model: ChannelModel, scheme: ModulationScheme, prng: PrngState,
                   n_samples: int | None = None, sequence_id: str = "") -> PhTrace:
    """Sample the pH response to ``events``.

    Each event start is delayed by Uniform[0, jitter_ms]; Gaussian sensor
    noise is added per sample. ``n_samples`` defaults to :func:`trace_length`
    for a schedule of one sync pulse plus ``len(events) - 1`` symbols.
    """
    if n_samples is None:
        n_samples = trace_length(max(len(events) - 1, 0), scheme)
    jittered = []
    for ev in events:
        delay = prng.next_uniform() * model.jitter_ms if model.jitter_ms > 0 else 0.0
        jittered.append(InjectionEvent(ev.start_ms + delay, ev.duration_ms, ev.polarity))
    t = np.arange(n_samples) * (1000.0 / scheme.sample_rate_hz)
    x = excess_concentration(jittered, model, t, scheme.injection_ms)
    ph = model.ph_baseline - model.nonlinearity_scale * np.arcsinh(x)
    if model.noise_std > 0:
        ph = ph + prng.gaussian(0.0, model.noise_std, size=n_samples)
    return PhTrace(scheme.sample_rate_hz, ph, scheme.symbol_interval_ms, sequence_id)


def generate_dataset(schemes=None, model: ChannelModel | None = None, n_sequences: int = 100,
                     seq_len: int = 120, master_seed: int = 0) -> Dataset:
    """Simulate ``n_sequences`` random ``seq_len``-bit transmissions per scheme.

    Record ``j`` of scheme ``i`` uses its own stream, so any record can be
    regenerated in isolation.
    """
    schemes = list(schemes) if schemes is not None else default_schemes()
    model = model or ChannelModel()
    if n_sequences < 2 or seq_len < 1:
        raise ValueError("need n_sequences >= 2 and seq_len >= 1")
    records = []
    for i, scheme in enumerate(schemes):
        interval = scheme.symbol_interval_ms
        n_samples = trace_length(seq_len, scheme)
        for j in range(n_sequences):
            prng = seed_stream(master_seed, STREAM_DATA, i * n_sequences + j)
            bits = prng.bits(seq_len)
            rid = f"{interval}-{j:04d}"
            trace = simulate_trace(modulate(bits, scheme), model, scheme, prng, n_samples, rid)
            records.append(SequenceRecord(rid, bits, interval, trace))
    return Dataset(records, schemes, model, n_sequences, seq_len, master_seed)


# -- persistence -------------------------------------------------------------

_MODEL_KEYS = [f.name for f in fields(ChannelModel)]


def write_dataset(dataset: Dataset, path) -> None:
    """Write the text format documented in ``docs/formats.md``."""
    s0 = dataset.schemes[0]
    header = {
        "format_version": FORMAT_VERSION,
        "sample_rate_hz": s0.sample_rate_hz,
        "intervals": ",".join(str(s.symbol_interval_ms) for s in dataset.schemes),
        "injection_ms": s0.injection_ms,
        "sync_pulse_ms": s0.sync_pulse_ms,
        "sync_silence_ms": s0.sync_silence_ms,
        "n": dataset.n_sequences,
        "seq_len": dataset.seq_len,
        "seed": dataset.seed,
    }
    for key in _MODEL_KEYS:
        header[key] = repr(float(getattr(dataset.model, key)))
    header["records"] = len(dataset.records)
    lines = ["# chemdetect dataset"]
    lines += [f"{k}={v}" for k, v in header.items()]
    for r in dataset.records:
        lines.append("---")
        lines.append(f"id={r.id}")
        lines.append(f"interval_ms={r.interval_ms}")
        lines.append(f"split={r.split or ''}")
        lines.append("bits=" + "".join("1" if b else "0" for b in r.bits))
        lines.append("samples=" + ",".join(repr(float(v)) for v in r.trace.samples))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _kv(line: str, key: str, lineno: int) -> str:
    k, sep, v = line.partition("=")
    if not sep or k != key:
        raise DatasetFormatError(f"line {lineno}: expected '{key}=...', got {line[:40]!r}")
    return v


def read_dataset(path) -> Dataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    it = iter(enumerate(lines, 1))
    header: dict[str, str] = {}
    for lineno, line in it:
        if line.startswith("#") or not line.strip():
            continue
        if line == "---":
            break
        k, sep, v = line.partition("=")
        if not sep:
            raise DatasetFormatError(f"line {lineno}: malformed header line {line[:40]!r}")
        header[k] = v
        if k == "format_version":
            try:
                version = int(v)
            except ValueError:
                raise DatasetFormatError(f"line {lineno}: bad format_version {v!r}") from None
            if version != FORMAT_VERSION:
                raise DatasetVersionError(f"unsupported dataset format version {version}")
    if "format_version" not in header:
        raise DatasetFormatError("missing format_version in header")
    required = ["sample_rate_hz", "intervals", "injection_ms", "sync_pulse_ms", "sync_silence_ms",
                "n", "seq_len", "seed", "records", *_MODEL_KEYS]
    missing = [k for k in required if k not in header]
    if missing:
        raise DatasetFormatError(f"header missing keys: {', '.join(missing)}")
    try:
        rate = int(header["sample_rate_hz"])
        schemes = [
            ModulationScheme.for_interval(
                int(t), injection_ms=int(header["injection_ms"]),
                sync_pulse_ms=int(header["sync_pulse_ms"]),
                sync_silence_ms=int(header["sync_silence_ms"]), sample_rate_hz=rate)
            for t in header["intervals"].split(",")
        ]
        model = ChannelModel(**{k: float(header[k]) for k in _MODEL_KEYS})
        n_records = int(header["records"])
        n, seq_len, seed = int(header["n"]), int(header["seq_len"]), int(header["seed"])
    except ValueError as exc:
        raise DatasetFormatError(f"malformed header value: {exc}") from None

    records = []
    block: list[tuple[int, str]] = []

    def flush():
        if len(block) < 5:
            raise TruncatedDatasetError(f"record block starting at line {block[0][0] if block else '?'} is incomplete")
        (l1, a), (l2, b), (l3, c), (l4, d), (l5, e) = block[:5]
        rid = _kv(a, "id", l1)
        try:
            interval = int(_kv(b, "interval_ms", l2))
        except ValueError:
            raise DatasetFormatError(f"line {l2}: bad interval") from None
        split = _kv(c, "split", l3) or None
        bit_str = _kv(d, "bits", l4)
        if set(bit_str) - {"0", "1"}:
            raise DatasetFormatError(f"line {l4}: bits must be an ASCII 0/1 string")
        bits = np.frombuffer(bit_str.encode("ascii"), dtype=np.uint8) - ord("0")
        raw = _kv(e, "samples", l5)
        try:
            samples = np.array([float(v) for v in raw.split(",")], dtype=np.float64) if raw else np.empty(0)
        except ValueError:
            raise TruncatedDatasetError(f"line {l5}: samples line is cut short or malformed") from None
        try:
            scheme = next(s for s in schemes if s.symbol_interval_ms == interval)
        except StopIteration:
            raise DatasetValidationError(f"record {rid}: interval {interval} not in header") from None
        if len(samples) != trace_length(len(bits), scheme):
            raise DatasetValidationError(
                f"record {rid}: {len(bits)} bits need {trace_length(len(bits), scheme)} samples, "
                f"found {len(samples)}")
        if not np.all(np.isfinite(samples)):
            raise DatasetValidationError(f"record {rid}: non-finite sample")
        records.append(SequenceRecord(rid, bits.copy(), interval, PhTrace(rate, samples, interval, rid), split))

    for lineno, line in it:
        if line == "---":
            flush()
            block = []
        elif line:
            block.append((lineno, line))
    if block or n_records:
        flush()
    if len(records) != n_records:
        raise TruncatedDatasetError(f"header promises {n_records} records, found {len(records)}")
    return Dataset(records, schemes, model, n, seq_len, seed)
