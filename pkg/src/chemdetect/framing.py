"""Receiver front end: sync detection, symbol windows and bin features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import Dataset, ModulationScheme, PhTrace, SequenceRecord

# Floor on the sync threshold, as a pH drop per 25 ms.
DEFAULT_SYNC_DROP = 0.01
DURATION_NORM_MS = 500.0


class NoSyncFound(ValueError):
    pass


class TruncatedTrace(ValueError):
    def __init__(self, msg: str, available: int):
        super().__init__(msg)
        self.available = available


class InsufficientSamples(ValueError):
    pass


@dataclass
class SymbolWindow:
    samples: np.ndarray
    interval_ms: int


def noise_level(samples: np.ndarray) -> float:
    """Robust per-sample noise estimate from the MAD of second differences."""
    d2 = np.diff(np.asarray(samples, dtype=np.float64), n=2)
    if d2.size == 0:
        return 0.0
    mad = np.median(np.abs(d2 - np.median(d2)))
    return float(1.4826 * mad / np.sqrt(6.0))


def detect_sync(trace: PhTrace, scheme: ModulationScheme, drop_per_25ms: float = DEFAULT_SYNC_DROP,
                k_sigma: float = 4.0, rel_depth: float = 0.5) -> int:
    """Index of the first sample of the sync acid pulse.

    The pH is smoothed with a trailing boxcar one sync pulse long and
    differenced across two pulse lengths. The sync pulse carries more acid than
    any data symbol, so it produces the deepest drop in the trace. A candidate
    is the first sample whose drop reaches ``rel_depth`` of that deepest drop.
    The deepest drop must itself exceed ``drop_per_25ms`` (scaled to the span)
    and ``k_sigma`` times the noise of the smoothed difference, else there is
    no sync. The onset is the last sample near the candidate at which a short
    trailing mean is still within noise of its peak, i.e. the last sample at
    the pre-pulse level.
    """
    p = np.asarray(trace.samples, dtype=np.float64)
    rate = trace.sample_rate_hz
    pulse = max(2, round(scheme.sync_pulse_ms * rate / 1000))
    span = 2 * pulse
    if len(p) <= 2 * span:
        raise NoSyncFound("trace too short to contain a sync pulse")
    sigma = noise_level(p)
    floor = max(drop_per_25ms * span * 1000 / (25 * rate), k_sigma * sigma * np.sqrt(2.0 / pulse))
    smooth = _trailing_mean(p, pulse)
    drop = smooth[span:] - smooth[:-span]
    deepest = float(drop.min())
    if deepest >= -floor:
        raise NoSyncFound("no pH drop in trace deep enough for a sync pulse")
    cand = int(np.flatnonzero(drop <= rel_depth * deepest)[0])
    lo, hi = max(0, cand - pulse), min(len(p), cand + span + 1)
    short = max(1, pulse // 2)
    level = _trailing_mean(p, short)[lo:hi]
    # noise from the silence after the pulse, so the tolerance moves with the trace
    quiet = p[cand + span:cand + span + round(scheme.sync_silence_ms * rate / 1000)]
    tol = 1.0 * noise_level(quiet) / np.sqrt(short) + 1e-12 * max(1.0, abs(level.max()))
    top = np.flatnonzero(level >= level.max() - tol)
    return lo + int(top[-1])


def _trailing_mean(p: np.ndarray, m: int) -> np.ndarray:
    """``out[j] = mean(p[j - m + 1 .. j])``, truncated at the start."""
    csum = np.concatenate(([0.0], np.cumsum(p)))
    j = np.arange(len(p))
    lo = np.maximum(j - m + 1, 0)
    return (csum[j + 1] - csum[lo]) / (j + 1 - lo)


def window_bounds(sync_index: int, scheme: ModulationScheme, count: int) -> np.ndarray:
    """Start indices of ``count`` windows plus the end of the last one."""
    k = np.arange(count + 1)
    offset_ms = scheme.preamble_ms + k * scheme.symbol_interval_ms
    return sync_index + (offset_ms * scheme.sample_rate_hz) // 1000


def segment(trace: PhTrace, sync_index: int, scheme: ModulationScheme, count: int) -> list[SymbolWindow]:
    """Cut ``count`` contiguous symbol windows following the sync preamble."""
    if not 0 <= sync_index < len(trace.samples):
        raise ValueError(f"sync index {sync_index} outside trace")
    bounds = window_bounds(sync_index, scheme, count)
    n = len(trace.samples)
    if bounds[-1] > n:
        available = int(np.searchsorted(bounds[1:], n, side="right"))
        raise TruncatedTrace(f"trace holds only {available} of {count} symbol windows", available)
    interval = scheme.symbol_interval_ms
    return [SymbolWindow(trace.samples[bounds[k]:bounds[k + 1]], interval) for k in range(count)]


def bin_edges(n_samples: int, B: int) -> np.ndarray:
    """Start offsets of ``B`` contiguous runs; longer runs come first."""
    if B > n_samples:
        raise InsufficientSamples(f"{B} bins requested from {n_samples} samples")
    if B < 1:
        raise ValueError("need at least one bin")
    base, extra = divmod(n_samples, B)
    lengths = np.full(B, base)
    lengths[:extra] += 1
    return np.concatenate(([0], np.cumsum(lengths)[:-1]))


def bin_average(window, B: int) -> np.ndarray:
    """Mean of each of ``B`` near-equal runs of the window."""
    samples = window.samples if isinstance(window, SymbolWindow) else np.asarray(window)
    return bin_average_batch(np.asarray(samples, dtype=np.float64)[None, :], B)[0]


def bin_average_batch(windows: np.ndarray, B: int) -> np.ndarray:
    """Row-wise :func:`bin_average` for equal-length windows, shape (n, L)."""
    L = windows.shape[1]
    edges = bin_edges(L, B)
    counts = np.diff(np.append(edges, L))
    return np.add.reduceat(windows, edges, axis=1) / counts


def bin_diff(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.shape[-1] < 2:
        raise ValueError("need at least two bins")
    return np.diff(b, axis=-1)


def extract_features(b, interval_ms: int) -> np.ndarray:
    """Layout ``[b_1, b_B, d_1 .. d_{B-1}, interval_ms / 500]``."""
    b = np.asarray(b, dtype=np.float64)
    d = bin_diff(b)
    lead = b[..., :1], b[..., -1:]
    dur = np.full(b.shape[:-1] + (1,), interval_ms / DURATION_NORM_MS)
    return np.concatenate([lead[0], lead[1], d, dur], axis=-1)


# -- whole-record helpers ------------------------------------------------------

class RecordFrames:
    """Symbol windows of one record, grouped by length for vectorised binning.

    Windows of one record differ in length by at most one sample (integer
    rounding of the symbol boundaries), so binning is done per length group.
    """

    def __init__(self, record: SequenceRecord, scheme: ModulationScheme, sync_index: int | None = None,
                 drop_per_25ms: float = DEFAULT_SYNC_DROP):
        self.record = record
        self.interval_ms = record.interval_ms
        if sync_index is None:
            sync_index = detect_sync(record.trace, scheme, drop_per_25ms)
        self.sync_index = sync_index
        count = len(record.bits)
        bounds = window_bounds(sync_index, scheme, count)
        n = len(record.trace.samples)
        if bounds[-1] > n:
            # late sync detection on a noisy trace; clamp to the final full window
            shift = int(bounds[-1] - n)
            bounds = bounds - shift
            self.sync_index = sync_index - shift
        self._bounds = bounds
        lengths = np.diff(bounds)
        samples = record.trace.samples
        self._groups = []
        for L in np.unique(lengths):
            rows = np.flatnonzero(lengths == L)
            idx = bounds[rows][:, None] + np.arange(L)[None, :]
            self._groups.append((rows, samples[idx]))

    def __len__(self):
        return len(self._bounds) - 1

    def window_starts(self) -> np.ndarray:
        return self._bounds[:-1].copy()

    def bins(self, B: int) -> np.ndarray:
        out = np.empty((len(self), B))
        for rows, block in self._groups:
            out[rows] = bin_average_batch(block, B)
        return out

    def features(self, B: int) -> np.ndarray:
        return extract_features(self.bins(B), self.interval_ms)


def frame_dataset(dataset: Dataset, records=None, drop_per_25ms: float = DEFAULT_SYNC_DROP) -> list[RecordFrames]:
    records = dataset.records if records is None else records
    return [RecordFrames(r, dataset.scheme_for(r.interval_ms), drop_per_25ms=drop_per_25ms) for r in records]
