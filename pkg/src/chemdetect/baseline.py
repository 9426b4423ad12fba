"""Bin-difference threshold detector with a grid-searched (B, gamma)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import Dataset
from .framing import RecordFrames, bin_diff, frame_dataset

MAX_BINS = 30


@dataclass
class BaselineParams:
    B: int
    gamma: int
    fitted_per_interval: bool = True
    train_ber: float = 0.0

    def __post_init__(self):
        if self.B < 2 or not 1 <= self.gamma <= self.B - 1:
            raise ValueError(f"gamma={self.gamma} out of range for B={self.B}")


@dataclass
class BaselineDetector:
    """Per-interval parameters, or a single pooled entry under key 0."""

    params: dict[int, BaselineParams] = field(default_factory=dict)
    pooled: bool = False

    def params_for(self, interval_ms: int) -> BaselineParams:
        return self.params[0] if self.pooled else self.params[interval_ms]

    def predict(self, frames: RecordFrames) -> np.ndarray:
        p = self.params_for(frames.interval_ms)
        return detect_bits(bin_diff(frames.bins(p.B)), p.gamma)

    def save(self, path) -> None:
        payload = {"pooled": self.pooled,
                   "params": {str(k): asdict(v) for k, v in sorted(self.params.items())}}
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "BaselineDetector":
        payload = json.loads(Path(path).read_text())
        params = {int(k): BaselineParams(**v) for k, v in payload["params"].items()}
        return cls(params, bool(payload["pooled"]))


def detect_bit(d, gamma: int) -> int:
    """Bit-0 (acid) when ``d_gamma <= 0``, else bit-1; ``gamma`` is 1-based."""
    d = np.asarray(d)
    if not 1 <= gamma <= d.shape[-1]:
        raise IndexError(f"gamma={gamma} out of range for {d.shape[-1]} differences")
    return int(d[gamma - 1] > 0)


def detect_bits(d: np.ndarray, gamma: int) -> np.ndarray:
    """Vectorised :func:`detect_bit` over the rows of ``d``."""
    if not 1 <= gamma <= d.shape[-1]:
        raise IndexError(f"gamma={gamma} out of range for {d.shape[-1]} differences")
    return (d[..., gamma - 1] > 0).astype(np.uint8)


def default_bin_range(frames: list[RecordFrames]) -> list[int]:
    shortest = min(int(np.min(np.diff(f._bounds))) for f in frames)
    return list(range(2, min(MAX_BINS, shortest) + 1))


def grid_errors(frames: list[RecordFrames], B_range) -> dict[int, np.ndarray]:
    """Bit-error counts for every gamma, per B: ``{B: errors[gamma-1]}``."""
    truth = np.concatenate([f.record.bits for f in frames]).astype(bool)
    out = {}
    for B in B_range:
        d = np.concatenate([bin_diff(f.bins(B)) for f in frames])
        out[B] = np.count_nonzero((d > 0) != truth[:, None], axis=0)
    return out


def fit_grid(frames: list[RecordFrames], B_range=None) -> BaselineParams:
    """Exhaustive search for the training-BER minimiser.

    Ties go to the smaller B, then the smaller gamma.
    """
    if not frames:
        raise ValueError("cannot fit the baseline on an empty dataset")
    B_range = sorted(B_range) if B_range is not None else default_bin_range(frames)
    total = sum(len(f.record.bits) for f in frames)
    best = None
    for B, errors in grid_errors(frames, B_range).items():
        g = int(np.argmin(errors))  # argmin returns the first minimum
        if best is None or errors[g] < best[0]:
            best = (int(errors[g]), B, g + 1)
    errs, B, gamma = best
    return BaselineParams(B, gamma, train_ber=errs / total)


def fit_baseline(dataset: Dataset, B_range=None, pooled: bool = False, split: str | None = "train",
                 frames: list[RecordFrames] | None = None) -> BaselineDetector:
    if frames is None:
        frames = frame_dataset(dataset, dataset.partition(split))
    if not frames:
        raise ValueError("cannot fit the baseline on an empty dataset")
    if pooled:
        p = fit_grid(frames, B_range)
        p.fitted_per_interval = False
        return BaselineDetector({0: p}, pooled=True)
    params = {}
    for interval in sorted({f.interval_ms for f in frames}):
        params[interval] = fit_grid([f for f in frames if f.interval_ms == interval], B_range)
    return BaselineDetector(params)
