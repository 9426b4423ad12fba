"""Dataset splitting, input preparation, Adam, the epoch loop and model files."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .channel import Dataset
from .framing import RecordFrames, frame_dataset
from .nn.network import (ARCHITECTURES, RECURRENT, Network, UnknownArchitecture, backward, build_architecture)
from .numerics import STREAM_INIT, STREAM_MISC, STREAM_SHUFFLE, STREAM_SPLIT, seed_stream

TRAIN, TEST = "train", "test"
TAU_PRESETS = (8, 120)
DEFAULT_TAU = {"lstm3": 120, "cnn_lstm3": 120, "bilstm3": 8}


# -- splitting ---------------------------------------------------------------

def split_dataset(dataset: Dataset, train_fraction: float = 0.84, seed: int = 0) -> Dataset:
    """Tag records train/test, per interval, by a seeded permutation.

    Interval ``i`` (in scheme order) uses its own stream, so the split of one
    interval does not depend on the others.
    """
    if not dataset.records:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    tags = {}
    for i, interval in enumerate(dataset.intervals):
        ids = [r.id for r in dataset.records if r.interval_ms == interval]
        n_train = int(round(train_fraction * len(ids)))
        order = seed_stream(seed, STREAM_SPLIT, i).permutation(len(ids))
        for rank, k in enumerate(order):
            tags[ids[k]] = TRAIN if rank < n_train else TEST
    records = [replace(r, split=tags[r.id]) for r in dataset.records]
    return replace(dataset, records=records)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Returns ``(params, state)``.
    """
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ValueError("parameters, gradients and optimizer state disagree on names")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


# -- configuration -------------------------------------------------------------

@dataclass
class TrainConfig:
    arch: str
    epochs: int = 200
    batch_size: int = 10
    tau: int | None = None
    seed: int = 0
    learning_rate: float = 1e-3
    fine_tune_trunk: bool = False

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise UnknownArchitecture(f"unknown architecture {self.arch!r}")
        if self.tau is None and self.arch in RECURRENT:
            self.tau = DEFAULT_TAU[self.arch]
        for name in ("epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.tau is not None and self.tau < 1:
            raise ValueError("tau must be a positive integer")

    @classmethod
    def sweep(cls, arch: str, tau: int, seed: int = 0) -> "TrainConfig":
        """Sequence-length sweep preset: 50 epochs, batch 32."""
        return cls(arch, epochs=50, batch_size=32, tau=tau, seed=seed)


# -- inputs ------------------------------------------------------------------

def symbol_inputs(frames: RecordFrames, kind: str, bins: int) -> np.ndarray:
    """Per-symbol inputs of one record: features (n, B+2) or bins (n, B)."""
    return frames.features(bins) if kind == "features" else frames.bins(bins)


def window_starts(n: int, tau: int, cover_tail: bool = True) -> list[int]:
    """Starts of non-overlapping length-``tau`` windows over ``n`` symbols.

    With ``cover_tail`` a final window aligned to the end covers any
    remainder, so every symbol is inside some window.
    """
    if n < tau:
        return [0] if cover_tail and n > 0 else []
    starts = list(range(0, n - tau + 1, tau))
    if cover_tail and n % tau:
        starts.append(n - tau)
    return starts


@dataclass
class TrainingSet:
    inputs: np.ndarray     # (n, D) or (n, tau, D)
    targets: np.ndarray    # (n,) or (n, tau)


def training_set(network: Network, frames: list[RecordFrames]) -> TrainingSet:
    """Stack symbols (feedforward) or full length-tau windows (recurrent)."""
    xs, ys = [], []
    for fr in frames:
        x = symbol_inputs(fr, network.input_kind, network.bins)
        bits = fr.record.bits
        if network.recurrent:
            for s in window_starts(len(bits), network.tau, cover_tail=False):
                xs.append(x[s:s + network.tau])
                ys.append(bits[s:s + network.tau])
        else:
            xs.append(x)
            ys.append(bits)
    if not xs:
        raise ValueError("no training examples: check the train tags and tau")
    if network.recurrent:
        return TrainingSet(np.stack(xs), np.stack(ys).astype(np.int64))
    return TrainingSet(np.concatenate(xs), np.concatenate(ys).astype(np.int64))


def fit_standardizer(network: Network, inputs: np.ndarray):
    """Set input shift/scale from training inputs (per feature, or one scalar for bins)."""
    flat = inputs.reshape(-1, inputs.shape[-1])
    if network.input_kind == "features":
        mu, sd = flat.mean(axis=0), flat.std(axis=0)
    else:
        mu, sd = np.array([flat.mean()]), np.array([flat.std()])
    sd = np.where(sd > 1e-12, sd, 1.0)
    network.input_shift = mu
    network.input_scale = sd


def predict_pmfs(network: Network, frames: RecordFrames, batch: int = 256) -> np.ndarray:
    """PMF per symbol of one record, (n, 2)."""
    return predict_pmfs_many(network, [frames], batch)[0]


def predict_pmfs_many(network: Network, frames: list[RecordFrames], batch: int = 256) -> list[np.ndarray]:
    """Per-record PMFs. Recurrent networks see each record as consecutive
    length-tau windows with fresh state; a remainder is read from a final
    window aligned to the record end."""
    inputs = [symbol_inputs(fr, network.input_kind, network.bins) for fr in frames]
    if not network.recurrent:
        sizes = [len(x) for x in inputs]
        if not sizes:
            return []
        allx = np.concatenate(inputs)
        out = np.concatenate([network.forward(allx[i:i + batch]) for i in range(0, len(allx), batch)])
        return np.split(out, np.cumsum(sizes)[:-1])
    results = []
    # group windows of equal length across records for batching
    jobs: dict[int, list] = {}
    for r, x in enumerate(inputs):
        n = len(x)
        results.append(np.zeros((n, 2)))
        tau = min(network.tau, n)
        for s in window_starts(n, tau):
            jobs.setdefault(tau, []).append((r, s))
    for tau, items in jobs.items():
        for i in range(0, len(items), batch):
            chunk = items[i:i + batch]
            pmf = network.forward(np.stack([inputs[r][s:s + tau] for r, s in chunk]))
            for (r, s), p in zip(chunk, pmf):
                # an end-aligned tail window only fills symbols no earlier window covered
                first = s if s % tau == 0 else len(results[r]) - len(results[r]) % tau
                results[r][first:s + tau] = p[first - s:]
    return results


# -- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    network: Network
    history: list[float] = field(default_factory=list)


def train(network: Network, dataset: Dataset | None, config: TrainConfig,
          frames: list[RecordFrames] | None = None, standardize: bool = True,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Minimize the batch-mean cross-entropy with Adam.

    ``frames`` may hold pre-framed training records; otherwise the dataset's
    train partition is framed. The minibatch order of epoch ``e`` is the
    permutation drawn from stream ``(seed, shuffle, e)``. The history holds,
    per epoch, the mean per-symbol cross-entropy of the minibatches seen.
    """
    if network.name != config.arch:
        raise ValueError(f"config is for {config.arch} but the network is {network.name}")
    if network.recurrent and network.tau != config.tau:
        network.tau = config.tau
    if frames is None:
        if dataset is None:
            raise ValueError("need a dataset or frames")
        records = dataset.partition(TRAIN)
        if not records:
            raise ValueError("dataset has no records tagged train; run split_dataset first")
        frames = frame_dataset(dataset, records)
    data = training_set(network, frames)
    network.check_input(data.inputs)
    # a pretrained trunk keeps the input scaling it was trained with
    if standardize and not getattr(network, "trunk_pretrained", False):
        fit_standardizer(network, data.inputs)
    params = dict(network.trainable_parameters())
    state = AdamState.fresh(params, learning_rate=config.learning_rate)
    n = len(data.targets)
    steps = 1 if data.targets.ndim == 1 else data.targets.shape[1]
    history = []
    for epoch in range(config.epochs):
        order = seed_stream(config.seed, STREAM_SHUFFLE, epoch).permutation(n)
        total = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            loss, grads = backward(network, data.inputs[idx], data.targets[idx])
            adam_step(params, grads, state)
            total += loss * len(idx)
        history.append(total / (n * steps))
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
        if not np.isfinite(history[-1]):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
    return TrainResult(network, history)


def arch_stream(arch: str) -> int:
    return ARCHITECTURES.index(arch)


def fit_detector(dataset: Dataset, config: TrainConfig, frames: list[RecordFrames] | None = None,
                 trunk: Network | None = None, on_epoch=None) -> TrainResult:
    """Build with seeded weights and train. ``cnn_lstm3`` without a ``trunk``
    first trains a ``cnn`` with the same epochs, batch size and seed."""
    if config.arch == "cnn_lstm3" and trunk is None:
        trunk_cfg = replace(config, arch="cnn", tau=None)
        trunk = fit_detector(dataset, trunk_cfg, frames).network
    prng = seed_stream(config.seed, STREAM_INIT, arch_stream(config.arch))
    net = build_architecture(config.arch, prng, tau=config.tau, trunk=trunk,
                             freeze_trunk=not config.fine_tune_trunk)
    return train(net, dataset, config, frames=frames, on_epoch=on_epoch)


# -- model files -------------------------------------------------------------

MAGIC = b"CHEMDNN\x00"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Not a model file, or a truncated one."""


class ModelVersionError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class DescriptorError(ModelFormatError):
    """Unknown architecture or layer kinds that do not match it."""


class ShapeMismatchError(ModelFormatError):
    pass


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _tables(network: Network):
    """(kind, trainable, [(name, array)]) entries; entry 0 is the input scaling."""
    entries = [("standardize", False, [("shift", network.input_shift), ("scale", network.input_scale)])]
    for layer in network.layers:
        entries.append((layer.kind, layer.trainable, list(layer.params.items())))
    return entries


def model_bytes(network: Network) -> bytes:
    out = [MAGIC, struct.pack("<H", FORMAT_VERSION), _pack_str(network.name),
           struct.pack("<ii", -1 if network.tau is None else network.tau, network.bins)]
    opts = sorted(network.widths.items())
    out.append(struct.pack("<H", len(opts)))
    for k, v in opts:
        out += [_pack_str(k), struct.pack("<q", int(v))]
    entries = _tables(network)
    out.append(struct.pack("<H", len(entries)))
    payload = []
    for kind, trainable, tensors in entries:
        out += [_pack_str(kind), struct.pack("<BH", int(trainable), len(tensors))]
        for _, arr in tensors:
            out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(out) + b"".join(payload)
    return body + _checksum(body)


def save_model(network: Network, path) -> None:
    Path(path).write_bytes(model_bytes(network))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("model file is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise ModelFormatError("undecodable string in model header") from None


def load_model(path) -> Network:
    return model_from_bytes(Path(path).read_bytes())


def model_from_bytes(data: bytes) -> Network:
    """Checks run in order: magic and version, checksum, architecture
    descriptor, tensor shapes."""
    if data[:len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    rd = _Reader(data)
    rd.take(len(MAGIC))
    (version,) = rd.unpack("<H")
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"model format version {version}, expected {FORMAT_VERSION}")
    if len(data) < rd.pos + 8:
        raise ModelFormatError("model file is truncated")
    body, stored = data[:-8], data[-8:]
    if _checksum(body) != stored:
        raise ChecksumError("model checksum mismatch; file is corrupted")
    rd = _Reader(body)
    rd.pos = len(MAGIC) + 2
    name = rd.string()
    tau, bins = rd.unpack("<ii")
    (n_opts,) = rd.unpack("<H")
    widths = {}
    for _ in range(n_opts):
        key = rd.string()
        (widths[key],) = rd.unpack("<q")
    (n_entries,) = rd.unpack("<H")
    table = []
    for _ in range(n_entries):
        kind = rd.string()
        trainable, n_t = rd.unpack("<BH")
        shapes = []
        for _ in range(n_t):
            (nd,) = rd.unpack("<B")
            shapes.append(tuple(rd.unpack(f"<{nd}I")))
        table.append((kind, bool(trainable), shapes))
    if name not in ARCHITECTURES:
        raise DescriptorError(f"unknown architecture {name!r} in model file")
    try:
        net = build_architecture(name, seed_stream(0, STREAM_MISC), bins=bins,
                                 tau=None if tau < 0 else tau, **widths)
    except ValueError as exc:
        raise DescriptorError(f"cannot rebuild {name}: {exc}") from None
    # shapes of the input scaling depend only on the architecture
    expected = _tables(net)
    if [k for k, _, _ in table] != [k for k, _, _ in expected]:
        raise DescriptorError(f"layer kinds in file do not match architecture {name}")
    for (kind, _, shapes), (_, _, tensors) in zip(table, expected):
        want = [a.shape for _, a in tensors]
        if shapes != want:
            raise ShapeMismatchError(f"{kind} layer has shapes {shapes}, {name} needs {want}")
    for (kind, trainable, shapes), (_, _, tensors) in zip(table, expected):
        for shape, (_, arr) in zip(shapes, tensors):
            n = int(np.prod(shape)) if shape else 1
            arr[...] = np.frombuffer(rd.take(8 * n), dtype="<f8").reshape(shape)
    for (_, trainable, _), layer in zip(table[1:], net.layers):
        layer.trainable = trainable
    if rd.pos != len(body):
        raise ModelFormatError("trailing bytes after model payload")
    return net
