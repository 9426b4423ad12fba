"""Networks, the fused softmax/cross-entropy backward pass and the five
detector architectures."""

from __future__ import annotations

import numpy as np

from ..numerics import PrngState
from .functional import PROB_FLOOR
from .layers import (LSTM, BiLSTM, Conv1D, Dense, Flatten, Layer, MaxPool1D, ReLU, Softmax, TimeDistributed)

N_SYMBOLS = 2

ARCHITECTURES = ("dense", "cnn", "lstm3", "cnn_lstm3", "bilstm3")
RECURRENT = {"lstm3", "cnn_lstm3", "bilstm3"}
DEFAULT_BINS = {"dense": 9, "cnn": 30, "lstm3": 8, "bilstm3": 8, "cnn_lstm3": 30}
# per-symbol input: engineered feature vector or raw bin vector
INPUT_KIND = {"dense": "features", "cnn": "bins", "lstm3": "features", "bilstm3": "features", "cnn_lstm3": "bins"}
DEFAULT_WIDTHS = {"hidden": 80, "filters": 16, "lstm_units": 40}
CNN_LAYOUT = ((2, False), (4, True), (6, False), (8, True))   # (kernel width, pool after)


class UnknownArchitecture(ValueError):
    pass


class Network:
    """Ordered layer stack ending in a softmax.

    Inputs are standardized with ``input_shift`` and ``input_scale``
    (broadcast over the last input axis) before the first layer; these are
    fitted on training data and start as the identity.
    """

    def __init__(self, name: str, layers: list[Layer], bins: int, tau: int | None = None,
                 widths: dict | None = None):
        if not layers or not isinstance(layers[-1], Softmax):
            raise ValueError("a network must end in a softmax layer")
        self.name = name
        self.layers = layers
        self.bins = bins
        self.tau = tau
        self.widths = dict(widths or {})
        d = self.input_width if self.input_kind == "features" else 1
        self.input_shift = np.zeros(d)
        self.input_scale = np.ones(d)

    @property
    def recurrent(self) -> bool:
        return self.name in RECURRENT

    @property
    def input_kind(self) -> str:
        return INPUT_KIND[self.name]

    @property
    def input_width(self) -> int:
        """Length of the per-symbol input vector."""
        return self.bins + 2 if self.input_kind == "features" else self.bins

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.input_shift) / self.input_scale

    def check_input(self, x):
        want = 3 if self.recurrent else 2
        if x.ndim != want or x.shape[-1] != self.input_width:
            shape = "(N, T, %d)" if self.recurrent else "(N, %d)"
            raise ValueError(f"{self.name} expects input {shape % self.input_width}, got {x.shape}")

    def forward(self, x) -> np.ndarray:
        """PMFs, shape (N, 2) or (N, T, 2) for recurrent networks."""
        x = np.asarray(x, dtype=np.float64)
        self.check_input(x)
        h = self.normalize(x)
        for layer in self.layers:
            h = layer.forward(h)
        return h

    __call__ = forward

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{j}.{k}", v) for j, layer in enumerate(self.layers) for k, v in layer.params.items()]

    def trainable_parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{j}.{k}", v) for j, layer in enumerate(self.layers) if layer.trainable
                for k, v in layer.params.items()]

    def n_parameters(self) -> int:
        return sum(v.size for _, v in self.parameters())

    def get_flat(self, trainable_only: bool = False) -> np.ndarray:
        params = self.trainable_parameters() if trainable_only else self.parameters()
        return np.concatenate([v.ravel() for _, v in params]) if params else np.zeros(0)

    def set_flat(self, vec, trainable_only: bool = False):
        params = self.trainable_parameters() if trainable_only else self.parameters()
        vec = np.asarray(vec, dtype=np.float64)
        total = sum(v.size for _, v in params)
        if vec.size != total:
            raise ValueError(f"expected {total} values, got {vec.size}")
        pos = 0
        for _, v in params:
            v[...] = vec[pos:pos + v.size].reshape(v.shape)
            pos += v.size


def _one_hot_targets(targets, shape) -> np.ndarray:
    t = np.asarray(targets)
    if t.shape == shape:
        return t.astype(np.float64)
    if t.shape != shape[:-1]:
        raise ValueError(f"targets of shape {t.shape} do not match outputs {shape}")
    onehot = np.zeros(shape)
    np.put_along_axis(onehot, t.astype(np.int64)[..., None], 1.0, axis=-1)
    return onehot


def batch_loss(pmf, targets) -> float:
    """Mean over the batch of the per-sample loss (summed over steps for sequences)."""
    onehot = _one_hot_targets(targets, pmf.shape)
    p = np.maximum(np.sum(onehot * pmf, axis=-1), PROB_FLOOR)
    return float(-np.sum(np.log(p)) / pmf.shape[0])


def backward(network: Network, inputs, targets) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its gradient with respect to every trainable parameter.

    The loss is the batch mean of the cross-entropy, summed over steps for
    recurrent networks. Softmax and cross-entropy are differentiated together,
    giving ``(pmf - onehot) / N`` at the logits. Backpropagation stops at the
    first frozen layer that has no trainable layer before it.
    """
    pmf = network.forward(inputs)
    onehot = _one_hot_targets(targets, pmf.shape)
    N = pmf.shape[0]
    loss = batch_loss(pmf, onehot)
    g = (pmf - onehot) / N
    layers = network.layers
    first_trainable = next((j for j, layer in enumerate(layers) if layer.trainable), len(layers))
    grads: dict[str, np.ndarray] = {}
    for j in range(len(layers) - 2, first_trainable - 1, -1):
        layer = layers[j]
        g = layer.backward(g)
        if layer.trainable:
            for k, v in layer.grads.items():
                grads[f"{j}.{k}"] = v
    # report in parameter order
    ordered = {key: grads[key] for key, _ in network.trainable_parameters()}
    return loss, ordered


# -- initialization and builders -------------------------------------------------

def _glorot(prng: PrngState, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return prng.uniform(-limit, limit, size=shape)


def init_layer(layer: Layer, prng: PrngState):
    """Glorot-uniform weights, zero biases, drawn in a fixed order."""
    if isinstance(layer, Dense):
        n_out, n_in = layer.params["W"].shape
        layer.params["W"][...] = _glorot(prng, (n_out, n_in), n_in, n_out)
        layer.params["b"][...] = 0.0
    elif isinstance(layer, Conv1D):
        F, C, k = layer.params["W"].shape
        layer.params["W"][...] = _glorot(prng, (F, C, k), C * k, F * k)
        layer.params["b"][...] = 0.0
    elif isinstance(layer, LSTM):
        p = layer.params
        H, D = p["Wa"].shape[1], p["Wy"].shape[1]
        # one draw per gate block
        for blk in range(4):
            p["Wy"][blk * H:(blk + 1) * H] = _glorot(prng, (H, D), D, H)
        for blk in range(4):
            p["Wa"][blk * H:(blk + 1) * H] = _glorot(prng, (H, H), H, H)
        for blk in range(3):
            p["Wc"][blk * H:(blk + 1) * H] = _glorot(prng, (H, H), H, H)
        p["b"][...] = 0.0
    elif isinstance(layer, BiLSTM):
        init_layer(layer.fwd, prng)
        init_layer(layer.bwd, prng)
    elif isinstance(layer, TimeDistributed):
        for inner in layer.layers:
            init_layer(inner, prng)


def cnn_trunk(bins: int, filters: int) -> list[Layer]:
    """Convolutional feature extractor: everything in the CNN detector
    before its output dense layer."""
    layers: list[Layer] = []
    channels, length = 1, bins
    for width, pool in CNN_LAYOUT:
        layers += [Conv1D(channels, filters, width), ReLU()]
        channels = filters
        if pool:
            layers.append(MaxPool1D(2))
            length //= 2
    if length < 1:
        raise ValueError(f"{bins} bins too few for the convolutional trunk")
    layers.append(Flatten())
    return layers


def trunk_width(bins: int, filters: int) -> int:
    length = bins
    for _, pool in CNN_LAYOUT:
        if pool:
            length //= 2
    return filters * length


def build_architecture(name: str, prng: PrngState, bins: int | None = None, tau: int | None = None,
                       trunk: Network | None = None, freeze_trunk: bool = True, **widths) -> Network:
    """Build and initialize one of the five detectors.

    ``widths`` may override ``hidden`` (dense width), ``filters`` (conv
    filters) and ``lstm_units`` for small experiments. For ``cnn_lstm3`` a
    trained ``cnn`` network may be passed as ``trunk``; its convolutional
    layers and input scaling are copied in and, with ``freeze_trunk``, kept
    fixed during training.
    """
    if name not in ARCHITECTURES:
        raise UnknownArchitecture(f"unknown architecture {name!r}; choose from {', '.join(ARCHITECTURES)}")
    unknown = set(widths) - set(DEFAULT_WIDTHS)
    if unknown:
        raise ValueError(f"unknown width overrides: {sorted(unknown)}")
    w = {**DEFAULT_WIDTHS, **widths}
    B = DEFAULT_BINS[name] if bins is None else bins
    H, F, U = w["hidden"], w["filters"], w["lstm_units"]
    used = {}

    if name == "dense":
        n_in = B + 2
        layers = [Dense(n_in, H), ReLU(), Dense(H, H), ReLU(), Dense(H, H), ReLU(), Dense(H, N_SYMBOLS), Softmax()]
        used = {"hidden": H}
    elif name == "cnn":
        layers = cnn_trunk(B, F) + [Dense(trunk_width(B, F), N_SYMBOLS), Softmax()]
        used = {"filters": F}
    elif name == "lstm3":
        n_in = B + 2
        layers = [LSTM(n_in, U), LSTM(U, U), LSTM(U, U), Dense(U, N_SYMBOLS), Softmax()]
        used = {"lstm_units": U}
    elif name == "bilstm3":
        n_in = B + 2
        layers = [BiLSTM(n_in, U), BiLSTM(2 * U, U), BiLSTM(2 * U, U), Dense(2 * U, N_SYMBOLS), Softmax()]
        used = {"lstm_units": U}
    else:
        if trunk is not None:
            if trunk.name != "cnn":
                raise ValueError("cnn_lstm3 needs a cnn network as its trunk")
            B, F = trunk.bins, trunk.widths.get("filters", F)
        td = TimeDistributed(cnn_trunk(B, F))
        n_feat = trunk_width(B, F)
        layers = [td, LSTM(n_feat, U), LSTM(U, U), LSTM(U, U), Dense(U, N_SYMBOLS), Softmax()]
        used = {"filters": F, "lstm_units": U}

    net = Network(name, layers, B, tau=tau if name in RECURRENT else None, widths=used)
    for layer in layers:
        init_layer(layer, prng)
    if name == "cnn_lstm3" and trunk is not None:
        td = layers[0]
        for src, dst in zip(trunk.layers, td.layers):
            for k, v in src.params.items():
                dst.params[k][...] = v
        net.input_shift = trunk.input_shift.copy()
        net.input_scale = trunk.input_scale.copy()
        td.trainable = not freeze_trunk
        net.trunk_pretrained = True
    return net


def lstm_sequence_forward(network: Network, inputs) -> np.ndarray:
    """Per-step PMFs of a causal recurrent network, (T, 2) for one sequence
    (T, D) or (N, T, 2) for a batch."""
    if network.name not in ("lstm3", "cnn_lstm3"):
        raise ValueError(f"{network.name} is not a causal recurrent network")
    return _sequence_forward(network, inputs)


def bilstm_sequence_forward(network: Network, inputs) -> np.ndarray:
    if network.name != "bilstm3":
        raise ValueError(f"{network.name} is not a bidirectional network")
    return _sequence_forward(network, inputs)


def _sequence_forward(network, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 2:
        return network.forward(x[None])[0]
    return network.forward(x)
