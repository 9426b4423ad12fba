"""Stateless forward operations and losses.

Conventions: dense weights are stored (out, in) so a layer computes
``x @ W.T + b`` on the last axis. Conv filters are (filters, channels,
width). LSTM gate blocks are stacked in the order input, forget, candidate,
output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def relu(z) -> np.ndarray:
    return np.maximum(z, 0.0)


def sigmoid(z) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


_ACTIVATIONS = {"relu": relu, "identity": lambda z: z}


def _activation(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


def dense_forward(W, b, x, activation: str = "identity") -> np.ndarray:
    """``f(W x + b)`` applied along the last axis of ``x``."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ValueError(f"dense shapes do not compose: W{W.shape}, b{b.shape}, x{x.shape}")
    return _activation(activation)(x @ W.T + b)


def same_padding(width: int) -> tuple[int, int]:
    """Zero padding (left, right) that keeps the output length equal to the input."""
    return (width - 1) // 2, width // 2


def as_channels(x) -> np.ndarray:
    """View input as (batch, channels, length). 1-D is one single-channel
    signal, 2-D is a batch of single-channel signals."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, None, :]
    if x.ndim == 2:
        return x[:, None, :]
    if x.ndim == 3:
        return x
    raise ValueError(f"conv input must be 1-, 2- or 3-D, got shape {x.shape}")


def im2col(x: np.ndarray, width: int) -> np.ndarray:
    """Zero-padded sliding windows of (N, C, L) input, shape (N, C, L, width)."""
    left, _ = same_padding(width)
    N, C, L = x.shape
    padded = np.zeros((N, C, L + width - 1))
    padded[:, :, left:left + L] = x
    return np.lib.stride_tricks.sliding_window_view(padded, width, axis=2)


def conv1d_forward(filters, biases, x, activation: str = "relu") -> np.ndarray:
    """Stride-1 cross-correlation with "same" zero padding.

    Returns (N, F, L); a 1-D input gives (F, L).
    """
    filters = np.asarray(filters, dtype=np.float64)
    biases = np.asarray(biases, dtype=np.float64)
    single = np.ndim(x) == 1
    xc = as_channels(x)
    if filters.ndim != 3 or filters.shape[1] != xc.shape[1] or biases.shape != (filters.shape[0],):
        raise ValueError(f"conv shapes do not compose: filters{filters.shape}, biases{biases.shape}, x{xc.shape}")
    if xc.shape[2] < 1:
        raise ValueError("empty conv input")
    cols = im2col(xc, filters.shape[2])
    out = np.einsum("nclk,fck->nfl", cols, filters, optimize=True) + biases[None, :, None]
    out = _activation(activation)(out)
    return out[0] if single else out


def maxpool1d(x, pool: int = 2) -> np.ndarray:
    """Non-overlapping max over the last axis; a short remainder is dropped."""
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[-1]
    if pool < 1 or L < pool:
        raise ValueError(f"cannot pool length {L} with pool size {pool}")
    n = L // pool
    return x[..., :n * pool].reshape(x.shape[:-1] + (n, pool)).max(axis=-1)


@dataclass
class LstmParams:
    """Weights of one LSTM cell with hidden width H and input width D.

    ``Wy`` (4H, D) and ``Wa`` (4H, H) hold the input and recurrent weights of
    the input, forget, candidate and output blocks. ``Wc`` (3H, H) holds the
    cell-state peepholes of the input, forget and output gates; the first two
    see the previous cell state, the output gate sees the updated one.
    """

    Wy: np.ndarray
    Wa: np.ndarray
    Wc: np.ndarray
    b: np.ndarray

    @property
    def hidden(self) -> int:
        return self.Wa.shape[1]

    @property
    def inputs(self) -> int:
        return self.Wy.shape[1]

    def check(self):
        H, D = self.hidden, self.inputs
        want = {"Wy": (4 * H, D), "Wa": (4 * H, H), "Wc": (3 * H, H), "b": (4 * H,)}
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"LSTM {name} has shape {getattr(self, name).shape}, expected {shape}")


def lstm_step(params: LstmParams, y, a_prev, c_prev, cache: bool = False):
    """One cell update; works on a single vector or a batch (N, D).

    Returns ``(a, c)``, or ``(a, c, gates)`` when ``cache`` is set, where
    gates holds the intermediates needed for the backward pass.
    """
    y = np.asarray(y, dtype=np.float64)
    a_prev = np.asarray(a_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    H = params.hidden
    if y.shape[-1] != params.inputs or a_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ValueError(f"lstm_step shapes do not compose: y{y.shape}, a{a_prev.shape}, c{c_prev.shape}")
    z = y @ params.Wy.T + a_prev @ params.Wa.T + params.b
    return _lstm_cell(params, z, c_prev, cache)


def _lstm_cell(params: LstmParams, z, c_prev, cache):
    # z already holds Wy y + Wa a_prev + b for all four blocks
    H = params.hidden
    Wc = params.Wc
    zif = z[..., :2 * H] + c_prev @ Wc[:2 * H].T
    i = sigmoid(zif[..., :H])
    f = sigmoid(zif[..., H:])
    g = np.tanh(z[..., 2 * H:3 * H])
    c = f * c_prev + i * g
    u = sigmoid(z[..., 3 * H:] + c @ Wc[2 * H:].T)
    tc = np.tanh(c)
    a = u * tc
    if cache:
        return a, c, (i, f, g, u, tc)
    return a, c


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats, with ``0 log 0 = 0`` and ``q`` floored like the losses."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), PROB_FLOOR)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _true_prob(target, pmf):
    pmf = np.asarray(pmf, dtype=np.float64)
    target = np.asarray(target)
    if target.shape == pmf.shape:
        # one-hot
        return np.sum(target * pmf, axis=-1)
    return np.take_along_axis(pmf, target.astype(np.int64)[..., None], axis=-1)[..., 0]


def loss_symbol(target, pmf) -> float:
    """``-log pmf[target]``; target is a class index or a one-hot vector."""
    return float(-np.log(max(float(_true_prob(target, pmf)), PROB_FLOOR)))


def loss_sequence(targets, pmfs) -> float:
    """Sum of :func:`loss_symbol` over the steps of one sequence."""
    p = np.maximum(_true_prob(targets, pmfs), PROB_FLOOR)
    return float(-np.sum(np.log(p)))
