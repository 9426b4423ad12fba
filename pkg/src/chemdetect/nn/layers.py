"""Layers with cached forward passes and hand-derived backward passes.

Every layer exposes ``params`` (name -> array, updated in place by the
optimizer), ``forward(x)`` which caches what ``backward`` needs, and
``backward(dy)`` which fills ``grads`` and returns the gradient with respect
to the input. Batched shapes: (N, F) for feature vectors, (N, C, L) for conv
maps, (N, T, D) for sequences.
"""

from __future__ import annotations

import numpy as np

from .functional import (LstmParams, _lstm_cell, as_channels, im2col, same_padding, sigmoid, softmax)


class Layer:
    kind = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.trainable = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def spec(self) -> dict:
        """Constructor arguments, enough to rebuild an empty layer."""
        return {}

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.params = {"W": np.zeros((n_out, n_in)), "b": np.zeros(n_out)}

    def spec(self):
        W = self.params["W"]
        return {"n_in": W.shape[1], "n_out": W.shape[0]}

    def forward(self, x):
        W = self.params["W"]
        if x.shape[-1] != W.shape[1]:
            raise ValueError(f"dense expects last axis {W.shape[1]}, got shape {x.shape}")
        self._x = x
        return x @ W.T + self.params["b"]

    def backward(self, dy):
        x = self._x
        xf = x.reshape(-1, x.shape[-1])
        dyf = dy.reshape(-1, dy.shape[-1])
        self.grads = {"W": dyf.T @ xf, "b": dyf.sum(axis=0)}
        return dy @ self.params["W"]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return dy * self._mask


class Softmax(Layer):
    """Output layer. Its backward is fused with the cross-entropy loss by the
    network, so ``backward`` here is the plain Jacobian product."""

    kind = "softmax"

    def forward(self, x):
        self._p = softmax(x)
        return self._p

    def backward(self, dy):
        p = self._p
        return p * (dy - np.sum(dy * p, axis=-1, keepdims=True))


class Conv1D(Layer):
    kind = "conv1d"

    def __init__(self, channels: int, filters: int, width: int):
        super().__init__()
        self.params = {"W": np.zeros((filters, channels, width)), "b": np.zeros(filters)}

    def spec(self):
        F, C, k = self.params["W"].shape
        return {"channels": C, "filters": F, "width": k}

    def forward(self, x):
        self._orig_shape = np.shape(x)
        x = as_channels(x)
        W = self.params["W"]
        if x.shape[1] != W.shape[1]:
            raise ValueError(f"conv expects {W.shape[1]} channels, got shape {x.shape}")
        self._in_shape = x.shape
        F, C, k = W.shape
        N, _, L = x.shape
        # rows are (sample, position), columns are (channel, tap)
        self._cols = im2col(x, k).transpose(0, 2, 1, 3).reshape(N * L, C * k)
        out = self._cols @ W.reshape(F, C * k).T + self.params["b"]
        return out.reshape(N, L, F).transpose(0, 2, 1)

    def backward(self, dy):
        W = self.params["W"]
        F, C, k = W.shape
        N, _, L = self._in_shape
        dyf = dy.transpose(0, 2, 1).reshape(N * L, F)
        self.grads = {"W": (dyf.T @ self._cols).reshape(F, C, k), "b": dyf.sum(axis=0)}
        # scatter the column gradients back onto the padded input
        dcols = (dyf @ W.reshape(F, C * k)).reshape(N, L, C, k)
        left, _ = same_padding(k)
        dpad = np.zeros((N, C, L + k - 1))
        for j in range(k):
            dpad[:, :, j:j + L] += dcols[:, :, :, j].transpose(0, 2, 1)
        return dpad[:, :, left:left + L].reshape(self._orig_shape)


class MaxPool1D(Layer):
    kind = "maxpool1d"

    def __init__(self, pool: int = 2):
        super().__init__()
        self.pool = pool

    def spec(self):
        return {"pool": self.pool}

    def forward(self, x):
        p = self.pool
        L = x.shape[-1]
        if L < p:
            raise ValueError(f"cannot pool length {L} with pool size {p}")
        n = L // p
        blocks = x[..., :n * p].reshape(x.shape[:-1] + (n, p))
        # first maximum in each block takes the gradient
        arg = blocks.argmax(axis=-1)
        self._onehot = arg[..., None] == np.arange(p)
        self._in_shape = x.shape
        return blocks.max(axis=-1)

    def backward(self, dy):
        p = self.pool
        n = dy.shape[-1]
        dx = np.zeros(self._in_shape)
        dx[..., :n * p] = (self._onehot * dy[..., None]).reshape(dy.shape[:-1] + (n * p,))
        return dx


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._in_shape)


class LSTM(Layer):
    """Peephole LSTM over (N, T, D) sequences with zero initial state.

    Returns the hidden output of every step, (N, T, H). With ``reverse`` the
    sequence is consumed from the last step to the first and the outputs are
    returned in the original step order.
    """

    kind = "lstm"

    def __init__(self, n_in: int, hidden: int, reverse: bool = False):
        super().__init__()
        H = hidden
        self.reverse = reverse
        self.params = {"Wy": np.zeros((4 * H, n_in)), "Wa": np.zeros((4 * H, H)),
                       "Wc": np.zeros((3 * H, H)), "b": np.zeros(4 * H)}

    def spec(self):
        Wy = self.params["Wy"]
        return {"n_in": Wy.shape[1], "hidden": Wy.shape[0] // 4, "reverse": self.reverse}

    @property
    def cell(self) -> LstmParams:
        p = self.params
        return LstmParams(p["Wy"], p["Wa"], p["Wc"], p["b"])

    def forward(self, x):
        p = self.params
        if x.ndim != 3 or x.shape[2] != p["Wy"].shape[1]:
            raise ValueError(f"lstm expects (N, T, {p['Wy'].shape[1]}), got shape {x.shape}")
        if self.reverse:
            x = x[:, ::-1]
        N, T, _ = x.shape
        H = p["Wa"].shape[1]
        cell = self.cell
        zy = x @ p["Wy"].T + p["b"]
        a = np.zeros((N, H))
        c = np.zeros((N, H))
        A = np.zeros((N, T + 1, H))   # A[:, t + 1] is the output of step t
        C = np.zeros((N, T + 1, H))
        gates = []
        for t in range(T):
            z = zy[:, t] + a @ p["Wa"].T
            a, c, g = _lstm_cell(cell, z, c, cache=True)
            A[:, t + 1] = a
            C[:, t + 1] = c
            gates.append(g)
        self._x, self._A, self._C, self._gates = x, A, C, gates
        out = A[:, 1:]
        return out[:, ::-1] if self.reverse else out

    def backward(self, dy):
        p = self.params
        if self.reverse:
            dy = dy[:, ::-1]
        x, A, C = self._x, self._A, self._C
        N, T, _ = x.shape
        H = p["Wa"].shape[1]
        Wa, Wc = p["Wa"], p["Wc"]
        Wc_if, Wc_u = Wc[:2 * H], Wc[2 * H:]
        dZ = np.zeros((N, T, 4 * H))       # gradient wrt the pre-activations of the four blocks
        da_next = np.zeros((N, H))
        dc_next = np.zeros((N, H))
        for t in range(T - 1, -1, -1):
            i, f, g, u, tc = self._gates[t]
            c_prev, c = C[:, t], C[:, t + 1]
            da = dy[:, t] + da_next
            du = da * tc * u * (1.0 - u)
            dc = dc_next + da * u * (1.0 - tc * tc) + du @ Wc_u
            di = dc * g * i * (1.0 - i)
            df = dc * c_prev * f * (1.0 - f)
            dg = dc * i * (1.0 - g * g)
            dZ[:, t, :H] = di
            dZ[:, t, H:2 * H] = df
            dZ[:, t, 2 * H:3 * H] = dg
            dZ[:, t, 3 * H:] = du
            da_next = dZ[:, t] @ Wa
            dc_next = dc * f + dZ[:, t, :2 * H] @ Wc_if
        dZf = dZ.reshape(N * T, 4 * H)
        # peepholes: input/forget gates see c_{t-1}, the output gate sees c_t
        dWc = np.concatenate([dZf[:, :2 * H].T @ C[:, :-1].reshape(N * T, H),
                              dZf[:, 3 * H:].T @ C[:, 1:].reshape(N * T, H)])
        self.grads = {
            "Wy": dZf.T @ x.reshape(N * T, -1),
            "Wa": dZf.T @ A[:, :-1].reshape(N * T, H),
            "Wc": dWc,
            "b": dZf.sum(axis=0),
        }
        dx = dZ @ p["Wy"]
        return dx[:, ::-1] if self.reverse else dx


class BiLSTM(Layer):
    """A forward and a reversed LSTM on the same input; outputs are
    concatenated as (N, T, 2H), forward half first."""

    kind = "bilstm"

    def __init__(self, n_in: int, hidden: int):
        super().__init__()
        self.fwd = LSTM(n_in, hidden)
        self.bwd = LSTM(n_in, hidden, reverse=True)
        self._link()

    def _link(self):
        self.params = {**{f"fwd.{k}": v for k, v in self.fwd.params.items()},
                       **{f"bwd.{k}": v for k, v in self.bwd.params.items()}}

    def spec(self):
        s = self.fwd.spec()
        return {"n_in": s["n_in"], "hidden": s["hidden"]}

    def forward(self, x):
        return np.concatenate([self.fwd.forward(x), self.bwd.forward(x)], axis=-1)

    def backward(self, dy):
        H = dy.shape[-1] // 2
        dx = self.fwd.backward(dy[..., :H]) + self.bwd.backward(dy[..., H:])
        self.grads = {**{f"fwd.{k}": v for k, v in self.fwd.grads.items()},
                      **{f"bwd.{k}": v for k, v in self.bwd.grads.items()}}
        return dx


class TimeDistributed(Layer):
    """Applies a stack of per-symbol layers to every step of (N, T, ...)."""

    kind = "timedistributed"

    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = layers
        self._link()

    def _link(self):
        self.params = {f"{j}.{k}": v for j, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def forward(self, x):
        N, T = x.shape[:2]
        h = x.reshape((N * T,) + x.shape[2:])
        for layer in self.layers:
            h = layer.forward(h)
        self._nt = (N, T)
        self._in_shape = x.shape
        return h.reshape((N, T) + h.shape[1:])

    def backward(self, dy):
        N, T = self._nt
        g = dy.reshape((N * T,) + dy.shape[2:])
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self.grads = {f"{j}.{k}": v for j, layer in enumerate(self.layers) for k, v in layer.grads.items()}
        return g.reshape(self._in_shape)


def set_param(layer: Layer, name: str, value: np.ndarray):
    """Copy ``value`` into a parameter in place, so composite layers that
    share storage with their children stay linked."""
    target = layer.params[name]
    if target.shape != value.shape:
        raise ValueError(f"parameter {name} has shape {target.shape}, got {value.shape}")
    target[...] = value


LAYER_KINDS = {cls.kind: cls for cls in (Dense, ReLU, Softmax, Conv1D, MaxPool1D, Flatten, LSTM, BiLSTM)}

__all__ = ["Layer", "Dense", "ReLU", "Softmax", "Conv1D", "MaxPool1D", "Flatten", "LSTM", "BiLSTM",
           "TimeDistributed", "LAYER_KINDS", "set_param", "sigmoid"]
