"""Brute-force scalar transcriptions used as test oracles.

Everything here is written with plain Python loops and the math module so it
shares no code path with the vectorised implementation under test.
"""

import math

import numpy as np

from chemdetect.nn.network import backward, batch_loss
from chemdetect.numerics import finite_diff_gradient, relative_error


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def dense(W, b, x, relu=False):
    out = []
    for i in range(len(b)):
        s = b[i]
        for j in range(len(x)):
            s += W[i][j] * x[j]
        out.append(max(s, 0.0) if relu else s)
    return out


def softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    t = sum(e)
    return [v / t for v in e]


def conv1d(filters, biases, x, relu=True):
    """x is a list of channels, each a list of samples; "same" zero padding."""
    F, C, k = filters.shape
    L = len(x[0])
    left = (k - 1) // 2
    out = []
    for f in range(F):
        row = []
        for pos in range(L):
            s = biases[f]
            for c in range(C):
                for j in range(k):
                    src = pos - left + j
                    if 0 <= src < L:
                        s += filters[f][c][j] * x[c][src]
            row.append(max(s, 0.0) if relu else s)
        out.append(row)
    return out


def maxpool(x, pool=2):
    out = []
    for start in range(0, len(x) - pool + 1, pool):
        m = x[start]
        for v in x[start:start + pool]:
            if v > m:
                m = v
        out.append(m)
    return out


def lstm_step(Wy, Wa, Wc, b, y, a_prev, c_prev):
    """One peephole cell, unit by unit. Gate blocks stacked i, f, g, u."""
    H = len(a_prev)
    D = len(y)

    def pre(row):
        s = b[row]
        for j in range(D):
            s += Wy[row][j] * y[j]
        for j in range(H):
            s += Wa[row][j] * a_prev[j]
        return s

    c = []
    for h in range(H):
        zi = pre(h) + sum(Wc[h][j] * c_prev[j] for j in range(H))
        zf = pre(H + h) + sum(Wc[H + h][j] * c_prev[j] for j in range(H))
        i, f, g = sig(zi), sig(zf), math.tanh(pre(2 * H + h))
        c.append(f * c_prev[h] + i * g)
    a = []
    for h in range(H):
        zu = pre(3 * H + h) + sum(Wc[2 * H + h][j] * c[j] for j in range(H))
        a.append(sig(zu) * math.tanh(c[h]))
    return a, c


def lstm_layer(p, seq, reverse=False):
    H = p["Wa"].shape[1]
    a, c = [0.0] * H, [0.0] * H
    order = range(len(seq) - 1, -1, -1) if reverse else range(len(seq))
    out = [None] * len(seq)
    for t in order:
        a, c = lstm_step(p["Wy"], p["Wa"], p["Wc"], p["b"], list(seq[t]), a, c)
        out[t] = a
    return out


def bilstm_layer(params, seq):
    fwd = {k[4:]: v for k, v in params.items() if k.startswith("fwd.")}
    bwd = {k[4:]: v for k, v in params.items() if k.startswith("bwd.")}
    f = lstm_layer(fwd, seq)
    r = lstm_layer(bwd, seq, reverse=True)
    return [f[t] + r[t] for t in range(len(seq))]


def stacked_sequence(network, seq):
    """Per-step PMFs of an lstm3 or bilstm3 network for one sequence."""
    seq = [[(v - s) / sc for v, s, sc in zip(row, network.input_shift, network.input_scale)] for row in seq]
    h = seq
    for layer in network.layers[:-2]:
        h = bilstm_layer(layer.params, h) if layer.kind == "bilstm" else lstm_layer(layer.params, h)
    head = network.layers[-2].params
    return np.array([softmax(dense(head["W"], head["b"], step)) for step in h])


def randomize(network, prng, scale=0.5, bias_scale=0.1):
    """Random weights and small random biases (exact zeros put ReLUs on their kink)."""
    for key, v in network.parameters():
        s = bias_scale if key.endswith("b") else scale
        v[...] = prng.uniform(-s, s, size=v.shape)


def gradcheck(network, x, targets, h=1e-5) -> float:
    """Max relative error of backward() against central differences."""
    _, grads = backward(network, x, targets)
    analytic = np.concatenate([g.ravel() for g in grads.values()])
    start = network.get_flat(trainable_only=True)

    def loss(v):
        network.set_flat(v, trainable_only=True)
        return batch_loss(network.forward(x), targets)

    numeric = finite_diff_gradient(loss, start, h)
    network.set_flat(start, trainable_only=True)
    return float(relative_error(analytic, numeric).max())


def kink_margin(network, x) -> float:
    """Distance of the forward pass from the nearest non-differentiable point:
    the smallest |ReLU input| and the smallest gap between a pooling window's
    winner and runner-up. Central differences are only valid when this is
    well above the step size."""
    margin = math.inf

    def walk(layers, h):
        nonlocal margin
        for layer in layers:
            if layer.kind == "timedistributed":
                N, T = h.shape[:2]
                h = walk(layer.layers, h.reshape((N * T,) + h.shape[2:]))
                h = h.reshape((N, T) + h.shape[1:])
                continue
            if layer.kind == "relu":
                margin = min(margin, float(np.min(np.abs(h))))
            elif layer.kind == "maxpool1d":
                n = h.shape[-1] // layer.pool
                blocks = np.sort(h[..., :n * layer.pool].reshape(h.shape[:-1] + (n, layer.pool)), axis=-1)
                gap = blocks[..., -1] - blocks[..., -2]
                # two dead units tie at exactly zero and stay tied under small steps
                live = blocks[..., -1] > 0
                if np.any(live):
                    margin = min(margin, float(np.min(gap[live])))
            h = layer.forward(h)
        return h

    walk(network.layers, network.normalize(x))
    return margin


def gradcheck_case(network, seed, N=2, T=3, min_margin=1e-3, attempts=50):
    """Randomize weights and draw inputs until the forward pass keeps
    ``min_margin`` away from every ReLU and pooling kink. Deterministic in
    ``seed``; returns ``(x, targets)``."""
    from chemdetect.numerics import seed_stream
    for attempt in range(attempts):
        randomize(network, seed_stream(seed, 33, attempt))
        p = seed_stream(seed, 32, attempt)
        if network.recurrent:
            x, y = p.gaussian(size=(N, T, network.input_width)), p.bits(N * T).reshape(N, T)
        else:
            x, y = p.gaussian(size=(N + 1, network.input_width)), p.bits(N + 1)
        if kink_margin(network, x) > min_margin:
            return x, y
    raise RuntimeError("no kink-free draw found")
