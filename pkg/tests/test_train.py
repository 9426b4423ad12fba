import hashlib
import math
import struct

import numpy as np
import pytest

from chemdetect.channel import ModulationScheme, generate_dataset
from chemdetect.framing import frame_dataset
from chemdetect.nn import build_architecture
from chemdetect.nn.network import Network, backward, batch_loss
from chemdetect.numerics import seed_stream
from chemdetect.train import (MAGIC, AdamState, ChecksumError, DescriptorError, ModelFormatError, ModelVersionError,
                              ShapeMismatchError, TrainConfig, adam_step, fit_detector, load_model, model_bytes,
                              model_from_bytes, predict_pmfs, save_model, split_dataset, train, training_set,
                              window_starts)

SCHEME = ModulationScheme.for_interval(250)


@pytest.fixture(scope="module")
def small_ds():
    ds = generate_dataset([SCHEME, ModulationScheme.for_interval(500)], n_sequences=6, seq_len=24, master_seed=3)
    return split_dataset(ds, 0.5, seed=1)


# -- split -----------------------------------------------------------------------

def test_split_default_counts():
    ds = split_dataset(generate_dataset(n_sequences=100, seq_len=1, master_seed=0), seed=4)
    for iv in ds.intervals:
        tags = [r.split for r in ds.records if r.interval_ms == iv]
        assert tags.count("train") == 84 and tags.count("test") == 16


def test_split_deterministic_partition():
    ds = generate_dataset([SCHEME], n_sequences=20, seq_len=1, master_seed=0)
    a, b = split_dataset(ds, seed=2), split_dataset(ds, seed=2)
    assert [r.split for r in a.records] == [r.split for r in b.records]
    assert [r.split for r in split_dataset(ds, seed=3).records] != [r.split for r in a.records]
    train = {r.id for r in a.partition("train")}
    test = {r.id for r in a.partition("test")}
    assert train.isdisjoint(test) and train | test == {r.id for r in ds.records}
    # the input is not modified
    assert all(r.split is None for r in ds.records)


def test_split_errors():
    ds = generate_dataset([SCHEME], n_sequences=2, seq_len=1)
    with pytest.raises(ValueError):
        split_dataset(ds, 1.0)
    ds.records = []
    with pytest.raises(ValueError):
        split_dataset(ds)


# -- Adam ------------------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"w": np.array([0.3, -1.0])}
    st = AdamState.fresh(p)
    adam_step(p, {"w": np.zeros(2)}, st)
    np.testing.assert_array_equal(p["w"], [0.3, -1.0])
    assert st.t == 1


def test_adam_first_step():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState.fresh(p))
    assert p["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_constant_gradient():
    p = {"w": np.array([2.0])}
    st = AdamState.fresh(p)
    prev = 2.0
    for _ in range(5):
        adam_step(p, {"w": np.array([0.37])}, st)
        assert abs(abs(p["w"][0] - prev) - 1e-3) < 1e-5
        prev = p["w"][0]


def test_adam_matches_scalar_reference():
    prng = seed_stream(8, 0)
    p = {"a": prng.gaussian(size=(2, 3)), "b": prng.gaussian(size=4)}
    ref = {k: v.ravel().tolist() for k, v in p.items()}
    m = {k: [0.0] * len(v) for k, v in ref.items()}
    v2 = {k: [0.0] * len(v) for k, v in ref.items()}
    st = AdamState.fresh(p)
    for t in range(1, 101):
        g = {k: prng.gaussian(size=val.shape) for k, val in p.items()}
        adam_step(p, g, st)
        for k in ref:
            for i, gi in enumerate(g[k].ravel()):
                m[k][i] = 0.9 * m[k][i] + 0.1 * gi
                v2[k][i] = 0.999 * v2[k][i] + 0.001 * gi * gi
                mh = m[k][i] / (1 - 0.9 ** t)
                vh = v2[k][i] / (1 - 0.999 ** t)
                ref[k][i] -= 1e-3 * mh / (math.sqrt(vh) + 1e-8)
        for k in ref:
            np.testing.assert_allclose(p[k].ravel(), ref[k], rtol=0, atol=1e-12)


def test_adam_mismatch():
    p = {"w": np.zeros(2)}
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(3)}, AdamState.fresh(p))
    with pytest.raises(ValueError):
        adam_step(p, {"x": np.zeros(2)}, AdamState.fresh(p))


# -- config and windows --------------------------------------------------------

def test_config_defaults():
    c = TrainConfig("dense")
    assert (c.epochs, c.batch_size, c.learning_rate, c.tau) == (200, 10, 1e-3, None)
    assert TrainConfig("lstm3").tau == 120 and TrainConfig("bilstm3").tau == 8
    s = TrainConfig.sweep("lstm3", 16, seed=2)
    assert (s.epochs, s.batch_size, s.tau, s.seed) == (50, 32, 16, 2)
    with pytest.raises(ValueError):
        TrainConfig("dense", epochs=0)
    with pytest.raises(ValueError):
        TrainConfig("rnn")


def test_window_starts():
    assert window_starts(120, 8) == list(range(0, 120, 8))
    assert window_starts(10, 4) == [0, 4, 6]
    assert window_starts(10, 4, cover_tail=False) == [0, 4]
    assert window_starts(3, 8) == [0]
    assert window_starts(3, 8, cover_tail=False) == []


def test_recurrent_training_set_shapes(small_ds):
    net = build_architecture("lstm3", seed_stream(0, 2), tau=5)
    frames = frame_dataset(small_ds, small_ds.partition("train"))
    data = training_set(net, frames)
    assert data.inputs.shape == (len(frames) * 4, 5, 10)
    assert data.targets.shape == (len(frames) * 4, 5)


def test_prediction_covers_every_symbol(small_ds):
    net = build_architecture("lstm3", seed_stream(0, 2), tau=5)
    fr = frame_dataset(small_ds, small_ds.records[:1])[0]
    pmf = predict_pmfs(net, fr)
    assert pmf.shape == (24, 2)
    np.testing.assert_allclose(pmf.sum(axis=1), 1.0)
    # the tail window (symbols 19..23) only fills symbols 20..23
    x = fr.features(8)
    head = net.forward(x[15:20][None])[0]
    np.testing.assert_allclose(pmf[15:20], head, atol=1e-14)
    tail = net.forward(x[19:24][None])[0]
    np.testing.assert_allclose(pmf[20:], tail[1:], atol=1e-14)


# -- training --------------------------------------------------------------------

def separable_frames():
    """Feature vectors whose first entry alone decides the bit."""
    prng = seed_stream(5, 0)
    x = prng.gaussian(size=(200, 4))
    y = (x[:, 0] > 0).astype(np.int64)
    x[:, 0] += np.where(y == 1, 1.0, -1.0)
    return x, y


def test_separable_toy_training():
    x, y = separable_frames()
    net = build_architecture("dense", seed_stream(0, 2), bins=2, hidden=8)
    params = dict(net.trainable_parameters())
    st = AdamState.fresh(params, learning_rate=1e-2)
    for epoch in range(50):
        order = seed_stream(0, 3, epoch).permutation(len(y))
        for i in range(0, len(y), 10):
            _, g = backward(net, x[order[i:i + 10]], y[order[i:i + 10]])
            adam_step(params, g, st)
    pmf = net.forward(x)
    assert batch_loss(pmf, y) < 0.01
    assert np.all(pmf.argmax(axis=1) == y)


def test_train_learns_and_is_deterministic(small_ds):
    cfg = TrainConfig("dense", epochs=15, batch_size=10, seed=4)
    a = fit_detector(small_ds, cfg)
    b = fit_detector(small_ds, cfg)
    assert np.array_equal(a.network.get_flat(), b.network.get_flat())
    assert a.history == b.history
    assert len(a.history) == 15
    assert np.mean(a.history[-5:]) < np.mean(a.history[:5])
    assert np.all(np.isfinite(a.network.get_flat()))
    c = fit_detector(small_ds, TrainConfig("dense", epochs=15, batch_size=10, seed=5))
    assert not np.array_equal(a.network.get_flat(), c.network.get_flat())


def test_train_history_callback_and_recurrent(small_ds):
    seen = []
    res = fit_detector(small_ds, TrainConfig("lstm3", epochs=3, batch_size=4, tau=6, seed=0),
                       on_epoch=lambda e, loss: seen.append((e, loss)))
    assert [e for e, _ in seen] == [0, 1, 2]
    assert [loss for _, loss in seen] == res.history
    assert res.network.tau == 6


def test_train_arch_mismatch(small_ds):
    net = build_architecture("cnn", seed_stream(0, 2))
    with pytest.raises(ValueError):
        train(net, small_ds, TrainConfig("dense"))


def test_train_needs_train_tags():
    ds = generate_dataset([SCHEME], n_sequences=2, seq_len=4)
    with pytest.raises(ValueError):
        fit_detector(ds, TrainConfig("dense", epochs=1))


def test_cnn_lstm3_pretrains_trunk(small_ds):
    res = fit_detector(small_ds, TrainConfig("cnn_lstm3", epochs=2, batch_size=8, tau=6, seed=1))
    net = res.network
    assert not net.layers[0].trainable
    cnn = fit_detector(small_ds, TrainConfig("cnn", epochs=2, batch_size=8, seed=1)).network
    for src, dst in zip(cnn.layers, net.layers[0].layers):
        for k in src.params:
            assert np.array_equal(src.params[k], dst.params[k])
    tuned = fit_detector(small_ds, TrainConfig("cnn_lstm3", epochs=2, batch_size=8, tau=6, seed=1,
                                               fine_tune_trunk=True)).network
    assert tuned.layers[0].trainable
    assert not np.array_equal(tuned.layers[0].layers[0].params["W"], cnn.layers[0].params["W"])


# -- model files -----------------------------------------------------------------

def resign(body: bytes) -> bytes:
    return body + hashlib.blake2b(body, digest_size=8).digest()


@pytest.mark.parametrize("arch", ["dense", "cnn", "lstm3", "cnn_lstm3", "bilstm3"])
def test_model_round_trip(arch, tmp_path):
    net = build_architecture(arch, seed_stream(1, 2), tau=4)
    net.input_shift = seed_stream(2, 0).gaussian(size=net.input_shift.shape)
    net.input_scale = 1 + seed_stream(3, 0).uniform(size=net.input_scale.shape)
    save_model(net, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    assert back.name == arch and back.tau == net.tau and back.bins == net.bins
    shape = (3, 4, net.input_width) if net.recurrent else (3, net.input_width)
    x = seed_stream(4, 0).gaussian(size=shape)
    assert np.array_equal(back.forward(x), net.forward(x))
    assert model_bytes(back) == model_bytes(net)


def test_model_layout_header():
    data = model_bytes(build_architecture("dense", seed_stream(0, 2)))
    assert data[:8] == MAGIC
    assert struct.unpack("<H", data[8:10]) == (1,)
    assert data[-8:] == hashlib.blake2b(data[:-8], digest_size=8).digest()


def test_model_corruption_checksum():
    data = bytearray(model_bytes(build_architecture("dense", seed_stream(0, 2))))
    data[-100] ^= 0x01
    with pytest.raises(ChecksumError):
        model_from_bytes(bytes(data))


def test_model_version_and_magic():
    data = model_bytes(build_architecture("dense", seed_stream(0, 2)))
    with pytest.raises(ModelVersionError):
        model_from_bytes(data[:8] + struct.pack("<H", 2) + data[10:])
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"NOTMODEL" + data[8:])
    with pytest.raises(ModelFormatError):
        model_from_bytes(data[:9])


def test_model_unknown_architecture():
    body = model_bytes(build_architecture("dense", seed_stream(0, 2)))[:-8]
    with pytest.raises(DescriptorError):
        model_from_bytes(resign(body.replace(b"dense", b"dunce", 1)))


def test_model_shape_mismatch():
    net = build_architecture("dense", seed_stream(0, 2), hidden=6)
    body = model_bytes(net)[:-8]
    key = b"\x06\x00hidden" + struct.pack("<q", 6)
    assert key in body
    with pytest.raises(ShapeMismatchError):
        model_from_bytes(resign(body.replace(key, b"\x06\x00hidden" + struct.pack("<q", 7))))


def test_frozen_flag_round_trips(small_ds, tmp_path):
    cnn = build_architecture("cnn", seed_stream(0, 2))
    net = build_architecture("cnn_lstm3", seed_stream(0, 3), trunk=cnn, tau=4)
    save_model(net, tmp_path / "m.bin")
    assert not load_model(tmp_path / "m.bin").layers[0].trainable
    assert isinstance(net, Network)
