import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from chemdetect.baseline import BaselineDetector, BaselineParams, detect_bit, detect_bits, fit_baseline, fit_grid
from chemdetect.channel import ModulationScheme, PhTrace, SequenceRecord, generate_dataset, trace_length
from chemdetect.evaluate import compute_ber
from chemdetect.framing import RecordFrames, bin_average, bin_diff, frame_dataset, segment
from chemdetect.numerics import seed_stream

SCHEME = ModulationScheme.for_interval(250)


def test_detect_bit_rule():
    assert detect_bit(np.array([-0.1]), 1) == 0
    assert detect_bit(np.array([0.0]), 1) == 0
    assert detect_bit(np.array([0.2]), 1) == 1
    assert detect_bit(np.array([0.5, -0.3, 0.1]), 2) == 0


def test_detect_bit_gamma_range():
    for g in (0, 4):
        with pytest.raises(IndexError):
            detect_bit(np.zeros(3), g)
    with pytest.raises(ValueError):
        BaselineParams(B=4, gamma=4)


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-100, 100)),
       st.floats(1e-3, 1e3), st.data())
@settings(max_examples=300, deadline=None)
def test_detect_bit_scale_and_sign(d, scale, data):
    g = data.draw(st.integers(1, len(d)))
    assert detect_bit(scale * d, g) == detect_bit(d, g)
    if d[g - 1] != 0:
        assert detect_bit(-d, g) == 1 - detect_bit(d, g)


def ramp_record(bits, rid="r", scheme=SCHEME):
    """Trace whose every bit-0 window falls and every bit-1 window rises."""
    n = trace_length(len(bits), scheme)
    p = np.full(n, 7.0)
    start = scheme.preamble_ms * scheme.sample_rate_hz // 1000
    L = scheme.symbol_interval_ms * scheme.sample_rate_hz // 1000
    for k, b in enumerate(bits):
        ramp = np.linspace(0.0, 1.0, L)
        p[start + k * L:start + (k + 1) * L] = 7.0 + (ramp if b else -ramp)
    return SequenceRecord(rid, np.asarray(bits, dtype=np.uint8), scheme.symbol_interval_ms,
                          PhTrace(scheme.sample_rate_hz, p, scheme.symbol_interval_ms, rid))


def test_fit_separable_fixture():
    bits = seed_stream(5, 0).bits(40)
    frames = [RecordFrames(ramp_record(bits), SCHEME, sync_index=0)]
    p = fit_grid(frames)
    assert p.train_ber == 0.0
    assert np.array_equal(BaselineDetector({250: p}).predict(frames[0]), bits)
    # every grid point is perfect here, so the tie-break picks the first
    assert (p.B, p.gamma) == (2, 1)


def test_fit_tie_prefers_smaller_B():
    bits = seed_stream(6, 0).bits(30)
    frames = [RecordFrames(ramp_record(bits), SCHEME, sync_index=0)]
    assert fit_grid(frames, [7, 3, 5]).B == 3


def test_fit_empty():
    with pytest.raises(ValueError):
        fit_grid([])


def brute_force(records, scheme, sync, B_range):
    """Independent grid search: segment, bin, threshold, count, one pair at a time."""
    best = None
    for B in B_range:
        for gamma in range(1, B):
            errs = 0
            for rec, s in zip(records, sync):
                for w, bit in zip(segment(rec.trace, s, scheme, len(rec.bits)), rec.bits):
                    d = bin_diff(bin_average(w, B))
                    errs += int((0 if d[gamma - 1] <= 0 else 1) != bit)
            if best is None or errs < best[0]:
                best = (errs, B, gamma)
    return best


def test_fit_matches_brute_force():
    ds = generate_dataset([SCHEME], n_sequences=3, seq_len=25, master_seed=12)
    frames = frame_dataset(ds)
    p = fit_grid(frames, range(2, 13))
    errs, B, gamma = brute_force(ds.records, SCHEME, [f.sync_index for f in frames], range(2, 13))
    assert (p.B, p.gamma) == (B, gamma)
    assert p.train_ber == errs / 75


def test_train_ber_equals_compute_ber():
    ds = generate_dataset([SCHEME, ModulationScheme.for_interval(500)], n_sequences=4, seq_len=30, master_seed=2)
    for r in ds.records:
        r.split = "train"
    det = fit_baseline(ds)
    frames = frame_dataset(ds)
    for iv, p in det.params.items():
        fs = [f for f in frames if f.interval_ms == iv]
        pred = np.concatenate([det.predict(f) for f in fs])
        truth = np.concatenate([f.record.bits for f in fs])
        assert compute_ber(pred, truth) == p.train_ber


def test_pooled_and_save_load(tmp_path):
    ds = generate_dataset([SCHEME, ModulationScheme.for_interval(500)], n_sequences=3, seq_len=20, master_seed=1)
    det = fit_baseline(ds, split=None, pooled=True)
    assert det.pooled and list(det.params) == [0]
    assert det.params_for(500) is det.params_for(250)
    assert not det.params[0].fitted_per_interval
    det.save(tmp_path / "b.json")
    assert BaselineDetector.load(tmp_path / "b.json") == det


def test_detect_bits_vectorised():
    d = seed_stream(3, 0).gaussian(0, 1, size=(50, 6))
    for g in range(1, 7):
        assert list(detect_bits(d, g)) == [detect_bit(row, g) for row in d]
