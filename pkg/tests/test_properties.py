import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from regnet.evaluation import l2_spec_distance, regout_cosine_similarity
from regnet.spectro import SpectroParams, compress, decompress, pad_or_trim
from regnet.synthdata import SynthConfig, sample_track

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@given(arrays(np.float64, st.integers(1, 400), elements=st.floats(-1, 1)), st.integers(1, 1000))
def test_pad_or_trim_length(x, n):
    y = pad_or_trim(x, n)
    assert y.size == n
    k = min(n, x.size)
    assert np.array_equal(y[:k], x[:k])


@given(arrays(np.float64, (4, 6), elements=finite), arrays(np.float64, (4, 6), elements=finite))
def test_l2_symmetric_and_nonnegative(a, b):
    assert l2_spec_distance(a, b) == l2_spec_distance(b, a) >= 0


@given(arrays(np.float64, 12, elements=st.floats(-10, 10)), arrays(np.float64, 12, elements=st.floats(-10, 10)))
def test_cosine_bounded(a, b):
    if np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6:
        assert -1.0 <= regout_cosine_similarity(a, b) <= 1.0


@given(arrays(np.float64, (3, 5), elements=st.floats(0, 1e3)))
def test_compress_inverts_above_floor(mel):
    p = SpectroParams.desk()
    back = decompress(compress(mel, p), p)
    assert np.allclose(back, mel, rtol=1e-9, atol=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.floats(0, 10), st.integers(1, 8))
def test_tracks_respect_refractory_gap(seed, rate, gap):
    cfg = SynthConfig(event_rate=rate, refractory=gap)
    tr = sample_track(np.random.default_rng(seed), cfg)
    assert np.all(np.diff(tr.onsets) >= gap)
    assert np.all((tr.onsets >= 0) & (tr.onsets < cfg.T))
    assert np.all((tr.intensity > 0) & (tr.intensity <= 1))
