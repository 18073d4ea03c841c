import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protokws.frontend import (FrontendConfig, hann_window, hz_to_mel, log_mel, mel_centers,
                               mel_filterbank, mel_to_hz, n_frames, stft_power)

from conftest import sine

CFG = FrontendConfig()


def naive_power(frame, n_fft):
    """|DFT|^2 of a zero-padded frame, by explicit summation."""
    x = np.zeros(n_fft)
    x[:len(frame)] = frame
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(n_fft)[None, :]
    X = (x * np.exp(-2j * np.pi * k * n / n_fft)).sum(axis=1)
    return np.abs(X) ** 2


def test_hann_closed_form():
    np.testing.assert_allclose(hann_window(3), [0, 1, 0], atol=1e-15)
    w = hann_window(400)
    assert abs(w[200] - 0.5 * (1 - np.cos(2 * np.pi * 200 / 399))) < 1e-12
    assert w[0] == 0 and w[-1] == 0
    for n in (1, 2, 7, 400, 512):
        assert hann_window(n).max() <= 1
    with pytest.raises(ValueError):
        hann_window(0)


def test_stft_shape_and_zero():
    assert stft_power(np.zeros(16000)).shape == (98, 257)
    assert not stft_power(np.zeros(16000)).any()


def test_stft_impulse_at_zero():
    x = np.zeros(16000)
    x[0] = 1.0
    p = stft_power(x)
    # The impulse hits the window's zero endpoint.
    assert np.abs(p[0]).max() < 1e-30
    assert not p[1:].any()


def test_stft_impulse_matches_direct_dft():
    x = np.zeros(16000)
    x[200] = 1.0
    p = stft_power(x)
    w = hann_window(400)
    for f, pos in ((0, 200), (1, 40)):
        ref = naive_power(w * (np.arange(400) == pos), 512)
        np.testing.assert_allclose(p[f], ref, atol=1e-12)
        np.testing.assert_allclose(p[f], w[pos] ** 2, atol=1e-12)
    assert not p[2:].any()


def test_stft_random_frames_match_direct_dft():
    x = np.random.default_rng(0).uniform(-1, 1, 16000)
    p = stft_power(x)
    w = hann_window(400)
    for f in (0, 17, 97):
        ref = naive_power(x[f * 160:f * 160 + 400] * w, 512)
        np.testing.assert_allclose(p[f], ref, rtol=1e-9, atol=1e-9)


def test_stft_rejects_long_window():
    with pytest.raises(ValueError):
        stft_power(np.zeros(300))


def test_filterbank_shape_and_triangles():
    fb = mel_filterbank()
    assert fb.shape == (64, 257)
    assert (fb >= 0).all()
    for row in fb:
        nz = np.flatnonzero(row)
        peak = row.argmax()
        assert np.all(np.diff(row[nz[0]:peak + 1]) >= 0)
        assert np.all(np.diff(row[peak:nz[-1] + 1]) <= 0)
        assert row.max() <= 1.0
    assert np.all(np.diff(mel_centers(CFG)) > 0)


def test_filterbank_first_center():
    m = lambda f: 2595 * np.log10(1 + f / 700)
    minv = lambda v: 700 * (10 ** (v / 2595) - 1)
    delta = (m(7800) - m(60)) / 65
    expected = minv(m(60) + delta)
    peak_col = mel_filterbank()[0].argmax()
    assert abs(peak_col * 16000 / 512 - expected) <= 16000 / 512
    assert abs(mel_centers(CFG)[0] - expected) < 1e-9


def test_mel_scale_inverse():
    f = np.linspace(0, 8000, 101)
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)


def test_filterbank_rejects_above_nyquist():
    with pytest.raises(ValueError):
        mel_filterbank(FrontendConfig(f_max=9000))


def test_log_mel_floor_and_shape():
    out = log_mel(np.zeros(16000))
    assert out.shape == (98, 64)
    assert (out == -10.0).all()


def test_log_mel_sine_peak_bin():
    x = sine(1000)
    lm = log_mel(x).mean(axis=0)
    # Independent oracle: direct DFT energies through freshly built triangles.
    w = hann_window(400)
    power = np.mean([naive_power(x[i * 160:i * 160 + 400] * w, 512) for i in range(0, 98, 7)],
                    axis=0)
    m = lambda f: 2595 * np.log10(1 + f / 700)
    pts = 700 * (10 ** (np.linspace(m(60), m(7800), 66) / 2595) - 1)
    freqs = np.arange(257) * 16000 / 512
    tri = np.array([np.clip(np.minimum((freqs - pts[i]) / (pts[i + 1] - pts[i]),
                                       (pts[i + 2] - freqs) / (pts[i + 2] - pts[i + 1])), 0, None)
                    for i in range(64)])
    oracle_bin = int(np.argmax(tri @ power))
    nearest = int(np.argmin(np.abs(pts[1:-1] - 1000)))
    assert int(np.argmax(lm)) == nearest == oracle_bin


def test_scaling_shifts_log_energies():
    x = np.random.default_rng(2).uniform(-0.1, 0.1, 16000)
    a, b = log_mel(x), log_mel(3.0 * x)
    above = a > -10 + 1
    np.testing.assert_allclose((b - a)[above], 2 * np.log10(3.0), atol=1e-9)


def test_hop_shift_moves_frames():
    rng = np.random.default_rng(3)
    x = np.zeros(16000)
    x[4000:12000] = rng.uniform(-1, 1, 8000)
    y = np.roll(x, 160)
    a, b = log_mel(x), log_mel(y)
    np.testing.assert_allclose(b[1:], a[:-1], atol=1e-9)


@given(win=st.integers(1, 16000), hop=st.integers(1, 4000))
@settings(max_examples=100, deadline=None)
def test_frame_count_formula(win, hop):
    assert n_frames(16000, win, hop) == 1 + (16000 - win) // hop


@given(st.integers(1, 600), st.integers(1, 400))
@settings(max_examples=20, deadline=None)
def test_stft_frame_count_general(win, hop):
    cfg = FrontendConfig(win_len=min(win, 512), hop_len=hop)
    assert stft_power(np.zeros(16000), cfg).shape[0] == 1 + (16000 - cfg.win_len) // hop


@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-6, 1e3))
@settings(max_examples=25, deadline=None)
def test_log_mel_always_finite(seed, scale):
    x = np.random.default_rng(seed).standard_normal(16000) * scale
    out = log_mel(x)
    assert np.isfinite(out).all() and (out >= -10).all()


def test_config_validation():
    with pytest.raises(ValueError):
        FrontendConfig(win_len=600).validate()
    with pytest.raises(ValueError):
        FrontendConfig(f_min=8000, f_max=7800).validate()
    with pytest.raises(ValueError):
        FrontendConfig(log_floor=0).validate()
