"""Log-Mel spectrogram frontend.

Hann window (400 samples, zero-padded to a 512-point FFT), hop 160, no
boundary padding, HTK mel scale, peak-normalized triangular filters and a
base-10 log with a hard floor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .audio_io import SAMPLE_RATE


@dataclass(frozen=True)
class FrontendConfig:
    win_len: int = 400
    hop_len: int = 160
    n_fft: int = 512
    n_mels: int = 64
    f_min: float = 60.0
    f_max: float = 7800.0
    log_floor: float = 1e-10

    def validate(self, sample_rate: int = SAMPLE_RATE) -> None:
        if self.win_len < 1 or self.hop_len < 1:
            raise ValueError("win_len and hop_len must be positive")
        if self.win_len > self.n_fft:
            raise ValueError(f"win_len {self.win_len} exceeds n_fft {self.n_fft}")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not 0 <= self.f_min < self.f_max:
            raise ValueError(f"need 0 <= f_min < f_max, got {self.f_min}, {self.f_max}")
        if self.f_max > sample_rate / 2:
            raise ValueError(f"f_max {self.f_max} exceeds Nyquist {sample_rate / 2}")
        if not self.log_floor > 0:
            raise ValueError("log_floor must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def n_frames(n_samples: int, win_len: int, hop_len: int) -> int:
    if win_len > n_samples:
        raise ValueError(f"window of {win_len} samples exceeds signal of {n_samples}")
    return 1 + (n_samples - win_len) // hop_len


def hann_window(length: int) -> np.ndarray:
    """Symmetric Hann window with zero endpoints."""
    if length < 1:
        raise ValueError("window length must be >= 1")
    if length == 1:
        return np.ones(1)
    n = np.arange(length)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (length - 1)))


def frame_signal(x: np.ndarray, win_len: int, hop_len: int) -> np.ndarray:
    count = n_frames(len(x), win_len, hop_len)
    frames = np.lib.stride_tricks.sliding_window_view(x, win_len)[::hop_len]
    return frames[:count]


def stft_power(clip: np.ndarray, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Squared-magnitude STFT, shape (n_frames, n_fft // 2 + 1)."""
    x = np.asarray(clip, dtype=np.float64)
    frames = frame_signal(x, cfg.win_len, cfg.hop_len) * hann_window(cfg.win_len)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_points(cfg: FrontendConfig) -> np.ndarray:
    """The n_mels + 2 edge/center frequencies in Hz, equally spaced in mel."""
    m = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    return mel_to_hz(m)


def mel_centers(cfg: FrontendConfig) -> np.ndarray:
    return mel_points(cfg)[1:-1]


@lru_cache(maxsize=16)
def _filterbank(cfg: FrontendConfig, sample_rate: int) -> np.ndarray:
    cfg.validate(sample_rate)
    pts = mel_points(cfg)
    freqs = np.arange(cfg.n_fft // 2 + 1) * sample_rate / cfg.n_fft
    left, center, right = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs - left) / (center - left)
    falling = (right - freqs) / (right - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: FrontendConfig = FrontendConfig(),
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters, shape (n_mels, n_fft // 2 + 1), peak value 1.

    The returned array is a shared read-only handle.
    """
    return _filterbank(cfg, sample_rate)


def log_mel(clip: np.ndarray, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """log10 mel energies, shape (n_frames, n_mels)."""
    power = stft_power(clip, cfg)
    energies = power @ mel_filterbank(cfg).T
    return np.log10(np.maximum(energies, cfg.log_floor))
