"""WAV parsing, channel mixing, resampling and one-second length fixing."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
CLIP_LEN = 16000

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavParseError(ValueError):
    """Base class for WAV parse failures."""


class MalformedHeaderError(WavParseError):
    pass


class UnsupportedCodecError(WavParseError):
    pass


class TruncatedDataError(WavParseError):
    pass


@dataclass(frozen=True)
class RawAudio:
    """Channel-interleaved samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int
    channels: int = 1

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if len(self.samples) % self.channels:
            raise ValueError("sample count is not divisible by channel count")

    @property
    def n_frames(self) -> int:
        return len(self.samples) // self.channels

    @property
    def duration(self) -> float:
        return self.n_frames / self.sample_rate


def parse_wav(data: bytes) -> RawAudio:
    """Parse a little-endian RIFF/WAVE byte string (PCM16 or float32)."""
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeaderError("malformed header: missing RIFF/WAVE magic")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body_start = pos + 8
        body_end = body_start + size
        if chunk_id == b"fmt ":
            if size < 16 or body_end > len(data):
                raise MalformedHeaderError("malformed header: short fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", data, body_start)
            if fmt[0] == _EXTENSIBLE and size >= 26:
                # Sub-format GUID starts with the real format tag.
                (sub_tag,) = struct.unpack_from("<H", data, body_start + 24)
                fmt = (sub_tag,) + fmt[1:]
        elif chunk_id == b"data":
            if fmt is None:
                raise MalformedHeaderError("malformed header: data chunk before fmt chunk")
            if body_end > len(data):
                raise TruncatedDataError(
                    f"truncated data chunk: declared {size} bytes, {len(data) - body_start} present"
                )
            payload = data[body_start:body_end]
            break
        pos = body_end + (size & 1)

    if fmt is None:
        raise MalformedHeaderError("malformed header: no fmt chunk")
    if payload is None:
        raise TruncatedDataError("truncated data chunk: no data chunk found")

    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise MalformedHeaderError("malformed header: zero channels or sample rate")
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedCodecError(f"unsupported codec: format tag {tag}, {bits} bits")
    if block_align != channels * dtype.itemsize:
        raise MalformedHeaderError("malformed header: inconsistent block alignment")
    if len(payload) % block_align:
        raise TruncatedDataError("truncated data chunk: partial sample frame")

    samples = np.frombuffer(payload, dtype=dtype).astype(np.float64) * scale
    return RawAudio(samples, rate, channels)


def read_wav(path) -> RawAudio:
    with open(path, "rb") as fh:
        return parse_wav(fh.read())


def encode_wav(samples, sample_rate: int = SAMPLE_RATE, channels: int = 1,
               float32: bool = False) -> bytes:
    """Serialize interleaved samples in [-1, 1] to RIFF/WAVE bytes."""
    x = np.asarray(samples, dtype=np.float64)
    if float32:
        body = x.astype("<f4").tobytes()
        tag, width = _IEEE_FLOAT, 4
    else:
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        body = q.tobytes()
        tag, width = _PCM, 2
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate,
                      sample_rate * channels * width, channels * width, width * 8)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    chunks += b"data" + struct.pack("<I", len(body)) + body
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


def write_wav(path, samples, sample_rate: int = SAMPLE_RATE, channels: int = 1,
              float32: bool = False) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_wav(samples, sample_rate, channels, float32))


def to_mono(raw: RawAudio) -> RawAudio:
    if raw.channels == 1:
        return raw
    frames = np.asarray(raw.samples, dtype=np.float64).reshape(-1, raw.channels)
    return RawAudio(frames.mean(axis=1), raw.sample_rate, 1)


def resample_linear(raw: RawAudio, target_rate: int) -> RawAudio:
    """Linear-interpolation resampling of a mono signal.

    Output sample i is the source evaluated at position i * source / target;
    positions past the last source sample hold the last value.
    """
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if raw.channels != 1:
        raise ValueError("resample_linear expects mono input")
    x = np.asarray(raw.samples, dtype=np.float64)
    if target_rate == raw.sample_rate:
        return RawAudio(x.copy(), target_rate, 1)
    n_out = int(round(len(x) * target_rate / raw.sample_rate))
    if len(x) == 0 or n_out == 0:
        return RawAudio(np.zeros(n_out), target_rate, 1)
    pos = np.arange(n_out) * (raw.sample_rate / target_rate)
    out = np.interp(pos, np.arange(len(x)), x)
    return RawAudio(out, target_rate, 1)


def fix_length(raw: RawAudio) -> np.ndarray:
    """Center-crop or zero-pad a mono 16 kHz signal to exactly one second.

    Returns the canonical clip as a float64 vector of length 16000.
    """
    if raw.channels != 1:
        raise ValueError("fix_length expects mono input")
    if raw.sample_rate != SAMPLE_RATE:
        raise ValueError(f"fix_length expects {SAMPLE_RATE} Hz, got {raw.sample_rate}")
    x = np.asarray(raw.samples, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise ValueError("cannot fix the length of an empty signal")
    if n >= CLIP_LEN:
        start = (n - CLIP_LEN) // 2
        return x[start:start + CLIP_LEN].copy()
    deficit = CLIP_LEN - n
    left = deficit // 2
    return np.concatenate([np.zeros(left), x, np.zeros(deficit - left)])


def load_clip(path) -> np.ndarray:
    """Read any supported WAV and return the canonical 16 kHz one-second clip."""
    raw = to_mono(read_wav(path))
    if raw.sample_rate != SAMPLE_RATE:
        raw = resample_linear(raw, SAMPLE_RATE)
    return fix_length(raw)
