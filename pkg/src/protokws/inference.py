"""Enrollment, single-clip classification and sliding-window detection."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .audio_io import CLIP_LEN, SAMPLE_RATE, RawAudio, fix_length, resample_linear, to_mono
from .encoder import forward
from .frontend import log_mel
from .protonet import PrototypeBank, compute_prototypes, predict, score
from .sampler import AUGMENT_STREAM, stream
from .trainer import Checkpoint

REJECTED = "REJECTED"


@dataclass(frozen=True)
class Detection:
    start_time: float
    label: str
    score: float
    margin: float

    def row(self) -> str:
        return f"{self.start_time!r},{self.label},{self.score!r},{self.margin!r}"


DETECTION_HEADER = "time_s,label,score,margin"


def format_detections(dets: Sequence[Detection], header_comment: str | None = None) -> str:
    lines = [] if header_comment is None else [f"# {header_comment}"]
    lines.append(DETECTION_HEADER)
    lines += [d.row() for d in dets]
    return "\n".join(lines) + "\n"


def embed_clip(checkpoint: Checkpoint, clip: np.ndarray) -> np.ndarray:
    """Embedding of one canonical clip.

    Clips always go through the encoder one at a time on this path, so the
    same clip yields a bit-identical vector at enrollment and at query time.
    """
    feat = log_mel(np.asarray(clip, dtype=np.float64), checkpoint.frontend)
    return forward(checkpoint.params, feat[None])[0][0]


def augment_support(clip: np.ndarray, n: int, rng: np.random.Generator, *,
                    max_shift: int = 1600, gain_range: tuple[float, float] = (0.8, 1.25),
                    snr_db: float | None = 30.0) -> list[np.ndarray]:
    """The original clip followed by n - 1 shifted, rescaled, noisy copies.

    Shifts are circular in [-max_shift, max_shift] samples, gains are
    log-uniform in ``gain_range`` and white noise is added at ``snr_db``
    relative to the clip's mean power (``None`` disables noise).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.asarray(clip, dtype=np.float64)
    out = [x.copy()]
    power = float(np.mean(x ** 2))
    lo, hi = np.log(gain_range[0]), np.log(gain_range[1])
    for _ in range(n - 1):
        shift = int(rng.integers(-max_shift, max_shift + 1)) if max_shift else 0
        gain = float(np.exp(rng.uniform(lo, hi))) if hi > lo else float(np.exp(lo))
        y = gain * np.roll(x, shift)
        if snr_db is not None and power > 0:
            y = y + np.sqrt(gain ** 2 * power / 10 ** (snr_db / 10)) * rng.standard_normal(len(y))
        out.append(y)
    return out


def enroll(checkpoint: Checkpoint, support: Mapping[str, Sequence[np.ndarray]],
           augment_to: int | None = None, seed: int = 0) -> PrototypeBank:
    """Prototype bank with one row per keyword, in the mapping's order.

    With ``augment_to`` set, keywords that have exactly one clip are
    expanded to ``augment_to`` clips by ``augment_support``.
    """
    if not support:
        raise ValueError("no keywords to enroll")
    embs, labels = [], []
    for ki, (word, clips) in enumerate(support.items()):
        clips = list(clips)
        if not clips:
            raise ValueError(f"keyword {word!r} has no support clips")
        if augment_to is not None and len(clips) == 1:
            clips = augment_support(clips[0], augment_to, stream(seed, AUGMENT_STREAM, ki))
        for c in clips:
            embs.append(embed_clip(checkpoint, c))
            labels.append(word)
    return compute_prototypes(np.stack(embs), labels)


def _check_dims(checkpoint: Checkpoint, bank: PrototypeBank) -> None:
    if bank.dim != checkpoint.encoder.embed_dim:
        raise ValueError(f"bank dimension {bank.dim} != encoder embedding "
                         f"dimension {checkpoint.encoder.embed_dim}")


def _decide(s: np.ndarray, bank: PrototypeBank, start: float,
            reject_threshold: float | None) -> Detection:
    best = predict(s)
    top = float(s[best])
    if len(s) > 1:
        margin = top - float(np.max(np.delete(s, best)))
    else:
        margin = 0.0
    label = str(bank.labels[best])
    if reject_threshold is not None and top < reject_threshold:
        label = REJECTED
    return Detection(start, label, top, margin)


def classify_clip(checkpoint: Checkpoint, bank: PrototypeBank, clip: np.ndarray,
                  reject_threshold: float | None = None) -> Detection:
    """Nearest-prototype label; REJECTED when the best score is below the threshold."""
    _check_dims(checkpoint, bank)
    return _decide(score(embed_clip(checkpoint, clip), bank), bank, 0.0, reject_threshold)


def window_starts(n_samples: int, window: int, hop: int) -> list[int]:
    if n_samples < window:
        raise ValueError(f"audio of {n_samples} samples is shorter than one window ({window})")
    return list(range(0, n_samples - window + 1, hop))


def detect_stream(checkpoint: Checkpoint, bank: PrototypeBank, audio: RawAudio,
                  window: float = 1.0, hop: float = 0.5,
                  reject_threshold: float | None = None) -> list[Detection]:
    """Classify consecutive windows of a long recording, in time order."""
    _check_dims(checkpoint, bank)
    raw = to_mono(audio)
    if raw.sample_rate != SAMPLE_RATE:
        raw = resample_linear(raw, SAMPLE_RATE)
    win = int(round(window * SAMPLE_RATE))
    step = int(round(hop * SAMPLE_RATE))
    if win < 1 or step < 1:
        raise ValueError("window and hop must be positive")
    x = np.asarray(raw.samples, dtype=np.float64)
    dets = []
    for start in window_starts(len(x), win, step):
        seg = x[start:start + win]
        clip = seg if win == CLIP_LEN else fix_length(RawAudio(seg, SAMPLE_RATE))
        s = score(embed_clip(checkpoint, clip), bank)
        dets.append(_decide(s, bank, start / SAMPLE_RATE, reject_threshold))
    return dets


def calibrate_threshold(in_class_scores, percentile: float = 1.0) -> float:
    """Score threshold below which only ``percentile`` % of in-class scores fall."""
    return float(np.percentile(np.asarray(in_class_scores, dtype=np.float64), percentile))
