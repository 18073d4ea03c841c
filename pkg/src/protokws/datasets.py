"""Manifest filtering, corpus statistics and the synthetic keyword corpus."""

from __future__ import annotations

import os
from collections import Counter
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .audio_io import CLIP_LEN, SAMPLE_RATE, write_wav
from .manifest import Entry, Manifest, write_manifest
from .sampler import stream

HIGH_RESOURCE_LANGUAGES = ("en", "de", "es", "fr", "fa", "ru", "rw")
HIGH_RESOURCE_MIN_CLIPS = 200
LOW_RESOURCE_MIN_CLIPS = 25

SYNTH_STREAM = 5
SYNTH_LANGUAGE = "syn"


@dataclass(frozen=True)
class FilterPolicy:
    """Minimum clips per keyword, per language, with a fallback default."""

    default: int = LOW_RESOURCE_MIN_CLIPS
    per_language: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.default < 1 or any(v < 1 for v in self.per_language.values()):
            raise ValueError("min_clips must be >= 1")

    def min_clips(self, language: str) -> int:
        return self.per_language.get(language, self.default)

    @classmethod
    def multilingual_preset(cls) -> FilterPolicy:
        return cls(LOW_RESOURCE_MIN_CLIPS,
                   {lang: HIGH_RESOURCE_MIN_CLIPS for lang in HIGH_RESOURCE_LANGUAGES})

    @classmethod
    def uniform(cls, n: int) -> FilterPolicy:
        return cls(n, {})


def filter_min_clips(manifest: Manifest, policy: FilterPolicy | int) -> Manifest:
    """Drop every keyword with fewer clips than its language's threshold."""
    if isinstance(policy, int):
        policy = FilterPolicy.uniform(policy)
    keep = {key for key, clips in manifest.index.items()
            if len(clips) >= policy.min_clips(key[0])}
    return Manifest(e for e in manifest if e.key in keep)


@dataclass(frozen=True)
class LanguageStats:
    language: str
    n_keywords: int
    n_clips: int


def corpus_stats(manifest: Manifest) -> list[LanguageStats]:
    clips = Counter(e.language for e in manifest)
    words = Counter(lang for lang, _ in manifest.index)
    return [LanguageStats(lang, words[lang], clips[lang]) for lang in sorted(clips)]


def format_stats(stats: list[LanguageStats]) -> str:
    lines = ["language,n_keywords,n_clips"]
    lines += [f"{s.language},{s.n_keywords},{s.n_clips}" for s in stats]
    return "\n".join(lines) + "\n"


# -- synthetic corpus -------------------------------------------------------

ENVELOPES = ("hann", "attack", "swell", "double")


@dataclass(frozen=True)
class SynthClass:
    freqs: tuple[float, ...]
    envelope: str
    duration: float
    glide: float          # end/start frequency ratio over the word
    weights: tuple[float, ...]


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 50
    clips_per_class: int = 30
    seed: int = 0
    f_lo: float = 200.0
    f_hi: float = 3500.0
    freq_jitter: float = 0.02
    onset_jitter: float = 0.05
    snr_db: float = 20.0
    min_separation: float = 0.05


def _distinct(a: tuple, b: tuple, sep: float) -> bool:
    if len(a) != len(b):
        return True
    return any(abs(x - y) / min(x, y) >= sep for x, y in zip(a, b))


def synth_classes(spec: SynthSpec) -> list[SynthClass]:
    """Per-class recipes; frequency tuples differ by >= min_separation somewhere."""
    rng = stream(spec.seed, SYNTH_STREAM, 0)
    out: list[SynthClass] = []
    lo, hi = np.log(spec.f_lo), np.log(spec.f_hi)
    while len(out) < spec.n_classes:
        k = int(rng.integers(2, 4))
        freqs = tuple(float(f) for f in np.sort(np.exp(rng.uniform(lo, hi, size=k))))
        if any(not _distinct(freqs, c.freqs, spec.min_separation) for c in out):
            continue
        out.append(SynthClass(
            freqs=freqs,
            envelope=ENVELOPES[int(rng.integers(len(ENVELOPES)))],
            duration=float(rng.uniform(0.35, 0.7)),
            glide=float(np.exp(rng.uniform(np.log(0.85), np.log(1.15)))),
            weights=tuple(float(w) for w in rng.uniform(0.4, 1.0, size=k)),
        ))
    return out


def _envelope(kind: str, u: np.ndarray) -> np.ndarray:
    """Amplitude shape over normalized word time u in [0, 1]."""
    if kind == "hann":
        return np.sin(np.pi * u) ** 2
    if kind == "attack":
        return np.minimum(u / 0.08, 1.0) * np.exp(-4.0 * u)
    if kind == "swell":
        return np.minimum((1.0 - u) / 0.1, 1.0) * u ** 2
    if kind == "double":
        return np.sin(2.0 * np.pi * u) ** 2
    raise ValueError(f"unknown envelope {kind!r}")


def synth_clip(cls: SynthClass, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """One jittered, noisy rendition of a class, scaled to peak 0.5 before noise."""
    t = np.arange(CLIP_LEN) / SAMPLE_RATE
    onset = (1.0 - cls.duration) / 2 + rng.uniform(-spec.onset_jitter, spec.onset_jitter)
    u = (t - onset) / cls.duration
    inside = (u >= 0) & (u <= 1)
    uc = np.clip(u, 0.0, 1.0)
    env = np.where(inside, _envelope(cls.envelope, uc), 0.0)
    x = np.zeros(CLIP_LEN)
    # Instantaneous frequency f0 * glide**u; phase is its integral over time.
    log_g = np.log(cls.glide)
    for f0, w in zip(cls.freqs, cls.weights):
        f = f0 * (1.0 + rng.uniform(-spec.freq_jitter, spec.freq_jitter))
        if abs(log_g) < 1e-12:
            phase = 2 * np.pi * f * (uc * cls.duration)
        else:
            phase = 2 * np.pi * f * cls.duration * (cls.glide ** uc - 1.0) / log_g
        x += w * np.sin(phase + rng.uniform(0, 2 * np.pi))
    x *= env
    x *= 0.5 / max(np.max(np.abs(x)), 1e-12)
    signal_power = np.mean(x[inside] ** 2) if inside.any() else 0.0
    noise_std = np.sqrt(signal_power / 10 ** (spec.snr_db / 10))
    return x + noise_std * rng.standard_normal(CLIP_LEN)


def synth_labels(spec: SynthSpec) -> list[str]:
    return [f"class_{i}" for i in range(spec.n_classes)]


def synth_corpus_arrays(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """All clips as a (n_classes * clips_per_class, 16000) array plus class ids."""
    classes = synth_classes(spec)
    clips, ids = [], []
    for ci, cls in enumerate(classes):
        for j in range(spec.clips_per_class):
            clips.append(synth_clip(cls, spec, stream(spec.seed, SYNTH_STREAM, 1, ci, j)))
            ids.append(ci)
    return np.stack(clips), np.array(ids)


def synth_dataset(spec: SynthSpec, out_dir, manifest_name: str = "manifest.csv",
                  progress: Callable[[int, int], None] | None = None) -> Manifest:
    """Write clips_per_class PCM16 WAVs per class plus a manifest.

    Manifest paths are relative to ``out_dir``; rows are ordered by
    (class, clip index).
    """
    os.makedirs(out_dir, exist_ok=True)
    classes = synth_classes(spec)
    entries = []
    total = spec.n_classes * spec.clips_per_class
    for ci, cls in enumerate(classes):
        label = f"class_{ci}"
        sub = os.path.join(out_dir, label)
        os.makedirs(sub, exist_ok=True)
        for j in range(spec.clips_per_class):
            x = synth_clip(cls, spec, stream(spec.seed, SYNTH_STREAM, 1, ci, j))
            rel = f"{label}/{j:04d}.wav"
            write_wav(os.path.join(out_dir, rel), np.clip(x, -1.0, 1.0))
            entries.append(Entry(rel, label, SYNTH_LANGUAGE))
            if progress is not None:
                progress(len(entries), total)
    manifest = Manifest(entries, root=os.fspath(out_dir))
    write_manifest(manifest, os.path.join(out_dir, manifest_name))
    return manifest
