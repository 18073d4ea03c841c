"""Keyword-disjoint class splits and seeded N-way K-shot episodes.

Every episode draws from its own Philox (counter-based) stream keyed by
``(seed, domain, *extra, index)``, so episode i can be regenerated without
replaying episodes 0..i-1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .manifest import Entry, Manifest, ManifestError

TRAIN_STREAM = 1
EVAL_STREAM = 2
SPLIT_STREAM = 3
AUGMENT_STREAM = 4

MAX_CLASS_RETRIES = 8


class SamplingError(ValueError):
    pass


def stream(seed: int, domain: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), int(domain), *(int(k) for k in key)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ClassSplit:
    train: frozenset
    test: frozenset

    def __post_init__(self):
        if self.train & self.test:
            raise ValueError("train and test classes overlap")


def split_classes(manifest: Manifest, ratio: float = 0.8, seed: int = 0) -> ClassSplit:
    """Shuffle class keys and send the first ceil(ratio * total) to train."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    keys = manifest.classes()
    if len(keys) < 2:
        raise SamplingError(f"need at least 2 keywords to split, got {len(keys)}")
    order = stream(seed, SPLIT_STREAM).permutation(len(keys))
    n_train = math.ceil(round(ratio * len(keys), 9))
    # Keep at least one test class; ceil can otherwise swallow everything.
    n_train = min(n_train, len(keys) - 1)
    shuffled = [keys[i] for i in order]
    return ClassSplit(frozenset(shuffled[:n_train]), frozenset(shuffled[n_train:]))


@dataclass(frozen=True)
class Episode:
    support: tuple[tuple[Entry, int], ...]
    query: tuple[tuple[Entry, int], ...]
    class_map: tuple[tuple[str, str], ...]

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    def support_labels(self) -> np.ndarray:
        return np.array([c for _, c in self.support])

    def query_labels(self) -> np.ndarray:
        return np.array([c for _, c in self.query])

    def clips(self) -> list[Entry]:
        """Support then query entries, the order of one forward batch."""
        return [e for e, _ in self.support] + [e for e, _ in self.query]


def sample_episode(pool: Manifest, n_way: int, k_shot: int, q_queries: int,
                   rng: np.random.Generator) -> Episode:
    if min(n_way, k_shot, q_queries) < 1:
        raise ValueError("n_way, k_shot and q_queries must be >= 1")
    keys = pool.classes()
    if len(keys) < n_way:
        raise SamplingError(f"pool has {len(keys)} classes, episode needs {n_way}")
    need = k_shot + q_queries
    order = rng.permutation(len(keys))
    chosen = []
    retries = 0
    for i in order:
        if len(chosen) == n_way:
            break
        if len(pool.index[keys[i]]) >= need:
            chosen.append(keys[i])
            continue
        retries += 1
        if retries > MAX_CLASS_RETRIES:
            break
    if len(chosen) < n_way:
        raise SamplingError(
            f"could not find {n_way} classes with >= {need} clips "
            f"({retries} under-populated classes drawn)")

    support, query = [], []
    for c, key in enumerate(chosen):
        clips = pool.index[key]
        pick = rng.choice(len(clips), size=need, replace=False)
        support.extend((clips[j], c) for j in pick[:k_shot])
        query.extend((clips[j], c) for j in pick[k_shot:])
    return Episode(tuple(support), tuple(query), tuple(chosen))


def episode_at(pool: Manifest, n_way: int, k_shot: int, q_queries: int,
               seed: int, domain: int, index: int, *extra: int) -> Episode:
    return sample_episode(pool, n_way, k_shot, q_queries, stream(seed, domain, *extra, index))


def pool_languages(manifests) -> Manifest:
    """Concatenate manifests; classes stay keyed by (language, keyword)."""
    manifests = list(manifests)
    roots = {m.root for m in manifests}
    if len(roots) > 1:
        manifests = [m.absolute() for m in manifests]
        roots = {""}
    entries = []
    for m in manifests:
        entries.extend(m.entries)
    try:
        return Manifest(entries, roots.pop() if roots else "")
    except ManifestError as exc:
        raise ManifestError(f"cannot pool manifests: {exc}") from exc
