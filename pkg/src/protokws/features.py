"""Clip loading and a per-path log-Mel cache."""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .audio_io import load_clip
from .frontend import FrontendConfig, log_mel
from .manifest import Entry, Manifest


class FeatureStore:
    """Computes each clip's log-Mel once and serves stacked batches.

    Cached values are the exact arrays ``log_mel(load_clip(path))`` returns.
    """

    def __init__(self, manifest: Manifest, frontend: FrontendConfig = FrontendConfig()):
        frontend.validate()
        self.manifest = manifest
        self.frontend = frontend
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._cache)

    def get(self, entry: Entry) -> np.ndarray:
        path = self.manifest.resolve(entry)
        feat = self._cache.get(path)
        if feat is None:
            feat = log_mel(load_clip(path), self.frontend)
            feat.setflags(write=False)
            with self._lock:
                feat = self._cache.setdefault(path, feat)
        return feat

    def batch(self, entries) -> np.ndarray:
        return np.stack([self.get(e) for e in entries])

    def warm(self, entries=None, threads: int = 1) -> None:
        """Precompute features, optionally on a thread pool."""
        entries = list(self.manifest.entries if entries is None else entries)
        if threads <= 1:
            for e in entries:
                self.get(e)
            return
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(self.get, entries))
