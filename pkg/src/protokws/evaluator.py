"""Few-shot accuracy over seeded test episodes, and (N, K) sweeps."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .encoder import embed
from .features import FeatureStore
from .manifest import Entry, Manifest, ManifestError
from .protonet import compute_prototypes, predict, score
from .sampler import EVAL_STREAM, episode_at
from .trainer import Checkpoint


@dataclass(frozen=True)
class EvalConfig:
    n_way: int = 5
    k_shot: int = 1
    q_queries: int = 15
    episodes: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("n_way", "k_shot", "q_queries", "episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class EvalReport:
    config: EvalConfig
    per_episode: list[float] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.per_episode))

    @property
    def std_error(self) -> float:
        n = len(self.per_episode)
        if n < 2:
            return 0.0
        return float(np.std(self.per_episode, ddof=1) / np.sqrt(n))

    def row(self) -> str:
        c = self.config
        return f"{c.n_way},{c.k_shot},{self.mean_accuracy!r},{self.std_error!r},{c.episodes}"


REPORT_HEADER = "n_way,k_shot,mean_acc,std_err,episodes"


def format_reports(reports: Sequence[EvalReport], header_comment: str | None = None) -> str:
    lines = [] if header_comment is None else [f"# {header_comment}"]
    lines.append(REPORT_HEADER)
    lines += [r.row() for r in reports]
    return "\n".join(lines) + "\n"


def format_per_episode(report: EvalReport) -> str:
    lines = ["episode,accuracy"]
    lines += [f"{i},{a!r}" for i, a in enumerate(report.per_episode)]
    return "\n".join(lines) + "\n"


class CheckpointEmbedder:
    """Embeds manifest entries with a checkpoint, computing each clip once.

    All clips of the pool are embedded up front in manifest order so results
    do not depend on which episode first touches a clip.
    """

    def __init__(self, checkpoint: Checkpoint, pool: Manifest,
                 features: FeatureStore | None = None, chunk: int = 256):
        self.checkpoint = checkpoint
        self.features = features or FeatureStore(pool, checkpoint.frontend)
        entries = list(pool.entries)
        out = []
        for i in range(0, len(entries), chunk):
            x = self.features.batch(entries[i:i + chunk])
            out.append(embed(checkpoint.params, x))
        self._rows = {e.path: j for j, e in enumerate(entries)}
        self._emb = np.concatenate(out) if out else np.zeros((0, checkpoint.encoder.embed_dim))

    def __call__(self, entries: Sequence[Entry]) -> np.ndarray:
        return self._emb[[self._rows[e.path] for e in entries]]


Embedder = Callable[[Sequence[Entry]], np.ndarray]


def _as_embedder(model, pool: Manifest) -> Embedder:
    if isinstance(model, Checkpoint):
        return CheckpointEmbedder(model, pool)
    return model


def evaluate(model, pool: Manifest, cfg: EvalConfig = EvalConfig(),
             _embedder: Embedder | None = None) -> EvalReport:
    """Nearest-prototype accuracy over ``cfg.episodes`` test episodes.

    ``model`` is a Checkpoint or any callable mapping entries to an (n, D)
    embedding matrix.
    """
    emb_fn = _embedder or _as_embedder(model, pool)
    report = EvalReport(cfg)
    for e in range(cfg.episodes):
        ep = episode_at(pool, cfg.n_way, cfg.k_shot, cfg.q_queries,
                        cfg.seed, EVAL_STREAM, e, cfg.n_way, cfg.k_shot)
        zs = emb_fn([c for c, _ in ep.support])
        zq = emb_fn([c for c, _ in ep.query])
        bank = compute_prototypes(zs, list(ep.support_labels()))
        # Bank rows follow first appearance, which is 0..N-1 by construction.
        pred = predict(score(zq, bank))
        labels = np.asarray(bank.labels)[pred]
        report.per_episode.append(float(np.mean(labels == ep.query_labels())))
    return report


def sweep(model, pool: Manifest, ns: Sequence[int], ks: Sequence[int],
          base_cfg: EvalConfig = EvalConfig()) -> list[EvalReport]:
    """One report per (N, K), row-major over ns then ks."""
    emb_fn = _as_embedder(model, pool)
    return [evaluate(model, pool, replace(base_cfg, n_way=n, k_shot=k), _embedder=emb_fn)
            for n in ns for k in ks]


def relabel_for_language_id(manifest: Manifest) -> Manifest:
    """Replace every keyword by its language tag."""
    missing = [e.path for e in manifest if not e.language]
    if missing:
        raise ManifestError(f"missing language tag for {missing[0]}")
    return Manifest((Entry(e.path, e.language, e.language) for e in manifest), manifest.root)
