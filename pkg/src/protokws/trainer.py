"""Episodic training loop, Adam and encoder checkpoints."""

from __future__ import annotations

import json
import logging
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import (Block, EncoderConfig, EncoderParams, GradCheckReport, activation_pattern,
                      backward, finite_difference_check, forward, init_params, param_shapes)
from .features import FeatureStore
from .frontend import FrontendConfig
from .manifest import Manifest
from .protonet import episode_forward_backward
from .sampler import TRAIN_STREAM, episode_at

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PKWS"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_way: int = 10
    k_shot: int = 5
    q_queries: int = 10
    episodes: int = 2000
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        for name in ("n_way", "k_shot", "q_queries", "episodes", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> AdamState:
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()}, 0)


def adam_step(params: EncoderParams, grads: dict, state: AdamState,
              cfg: TrainConfig) -> tuple[EncoderParams, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name} at step {state.t + 1}")
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1, bc2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name in params.names():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        step = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        new_p[name] = params[name] - step
        new_m[name], new_v[name] = m, v
    return EncoderParams(params.config, new_p), AdamState(new_m, new_v, t)


# -- checkpoints ------------------------------------------------------------

class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: EncoderParams
    frontend: FrontendConfig = field(default_factory=FrontendConfig)

    @property
    def encoder(self) -> EncoderConfig:
        return self.params.config


def _config_json(enc: EncoderConfig, fe: FrontendConfig) -> bytes:
    doc = {
        "encoder": {
            "blocks": [[b.out_channels, b.stride] for b in enc.blocks],
            "embed_dim": enc.embed_dim,
            "input_shape": list(enc.input_shape),
        },
        "frontend": fe.to_dict(),
    }
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def encode_checkpoint(params: EncoderParams, frontend: FrontendConfig = FrontendConfig()) -> bytes:
    header = _config_json(params.config, frontend)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for a in params.arrays.values())
    return (CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header
            + struct.pack("<Q", params.n_params()) + body)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic: not an encoder checkpoint")
    if len(data) < 12:
        raise CheckpointError("truncation: checkpoint header cut short")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, expected {CKPT_VERSION}")
    pos = 12
    if pos + hlen + 8 > len(data):
        raise CheckpointError("truncation: checkpoint config block cut short")
    try:
        doc = json.loads(data[pos:pos + hlen].decode("utf-8"))
        enc = EncoderConfig(blocks=tuple(Block(*b) for b in doc["encoder"]["blocks"]),
                            embed_dim=doc["encoder"]["embed_dim"],
                            input_shape=tuple(doc["encoder"]["input_shape"]))
        fe = FrontendConfig(**doc["frontend"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint config: {exc}") from exc
    pos += hlen
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) - pos != count * 8:
        raise CheckpointError(
            f"truncation: expected {count * 8} parameter bytes, found {len(data) - pos}")
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
    arrays, off = {}, 0
    for name, shape in param_shapes(enc).items():
        n = int(np.prod(shape))
        arrays[name] = flat[off:off + n].reshape(shape).astype(np.float64)
        off += n
    if off != count:
        raise CheckpointError("parameter count does not match the stored encoder config")
    return Checkpoint(EncoderParams(enc, arrays), fe)


def save_checkpoint(params: EncoderParams, path, frontend: FrontendConfig = FrontendConfig()) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(params, frontend))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    loss: float
    acc: float
    wall_ms: float


@dataclass
class MetricsLog:
    records: list[EpisodeRecord] = field(default_factory=list)

    def append(self, rec: EpisodeRecord) -> None:
        if self.records and rec.episode <= self.records[-1].episode:
            raise ValueError("episode indices must increase")
        self.records.append(rec)

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def accuracies(self) -> np.ndarray:
        return np.array([r.acc for r in self.records])

    def to_csv(self, header_comment: str | None = None, timing: bool = True) -> str:
        lines = [] if header_comment is None else [f"# {header_comment}"]
        lines.append("episode,loss,acc,wall_ms")
        for r in self.records:
            ms = f"{r.wall_ms:.3f}" if timing else "0"
            lines.append(f"{r.episode},{r.loss!r},{r.acc!r},{ms}")
        return "\n".join(lines) + "\n"


def episode_step(params: EncoderParams, x: np.ndarray, support_y, query_y, n_way: int,
                 support_grad: bool = True):
    """Loss, in-episode accuracy and parameter gradients for one episode.

    ``x`` stacks support inputs first, then queries, as one forward batch.
    """
    n_sup = len(support_y)
    emb, cache = forward(params, x)
    res = episode_forward_backward(emb[:n_sup], support_y, emb[n_sup:], query_y, n_way)
    grad_s = res.grad_support if support_grad else np.zeros_like(res.grad_support)
    grads = backward(params, cache, np.concatenate([grad_s, res.grad_query]))
    return res.loss, res.accuracy, grads


def episode_grad_check(params: EncoderParams, x: np.ndarray, support_y, query_y,
                       n_way: int, eps: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of the episode loss w.r.t. every encoder parameter.

    The loss flows through the encoder, the prototype means (support branch)
    and the query scores.
    """
    params = params.copy()
    n_sup = len(support_y)
    _, _, analytic = episode_step(params, x, support_y, query_y, n_way)

    def objective(p):
        emb, cache = forward(p, x)
        res = episode_forward_backward(emb[:n_sup], support_y, emb[n_sup:], query_y, n_way)
        return res.loss, activation_pattern(cache)

    return finite_difference_check(params, objective, analytic, eps)


def train(data: Manifest, tcfg: TrainConfig = TrainConfig(),
          enc_cfg: EncoderConfig | None = None,
          frontend_cfg: FrontendConfig = FrontendConfig(),
          *, features: FeatureStore | None = None,
          out_dir: str | None = None,
          support_grad: bool = True,
          params: EncoderParams | None = None,
          progress_every: int = 0) -> tuple[EncoderParams, MetricsLog]:
    """Episodic ProtoNet training with one Adam step per episode.

    ``support_grad=False`` drops the gradient that flows back through the
    prototypes into the support embeddings; it exists only for fault
    injection experiments.
    """
    if enc_cfg is None:
        enc_cfg = EncoderConfig.for_frontend(frontend=frontend_cfg)
    if features is None:
        features = FeatureStore(data, frontend_cfg)
    if params is None:
        params = init_params(enc_cfg, tcfg.seed)
    state = AdamState.zeros_like(params)
    metrics = MetricsLog()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for e in range(tcfg.episodes):
        t0 = time.perf_counter()
        ep = episode_at(data, tcfg.n_way, tcfg.k_shot, tcfg.q_queries,
                        tcfg.seed, TRAIN_STREAM, e)
        x = features.batch(ep.clips())
        loss, acc, grads = episode_step(params, x, ep.support_labels(), ep.query_labels(),
                                        tcfg.n_way, support_grad)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at episode {e}")
        params, state = adam_step(params, grads, state, tcfg)
        metrics.append(EpisodeRecord(e, loss, acc, 1000.0 * (time.perf_counter() - t0)))
        if progress_every and (e + 1) % progress_every == 0:
            recent = metrics.records[-progress_every:]
            log.info("episode %d loss %.4f acc %.3f", e + 1,
                     np.mean([r.loss for r in recent]), np.mean([r.acc for r in recent]))
        if out_dir is not None and (e + 1) % tcfg.checkpoint_every == 0:
            if not params.all_finite():
                raise TrainingError(f"non-finite parameters at episode {e}")
            save_checkpoint(params, os.path.join(out_dir, f"ckpt_{e + 1:06d}.pkws"), frontend_cfg)

    if not params.all_finite():
        raise TrainingError("non-finite parameters after training")
    if out_dir is not None:
        save_checkpoint(params, os.path.join(out_dir, "final.pkws"), frontend_cfg)
    return params, metrics
