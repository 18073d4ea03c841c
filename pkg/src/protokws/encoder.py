"""Compact convolutional encoder with hand-written backward pass.

Each block is a 3x3 convolution (zero padding 1, stride 1 or 2), bias, ReLU
and a 2x2 max pool with floor semantics. The blocks are followed by global
average pooling and a linear head. Activations are kept channels-last,
shape (batch, height, width, channels); a spectrogram of shape
(frames, mels) is a one-channel image with height = frames.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .frontend import FrontendConfig, n_frames

DEFAULT_INPUT_SHAPE = (98, 64)
HEAD_INIT_GAIN = 0.1


@dataclass(frozen=True)
class Block:
    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class EncoderConfig:
    blocks: tuple[Block, ...] = (Block(16, 2), Block(32, 2), Block(64, 1), Block(64, 1))
    embed_dim: int = 64
    input_shape: tuple[int, int] = DEFAULT_INPUT_SHAPE

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, Block) else Block(*b) for b in self.blocks))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.validate()

    def validate(self) -> None:
        if not self.blocks:
            raise ValueError("encoder needs at least one block")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        for b in self.blocks:
            if b.out_channels < 1:
                raise ValueError("out_channels must be >= 1")
            if b.stride not in (1, 2):
                raise ValueError(f"stride must be 1 or 2, got {b.stride}")
        self.spatial_shapes(self.input_shape)

    def spatial_shapes(self, shape: tuple[int, int]) -> list[tuple[int, int]]:
        """Pooled (height, width) after each block; raises on collapse."""
        h, w = shape
        out = []
        for i, b in enumerate(self.blocks):
            h, w = -(-h // b.stride) // 2, -(-w // b.stride) // 2
            if h < 1 or w < 1:
                raise ValueError(f"spatial dims collapse to zero at block {i} for input {shape}")
            out.append((h, w))
        return out

    @classmethod
    def for_frontend(cls, blocks=None, embed_dim: int = 64,
                     frontend: FrontendConfig = FrontendConfig(), clip_len: int = 16000):
        shape = (n_frames(clip_len, frontend.win_len, frontend.hop_len), frontend.n_mels)
        kw = {} if blocks is None else {"blocks": tuple(blocks)}
        return cls(embed_dim=embed_dim, input_shape=shape, **kw)


class EncoderParams:
    """Named float64 arrays in declaration order.

    Order: conv0.w, conv0.b, conv1.w, conv1.b, ..., head.w, head.b.
    Conv kernels have shape (out, in, 3, 3); head.w has shape (channels, D).
    """

    def __init__(self, config: EncoderConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = {name: np.asarray(arrays[name], dtype=np.float64)
                       for name in param_names(config)}
        for name, shape in param_shapes(config).items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name} has shape {self.arrays[name].shape}, expected {shape}")

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    def copy(self) -> EncoderParams:
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())

    def equals(self, other: EncoderParams) -> bool:
        return (self.config == other.config and
                all(np.array_equal(self[k], other[k]) for k in self.arrays))


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c_in = 1
    for i, b in enumerate(cfg.blocks):
        shapes[f"conv{i}.w"] = (b.out_channels, c_in, 3, 3)
        shapes[f"conv{i}.b"] = (b.out_channels,)
        c_in = b.out_channels
    shapes["head.w"] = (c_in, cfg.embed_dim)
    shapes["head.b"] = (cfg.embed_dim,)
    return shapes


def param_names(cfg: EncoderConfig) -> list[str]:
    return list(param_shapes(cfg))


def init_params(cfg: EncoderConfig, seed: int) -> EncoderParams:
    """He-normal kernels (std sqrt(2 / (9 * in_channels))), zero biases.

    The head uses std HEAD_INIT_GAIN * sqrt(1 / channels) so that initial
    squared distances are O(1) and the episode softmax starts unsaturated.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        elif name == "head.w":
            arrays[name] = rng.standard_normal(shape) * (HEAD_INIT_GAIN / np.sqrt(shape[0]))
        else:
            fan_in = 9 * shape[1]
            arrays[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return EncoderParams(cfg, arrays)


def zero_params(cfg: EncoderConfig) -> EncoderParams:
    return EncoderParams(cfg, {k: np.zeros(s) for k, s in param_shapes(cfg).items()})


class StaleCacheError(RuntimeError):
    pass


@dataclass
class ActivationCache:
    params: EncoderParams
    layers: list = field(default_factory=list)
    pooled: np.ndarray | None = None
    final_hw: tuple[int, int] = (0, 0)
    consumed: bool = False


@dataclass
class _LayerCache:
    in_shape: tuple[int, ...]
    stride: int
    cols: np.ndarray       # im2col matrix, (B*Ho*Wo, C*9)
    conv_shape: tuple[int, ...]  # (B, Ho, Wo, O)
    preact: np.ndarray     # pooled pre-activations, (B, Hp, Wp, O)
    argmax: np.ndarray     # (B, Hp, Wp, O) uint8, offset within the row-major 2x2 window


def _im2col(x: np.ndarray, stride: int) -> tuple[np.ndarray, int, int]:
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    return win.reshape(b * ho * wo, c * 9), ho, wo


def _col2im(dcols: np.ndarray, in_shape, stride: int, ho: int, wo: int) -> np.ndarray:
    b, h, w, c = in_shape
    d = dcols.reshape(b, ho, wo, c, 3, 3)
    dxp = np.zeros((b, h + 2, w + 2, c))
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for kh in range(3):
        for kw in range(3):
            dxp[:, kh:kh + span_h:stride, kw:kw + span_w:stride, :] += d[..., kh, kw]
    return dxp[:, 1:-1, 1:-1, :]


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))   # row-major order inside a 2x2 window


def _windows(a: np.ndarray, hp: int, wp: int) -> np.ndarray:
    """View of the cropped map as (B, hp, 2, wp, 2, C)."""
    return a[:, :2 * hp, :2 * wp].reshape(a.shape[0], hp, 2, wp, 2, a.shape[3])


def _max_pool(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pool (floor on odd dims) and the winning offset per window.

    Strict comparisons keep the first offset in row-major order on ties.
    """
    v = _windows(a, a.shape[1] // 2, a.shape[2] // 2)
    out = v[:, :, 0, :, 0].copy()
    idx = np.zeros(out.shape, dtype=np.uint8)
    for k in (1, 2, 3):
        dh, dw = _POOL_OFFSETS[k]
        cand = v[:, :, dh, :, dw]
        better = cand > out
        np.maximum(out, cand, out=out)
        idx = np.where(better, np.uint8(k), idx)
    return out, idx


def _max_pool_backward(dout: np.ndarray, idx: np.ndarray, shape) -> np.ndarray:
    da = np.zeros(shape)
    v = _windows(da, idx.shape[1], idx.shape[2])
    for k, (dh, dw) in enumerate(_POOL_OFFSETS):
        v[:, :, dh, :, dw] = dout * (idx == k)
    return da


def _as_batch(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray) and batch.ndim == 3:
        x = batch.astype(np.float64, copy=False)
    else:
        items = [np.asarray(s, dtype=np.float64) for s in batch]
        if not items:
            raise ValueError("empty batch")
        shape = items[0].shape
        if any(s.shape != shape for s in items):
            raise ValueError("all spectrograms in a batch must share one shape")
        x = np.stack(items)
    if x.ndim != 3:
        raise ValueError(f"expected (batch, frames, mels), got shape {x.shape}")
    return x[..., None]


def forward(params: EncoderParams, batch) -> tuple[np.ndarray, ActivationCache]:
    """Embed a batch of spectrograms; returns (B, D) embeddings and a cache."""
    cfg = params.config
    x = _as_batch(batch)
    cfg.spatial_shapes(x.shape[1:3])
    cache = ActivationCache(params)
    for i, blk in enumerate(cfg.blocks):
        w = params[f"conv{i}.w"]
        in_shape = x.shape
        cols, ho, wo = _im2col(x, blk.stride)
        z = cols @ w.reshape(w.shape[0], -1).T
        z += params[f"conv{i}.b"]
        z = z.reshape(x.shape[0], ho, wo, w.shape[0])
        # max-pool and ReLU commute; pooling first halves the work. Ties still
        # resolve to the first offset and every all-non-positive window gets
        # zero gradient, exactly as with ReLU applied first.
        zmax, idx = _max_pool(z)
        x = np.maximum(zmax, 0.0)
        cache.layers.append(_LayerCache(in_shape, blk.stride, cols, z.shape, zmax, idx))
    cache.final_hw = x.shape[1:3]
    pooled = x.mean(axis=(1, 2))
    cache.pooled = pooled
    return pooled @ params["head.w"] + params["head.b"], cache


def embed(params: EncoderParams, batch, chunk: int = 256) -> np.ndarray:
    """Forward pass without keeping a cache, in fixed-size chunks."""
    x = _as_batch(batch)[..., 0]
    out = [forward(params, x[i:i + chunk])[0] for i in range(0, len(x), chunk)]
    return np.concatenate(out)


def backward(params: EncoderParams, cache: ActivationCache,
             grad_embeddings) -> dict[str, np.ndarray]:
    """Gradients of sum(embeddings * grad_embeddings) w.r.t. every parameter."""
    if cache.params is not params:
        raise StaleCacheError("cache was produced with different parameters")
    if cache.consumed:
        raise StaleCacheError("cache already consumed by a previous backward call")
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.shape != (cache.pooled.shape[0], params.config.embed_dim):
        raise ValueError(f"grad_embeddings shape {g.shape} does not match the forward batch")
    cache.consumed = True

    grads = {"head.w": cache.pooled.T @ g, "head.b": g.sum(axis=0)}
    hp, wp = cache.final_hw
    dpool = g @ params["head.w"].T
    dx = np.broadcast_to(dpool[:, None, None, :] / (hp * wp),
                         (g.shape[0], hp, wp, dpool.shape[1]))

    for i in range(len(cache.layers) - 1, -1, -1):
        lc = cache.layers[i]
        b, ho, wo, o = lc.conv_shape
        dz = _max_pool_backward(dx * (lc.preact > 0), lc.argmax, lc.conv_shape)
        dz_flat = dz.reshape(-1, o)
        w = params[f"conv{i}.w"]
        grads[f"conv{i}.w"] = (dz_flat.T @ lc.cols).reshape(w.shape)
        grads[f"conv{i}.b"] = dz_flat.sum(axis=0)
        if i > 0:
            dcols = dz_flat @ w.reshape(o, -1)
            dx = _col2im(dcols, lc.in_shape, lc.stride, ho, wo)
    return {name: grads[name] for name in params.names()}


def activation_pattern(cache: ActivationCache) -> list[np.ndarray]:
    """ReLU signs and max-pool winners; fixed pattern means locally smooth."""
    out = []
    for lc in cache.layers:
        out.append(lc.preact > 0)
        out.append(lc.argmax)
    return out


def same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    one_sided: int = 0
    skipped: int = 0
    worst_param: str = ""


def finite_difference_check(params: EncoderParams,
                            objective: Callable[[EncoderParams], tuple[float, list]],
                            analytic: dict[str, np.ndarray], eps: float = 1e-4) -> GradCheckReport:
    """Compare ``analytic`` to finite differences of ``objective`` on every coordinate.

    ``objective`` returns (value, activation pattern). With a fixed
    ReLU/max-pool pattern the encoder output is affine in any single
    parameter, so when one side of the central stencil crosses a kink the
    other side's one-sided difference is used; coordinates with kinks on
    both sides are skipped and counted. ``params`` is perturbed in place
    and restored.
    """
    f0, base = objective(params)
    report = GradCheckReport(0.0, params.n_params())
    for name in params.names():
        flat = params.arrays[name].reshape(-1)
        ga = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp, pat_p = objective(params)
            flat[j] = orig - eps
            fm, pat_m = objective(params)
            flat[j] = orig
            ok_p, ok_m = same_pattern(base, pat_p), same_pattern(base, pat_m)
            if ok_p and ok_m:
                num = (fp - fm) / (2 * eps)
            elif ok_p:
                num = (fp - f0) / eps
                report.one_sided += 1
            elif ok_m:
                num = (f0 - fm) / eps
                report.one_sided += 1
            else:
                report.skipped += 1
                continue
            err = abs(ga[j] - num) / max(abs(ga[j]), abs(num), 1e-8)
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst_param = f"{name}[{j}]"
    return report


def grad_check_report(cfg: EncoderConfig, seed: int, eps: float = 1e-4, batch_size: int = 2,
                      grad_transform: Callable[[dict], dict] | None = None) -> GradCheckReport:
    """Backward vs finite differences for the objective sum(forward(x) * G).

    x and G are random; biases get small random values so the check does
    not sit on zero-bias symmetries. ``grad_transform`` lets callers
    corrupt the analytic gradients to exercise the harness.
    """
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    for name in params.names():
        if name.endswith(".b"):
            params.arrays[name] = 0.1 * rng.standard_normal(params[name].shape)
    x = rng.standard_normal((batch_size,) + tuple(cfg.input_shape))
    gmat = rng.standard_normal((batch_size, cfg.embed_dim))

    emb, cache = forward(params, x)
    analytic = backward(params, cache, gmat)
    if grad_transform is not None:
        analytic = grad_transform(analytic)

    def objective(p):
        e, c = forward(p, x)
        return float(np.sum(e * gmat)), activation_pattern(c)

    return finite_difference_check(params, objective, analytic, eps)


def grad_check(cfg: EncoderConfig, seed: int, eps: float = 1e-4, batch_size: int = 2,
               grad_transform: Callable[[dict], dict] | None = None) -> float:
    """Max relative error |a - n| / max(|a|, |n|, 1e-8) of backward vs finite differences."""
    return grad_check_report(cfg, seed, eps, batch_size, grad_transform).max_rel_error
