"""Speaker-embedding encoder: a small convolutional net with exact gradients.

The network maps log-mel features [frames x n_mels] to a fixed-size
embedding: a stack of 3x3/stride-1 ReLU convolutions (optionally followed
by 2x2 average pooling), temporal mean+std statistics pooling, and a final
linear map. Everything is float64 and hand-differentiated; `backward`
returns the exact input gradient that the perturbation loop consumes.

Convolutions pad circularly along time and with zeros along frequency.
Circular time padding makes the embedding exactly invariant to tiling a
signal an integer number of times (when pooling is disabled), matching
what statistics pooling is meant to provide.

Embeddings are plain 1-D float64 arrays; they are deliberately NOT
length-normalized here, the cosine loss normalizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensorfile
from .spectral import MelFeatures

NORM_EPS = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    """Layer plan of the encoder.

    conv_channels lists output channels per 3x3 conv layer; pool_after
    names the layers followed by 2x2 average pooling. min_frames declares
    the shortest input the configuration guarantees to survive pooling.

    The default keeps the first layers narrow on purpose: a wide random
    conv averages over many independent filters and yields embeddings
    that barely move under small input perturbations, while a narrow
    bottleneck behaves like a trained encoder in the one respect that
    matters here, namely sensitivity to targeted changes of its input.
    """

    conv_channels: tuple[int, ...] = (2, 4)
    pool_after: tuple[int, ...] = (0, 1)
    embed_dim: int = 128
    n_mels: int = 64
    min_frames: int = 4

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "pool_after", tuple(int(i) for i in self.pool_after))
        if len(self.conv_channels) < 1:
            raise ValueError("need at least one conv layer")
        if any(c < 1 for c in self.conv_channels):
            raise ValueError(f"conv channel counts must be positive: {self.conv_channels}")
        if self.embed_dim < 2:
            raise ValueError(f"embed_dim must be >= 2, got {self.embed_dim}")
        bad = [i for i in self.pool_after if not 0 <= i < len(self.conv_channels)]
        if bad:
            raise ValueError(f"pool_after indices {bad} out of range")
        t, f = self.min_frames, self.n_mels
        for i in range(len(self.conv_channels)):
            if i in self.pool_after:
                t, f = t // 2, f // 2
        if t < 1 or f < 1:
            raise ValueError(
                f"min_frames={self.min_frames} / n_mels={self.n_mels} pool down to"
                f" {t}x{f}; the pooled map must keep at least one step"
            )

    @property
    def stats_dim(self) -> int:
        """Length of the pooled mean+std vector feeding the linear map."""
        f = self.n_mels
        for i in range(len(self.conv_channels)):
            if i in self.pool_after:
                f //= 2
        return 2 * self.conv_channels[-1] * f

    def to_dict(self) -> dict:
        return {
            "conv_channels": list(self.conv_channels),
            "pool_after": list(self.pool_after),
            "embed_dim": self.embed_dim,
            "n_mels": self.n_mels,
            "min_frames": self.min_frames,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            conv_channels=tuple(d["conv_channels"]),
            pool_after=tuple(d["pool_after"]),
            embed_dim=int(d["embed_dim"]),
            n_mels=int(d["n_mels"]),
            min_frames=int(d["min_frames"]),
        )


def _tensor_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, c_out in enumerate(cfg.conv_channels):
        shapes[f"conv{i}.kernel"] = (c_out, c_in, 3, 3)
        shapes[f"conv{i}.bias"] = (c_out,)
        c_in = c_out
    shapes["embed.weight"] = (cfg.embed_dim, cfg.stats_dim)
    shapes["embed.bias"] = (cfg.embed_dim,)
    return shapes


@dataclass
class WeightStore:
    """Immutable-by-convention bundle of named tensors plus their config."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray]
    format_version: int = tensorfile.FORMAT_VERSION

    def __post_init__(self):
        expected = _tensor_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise ValueError(f"weight store is missing tensor {name!r}")
            got = self.tensors[name].shape
            if got != shape:
                raise ValueError(f"tensor {name!r} has shape {got}, config implies {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise ValueError(f"tensor {name!r} contains non-finite values")
        extra = set(self.tensors) - set(expected)
        if extra:
            raise ValueError(f"weight store has unexpected tensors {sorted(extra)}")


def init_random(cfg: EncoderConfig, seed: int) -> WeightStore:
    """He-style scaled uniform initialization, deterministic in the seed.

    Kernels and the linear map draw from U(-sqrt(6/fan_in), +sqrt(6/fan_in)),
    whose variance equals the He target 2/fan_in; biases start at zero.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    c_in = 1
    for i, c_out in enumerate(cfg.conv_channels):
        fan_in = c_in * 9
        bound = math.sqrt(6.0 / fan_in)
        tensors[f"conv{i}.kernel"] = rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3))
        tensors[f"conv{i}.bias"] = np.zeros(c_out)
        c_in = c_out
    bound = math.sqrt(6.0 / cfg.stats_dim)
    tensors["embed.weight"] = rng.uniform(-bound, bound, size=(cfg.embed_dim, cfg.stats_dim))
    tensors["embed.bias"] = np.zeros(cfg.embed_dim)
    return WeightStore(cfg, tensors)


def save_weights(ws: WeightStore, path) -> None:
    tensorfile.save(path, ws.tensors, meta={"kind": "encoder-weights", "config": ws.config.to_dict()})


def load_weights(path) -> WeightStore:
    tensors, meta = tensorfile.load(path)
    if meta.get("kind") != "encoder-weights" or "config" not in meta:
        raise tensorfile.TensorFileError(f"{path}: not an encoder weight file")
    return WeightStore(EncoderConfig.from_dict(meta["config"]), tensors)


def _conv_same(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """3x3 stride-1 convolution, circular along time, zero-padded along freq.

    x is [C_in, T, F], kernels [C_out, C_in, 3, 3]; output [C_out, T, F].
    """
    xp = np.concatenate([x[:, -1:, :], x, x[:, :1, :]], axis=1)
    xp = np.pad(xp, ((0, 0), (0, 0), (1, 1)))
    windows = sliding_window_view(xp, (3, 3), axis=(1, 2))  # [C_in, T, F, 3, 3]
    return np.tensordot(kernels, windows, axes=([1, 2, 3], [0, 3, 4]))


def _conv_same_input_grad(grad_out: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    # transposed conv = conv with channel-swapped, spatially flipped kernels;
    # valid because the padding geometry is symmetric under the flip
    flipped = np.flip(kernels, axis=(2, 3)).transpose(1, 0, 2, 3)
    return _conv_same(grad_out, np.ascontiguousarray(flipped))


def _avgpool2(x: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 mean pooling; trailing odd rows/cols are dropped."""
    c, t, f = x.shape
    t2, f2 = t // 2, f // 2
    if t2 < 1 or f2 < 1:
        raise ValueError(f"feature map {t}x{f} too small for 2x2 pooling")
    return x[:, : 2 * t2, : 2 * f2].reshape(c, t2, 2, f2, 2).mean(axis=(2, 4))


def _avgpool2_backward(grad: np.ndarray, unpooled_shape: tuple[int, ...]) -> np.ndarray:
    c, t, f = unpooled_shape
    t2, f2 = grad.shape[1], grad.shape[2]
    out = np.zeros(unpooled_shape)
    out[:, : 2 * t2, : 2 * f2] = np.repeat(np.repeat(grad, 2, axis=1), 2, axis=2) / 4.0
    return out


@dataclass
class ForwardCache:
    """Single-use record of everything `backward` needs."""

    store: WeightStore
    pre_acts: list[np.ndarray] = field(default_factory=list)
    relu_shapes: list[tuple[int, ...]] = field(default_factory=list)
    pooled: list[bool] = field(default_factory=list)
    centered: np.ndarray | None = None
    sigma: np.ndarray | None = None
    feat_shape: tuple[int, int] = (0, 0)


def forward(feat: MelFeatures, ws: WeightStore) -> tuple[np.ndarray, ForwardCache]:
    """Map features to an embedding; the cache enables exact backprop.

    Conv stack -> per-(channel, band) temporal mean and standard deviation,
    concatenated -> linear map. Raises if the input has fewer frames than
    the configured minimum.
    """
    cfg = ws.config
    values = feat.values
    n_frames, n_mels = values.shape
    if n_mels != cfg.n_mels:
        raise ValueError(f"features have {n_mels} mel bands, encoder expects {cfg.n_mels}")
    if n_frames < cfg.min_frames:
        raise ValueError(f"too few frames: {n_frames} < required {cfg.min_frames}")

    cache = ForwardCache(store=ws, feat_shape=(n_frames, n_mels))
    a = values[None, :, :]
    for i in range(len(cfg.conv_channels)):
        z = _conv_same(a, ws.tensors[f"conv{i}.kernel"])
        z += ws.tensors[f"conv{i}.bias"][:, None, None]
        r = np.maximum(z, 0.0)
        cache.pre_acts.append(z)
        cache.relu_shapes.append(r.shape)
        if i in cfg.pool_after:
            a = _avgpool2(r)
            cache.pooled.append(True)
        else:
            a = r
            cache.pooled.append(False)

    mu = a.mean(axis=1)  # [C, F]
    centered = a - mu[:, None, :]
    sigma = np.sqrt((centered**2).mean(axis=1))
    cache.centered = centered
    cache.sigma = sigma
    stats = np.concatenate([mu.ravel(), sigma.ravel()])
    embedding = ws.tensors["embed.weight"] @ stats + ws.tensors["embed.bias"]
    return embedding, cache


def backward(cache: ForwardCache, grad_embedding: np.ndarray) -> np.ndarray:
    """Exact gradient of `forward` with respect to the input features.

    The std-pooling branch takes subgradient zero wherever the temporal
    variance is exactly zero (constant activations).
    """
    ws = cache.store
    cfg = ws.config
    if grad_embedding.shape != (cfg.embed_dim,):
        raise ValueError(
            f"grad_embedding shape {grad_embedding.shape} does not match ({cfg.embed_dim},)"
        )
    d_stats = ws.tensors["embed.weight"].T @ grad_embedding
    c, t_pooled, f = cache.centered.shape
    d_mu = d_stats[: c * f].reshape(c, f)
    d_sigma = d_stats[c * f :].reshape(c, f)

    # d sigma / d a_t = centered_t / (T * sigma); zero where sigma == 0
    sig_term = np.zeros_like(d_sigma)
    denom = cache.sigma * t_pooled
    np.divide(d_sigma, denom, out=sig_term, where=denom > 0.0)
    d_a = d_mu[:, None, :] / t_pooled + sig_term[:, None, :] * cache.centered

    for i in reversed(range(len(cfg.conv_channels))):
        if cache.pooled[i]:
            d_r = _avgpool2_backward(d_a, cache.relu_shapes[i])
        else:
            d_r = d_a
        d_z = d_r * (cache.pre_acts[i] > 0.0)
        d_a = _conv_same_input_grad(d_z, ws.tensors[f"conv{i}.kernel"])
    return d_a[0]


def cosine_loss(e: np.ndarray, e_tilde: np.ndarray) -> float:
    """Negative cosine similarity: -1 for parallel vectors, +1 anti-parallel."""
    norm_e = float(np.linalg.norm(e))
    norm_t = float(np.linalg.norm(e_tilde))
    if norm_e <= NORM_EPS or norm_t <= NORM_EPS:
        raise ValueError(f"near-zero-norm embedding (norms {norm_e:.3e}, {norm_t:.3e})")
    return float(-(e @ e_tilde) / (norm_e * norm_t))


def cosine_loss_grad(e: np.ndarray, e_tilde: np.ndarray) -> np.ndarray:
    """Analytic gradient of `cosine_loss` with respect to e_tilde.

    e is held fixed (the reference embedding extracted once from the clean
    signal). The gradient is orthogonal to e_tilde: cosine is unchanged by
    rescaling, so the radial component vanishes.
    """
    norm_e = float(np.linalg.norm(e))
    norm_t = float(np.linalg.norm(e_tilde))
    if norm_e <= NORM_EPS or norm_t <= NORM_EPS:
        raise ValueError(f"near-zero-norm embedding (norms {norm_e:.3e}, {norm_t:.3e})")
    dot = float(e @ e_tilde)
    return -e / (norm_e * norm_t) + (dot / (norm_e * norm_t**3)) * e_tilde
