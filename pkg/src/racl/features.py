"""Frozen multi-layer feature extractor and adaptive layer aggregation.

The extractor stands in for a pretrained self-supervised encoder: it only
has to expose an L x T x D stack of layer outputs and never trains. The
aggregation gate is the trainable part: each layer is squeezed to a scalar
by global average pooling, a short 1-D convolution over those scalars
produces logits, and a sigmoid turns them into per-layer weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from racl.audio import AudioClip
from racl.errors import ConfigError
from racl.reconstruct import SpectrogramConfig, hann, mel_filterbank

LOG_FLOOR = 1e-5
# fixed affine map of log-mel values into roughly unit range
LOG_SHIFT = 4.0
LOG_SCALE = 4.0


@dataclass(frozen=True)
class FeatureStack:
    layers: np.ndarray  # (L, T, D)

    def __post_init__(self):
        if self.layers.ndim != 3:
            raise ValueError(f"feature stack must be L x T x D, got shape {self.layers.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.layers.shape


@dataclass(frozen=True)
class FrozenExtractor:
    """Seeded stack of tanh layers applied to log-mel frames."""

    projection: np.ndarray  # (mel_bins, D)
    weights: tuple[np.ndarray, ...]  # L x (D, D)
    biases: tuple[np.ndarray, ...]  # L x (D,)
    spec: SpectrogramConfig

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.spec.fft_size) // self.spec.hop + 1

    def log_mel(self, samples: np.ndarray) -> np.ndarray:
        n, hop = self.spec.fft_size, self.spec.hop
        idx = np.arange(n)[None, :] + hop * np.arange(self.n_frames(len(samples)))[:, None]
        mag = np.abs(np.fft.rfft(samples[idx] * hann(n), axis=1))
        mel = mag @ mel_filterbank(self.spec).T
        return (np.log(mel + LOG_FLOOR) + LOG_SHIFT) / LOG_SCALE

    def __call__(self, clip: AudioClip) -> FeatureStack:
        h = self.log_mel(clip.samples) @ self.projection
        out = np.empty((self.n_layers, h.shape[0], self.dim))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = np.tanh(h @ w + b)
            out[i] = h
        return FeatureStack(out)


@lru_cache(maxsize=4)
def build_extractor(seed: int, n_layers: int = 12, dim: int = 64,
                    spec: SpectrogramConfig = SpectrogramConfig()) -> FrozenExtractor:
    if n_layers < 1 or dim < 1:
        raise ConfigError("features.layers and features.dim must be positive")
    rng = np.random.default_rng([int(seed), 0x5EED])
    proj = rng.normal(0.0, 1.0 / math.sqrt(spec.mel_bins), (spec.mel_bins, dim))
    ws, bs = [], []
    for _ in range(n_layers):
        ws.append(rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, dim)))
        bs.append(rng.normal(0.0, 0.1, dim))
    for a in (proj, *ws, *bs):
        a.setflags(write=False)
    return FrozenExtractor(proj, tuple(ws), tuple(bs), spec)


def extract(clip: AudioClip, extractor_seed: int, L: int = 12, D: int = 64,
            spec: SpectrogramConfig = SpectrogramConfig()) -> FeatureStack:
    return build_extractor(extractor_seed, L, D, spec)(clip)


def gap(stack) -> np.ndarray:
    """Per-layer global average over time and feature axes; works on (..., L, T, D)."""
    layers = stack.layers if isinstance(stack, FeatureStack) else np.asarray(stack)
    return layers.mean(axis=(-2, -1))


def adaptive_kernel_size(L: int) -> int:
    if L < 1:
        raise ValueError("L must be >= 1")
    t = abs(math.log2(L) / 2.0 + 0.5)
    k = 2 * math.floor(t / 2.0) + 1  # nearest odd integer
    k = max(k, 3)
    cap = L if L % 2 else L - 1
    return min(k, cap)


def init_kernel(k: int, rng: np.random.Generator) -> np.ndarray:
    bound = 1.0 / math.sqrt(k)
    return rng.uniform(-bound, bound, k)


def _conv_same(z: np.ndarray, kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = kernel.shape[0]
    p = (k - 1) // 2
    L = z.shape[-1]
    zp = np.pad(z, [(0, 0)] * (z.ndim - 1) + [(p, p)])
    s = np.zeros(z.shape)
    for j in range(k):
        s += kernel[j] * zp[..., j : j + L]
    return s, zp


def _check_kernel(kernel: np.ndarray, L: int) -> None:
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"aggregation kernel length must be odd, got {k}")
    if k > L:
        raise ConfigError(f"aggregation kernel length {k} exceeds layer count {L}")


@dataclass
class AggregationState:
    descriptors: np.ndarray  # z, (..., L)
    kernel: np.ndarray
    logits: np.ndarray
    weights: np.ndarray  # omega, (..., L)
    padded: np.ndarray


def aggregate(stack, kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray, AggregationState]:
    """Sigmoid-gated sum of layers. Accepts one (L, T, D) stack or a batch (B, L, T, D)."""
    layers = stack.layers if isinstance(stack, FeatureStack) else np.asarray(stack)
    kernel = np.asarray(kernel, dtype=np.float64)
    _check_kernel(kernel, layers.shape[-3])
    z = gap(layers)
    s, zp = _conv_same(z, kernel)
    omega = 1.0 / (1.0 + np.exp(-s))
    agg = np.einsum("...l,...ltd->...td", omega, layers)
    return agg, omega, AggregationState(z, kernel, s, omega, zp)


def aggregate_backward(stack, state: AggregationState, grad_agg: np.ndarray,
                       need_stack_grad: bool = False) -> tuple[np.ndarray, np.ndarray | None]:
    """Gradients w.r.t. the kernel and (optionally) the layer stack."""
    layers = stack.layers if isinstance(stack, FeatureStack) else np.asarray(stack)
    k = state.kernel.shape[0]
    L = layers.shape[-3]
    T, D = layers.shape[-2], layers.shape[-1]
    grad_omega = np.einsum("...td,...ltd->...l", grad_agg, layers)
    grad_s = grad_omega * state.weights * (1.0 - state.weights)
    grad_kernel = np.array([np.sum(grad_s * state.padded[..., j : j + L]) for j in range(k)])
    if not need_stack_grad:
        return grad_kernel, None
    p = (k - 1) // 2
    grad_zp = np.zeros(state.padded.shape)
    for j in range(k):
        grad_zp[..., j : j + L] += state.kernel[j] * grad_s
    grad_z = grad_zp[..., p : p + L]
    grad_layers = state.weights[..., :, None, None] * grad_agg[..., None, :, :]
    grad_layers = grad_layers + (grad_z / (T * D))[..., None, None]
    return grad_kernel, grad_layers
