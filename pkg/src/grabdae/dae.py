"""Denoising auto-encoder over pooled feature vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Tensor


@dataclass
class CorruptionSpec:
    v_min: float = 0.1
    v_max: float = 0.5
    noise_sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.v_min <= self.v_max <= 1.0:
            raise ValueError(f"need 0 <= v_min <= v_max <= 1, got {self.v_min}, {self.v_max}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class DaeParams:
    W: Tensor  # [d, h]
    b: Tensor  # [h]
    W_dec: Tensor  # [h, d]
    b_dec: Tensor  # [d]

    @classmethod
    def init(cls, d: int, h: int | None, rng: np.random.Generator) -> "DaeParams":
        h = h or max(1, d // 2)
        if h > d:
            raise ValueError(f"bottleneck width {h} exceeds input width {d}")
        return cls(
            nn.parameter(nn.kaiming_uniform((d, h), d, rng), "dae.W"),
            nn.parameter(np.zeros(h), "dae.b"),
            nn.parameter(rng.uniform(-1, 1, (h, d)) / np.sqrt(h), "dae.W_dec"),
            nn.parameter(np.zeros(d), "dae.b_dec"),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"dae.W": self.W, "dae.b": self.b, "dae.W_dec": self.W_dec, "dae.b_dec": self.b_dec}


def corruption_noise(shape: tuple[int, ...], spec: CorruptionSpec, rng: np.random.Generator,
                     scale=1.0) -> np.ndarray:
    """Additive noise for a batch of feature rows (or a single vector).

    Each row draws its own ratio ``v ~ U(v_min, v_max)`` and perturbs
    ``floor(v * d)`` distinct components with N(0, (noise_sigma*scale)^2);
    every other entry of the returned array is exactly zero.
    """
    single = len(shape) == 1
    rows, d = (1, shape[0]) if single else shape
    if d < 1:
        raise ValueError("feature vectors need at least one component")
    noise = np.zeros((rows, d), dtype=np.float64)
    sigma = spec.noise_sigma * np.broadcast_to(np.asarray(scale, dtype=np.float64), (d,))
    for r in range(rows):
        v = rng.uniform(spec.v_min, spec.v_max)
        m = int(np.floor(v * d))
        if m == 0:
            continue
        idx = rng.choice(d, size=m, replace=False)
        noise[r, idx] = rng.normal(0.0, 1.0, size=m) * sigma[idx]
    return noise[0] if single else noise


def corrupt(x: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """Corrupted copy of a feature vector; untouched components stay bit-identical."""
    x = np.asarray(x)
    noise = corruption_noise(x.shape, spec, rng)
    out = x.copy()
    hit = noise != 0
    out[hit] = (x[hit] + noise[hit]).astype(x.dtype)
    return out


def _batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 1:
        return nn.reshape(x, (1, -1)), True
    return x, False


def encode(x: Tensor, params: DaeParams) -> Tensor:
    """ReLU(x W + b); accepts [d] or [N, d]."""
    xb, single = _batch(x)
    y = nn.relu(nn.linear(xb, params.W, params.b))
    return nn.reshape(y, (y.shape[1],)) if single else y


def decode(y: Tensor, params: DaeParams) -> Tensor:
    """Identity-activated affine map y W_dec + b_dec."""
    yb, single = _batch(y)
    z = nn.linear(yb, params.W_dec, params.b_dec)
    return nn.reshape(z, (z.shape[1],)) if single else z


def reconstruction_loss(x_clean: Tensor, z: Tensor) -> Tensor:
    """Mean squared error between clean features and their reconstruction."""
    return nn.mse_loss(x_clean, z)
