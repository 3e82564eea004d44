"""Per-layer scale vectors and Scale-Dropout.

A single Bernoulli bit ``d`` per layer and forward pass decides whether the
layer's learned scale vector is applied (``d = 1``) or replaced (``d = 0``).
The replacement depends on the variant: 1 (unitary), the mean of the scale
vector (average), or one uniform draw (random).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

SMALL_LAYER_RATE = 0.2
LARGE_LAYER_RATE = 0.5


class Variant(str, Enum):
    UNITARY = "unitary"
    AVERAGE = "average"
    RANDOM = "random"


@dataclass
class DropoutConfig:
    variant: Variant = Variant.UNITARY
    p: list[float] = field(default_factory=list)
    random_low: float = 0.5
    random_high: float = 1.5

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.p = [float(v) for v in self.p]
        for v in self.p:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"dropout probability {v} outside [0, 1]")
        if self.random_low > self.random_high:
            raise ValueError("random_low must not exceed random_high")

    def rate(self, layer: int) -> float:
        return self.p[layer]

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "p": list(self.p),
                "random_low": self.random_low, "random_high": self.random_high}


@dataclass(frozen=True)
class DropoutMask:
    d: int
    # Replacement scale drawn for the random variant when d == 0.
    u: float | None = None


def sample_mask(p: float, rng: np.random.Generator) -> DropoutMask:
    """One Bernoulli(p) draw: 1 with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1]")
    return DropoutMask(int(rng.random() < p))


def draw_layer_mask(p: float, cfg: DropoutConfig, rng: np.random.Generator) -> DropoutMask:
    """Mask for one layer and pass, including the random variant's replacement value."""
    mask = sample_mask(p, rng)
    if mask.d == 0 and cfg.variant is Variant.RANDOM:
        return DropoutMask(0, float(rng.uniform(cfg.random_low, cfg.random_high)))
    return mask


def effective_scale(alpha: np.ndarray, mask: DropoutMask, cfg: DropoutConfig) -> np.ndarray:
    """The per-channel multiplier actually applied for ``mask``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if mask.d == 1:
        return alpha
    if cfg.variant is Variant.UNITARY:
        return np.ones_like(alpha)
    if cfg.variant is Variant.AVERAGE:
        return np.full_like(alpha, alpha.mean())
    if mask.u is None:
        raise ValueError("random variant needs a replacement value in the mask")
    return np.full_like(alpha, mask.u)


def apply_scale(z: np.ndarray, alpha: np.ndarray, mask: DropoutMask, cfg: DropoutConfig) -> np.ndarray:
    """Multiply the weighted sums ``z`` (channels last) by the effective scale."""
    if z.shape[-1] != len(alpha):
        raise ValueError(f"z has {z.shape[-1]} channels, scale vector has {len(alpha)}")
    if mask.d == 0 and cfg.variant is Variant.UNITARY:
        return z
    return z * effective_scale(alpha, mask, cfg)


def adaptive_rates(layer_param_counts: Sequence[int]) -> list[float]:
    """Layer-dependent rates: 0.5 at or above the median parameter count, else 0.2."""
    counts = np.asarray(list(layer_param_counts), dtype=np.float64)
    if counts.size == 0:
        raise ValueError("need at least one layer")
    if np.any(counts <= 0):
        raise ValueError("parameter counts must be positive")
    median = np.median(counts)
    return [LARGE_LAYER_RATE if c >= median else SMALL_LAYER_RATE for c in counts]


class CountingGenerator:
    """Wraps a Generator and counts ``random()`` calls (one per mask sample)."""

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self.mask_draws = 0

    def random(self, *args, **kwargs):
        self.mask_draws += 1
        return self._rng.random(*args, **kwargs)

    def __getattr__(self, name):
        return getattr(self._rng, name)
