"""Rotary position encoding and its long-context extension schemes.

A head of width d is read as d/2 adjacent lane pairs (h_0,h_1), (h_2,h_3), ...
Pair j at position m is rotated by the angle m * theta_j with
theta_j = base**(-2j/d), so low-j pairs spin fast and high-j pairs slowly.
Three schemes reshape those angles to reach contexts beyond the trained range:

* ``Pi``   -- linear position scaling: the index m is evaluated as m/alpha.
* ``Ntk``  -- base adjustment: the per-pair rates are recomputed from a
  larger base frequency.
* ``Yarn`` -- a per-pair blend of the two, selected by the pair's rotation
  wavelength, plus a temperature applied to attention logits.

Everything here is a pure float64 function of its inputs; values are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "RopeConfig",
    "Rope",
    "Pi",
    "Ntk",
    "Yarn",
    "RotaryVariant",
    "theta",
    "thetas",
    "pair_wavelength",
    "yarn_ramp_weight",
    "effective_rates",
    "effective_angle",
    "effective_angles",
    "rotate",
    "rotate_block",
    "yarn_attention_scale",
    "logit_scale",
    "default_yarn_temperature",
    "yarn_for_context",
]


@dataclass(frozen=True)
class RopeConfig:
    """Head geometry: even lane count per head plus the base frequency."""

    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even and >= 2, got {self.head_dim}")
        if not self.base > 1.0:
            raise ValueError(f"base must be > 1, got {self.base}")

    @property
    def pair_count(self) -> int:
        return self.head_dim // 2


@dataclass(frozen=True)
class Rope:
    """Plain rotary encoding with the configured base."""

    config: RopeConfig


@dataclass(frozen=True)
class Pi:
    """Position interpolation: every index m is evaluated as m / alpha."""

    config: RopeConfig
    alpha: float

    def __post_init__(self):
        if not self.alpha >= 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")


@dataclass(frozen=True)
class Ntk:
    """Base-frequency adjustment: pair rates recomputed from new_base."""

    config: RopeConfig
    new_base: float

    def __post_init__(self):
        if not self.new_base >= self.config.base:
            raise ValueError(
                f"new_base must be >= original base {self.config.base}, got {self.new_base}"
            )


@dataclass(frozen=True)
class Yarn:
    """Wavelength-ramped blend of interpolated and plain rotation rates.

    ``ramp_low`` and ``ramp_high`` are wavelength thresholds in tokens.
    A pair whose rotation wavelength 2*pi/theta_j is at most ramp_low keeps
    its plain rate (fast pairs carry fine-grained offsets); a pair whose
    wavelength is at least ramp_high is fully interpolated to theta_j/alpha;
    wavelengths in between blend linearly.  ``temperature`` divides the
    attention logits downstream (see :func:`yarn_attention_scale`).
    """

    config: RopeConfig
    alpha: float
    ramp_low: float
    ramp_high: float
    temperature: float

    def __post_init__(self):
        if not self.alpha >= 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if not self.ramp_low < self.ramp_high:
            raise ValueError(
                f"ramp_low must be < ramp_high, got {self.ramp_low} >= {self.ramp_high}"
            )
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


RotaryVariant = Union[Rope, Pi, Ntk, Yarn]


def theta(config: RopeConfig, j: int) -> float:
    """Rotation rate of pair j: base**(-2j/d), strictly decreasing in j."""
    if not 0 <= j < config.pair_count:
        raise IndexError(f"pair index {j} outside [0, {config.pair_count})")
    return float(config.base ** (-2.0 * j / config.head_dim))


def thetas(config: RopeConfig) -> np.ndarray:
    """All pair rates as a (d/2,) float64 vector."""
    j = np.arange(config.pair_count, dtype=np.float64)
    return config.base ** (-2.0 * j / config.head_dim)


def pair_wavelength(config: RopeConfig, j: int) -> float:
    """Tokens needed for pair j to complete one full rotation."""
    return 2.0 * math.pi / theta(config, j)


def yarn_ramp_weight(variant: Yarn, j: int) -> float:
    """Blend weight for pair j: 1 keeps the plain rate, 0 interpolates fully."""
    lam = pair_wavelength(variant.config, j)
    return float(_ramp_weights(variant, np.array([lam]))[0])


def _ramp_weights(variant: Yarn, wavelengths: np.ndarray) -> np.ndarray:
    w = (variant.ramp_high - wavelengths) / (variant.ramp_high - variant.ramp_low)
    return np.clip(w, 0.0, 1.0)


def effective_rates(variant: RotaryVariant) -> np.ndarray:
    """Per-pair angle-per-token rates after the variant's rescaling.

    For every variant the angle at position m is m * effective_rates()[j];
    ``Pi`` is the exception in how it is *computed* (the position index is
    divided instead, which is algebraically the same thing) -- see
    :func:`effective_angles`.
    """
    base_rates = thetas(variant.config)
    if isinstance(variant, Rope):
        return base_rates
    if isinstance(variant, Pi):
        return base_rates / variant.alpha
    if isinstance(variant, Ntk):
        j = np.arange(variant.config.pair_count, dtype=np.float64)
        return variant.new_base ** (-2.0 * j / variant.config.head_dim)
    if isinstance(variant, Yarn):
        wavelengths = 2.0 * math.pi / base_rates
        r = _ramp_weights(variant, wavelengths)
        return (1.0 - r) * (base_rates / variant.alpha) + r * base_rates
    raise TypeError(f"unknown rotary variant {type(variant).__name__}")


def effective_angle(variant: RotaryVariant, m: float, j: int) -> float:
    """Rotation angle applied to pair j at position m."""
    cfg = variant.config
    if not 0 <= j < cfg.pair_count:
        raise IndexError(f"pair index {j} outside [0, {cfg.pair_count})")
    if m < 0:
        raise ValueError(f"position must be non-negative, got {m}")
    if isinstance(variant, Pi):
        # Same code path as plain rotation at the scaled index, so the
        # Pi(alpha) at m == plain at m/alpha identity is exact.
        return (m / variant.alpha) * theta(cfg, j)
    return float(m * effective_rates(variant)[j])


def effective_angles(variant: RotaryVariant, positions: np.ndarray) -> np.ndarray:
    """Angles for every (position, pair), shape (n, d/2)."""
    positions = np.asarray(positions, dtype=np.float64)
    if isinstance(variant, Pi):
        return np.outer(positions / variant.alpha, thetas(variant.config))
    return np.outer(positions, effective_rates(variant))


def rotate(variant: RotaryVariant, h: np.ndarray, m: float) -> np.ndarray:
    """Rotate one hidden vector to position m.

    Pair j of the output is the plane rotation of (h_{2j}, h_{2j+1}) by
    the variant's angle; the result has the same norm as the input.
    """
    h = np.asarray(h, dtype=np.float64)
    d = variant.config.head_dim
    if h.shape != (d,):
        raise ValueError(f"expected vector of shape ({d},), got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("hidden vector has non-finite lanes")
    return rotate_block(variant, h[np.newaxis, :], np.array([m]))[0]


def rotate_block(
    variant: RotaryVariant,
    x: np.ndarray,
    positions: np.ndarray,
    inverse: bool = False,
) -> np.ndarray:
    """Rotate vectors at `positions` along the last two axes of x.

    x has shape (..., n, d); positions has shape (n,).  With inverse=True the
    rotation is undone, which is also the transpose map used when
    backpropagating through a rotation.
    """
    x = np.asarray(x, dtype=np.float64)
    d = variant.config.head_dim
    if x.shape[-1] != d:
        raise ValueError(f"last axis must be {d}, got {x.shape[-1]}")
    angles = effective_angles(variant, positions)  # (n, d/2)
    if inverse:
        angles = -angles
    cos = np.cos(angles)
    sin = np.sin(angles)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = odd * cos + even * sin
    return out


def yarn_attention_scale(variant: Yarn) -> float:
    """Multiplier applied to attention logits: the reciprocal temperature."""
    if not isinstance(variant, Yarn):
        raise TypeError(f"attention scale is defined for Yarn only, got {type(variant).__name__}")
    return 1.0 / variant.temperature


def logit_scale(variant: RotaryVariant) -> float:
    """Logit multiplier for any variant: 1 unless the variant carries a temperature."""
    if isinstance(variant, Yarn):
        return yarn_attention_scale(variant)
    return 1.0


def default_yarn_temperature(alpha: float) -> float:
    """Temperature schedule 1/t = 0.1*ln(alpha) + 1 for a given scale alpha."""
    if not alpha >= 1.0:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    return 1.0 / (0.1 * math.log(alpha) + 1.0)


def yarn_for_context(
    config: RopeConfig,
    alpha: float,
    context_length: int,
    temperature: float | None = None,
) -> Yarn:
    """Yarn with ramp cutoffs derived from a training context length.

    Pairs completing at least 32 rotations within the context keep their
    plain rate; pairs not completing a single rotation are fully
    interpolated.
    """
    if context_length < 32:
        raise ValueError(f"context_length must be >= 32, got {context_length}")
    if temperature is None:
        temperature = default_yarn_temperature(alpha)
    return Yarn(
        config=config,
        alpha=alpha,
        ramp_low=context_length / 32.0,
        ramp_high=float(context_length),
        temperature=temperature,
    )
