"""Variance-preserving diffusion for the Euclidean modalities.

Lattices are encoded as 6-vectors (log lengths, tan-shifted angles) so the
Gaussian kernel N(alpha_t x_0, sigma2_t I) acts on an unconstrained space;
atom types are one-hot vectors or analog bits under the same kernel.  The
Euclidean clock runs over [0, 1] with a linear beta schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VpSchedule:
    """Linear beta schedule; alpha(t)^2 + sigma2(t) = 1 for all t."""

    beta_min: float = 0.1
    beta_max: float = 20.0

    def beta(self, t):
        t = np.asarray(t, dtype=float)
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def int_beta(self, t):
        t = np.asarray(t, dtype=float)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t

    def alpha(self, t):
        return np.exp(-0.5 * self.int_beta(t))

    def sigma2(self, t):
        return -np.expm1(-self.int_beta(t))

    def sigma(self, t):
        return np.sqrt(self.sigma2(t))


def vp_sample(x0, t, sched: VpSchedule, rng: np.random.Generator):
    """Draw x_t = alpha(t) x0 + sigma(t) eps with eps standard normal."""
    x0 = np.asarray(x0, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    eps = rng.standard_normal(x0.shape)
    return sched.alpha(t) * x0 + sched.sigma(t) * eps, eps


def lattice_encode(lengths, angles) -> np.ndarray:
    """(log a, log b, log c, tan(alpha - pi/2), ...) in a 6-vector."""
    lengths = np.asarray(lengths, dtype=float)
    angles = np.asarray(angles, dtype=float)
    if lengths.shape[-1] != 3 or angles.shape[-1] != 3:
        raise ValueError("lengths and angles must have 3 components each")
    if np.any(lengths <= 0.0) or not np.all(np.isfinite(lengths)):
        raise ValueError("lengths must be positive and finite")
    if np.any(angles <= 0.0) or np.any(angles >= np.pi):
        raise ValueError("angles must lie in (0, pi)")
    return np.concatenate([np.log(lengths), np.tan(angles - 0.5 * np.pi)], axis=-1)


def lattice_decode(encoded):
    """Inverse of :func:`lattice_encode`; returns (lengths, angles)."""
    encoded = np.asarray(encoded, dtype=float)
    if encoded.shape[-1] != 6:
        raise ValueError("encoded lattice must have 6 components")
    if not np.all(np.isfinite(encoded)):
        raise ValueError("encoded lattice must be finite")
    lengths = np.exp(encoded[..., :3])
    angles = np.arctan(encoded[..., 3:]) + 0.5 * np.pi
    return lengths, angles


@dataclass(frozen=True)
class Standardizer:
    """Per-coordinate affine map fitted on encoded lattices (x0 mode)."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, encoded: np.ndarray) -> "Standardizer":
        encoded = np.asarray(encoded, dtype=float)
        if encoded.ndim != 2:
            raise ValueError("expected a (n, 6) batch of encoded lattices")
        std = encoded.std(axis=0)
        if np.any(std <= 0.0):
            raise ValueError("degenerate coordinate: zero variance in the training lattices")
        return cls(mean=encoded.mean(axis=0), std=std)

    @classmethod
    def identity(cls, dim: int = 6) -> "Standardizer":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean


def score_param_convert(out, x_t, t, sched: VpSchedule, mode: str,
                        standardizer: Standardizer | None = None):
    """Convert a network head to an eps-prediction.

    mode "eps" passes through; mode "x0" treats `out` as the standardized
    clean value and inverts the kernel: eps = (x_t - alpha(t) x0) / sigma(t).
    """
    out = np.asarray(out, dtype=float)
    if mode == "eps":
        return out
    if mode != "x0":
        raise ValueError(f"unknown parameterization mode: {mode!r}")
    t = np.asarray(t, dtype=float)
    if np.any(t == 0.0):
        raise ValueError("x0 mode is undefined at t = 0 (sigma = 0)")
    x0 = standardizer.invert(out) if standardizer is not None else out
    return (np.asarray(x_t, dtype=float) - sched.alpha(t) * x0) / sched.sigma(t)


# ---------------------------------------------------------------------------
# atom-type encodings


def one_hot_encode(species, num_species: int) -> np.ndarray:
    species = np.asarray(species)
    if np.any(species < 0) or np.any(species >= num_species):
        raise ValueError("species index out of range")
    out = np.zeros(species.shape + (num_species,))
    np.put_along_axis(out, species[..., None], 1.0, axis=-1)
    return out


def one_hot_decode(mat) -> np.ndarray:
    return np.argmax(np.asarray(mat, dtype=float), axis=-1)


def analog_bits_width(num_species: int) -> int:
    return max(1, int(np.ceil(np.log2(max(num_species, 2)))))


def analog_bits_encode(species, num_species: int) -> np.ndarray:
    """Binary expansion of the species index mapped to {-1, +1}."""
    species = np.asarray(species)
    if np.any(species < 0) or np.any(species >= num_species):
        raise ValueError("species index out of range")
    nbits = analog_bits_width(num_species)
    bits = (species[..., None] >> np.arange(nbits)) & 1
    return 2.0 * bits - 1.0


def analog_bits_decode(mat, num_species: int) -> np.ndarray:
    """Threshold at zero and clip indices that decode past the table."""
    bits = (np.asarray(mat, dtype=float) > 0.0).astype(int)
    idx = np.sum(bits << np.arange(bits.shape[-1]), axis=-1)
    return np.minimum(idx, num_species - 1)


def atom_type_loss_weight(mode: str) -> float:
    """Loss weight for the type channel: 20 for one-hot, 1 for analog bits."""
    if mode == "one-hot":
        return 20.0
    if mode == "analog-bits":
        return 1.0
    raise ValueError(f"unknown atom-type mode: {mode!r}")
