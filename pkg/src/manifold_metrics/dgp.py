"""Seeded data-generating processes: two moons and the embedded 10-D torus."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoders import TorusDecoder
from .errors import UsageError

NORMALIZATION_SAMPLES = 100_000


@dataclass
class TwoMoonsConfig:
    n_samples: int = 10_000
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise UsageError("n_samples must be >= 1")
        if self.noise < 0:
            raise UsageError("noise must be >= 0")


def sample_two_moons(config: TwoMoonsConfig) -> np.ndarray:
    """Two interleaved half circles.

    Outer moon: ``(cos t, sin t)`` for ``t`` evenly spaced in ``[0, pi]``.
    Inner moon: ``(1 - cos t, 0.5 - sin t)``.  Rows are shuffled and
    isotropic Gaussian noise of the configured standard deviation is added.
    """
    n = config.n_samples
    n_out = n // 2
    n_in = n - n_out
    t_out = np.linspace(0.0, np.pi, n_out)
    t_in = np.linspace(0.0, np.pi, n_in)
    x = np.concatenate([
        np.stack([np.cos(t_out), np.sin(t_out)], axis=1),
        np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1),
    ])
    rng = np.random.default_rng(config.seed)
    x = x[rng.permutation(n)]
    if config.noise > 0:
        x = x + config.noise * rng.standard_normal(x.shape)
    return x


def two_moons_arc_distance(x) -> np.ndarray:
    """Distance of each point to the nearer of the two noiseless arcs."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))

    def arc(p, center, upper):
        d = p - center
        ang = np.arctan2(d[:, 1], d[:, 0])
        on_arc = (ang >= 0) if upper else (ang <= 0)
        radial = np.abs(np.hypot(d[:, 0], d[:, 1]) - 1.0)
        ends = center + np.array([[1.0, 0.0], [-1.0, 0.0]])
        end_dist = np.min(np.linalg.norm(p[:, None, :] - ends[None], axis=2), axis=1)
        return np.where(on_arc, radial, end_dist)

    return np.minimum(arc(x, np.array([0.0, 0.0]), True), arc(x, np.array([1.0, 0.5]), False))


def _default_sigma(amplitude: float, n: int) -> np.ndarray:
    return amplitude * np.exp(-np.linspace(0.0, 1.5, n))


@dataclass
class TorusDatasetConfig:
    n_samples: int = 10_000
    seed: int = 0
    rotation_seed: int = 1234
    n_pairs: int = 10
    sigma_phi_override: list | None = field(default=None)
    sigma_r_override: list | None = field(default=None)
    normalize: bool = True

    def __post_init__(self):
        if self.n_samples < 1:
            raise UsageError("n_samples must be >= 1")
        for name in ("sigma_phi", "sigma_r"):
            s = getattr(self, name)()
            if s.size != self.n_pairs or np.any(s <= 0) or np.any(np.diff(s) >= 0):
                raise UsageError(f"{name} must hold {self.n_pairs} positive, strictly decreasing values")

    @property
    def dim(self) -> int:
        return 2 * self.n_pairs

    def sigma_phi(self) -> np.ndarray:
        if self.sigma_phi_override is not None:
            return np.asarray(self.sigma_phi_override, dtype=np.float64)
        return _default_sigma(0.07 * 2.0 * np.pi, self.n_pairs)

    def sigma_r(self) -> np.ndarray:
        if self.sigma_r_override is not None:
            return np.asarray(self.sigma_r_override, dtype=np.float64)
        return _default_sigma(0.05, self.n_pairs)


def make_random_rotation(dim: int, seed: int) -> np.ndarray:
    """Orthogonal matrix from the Householder QR of a seeded Gaussian matrix.

    Column signs follow ``diag(R)`` so the result is Haar distributed and
    fully determined by the seed.
    """
    g = np.random.default_rng(seed).standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def torus_decoder(config: TorusDatasetConfig) -> TorusDecoder:
    """Ground-truth decoder with frozen rotation and normalization.

    The normalization centres every coordinate and divides by one global
    scale (root mean coordinate variance), estimated from a fixed batch of
    prior samples drawn with the rotation seed.
    """
    rot = make_random_rotation(config.dim, config.rotation_seed)
    raw = TorusDecoder(config.sigma_phi(), config.sigma_r(), rot)
    if not config.normalize:
        return raw
    z = np.random.default_rng(config.rotation_seed + 1).standard_normal((NORMALIZATION_SAMPLES, config.dim))
    x = raw.decode(z)
    shift = x.mean(axis=0)
    scale = float(np.sqrt(np.mean(x.var(axis=0))))
    return TorusDecoder(config.sigma_phi(), config.sigma_r(), rot, shift, scale)


def sample_torus(config: TorusDatasetConfig) -> tuple[np.ndarray, np.ndarray, TorusDecoder]:
    """Draw ``z ~ N(0, I)`` and push it through the ground-truth decoder.

    Returns ``(x, z_gt, decoder)`` with ``decoder.decode(z_gt) == x``.
    """
    dec = torus_decoder(config)
    z = np.random.default_rng(config.seed).standard_normal((config.n_samples, config.dim))
    return dec.decode(z), z, dec
