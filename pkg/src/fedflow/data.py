"""Seeded random streams and the 2D source/target samplers.

Every sampler returns a float64 array of shape ``(n, dim)``; component labels
are available through ``sample_labeled`` for the mixture-type distributions so
that client partitions can be built from them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence, Union

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the substream ``(seed, *key)``.

    Substreams are independent of creation order, so a client can derive its
    own stream for round ``r`` as ``make_rng(seed, client_id, r)`` without any
    shared state.
    """
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def as_points(x: Any, dim: int | None = None, name: str = "points") -> np.ndarray:
    """Validate ``x`` as a finite ``(B, d)`` float64 batch."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"{name}: expected a non-empty (B, d) batch, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ShapeError(f"{name}: expected dimension {dim}, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: batch contains non-finite entries")
    return arr


def gaussian_noise(dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if dim < 1 or n < 1:
        raise ValueError(f"gaussian_noise needs dim >= 1 and n >= 1, got dim={dim}, n={n}")
    return rng.standard_normal((n, dim))


def _check_n(n: int) -> None:
    if n < 1:
        raise ValueError(f"sample size must be >= 1, got {n}")


@dataclass(frozen=True)
class Gaussian:
    mean: Sequence[float] = (0.0, 0.0)
    var: Sequence[float] = (1.0, 1.0)

    def __post_init__(self):
        if len(self.mean) != len(self.var):
            raise ConfigError("Gaussian: mean and var must have the same length")
        if any(v <= 0 for v in self.var):
            raise ConfigError("Gaussian: variances must be positive")

    @property
    def dim(self) -> int:
        return len(self.mean)

    def sample_labeled(self, n, rng):
        _check_n(n)
        z = rng.standard_normal((n, self.dim))
        x = np.asarray(self.mean) + z * np.sqrt(np.asarray(self.var, dtype=np.float64))
        return x, np.zeros(n, dtype=np.int64)


@dataclass(frozen=True)
class EightGaussians:
    """Eight isotropic modes equally spaced on a circle, mode k at angle k*pi/4."""

    radius: float = 4.0
    std: float | None = None

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError("EightGaussians: radius must be positive")
        if self.std is not None and self.std <= 0:
            raise ConfigError("EightGaussians: std must be positive")

    dim = 2
    n_components = 8

    @property
    def sigma(self) -> float:
        return 0.1 * self.radius if self.std is None else self.std

    @property
    def centers(self) -> np.ndarray:
        ang = np.arange(8) * (np.pi / 4)
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def sample_labeled(self, n, rng):
        _check_n(n)
        labels = rng.integers(0, 8, size=n)
        x = self.centers[labels] + self.sigma * rng.standard_normal((n, 2))
        return x, labels


@dataclass(frozen=True)
class TwoMoons:
    """Two interleaving unit half-circles, centred at the origin then scaled.

    Label 0 is the upper moon, label 1 the lower one. Noise is added in the
    unit geometry, before scaling.
    """

    noise_std: float = 0.1
    scale: float = 3.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ConfigError("TwoMoons: noise_std must be non-negative")
        if self.scale <= 0:
            raise ConfigError("TwoMoons: scale must be positive")

    dim = 2
    n_components = 2

    def sample_labeled(self, n, rng):
        _check_n(n)
        labels = rng.integers(0, 2, size=n)
        theta = rng.uniform(0.0, np.pi, size=n)
        upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
        x = np.where(labels[:, None] == 0, upper, lower) - np.array([0.5, 0.25])
        x = x + self.noise_std * rng.standard_normal((n, 2))
        return self.scale * x, labels


@dataclass(frozen=True)
class UniformBox:
    low: Sequence[float] = (-1.0, -1.0)
    high: Sequence[float] = (1.0, 1.0)

    def __post_init__(self):
        if len(self.low) != len(self.high):
            raise ConfigError("UniformBox: low and high must have the same length")
        if any(lo >= hi for lo, hi in zip(self.low, self.high)):
            raise ConfigError("UniformBox: need low < high componentwise")

    @property
    def dim(self) -> int:
        return len(self.low)

    def sample_labeled(self, n, rng):
        _check_n(n)
        x = rng.uniform(np.asarray(self.low, float), np.asarray(self.high, float), size=(n, self.dim))
        return x, np.zeros(n, dtype=np.int64)


DistributionSpec = Union[Gaussian, EightGaussians, TwoMoons, UniformBox]

_KINDS = {
    "gaussian": Gaussian,
    "eight_gaussians": EightGaussians,
    "two_moons": TwoMoons,
    "uniform": UniformBox,
}


def sample(spec: DistributionSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    return spec.sample_labeled(n, rng)[0]


def distribution_from_dict(cfg: dict) -> DistributionSpec:
    """Build a distribution from ``{"kind": ..., **params}``."""
    cfg = dict(cfg)
    kind = cfg.pop("kind", None)
    if kind not in _KINDS:
        raise ConfigError(f"unknown distribution kind {kind!r}; expected one of {sorted(_KINDS)}")
    cls = _KINDS[kind]
    allowed = {f for f in cls.__dataclass_fields__}
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) for {kind}: {sorted(unknown)}")
    for k, v in cfg.items():
        if isinstance(v, list):
            cfg[k] = tuple(v)
    return cls(**cfg)


def distribution_to_dict(spec: DistributionSpec) -> dict:
    for name, cls in _KINDS.items():
        if type(spec) is cls:
            out: dict = {"kind": name}
            for f in cls.__dataclass_fields__:
                v = getattr(spec, f)
                out[f] = list(v) if isinstance(v, tuple) else v
            return out
    raise TypeError(f"not a distribution spec: {spec!r}")


# fixed two-client splits of the mixture targets
LOWER_LEFT_MODES = (3, 4, 5, 6)
UPPER_RIGHT_MODES = (7, 0, 1, 2)


def split_labels(spec: DistributionSpec) -> list[tuple[int, ...]]:
    """Component groups for the fixed two-client split of a mixture target."""
    if isinstance(spec, TwoMoons):
        return [(0,), (1,)]
    if isinstance(spec, EightGaussians):
        return [LOWER_LEFT_MODES, UPPER_RIGHT_MODES]
    raise ConfigError(f"no fixed split defined for {type(spec).__name__}")
