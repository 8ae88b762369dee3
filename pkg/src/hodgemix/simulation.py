"""Synthetic crowdsourced comparisons with planted random effects.

Randomness is split into independent streams so that each annotator's draws
do not depend on how many other annotators exist or in which order they are
generated:

* stream ``(0,)`` draws the true item scores ``theta*``;
* stream ``(1, u)`` draws everything about annotator ``u``, in this order:
  has-gamma flag, gamma value, has-delta flag, deviation scale ``s``, the
  ``delta^u`` entries, the sample count ``N^u``, the ``N^u`` ordered item
  pairs and the ``N^u`` noise terms.

All streams are PCG64 generators seeded from ``SeedSequence(seed, spawn_key)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.typing import NDArray

from .data import ComparisonDataset
from .errors import ConfigError

__all__ = [
    "SimulationConfig",
    "GroundTruth",
    "simulate",
    "plant_left_clickers",
    "plant_adversaries",
]


@dataclass(frozen=True)
class SimulationConfig:
    n_items: int = 30
    n_annotators: int = 500
    p1: float = 0.4
    p2: float = 0.4
    sigma_gamma: float = 0.2
    s_max: float = 0.3
    sigma_noise: float = 0.3
    n_min: int = 100
    n_max: int = 500
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.n_items < 2:
            raise ConfigError("need at least two items")
        if self.n_annotators < 1:
            raise ConfigError("need at least one annotator")
        for name in ("p1", "p2"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        for name in ("sigma_gamma", "s_max", "sigma_noise"):
            if not getattr(self, name) >= 0.0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigError("need 1 <= n_min <= n_max")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown simulation config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    theta_star: NDArray[np.float64]
    delta_star: NDArray[np.float64]  # (n_annotators, n_items), zero rows off-support
    gamma_star: NDArray[np.float64]
    delta_mask: NDArray[np.bool_]
    gamma_mask: NDArray[np.bool_]
    delta_scale: NDArray[np.float64]  # s per annotator, 0 off-support
    config: SimulationConfig = field(default_factory=SimulationConfig)

    def to_json(self) -> dict:
        return {
            "theta_star": self.theta_star.tolist(),
            "gamma_star": self.gamma_star.tolist(),
            "delta_star": {str(u): self.delta_star[u].tolist() for u in np.flatnonzero(self.delta_mask)},
            "delta_scale": {str(u): float(self.delta_scale[u]) for u in np.flatnonzero(self.delta_mask)},
            "masks": {
                "gamma": np.flatnonzero(self.gamma_mask).tolist(),
                "delta": np.flatnonzero(self.delta_mask).tolist(),
            },
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        config = SimulationConfig.from_dict(obj["config"])
        U, n = config.n_annotators, config.n_items
        delta = np.zeros((U, n))
        scale = np.zeros(U)
        for u, row in obj["delta_star"].items():
            delta[int(u)] = row
        for u, s in obj.get("delta_scale", {}).items():
            scale[int(u)] = s
        dmask = np.zeros(U, dtype=bool)
        dmask[obj["masks"]["delta"]] = True
        gmask = np.zeros(U, dtype=bool)
        gmask[obj["masks"]["gamma"]] = True
        return cls(np.array(obj["theta_star"]), delta, np.array(obj["gamma_star"]), dmask, gmask, scale, config)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def simulate(config: SimulationConfig | None = None) -> tuple[ComparisonDataset, GroundTruth]:
    """Draw a dataset from the mixed-effects model with Gaussian noise.

    Pairs are drawn uniformly with replacement among ordered pairs of
    distinct items, i.e. a uniform unordered pair with a fair coin for the
    presentation side.  Responses are continuous.
    """
    c = config or SimulationConfig()
    n, U = c.n_items, c.n_annotators
    theta = _stream(c.rng_seed, 0).standard_normal(n)

    delta = np.zeros((U, n))
    gamma = np.zeros(U)
    dmask = np.zeros(U, dtype=bool)
    gmask = np.zeros(U, dtype=bool)
    scale = np.zeros(U)
    cols: list[tuple[NDArray, ...]] = []
    for u in range(U):
        rng = _stream(c.rng_seed, 1, u)
        if rng.random() < c.p1:
            gmask[u] = True
            gamma[u] = rng.normal(0.0, c.sigma_gamma)
        if rng.random() < c.p2:
            dmask[u] = True
            scale[u] = rng.uniform(0.0, c.s_max)
            delta[u] = rng.normal(0.0, scale[u], size=n)
        N = int(rng.integers(c.n_min, c.n_max, endpoint=True))
        i = rng.integers(0, n, size=N)
        j = rng.integers(0, n - 1, size=N)
        j += j >= i
        noise = rng.normal(0.0, c.sigma_noise, size=N)
        score = theta + delta[u]
        y = score[i] - score[j] + gamma[u] + noise
        cols.append((np.full(N, u), i, j, y))

    a, i, j, y = (np.concatenate(col) for col in zip(*cols))
    ds = ComparisonDataset.from_arrays(a, i, j, y, n_items=n, n_annotators=U)
    return ds, GroundTruth(theta, delta, gamma, dmask, gmask, scale, c)


def plant_left_clickers(dataset: ComparisonDataset, annotators) -> ComparisonDataset:
    """Replace every response of ``annotators`` with ``+1`` (always the left item)."""
    mask = np.isin(dataset.annotator, np.asarray(annotators))
    return dataset.with_responses(np.where(mask, 1.0, dataset.y))


def plant_adversaries(
    dataset: ComparisonDataset,
    truth: GroundTruth,
    annotators,
    seed: int = 0,
) -> ComparisonDataset:
    """Make ``annotators`` answer with the common scores sign-flipped.

    Their responses become ``-(theta*_i - theta*_j) + noise`` (fresh noise
    at the simulation's noise level), i.e. personalized scores ``-theta*``.
    """
    rng = _stream(seed, 2)
    mask = np.isin(dataset.annotator, np.asarray(annotators))
    th = truth.theta_star
    flipped = -(th[dataset.left] - th[dataset.right]) + rng.normal(0.0, truth.config.sigma_noise, dataset.m)
    return dataset.with_responses(np.where(mask, flipped, dataset.y))
