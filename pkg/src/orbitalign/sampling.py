"""Phase-space sample distributions.

A sampler only describes a distribution; randomness comes from the
``numpy.random.Generator`` passed to :meth:`draw`, so a run is reproducible
from its seed alone.
"""
from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericalError

DIVERGENCE_NORM = 1e6
POOL_FACTOR = 10


class Sampler:
    kind = "abstract"
    dim: int

    def draw(self, count, rng):
        raise NotImplementedError

    def to_spec(self):
        raise NotImplementedError


class UniformBox(Sampler):
    kind = "UniformBox"

    def __init__(self, low, high):
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        if self.low.shape != self.high.shape or self.low.ndim != 1:
            raise ContractError("box bounds must be equal-length vectors")
        if np.any(self.high < self.low):
            raise ContractError("box upper bound below lower bound")
        self.dim = self.low.shape[0]

    def draw(self, count, rng):
        if count < 1:
            raise ContractError(f"count must be >= 1, got {count}")
        return rng.uniform(self.low, self.high, size=(count, self.dim))

    def to_spec(self):
        return {"kind": self.kind, "low": self.low.tolist(), "high": self.high.tolist()}


class Gaussian(Sampler):
    kind = "Gaussian"

    def __init__(self, mean, std=1.0):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.dim = self.mean.shape[0]
        self.std = np.broadcast_to(np.asarray(std, dtype=np.float64), (self.dim,)).copy()

    @classmethod
    def standard(cls, dim):
        return cls(np.zeros(dim), 1.0)

    def draw(self, count, rng):
        if count < 1:
            raise ContractError(f"count must be >= 1, got {count}")
        return self.mean + self.std * rng.standard_normal((count, self.dim))

    def to_spec(self):
        return {"kind": self.kind, "mean": self.mean.tolist(), "std": self.std.tolist()}


class Asymptotic(Sampler):
    """Uniform draws, with replacement, from a pool of simulated states."""

    kind = "Asymptotic"

    def __init__(self, pool, meta=None):
        self.pool = np.asarray(pool, dtype=np.float64)
        if self.pool.ndim != 2 or len(self.pool) == 0:
            raise ContractError("state pool must be a non-empty (count, dim) array")
        self.dim = self.pool.shape[1]
        self.meta = dict(meta or {})

    @classmethod
    def from_field(cls, field, sigma=1.5, dt=0.01, t_burn=50.0, t_end=100.0, trials=1000,
                   seed=None, record_every=0.5):
        pool = asymptotic_states(field, sigma, dt, t_burn, t_end, trials, seed, record_every)
        meta = {"sigma": sigma, "dt": dt, "t_burn": t_burn, "t_end": t_end, "trials": trials,
                "seed": seed, "record_every": record_every}
        return cls(pool, meta)

    def draw(self, count, rng):
        if count < 1:
            raise ContractError(f"count must be >= 1, got {count}")
        if len(self.pool) < POOL_FACTOR * count:
            raise ContractError(
                f"pool of {len(self.pool)} states is smaller than {POOL_FACTOR}x the batch ({count})")
        return self.pool[rng.integers(0, len(self.pool), size=count)]

    def to_spec(self):
        return {"kind": self.kind, "pool_size": len(self.pool), **self.meta}


def asymptotic_states(field, sigma, dt=0.01, t_burn=50.0, t_end=100.0, trials=1000, seed=None,
                      record_every=0.5):
    """Pool of states from noisy simulations after a burn-in period.

    Trials are integrated together with Euler-Maruyama,
    ``x <- x + f(x) dt + sigma sqrt(dt) xi``, from standard normal initial
    conditions.  States are recorded every ``record_every`` time units in
    ``(t_burn, t_end]``.  Trials whose norm exceeds 1e6 are dropped.
    """
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")
    if t_end <= t_burn:
        raise ContractError(f"t_end ({t_end}) must exceed t_burn ({t_burn})")
    rng = np.random.default_rng(seed)
    n = field.dim
    x = rng.standard_normal((trials, n))
    steps = int(round(t_end / dt))
    burn = int(round(t_burn / dt))
    stride = max(1, int(round(record_every / dt)))
    alive = np.ones(trials, dtype=bool)
    scale = sigma * np.sqrt(dt)
    kept = []
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, steps + 1):
            x = x + ad.value_of(field(x)) * dt
            if sigma:
                x = x + scale * rng.standard_normal((trials, n))
            if step % 100 == 0 or step == steps:
                bad = ~np.all(np.isfinite(x), axis=1) | (np.linalg.norm(x, axis=1) > DIVERGENCE_NORM)
                if np.any(bad & alive):
                    alive &= ~bad
                    x[bad] = 0.0
            if step > burn and (step - burn) % stride == 0:
                kept.append(x.copy())
    dropped = int(trials - alive.sum())
    if not alive.any():
        raise NumericalError("every asymptotic trial diverged")
    if dropped:
        warnings.warn(f"{dropped} of {trials} trials diverged and were discarded", RuntimeWarning)
    return np.concatenate([s[alive] for s in kept], axis=0)


def sampler_from_spec(spec, field=None):
    kind = spec.get("kind")
    if kind == "UniformBox":
        return UniformBox(spec["low"], spec["high"])
    if kind == "Gaussian":
        return Gaussian(spec["mean"], spec.get("std", 1.0))
    if kind == "StandardNormal":
        return Gaussian.standard(spec["dim"] if field is None else field.dim)
    if kind == "Asymptotic":
        if field is None:
            raise ContractError("asymptotic sampler needs the field it simulates")
        return Asymptotic.from_field(
            field, sigma=spec.get("sigma", 1.5), dt=spec.get("dt", 0.01),
            t_burn=spec.get("t_burn", 50.0), t_end=spec.get("t_end", 100.0),
            trials=spec.get("trials", 1000), seed=spec.get("seed"),
            record_every=spec.get("record_every", 0.5))
    raise ContractError(f"unknown sampler kind {kind!r}")


# -- presets for the planar benchmarks ------------------------------------------

def vdp_box():
    """Box covering the Van der Pol limit cycle for the usual range of mu."""
    return UniformBox([-3.0, -4.0], [3.0, 4.0])


def pitchfork_box(mu):
    """Box covering all three equilibria of the pitchfork."""
    r = 1.5 * np.sqrt(mu)
    return UniformBox([-r, -1.0], [r, 1.0])


def linear_image(sampler, Q):
    """Distribution of ``Q x`` for ``x`` drawn from ``sampler``."""
    return Mapped(sampler, Q)


class Mapped(Sampler):
    """Push a base sampler through a fixed linear map ``x -> Q x``."""

    kind = "Mapped"

    def __init__(self, base, Q):
        self.base = base
        self.Q = np.asarray(Q, dtype=np.float64)
        self.dim = self.Q.shape[0]

    def draw(self, count, rng):
        return self.base.draw(count, rng) @ self.Q.T

    def to_spec(self):
        return {"kind": self.kind, "base": self.base.to_spec(), "Q": self.Q.tolist()}
