"""Generalized densities and measure changes between Q and its Föllmer measure.

A deflator Z is a non-negative Q-supermartingale with Z_0 = 1.  Under the
dominating measure Qcheck the inverse Zcheck = (1/Z) 1{tau > t} is a true
martingale and Z may explode at tau.  The models below know their exact
one-step transition laws under both measures, which is what the nested
(state-restart) conditional expectations need.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .paths import (
    AbsorptionInfo,
    BLOCK_SIZE,
    TimeGrid,
    besq0_step,
    block_rng,
    detect_explosion,
    normal_cdf,
    run_blocks,
    simulate_bes3,
    simulate_besq0,
    simulate_bm,
    simulate_stopped_bm,
)
from .stats import MCEstimate, exact, mc_mean

__all__ = [
    "DeflatorModel",
    "InverseBes3Deflator",
    "GeometricDeflator",
    "UnitDeflator",
    "InverseBesq4Deflator",
    "GeneralizedDensity",
    "ConditionalEstimate",
    "invert_density",
    "expectation_under_Q",
    "expectation_under_Qcheck_pre_tau",
    "explosion_cdf",
    "bayes_conditional",
]

NESTED_OFFSET = 1_000_003
NESTED_CHUNK = 64


def invert_density(Z: np.ndarray, alive: Optional[np.ndarray] = None) -> np.ndarray:
    """Zcheck = (1/Z) 1{tau > t} where Z > 0, and 0 otherwise."""
    Z = np.asarray(Z, dtype=float)
    out = np.zeros_like(Z)
    pos = Z > 0
    with np.errstate(divide="ignore"):
        out[pos] = 1.0 / Z[pos]
    if alive is not None:
        out = np.where(alive, out, 0.0)
    return out


def _reciprocal_or_inf(zc: np.ndarray) -> np.ndarray:
    out = np.full_like(zc, np.inf, dtype=float)
    pos = zc > 0
    out[pos] = 1.0 / zc[pos]
    return out


@dataclass
class GeneralizedDensity:
    """Aligned samples of Z and Zcheck with the explosion time per path."""

    grid: TimeGrid
    Z: np.ndarray
    Zcheck: np.ndarray
    tau: AbsorptionInfo
    native_measure: str
    model: Optional["DeflatorModel"] = None
    seed: int = 0
    substream_offset: int = 0

    def __post_init__(self):
        if self.native_measure not in ("Q", "Qcheck"):
            raise ValueError("native_measure must be 'Q' or 'Qcheck'")
        if self.Z.shape != self.Zcheck.shape or self.Z.shape[1] != self.grid.n_times:
            raise ValueError("Z and Zcheck must share the grid shape")
        if self.tau.n_paths != self.Z.shape[0]:
            raise ValueError("absorption info does not match the number of paths")
        if np.any(self.Z < 0) or np.any(self.Zcheck < 0):
            raise ValueError("densities must be non-negative")
        if not (np.allclose(self.Z[:, 0], 1.0, rtol=0, atol=1e-12)
                and np.allclose(self.Zcheck[:, 0], 1.0, rtol=0, atol=1e-12)):
            raise ValueError("densities must start at 1")

    @property
    def n_paths(self) -> int:
        return self.Z.shape[0]

    def alive(self, idx: int) -> np.ndarray:
        return self.tau.alive_at(idx)

    def inversion_error(self) -> float:
        """Largest deviation from Zcheck = (1/Z) 1{tau > t} over all entries."""
        alive = np.arange(self.grid.n_times)[None, :] < np.where(
            self.tau.tau_index >= 0, self.tau.tau_index, self.grid.n_times)[:, None]
        ref = invert_density(self.Z, alive)
        return float(np.max(np.abs(ref - self.Zcheck)))


# ---------------------------------------------------------------------------
# deflator models


class DeflatorModel(ABC):
    """Markov deflator with exact transitions under Q and Qcheck."""

    name: str = "deflator"
    true_martingale: bool = False

    @abstractmethod
    def sample(self, grid: TimeGrid, n_paths: int, measure: str, seed: int,
               substream_offset: int = 0, bridge_correction: bool = True,
               threads: int = 1) -> GeneralizedDensity:
        ...

    @abstractmethod
    def step_Q(self, z: np.ndarray, h: float, rng: np.random.Generator) -> np.ndarray:
        """Sample Z_{t+h} given Z_t = z under Q."""

    @abstractmethod
    def step_Qcheck(self, zc: np.ndarray, h: float, rng: np.random.Generator) -> np.ndarray:
        """Sample Zcheck_{t+h} given Zcheck_t = zc under Qcheck (0 = absorbed)."""

    def explosion_probability(self, T: float, zc: float = 1.0) -> Optional[float]:
        """Closed-form Qcheck[tau <= t + T | Zcheck_t = zc], if known."""
        return None

    def _density(self, grid, Z, Zcheck, tau, measure, seed, offset):
        return GeneralizedDensity(grid, Z, Zcheck, tau, measure, self, seed, offset)


class InverseBes3Deflator(DeflatorModel):
    """Z = z0 / R with R a Bessel(3) process from z0 under Q.

    Under Qcheck, R = z0 Zcheck is Brownian motion from z0 stopped at 0.
    """

    true_martingale = False

    def __init__(self, z0: float = 1.0):
        if not z0 > 0:
            raise ValueError("z0 must be positive")
        self.z0 = float(z0)
        self.name = f"inverse_bes3(z0={z0:g})"

    def sample(self, grid, n_paths, measure, seed, substream_offset=0,
               bridge_correction=True, threads=1):
        if measure == "Q":
            R = simulate_bes3(grid, self.z0, n_paths, seed, substream_offset, threads)["bes3"]
            Z = self.z0 / R
            return self._density(grid, Z, R / self.z0, detect_explosion(Z, grid), "Q",
                                 seed, substream_offset)
        ps, tau = simulate_stopped_bm(grid, self.z0, n_paths, seed, bridge_correction,
                                      substream_offset, threads)
        zc = ps["stopped_bm"] / self.z0
        return self._density(grid, _reciprocal_or_inf(zc), zc, tau, "Qcheck",
                             seed, substream_offset)

    def step_Q(self, z, h, rng):
        r = self.z0 / np.asarray(z, dtype=float)
        sq = math.sqrt(h)
        g = rng.standard_normal((3,) + r.shape)
        r2 = (r + sq * g[0]) ** 2 + h * (g[1] ** 2 + g[2] ** 2)
        return self.z0 / np.sqrt(r2)

    def step_Qcheck(self, zc, h, rng):
        r = self.z0 * np.asarray(zc, dtype=float)
        g = rng.standard_normal(r.shape)
        u = rng.random(r.shape)
        r1 = r + math.sqrt(h) * g
        with np.errstate(over="ignore", invalid="ignore"):
            cross = (r <= 0) | (r1 <= 0) | (u < np.exp(-2.0 * r * r1 / h))
        return np.where(cross, 0.0, r1 / self.z0)

    def explosion_probability(self, T, zc=1.0):
        if zc <= 0:
            return 1.0
        return 2.0 * normal_cdf(-self.z0 * zc / math.sqrt(T))


class GeometricDeflator(DeflatorModel):
    """Z = exp(sigma W - sigma^2 t / 2): a true martingale, never explodes."""

    true_martingale = True

    def __init__(self, sigma: float = 0.2):
        if not 0 <= sigma <= 5:
            raise ValueError("sigma must lie in [0, 5]")
        self.sigma = float(sigma)
        self.name = f"geometric(sigma={sigma:g})"

    def sample(self, grid, n_paths, measure, seed, substream_offset=0,
               bridge_correction=True, threads=1):
        W = simulate_bm(grid, 1, n_paths, seed, substream_offset, threads=threads)["bm"][:, :, 0]
        s = self.sigma
        # under Qcheck the Q-Brownian motion picks up drift sigma
        drift = -0.5 * s * s if measure == "Q" else 0.5 * s * s
        Z = np.exp(s * W + drift * grid.times)
        return self._density(grid, Z, 1.0 / Z, AbsorptionInfo.never(n_paths), measure,
                             seed, substream_offset)

    def step_Q(self, z, h, rng):
        g = rng.standard_normal(np.shape(z))
        return z * np.exp(self.sigma * math.sqrt(h) * g - 0.5 * self.sigma**2 * h)

    def step_Qcheck(self, zc, h, rng):
        g = rng.standard_normal(np.shape(zc))
        return zc * np.exp(-self.sigma * math.sqrt(h) * g - 0.5 * self.sigma**2 * h)

    def explosion_probability(self, T, zc=1.0):
        return 0.0


class UnitDeflator(DeflatorModel):
    """Z identically 1, so Q and Qcheck coincide."""

    true_martingale = True
    name = "unit"

    def sample(self, grid, n_paths, measure, seed, substream_offset=0,
               bridge_correction=True, threads=1):
        one = np.ones((n_paths, grid.n_times))
        return self._density(grid, one, one.copy(), AbsorptionInfo.never(n_paths), measure,
                             seed, substream_offset)

    def step_Q(self, z, h, rng):
        return np.ones_like(np.asarray(z, dtype=float))

    def step_Qcheck(self, zc, h, rng):
        return np.ones_like(np.asarray(zc, dtype=float))

    def explosion_probability(self, T, zc=1.0):
        return 0.0


class InverseBesq4Deflator(DeflatorModel):
    """Z = |x|^2 / |x + W|^2 for a 4-D Brownian motion W under Q.

    Under Qcheck, |x|^2 Zcheck is a squared Bessel process of dimension 0
    started at |x|^2, which is absorbed at 0 in finite time.
    """

    true_martingale = False

    def __init__(self, x: Sequence[float] = (1.0, 0.0, 0.0, 0.0)):
        x = np.asarray(x, dtype=float)
        if x.shape != (4,):
            raise ValueError("x must be a vector in R^4")
        if not np.any(x != 0):
            raise ValueError("x must be non-zero")
        self.x = x
        self.r2 = float(x @ x)
        self.name = f"inverse_besq4(|x|^2={self.r2:g})"

    def sample(self, grid, n_paths, measure, seed, substream_offset=0,
               bridge_correction=True, threads=1):
        if measure == "Q":
            W = simulate_bm(grid, 4, n_paths, seed, substream_offset, threads=threads)["bm"]
            R2 = np.sum((W + self.x) ** 2, axis=-1)
            Z = self.r2 / R2
            return self._density(grid, Z, R2 / self.r2, detect_explosion(Z, grid), "Q",
                                 seed, substream_offset)
        ps, tau = simulate_besq0(grid, self.r2, n_paths, seed, substream_offset, threads)
        zc = ps["besq0"] / self.r2
        return self._density(grid, _reciprocal_or_inf(zc), zc, tau, "Qcheck",
                             seed, substream_offset)

    def step_Q(self, z, h, rng):
        r = np.sqrt(self.r2 / np.asarray(z, dtype=float))
        g = rng.standard_normal((4,) + r.shape)
        r2 = (r + math.sqrt(h) * g[0]) ** 2 + h * (g[1] ** 2 + g[2] ** 2 + g[3] ** 2)
        return self.r2 / r2

    def step_Qcheck(self, zc, h, rng):
        y = self.r2 * np.asarray(zc, dtype=float)
        return besq0_step(rng, y, h) / self.r2

    def explosion_probability(self, T, zc=1.0):
        return math.exp(-self.r2 * zc / (2.0 * T))


# ---------------------------------------------------------------------------
# reweighting


Functional = Union[np.ndarray, Callable[[GeneralizedDensity, int], np.ndarray]]


def _evaluate(H: Functional, density: GeneralizedDensity, idx: int) -> np.ndarray:
    if callable(H):
        vals = H(density, idx)
    else:
        vals = H
    vals = np.broadcast_to(np.asarray(vals, dtype=float), (density.n_paths,))
    return vals


def expectation_under_Q(H: Functional, density: GeneralizedDensity, t: float,
                        ci_level: float = 0.95) -> MCEstimate:
    """E_Q[H 1{Z_t > 0}] from Qcheck samples, as the mean of Zcheck_t H.

    ``H`` is an array of per-path values or a callable ``(density, index)``
    reading path data up to the grid index of ``t``.  Post-explosion paths
    carry zero weight even where H is infinite.
    """
    if density.native_measure != "Qcheck":
        raise ValueError("density must be sampled under Qcheck")
    idx = density.grid.index_of(t)
    h = _evaluate(H, density, idx)
    w = density.Zcheck[:, idx]
    vals = np.where(w > 0, w * np.where(w > 0, h, 0.0), 0.0)
    return mc_mean(vals, ci_level)


def expectation_under_Qcheck_pre_tau(H: Functional, density: GeneralizedDensity, t: float,
                                     ci_level: float = 0.95) -> MCEstimate:
    """E_Qcheck[H 1{tau > t}] from Q samples, as the mean of Z_t H."""
    if density.native_measure != "Q":
        raise ValueError("density must be sampled under Q")
    idx = density.grid.index_of(t)
    h = _evaluate(H, density, idx)
    return mc_mean(density.Z[:, idx] * h, ci_level)


def explosion_cdf(T: float, density: GeneralizedDensity, ci_level: float = 0.95) -> MCEstimate:
    """Qcheck[tau <= T] = 1 - E_Q[Z_T] in the density's native measure.

    Under Qcheck this is the absorbed fraction; under Q it is the mean of
    1 - Z_T.
    """
    idx = density.grid.index_of(T)
    if density.native_measure == "Qcheck":
        return mc_mean(density.tau.absorbed_by(idx).astype(float), ci_level)
    return mc_mean(1.0 - density.Z[:, idx], ci_level)


@dataclass
class ConditionalEstimate:
    """Per-path conditional expectations with their inner standard errors."""

    values: np.ndarray
    stderr: np.ndarray
    alive: np.ndarray
    n_inner: int

    def outer_mean(self, ci_level: float = 0.95) -> MCEstimate:
        return mc_mean(self.values, ci_level)


def nested_map(fn: Callable[[np.ndarray, np.random.Generator], np.ndarray],
               states: np.ndarray, n_inner: int, seed: int, substream_offset: int,
               threads: int = 1, chunk: int = NESTED_CHUNK) -> np.ndarray:
    """Apply an inner sampler to outer states in fixed chunks.

    ``fn(repeated_states, rng)`` receives each state repeated ``n_inner``
    times and returns one sample per entry; the result has shape
    ``(n_states, n_inner)``.  Chunk ``c`` always uses substream block ``c``.
    """
    states = np.asarray(states)
    n = states.shape[0]
    n_chunks = -(-n // chunk)

    def one(c):
        rng = block_rng(seed, substream_offset, c)
        part = states[c * chunk:(c + 1) * chunk]
        rep = np.repeat(part, n_inner, axis=0)
        return np.asarray(fn(rep, rng)).reshape(part.shape[0], n_inner)

    if n == 0:
        return np.empty((0, n_inner))
    return np.concatenate(run_blocks(one, n_chunks, threads), axis=0)


def bayes_conditional(
    H_T: Optional[Callable[[np.ndarray], np.ndarray]],
    t: float,
    T: float,
    density: GeneralizedDensity,
    n_inner: int = 4096,
    seed: Optional[int] = None,
    substream_offset: int = NESTED_OFFSET,
    threads: int = 1,
) -> ConditionalEstimate:
    """(1/Z_t) 1{tau > t} E_Q[Z_T H_T | F_t] per path, by state restart.

    ``H_T`` maps terminal deflator values Z_T to payoffs (None means 1).  The
    inner expectation is estimated from ``n_inner`` exact one-step Q
    transitions of the deflator started at each path's Z_t.  At ``t == T``
    the result is ``H_T 1{tau > T}`` exactly.
    """
    if density.model is None:
        raise ValueError("conditional expectations need a Markov scenario (no model attached)")
    if t > T:
        raise ValueError("t must not exceed T")
    idx = density.grid.index_of(t)
    alive = density.alive(idx)
    h = (lambda z: np.ones_like(z)) if H_T is None else H_T
    n = density.n_paths
    values = np.zeros(n)
    stderr = np.zeros(n)
    z_t = density.Z[:, idx]
    if t == T:
        values[alive] = np.asarray(h(z_t[alive]), dtype=float)
        return ConditionalEstimate(values, stderr, alive, 0)
    if n_inner < 2:
        raise ValueError("n_inner must be at least 2")
    model = density.model
    seed = density.seed if seed is None else seed

    def inner(rep, rng):
        zT = model.step_Q(rep, T - t, rng)
        return zT * h(zT) / rep

    samples = nested_map(inner, z_t[alive], n_inner, seed, substream_offset, threads)
    values[alive] = samples.mean(axis=1)
    stderr[alive] = samples.std(axis=1, ddof=1) / math.sqrt(n_inner)
    return ConditionalEstimate(values, stderr, alive, n_inner)
