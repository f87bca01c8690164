"""Exact-in-distribution path simulation on a time grid.

Brownian motion, the three-dimensional Bessel process, Brownian motion
stopped at zero (with optional Brownian-bridge crossing correction) and the
squared Bessel process of dimension zero are all sampled from their exact
transition laws, so marginals at grid points carry no discretisation bias.

Random numbers come from counter-based substreams: paths are generated in
fixed blocks of ``BLOCK_SIZE`` and block ``b`` of a run with ``(seed,
substream_offset)`` always uses ``Philox(SeedSequence(seed, spawn_key=(offset,
b)))``.  A path's values therefore depend only on its index, never on
``n_paths`` or on the number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import special

__all__ = [
    "BLOCK_SIZE",
    "MEASURES",
    "TimeGrid",
    "PathSet",
    "AbsorptionInfo",
    "block_rng",
    "run_blocks",
    "simulate_bm",
    "simulate_bes3",
    "simulate_stopped_bm",
    "simulate_besq0",
    "bes3_block",
    "stopped_bm_block",
    "detect_explosion",
    "default_levels",
    "normal_cdf",
]

BLOCK_SIZE = 1024
MEASURES = ("Q", "Qcheck")
NEVER = -1

# Indirection so a fault-injection harness can swap the kernel at runtime.
_ndtr = special.ndtr


def normal_cdf(x):
    """Standard normal distribution function, scalar or elementwise."""
    out = _ndtr(np.asarray(x, dtype=float))
    if np.ndim(out) == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# time grids


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing grid of times starting at 0.

    ``terminal`` and ``eps_floor`` are set when the grid was refined toward a
    designated terminal time; they are informational only.
    """

    times: np.ndarray
    terminal: Optional[float] = None
    eps_floor: Optional[float] = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size == 0:
            raise ValueError("time grid must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(t)):
            raise ValueError("time grid contains non-finite values")
        if t[0] != 0.0:
            raise ValueError(f"time grid must start at 0, got {t[0]!r}")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("time grid must be strictly increasing")
        if self.eps_floor is not None and not self.eps_floor > 0:
            raise ValueError("eps_floor must be positive")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        if not horizon > 0:
            raise ValueError("horizon must be positive")
        if n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        times = horizon * np.arange(n_steps + 1) / n_steps
        times[-1] = horizon
        return cls(times)

    @classmethod
    def from_times(cls, times: Iterable[float]) -> "TimeGrid":
        """Grid through the given points (0 is added, duplicates removed)."""
        pts = np.unique(np.concatenate([[0.0], np.asarray(list(times), dtype=float)]))
        return cls(pts)

    @classmethod
    def refined(
        cls,
        horizon: float,
        eps_floor: float,
        h_max: float = 2.0**-13,
        ratio: float = 0.125,
    ) -> "TimeGrid":
        """Grid whose step shrinks geometrically toward ``horizon``.

        The step at time t is ``max(eps_floor, min(h_max, ratio * (T - t)))``,
        so the spacing decays like the remaining time until it reaches the
        floor.  A floor above ``h_max`` gives a uniform grid of step
        ``eps_floor``.  The last step is merged so that the final left point still
        lies at least ``eps_floor`` before ``horizon``.
        """
        if not horizon > 0:
            raise ValueError("horizon must be positive")
        if not 0 < eps_floor < horizon:
            raise ValueError("eps_floor must lie in (0, horizon)")
        if not h_max > 0:
            raise ValueError("h_max must be positive")
        if not 0 < ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")
        times = [0.0]
        t = 0.0
        while True:
            rem = horizon - t
            step = max(eps_floor, min(h_max, ratio * rem))
            if rem - step < eps_floor * (1 - 1e-9):
                break
            t += step
            times.append(t)
        times.append(horizon)
        return cls(np.asarray(times), terminal=horizon, eps_floor=eps_floor)

    @staticmethod
    def union(*grids: "TimeGrid") -> "TimeGrid":
        pts = np.unique(np.concatenate([g.times for g in grids]))
        return TimeGrid(pts)

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, t: float, tol: float = 1e-12) -> int:
        """Index of ``t`` on the grid; raises ValueError when off-grid."""
        i = int(np.searchsorted(self.times, t - tol))
        if i < self.n_times and abs(self.times[i] - t) <= tol * max(1.0, abs(t)):
            return i
        raise ValueError(f"time {t!r} is not a grid point")

    def indices_of(self, other: "TimeGrid") -> np.ndarray:
        """Indices of every point of ``other`` on this grid."""
        return np.array([self.index_of(float(s)) for s in other.times], dtype=np.int64)

    def summary(self) -> dict:
        d = self.dt
        out = {
            "n_times": self.n_times,
            "horizon": self.horizon,
            "min_step": float(d.min()) if d.size else 0.0,
            "max_step": float(d.max()) if d.size else 0.0,
        }
        if self.eps_floor is not None:
            out["eps_floor"] = self.eps_floor
        return out


# ---------------------------------------------------------------------------
# containers


@dataclass
class AbsorptionInfo:
    """First absorption (or explosion) per path, at grid resolution.

    ``tau_index`` is -1 for paths that are never absorbed on the grid, in
    which case ``tau_time`` is +inf.
    """

    tau_index: np.ndarray
    tau_time: np.ndarray
    bridge_corrected: bool = False
    cap: Optional[float] = None
    level_times: Optional[np.ndarray] = None

    NEVER = NEVER

    @classmethod
    def from_index(cls, grid: TimeGrid, tau_index: np.ndarray, **kw) -> "AbsorptionInfo":
        tau_index = np.asarray(tau_index, dtype=np.int64)
        tau_time = np.full(tau_index.shape, np.inf)
        hit = tau_index >= 0
        tau_time[hit] = grid.times[tau_index[hit]]
        return cls(tau_index, tau_time, **kw)

    @classmethod
    def never(cls, n_paths: int, **kw) -> "AbsorptionInfo":
        return cls(np.full(n_paths, NEVER, dtype=np.int64), np.full(n_paths, np.inf), **kw)

    @property
    def n_paths(self) -> int:
        return self.tau_index.size

    def absorbed_by(self, idx: int) -> np.ndarray:
        """Boolean mask of paths with tau <= times[idx]."""
        return (self.tau_index >= 0) & (self.tau_index <= idx)

    def alive_at(self, idx: int) -> np.ndarray:
        """Boolean mask of paths with tau > times[idx]."""
        return ~self.absorbed_by(idx)

    def absorbed_fraction(self, n_times: int) -> np.ndarray:
        hit = self.tau_index[self.tau_index >= 0]
        counts = np.bincount(hit, minlength=n_times)[:n_times]
        return np.cumsum(counts) / self.n_paths

    def take(self, rows) -> "AbsorptionInfo":
        lt = None if self.level_times is None else self.level_times[rows]
        return AbsorptionInfo(self.tau_index[rows], self.tau_time[rows],
                              self.bridge_corrected, self.cap, lt)


@dataclass
class PathSet:
    """Sample paths of one or more processes on a shared grid.

    Each entry of ``values`` has shape ``(n_paths, n_times)`` or, for vector
    processes, ``(n_paths, n_times, dim)``.  For CSV dumping the layout is
    column-major: one row per grid time, one column per path (see
    :meth:`to_csv`).
    """

    grid: TimeGrid
    values: dict
    measure_tag: str
    seed: int
    substream_offset: int = 0

    def __post_init__(self):
        if self.measure_tag not in MEASURES:
            raise ValueError(f"measure_tag must be one of {MEASURES}")
        for name, arr in self.values.items():
            if arr.shape[1] != self.grid.n_times:
                raise ValueError(f"process {name!r} does not match the grid")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    @property
    def n_paths(self) -> int:
        return next(iter(self.values.values())).shape[0]

    def to_csv(self, fh, process: str, max_paths: Optional[int] = None, coord: int = 0) -> None:
        """Write ``t,path_0,path_1,...`` with one row per grid time."""
        arr = self.values[process]
        if arr.ndim == 3:
            arr = arr[:, :, coord]
        if max_paths is not None:
            arr = arr[:max_paths]
        fh.write("t," + ",".join(f"path_{i}" for i in range(arr.shape[0])) + "\n")
        for j, t in enumerate(self.grid.times):
            fh.write(repr(float(t)) + "," + ",".join(repr(float(v)) for v in arr[:, j]) + "\n")


# ---------------------------------------------------------------------------
# counter-based substreams


def block_rng(seed: int, substream_offset: int, block: int) -> np.random.Generator:
    """Generator for block ``block`` of the substream ``(seed, offset)``."""
    if seed < 0 or substream_offset < 0:
        raise ValueError("seed and substream_offset must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(substream_offset), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def run_blocks(fn: Callable[[int], object], n_blocks: int, threads: int = 1) -> list:
    """Evaluate ``fn`` on block indices, in order, optionally threaded."""
    if threads <= 1 or n_blocks <= 1:
        return [fn(b) for b in range(n_blocks)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, range(n_blocks)))


def n_blocks_for(n_paths: int, block_size: int = BLOCK_SIZE) -> int:
    return -(-n_paths // block_size)


def _check_common(grid: TimeGrid, n_paths: int) -> None:
    if grid is None or grid.n_times < 1:
        raise ValueError("empty grid")
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")


def _gaussian_walk(rng: np.random.Generator, sqdt: np.ndarray, start, size: int) -> np.ndarray:
    """Exact Brownian values at grid points, shape (size, n_times)."""
    out = np.empty((size, sqdt.size + 1))
    out[:, 0] = start
    if sqdt.size:
        inc = rng.standard_normal((size, sqdt.size))
        inc *= sqdt
        np.cumsum(inc, axis=1, out=out[:, 1:])
        out[:, 1:] += start
    return out


def _assemble(blocks: list, n_paths: int) -> np.ndarray:
    arr = np.concatenate(blocks, axis=0) if len(blocks) > 1 else blocks[0]
    return arr[:n_paths]


def bes3_block(rng: np.random.Generator, sqdt: np.ndarray, x0: float,
               size: int = BLOCK_SIZE) -> np.ndarray:
    """One block of Bessel(3) paths, shape (size, n_times)."""
    acc = _gaussian_walk(rng, sqdt, x0, size)
    np.square(acc, out=acc)
    for _ in range(2):
        w = _gaussian_walk(rng, sqdt, 0.0, size)
        np.square(w, out=w)
        acc += w
    return np.sqrt(acc, out=acc)


def stopped_bm_block(rng: np.random.Generator, dt: np.ndarray, z0: float,
                     bridge_correction: bool = True, size: int = BLOCK_SIZE) -> tuple:
    """One block of stopped Brownian paths and their absorption indices."""
    z = _gaussian_walk(rng, np.sqrt(dt), z0, size)
    nxt = z[:, 1:]
    cross = nxt <= 0.0
    if bridge_correction and dt.size:
        u = rng.random((size, dt.size))
        prev = z[:, :-1]
        with np.errstate(over="ignore", invalid="ignore"):
            p = np.exp(-2.0 * prev * nxt / dt)
        cross |= (prev > 0) & (nxt > 0) & (u < p)
    tau = _first_crossing(cross)
    _freeze_after(z, tau)
    return z, tau


# ---------------------------------------------------------------------------
# simulators


def simulate_bm(
    grid: TimeGrid,
    dim: int,
    n_paths: int,
    seed: int,
    substream_offset: int = 0,
    antithetic: bool = False,
    threads: int = 1,
) -> PathSet:
    """Standard Brownian motion in ``dim`` dimensions, started at 0.

    Values are stored under ``"bm"`` with shape (n_paths, n_times, dim).
    With ``antithetic`` the second half of every block mirrors the first.
    """
    _check_common(grid, n_paths)
    if dim < 1:
        raise ValueError("dim must be at least 1")
    sqdt = np.sqrt(grid.dt)

    def block(b):
        rng = block_rng(seed, substream_offset, b)
        size = BLOCK_SIZE // 2 if antithetic else BLOCK_SIZE
        out = np.stack([_gaussian_walk(rng, sqdt, 0.0, size) for _ in range(dim)], axis=-1)
        if antithetic:
            # pairs are (2k, 2k+1) so the pairing survives truncation to n_paths
            paired = np.empty((BLOCK_SIZE,) + out.shape[1:])
            paired[0::2] = out
            paired[1::2] = -out
            out = paired
        return out

    vals = _assemble(run_blocks(block, n_blocks_for(n_paths), threads), n_paths)
    return PathSet(grid, {"bm": vals}, "Q", seed, substream_offset)


def simulate_bes3(
    grid: TimeGrid,
    x0: float,
    n_paths: int,
    seed: int,
    substream_offset: int = 0,
    threads: int = 1,
    measure_tag: str = "Q",
) -> PathSet:
    """Bessel(3) process: the norm of 3-D Brownian motion from (x0, 0, 0)."""
    _check_common(grid, n_paths)
    if not x0 > 0:
        raise ValueError("x0 must be positive")
    sqdt = np.sqrt(grid.dt)

    def block(b):
        return bes3_block(block_rng(seed, substream_offset, b), sqdt, x0)

    vals = _assemble(run_blocks(block, n_blocks_for(n_paths), threads), n_paths)
    return PathSet(grid, {"bes3": vals}, measure_tag, seed, substream_offset)


def _first_crossing(cross: np.ndarray) -> np.ndarray:
    """Grid index after the first True step per row, or NEVER."""
    has = cross.any(axis=1)
    idx = np.argmax(cross, axis=1) + 1
    return np.where(has, idx, NEVER).astype(np.int64)


def _freeze_after(vals: np.ndarray, tau_index: np.ndarray) -> None:
    start = np.where(tau_index >= 0, tau_index, vals.shape[1])
    vals[np.arange(vals.shape[1])[None, :] >= start[:, None]] = 0.0


def simulate_stopped_bm(
    grid: TimeGrid,
    z0: float,
    n_paths: int,
    seed: int,
    bridge_correction: bool = True,
    substream_offset: int = 0,
    threads: int = 1,
) -> tuple:
    """Brownian motion from ``z0`` stopped on first hitting 0.

    Between grid points with positive endpoints a, b an unobserved crossing
    is declared with probability exp(-2ab/dt) when ``bridge_correction`` is
    on.  Absorbed paths are frozen at 0 from the grid point following the
    crossing.  Returns ``(PathSet, AbsorptionInfo)``; values under
    ``"stopped_bm"``.
    """
    _check_common(grid, n_paths)
    if not z0 > 0:
        raise ValueError("z0 must be positive")
    dt = grid.dt

    def block(b):
        return stopped_bm_block(block_rng(seed, substream_offset, b), dt, z0, bridge_correction)

    parts = run_blocks(block, n_blocks_for(n_paths), threads)
    vals = _assemble([p[0] for p in parts], n_paths)
    tau = _assemble([p[1] for p in parts], n_paths)
    ps = PathSet(grid, {"stopped_bm": vals}, "Qcheck", seed, substream_offset)
    return ps, AbsorptionInfo.from_index(grid, tau, bridge_corrected=bridge_correction)


def besq0_step(rng: np.random.Generator, y: np.ndarray, h: float) -> np.ndarray:
    """Exact transition of the squared Bessel process of dimension 0.

    Given Y_t = y, Y_{t+h} = 2h * Gamma(N) with N ~ Poisson(y / (2h)); N = 0
    means absorption at 0.
    """
    n = rng.poisson(y / (2.0 * h))
    out = np.zeros_like(y, dtype=float)
    pos = n > 0
    out[pos] = 2.0 * h * rng.standard_gamma(n[pos])
    return out


def simulate_besq0(
    grid: TimeGrid,
    y0: float,
    n_paths: int,
    seed: int,
    substream_offset: int = 0,
    threads: int = 1,
) -> tuple:
    """Squared Bessel process of dimension 0 from ``y0``, absorbed at 0.

    Absorption is exact at grid resolution (the process cannot return).
    Returns ``(PathSet, AbsorptionInfo)``; values under ``"besq0"``.
    """
    _check_common(grid, n_paths)
    if not y0 > 0:
        raise ValueError("y0 must be positive")
    dt = grid.dt

    def block(b):
        rng = block_rng(seed, substream_offset, b)
        y = np.empty((BLOCK_SIZE, grid.n_times))
        y[:, 0] = y0
        for j, h in enumerate(dt):
            y[:, j + 1] = besq0_step(rng, y[:, j], h)
        dead = y[:, 1:] <= 0.0
        return y, _first_crossing(dead)

    parts = run_blocks(block, n_blocks_for(n_paths), threads)
    vals = _assemble([p[0] for p in parts], n_paths)
    tau = _assemble([p[1] for p in parts], n_paths)
    ps = PathSet(grid, {"besq0": vals}, "Qcheck", seed, substream_offset)
    return ps, AbsorptionInfo.from_index(grid, tau, bridge_corrected=False)


# ---------------------------------------------------------------------------
# explosion detection


def default_levels() -> np.ndarray:
    return 2.0 ** np.arange(1, 31)


def detect_explosion(
    Z: np.ndarray,
    grid: TimeGrid,
    levels: Optional[Sequence[float]] = None,
) -> AbsorptionInfo:
    """Capped hitting times of increasing levels by Z.

    For each level n the capped time is ``min(n, inf{t : Z_t > n})`` on the
    grid.  The explosion time is the supremum over levels; with a finite set
    of levels a path is reported as exploded only if it exceeds the top
    level (the cap), in which case tau is its hitting time of that level.
    Paths that stay below the cap report ``never``.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[1] != grid.n_times:
        raise ValueError("Z does not match the grid")
    lv = default_levels() if levels is None else np.asarray(levels, dtype=float)
    n_paths = Z.shape[0]
    if lv.size == 0:
        return AbsorptionInfo.never(n_paths, level_times=np.empty((n_paths, 0)))
    if lv.size > 1 and not np.all(np.diff(lv) > 0):
        raise ValueError("levels must be strictly increasing")
    if not lv[0] > 0:
        raise ValueError("levels must be positive")

    # running maximum turns each level crossing into a searchsorted on a
    # non-decreasing row
    Zc = np.where(np.isnan(Z), np.inf, Z)
    rowmax = Zc.max(axis=1)
    level_times = np.minimum(lv[None, :], np.inf) * np.ones((n_paths, 1))
    hit_idx = np.full((n_paths, lv.size), NEVER, dtype=np.int64)
    for k, n in enumerate(lv):
        rows = np.nonzero(rowmax > n)[0]
        if rows.size == 0:
            continue
        first = np.argmax(Zc[rows] > n, axis=1)
        hit_idx[rows, k] = first
        level_times[rows, k] = np.minimum(n, grid.times[first])

    top = hit_idx[:, -1]
    tau_index = top.copy()
    capped = (top >= 0) & (lv[-1] < grid.times[np.maximum(top, 0)])
    if np.any(capped):
        # the time cap n binds before the hit: first grid time >= n
        tau_index[capped] = np.searchsorted(grid.times, lv[-1])
    info = AbsorptionInfo.from_index(grid, tau_index, bridge_corrected=False,
                                     cap=float(lv[-1]), level_times=level_times)
    return info
