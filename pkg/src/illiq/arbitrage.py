"""Explicit arbitrage in the canonical second-kind model.

Under Qcheck the density Ž is Brownian motion started at 1 and stopped at 0;
under Q it is a Bessel(3) process that never reaches 0.  Delta hedging the
conditional default probability in units of the numéraire Z turns zero
initial wealth into the payoff ``1{tau>T} - a_T 1{tau<=T}``, which is the
riskless payoff 1 under Q.

Wealth is simulated block by block so that a 10^5-path run on a grid of
~8000 points never holds more than one block of paths in memory.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import paths
from .paths import BLOCK_SIZE, TimeGrid, block_rng, n_blocks_for, run_blocks
from .stats import MCEstimate, difference, exact, mc_mean

__all__ = [
    "conditional_default_prob",
    "a_constant",
    "delta_hedge",
    "HedgeRun",
    "replicate",
    "replicate_on_grids",
    "RefinementStudy",
    "refinement_study",
    "AdmissibilityReport",
    "admissibility_probe",
    "measure_consistency",
    "HEDGE_CSV_HEADER",
]

HEDGE_CSV_HEADER = "path_id,absorbed,tau_time,V_T,repl_error,min_V_Zunits,min_V_Bunits"
DEFAULT_EPS = (2.0**-10, 2.0**-12, 2.0**-14)
DEFAULT_BUDGETS = (1_000, 10_000, 100_000)
FLAG_MULTIPLE = 10.0

# distinct substreams per measure so Q and Qcheck runs are independent
_OFFSETS = {"Q": 500, "Qcheck": 600}
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def conditional_default_prob(z, t: float, T: float, absorbed=False):
    """Qcheck[tau <= T | F_t] for the stopped Brownian density.

    Equals 2 Phi(-z / sqrt(T - t)) before absorption and 1 afterwards.
    """
    if not t < T:
        raise ValueError(f"need t < T, got t={t!r}, T={T!r}")
    z = np.asarray(z, dtype=float)
    absorbed = np.asarray(absorbed, dtype=bool) | (z <= 0)
    p = 2.0 * paths.normal_cdf(-np.maximum(z, 0.0) / math.sqrt(T - t))
    out = np.where(absorbed, 1.0, p)
    return float(out) if out.ndim == 0 else out


def a_constant(T: float) -> float:
    """a_T = Qcheck[tau > T] / Qcheck[tau <= T] = 1 / (2 Phi(-1/sqrt T)) - 1."""
    if not T > 0:
        raise ValueError("T must be positive")
    return 1.0 / (2.0 * paths.normal_cdf(-1.0 / math.sqrt(T))) - 1.0


def _hedge_coefficient(T: float) -> float:
    return (1.0 + a_constant(T)) * _SQRT_2_OVER_PI


def delta_hedge(z, t, T: float, eps_floor: Optional[float] = None):
    """Hedge ratio H_t = (1 + a_T) sqrt(2/pi) exp(-z^2 / (2(T-t))) / sqrt(T-t).

    Inside the last ``eps_floor`` before T the remaining time is clamped to
    ``eps_floor``; without a floor, ``t >= T`` is an error.  H is 0 once the
    density has been absorbed (z <= 0).
    """
    z = np.asarray(z, dtype=float)
    s = T - np.asarray(t, dtype=float)
    if eps_floor is not None:
        if not eps_floor > 0:
            raise ValueError("eps_floor must be positive")
        s = np.maximum(s, eps_floor)
    elif np.any(s <= 0):
        raise ValueError("delta_hedge needs t < T when no eps_floor is given")
    h = _hedge_coefficient(T) / np.sqrt(s) * np.exp(-0.5 * z * z / s)
    h = np.where(z > 0, h, 0.0)
    return float(h) if h.ndim == 0 else h


# ---------------------------------------------------------------------------
# runs


@dataclass
class HedgeRun:
    """Per-path outcome of the discrete delta hedge on one grid.

    Wealth V is in Z-numéraire units and starts at 0; ``min_V_B`` is the
    running minimum of Z_t V_t = V_t / Ž_t over grid points with Ž_t > 0.
    """

    grid: TimeGrid
    measure: str
    T: float
    eps_floor: float
    a_T: float
    zcheck_T: np.ndarray
    absorbed: np.ndarray
    tau_time: np.ndarray
    V_T: np.ndarray
    min_V_Z: np.ndarray
    min_V_B: np.ndarray
    seed: int = 0
    substream_offset: int = 0
    sample_paths: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.V_T.size

    @property
    def target(self) -> np.ndarray:
        return np.where(self.absorbed, -self.a_T, 1.0)

    @property
    def repl_error(self) -> np.ndarray:
        return self.V_T - self.target

    @property
    def rms_error(self) -> float:
        e = self.repl_error
        return float(np.sqrt(np.mean(e * e)))

    @property
    def mean_V(self) -> MCEstimate:
        return mc_mean(self.V_T)

    def flagged_paths(self, multiple: float = FLAG_MULTIPLE) -> np.ndarray:
        """Indices of paths whose error exceeds ``multiple`` times the batch RMS."""
        rms = self.rms_error
        if rms == 0:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(np.abs(self.repl_error) > multiple * rms)

    def prefix(self, n: int) -> "HedgeRun":
        """The first ``n`` paths; path values do not depend on the run size."""
        if not 1 <= n <= self.n_paths:
            raise ValueError(f"prefix size {n} outside 1..{self.n_paths}")
        sl = slice(0, n)
        return HedgeRun(
            self.grid, self.measure, self.T, self.eps_floor, self.a_T,
            self.zcheck_T[sl], self.absorbed[sl], self.tau_time[sl], self.V_T[sl],
            self.min_V_Z[sl], self.min_V_B[sl], self.seed, self.substream_offset,
        )

    def cluster_stats(self) -> dict:
        """Terminal wealth grouped by survival, with weight estimates."""
        n = self.n_paths
        out = {}
        w_abs = mc_mean(self.absorbed.astype(float)) if n >= 2 else exact(float(self.absorbed.mean()), n)
        for name, mask, centre, weight in (
            ("survived", ~self.absorbed, 1.0, w_abs.scaled(-1.0).shifted(1.0)),
            ("absorbed", self.absorbed, -self.a_T, w_abs),
        ):
            v = self.V_T[mask]
            out[name] = {
                "centre": centre,
                "count": int(mask.sum()),
                "weight": weight.as_dict(),
                "mean_V_T": float(v.mean()) if v.size else None,
                "sd_V_T": float(v.std(ddof=1)) if v.size > 1 else None,
                "max_abs_error": float(np.max(np.abs(v - centre))) if v.size else None,
            }
        # nearest-centre assignment, independent of the absorption flag
        nearest_abs = np.abs(self.V_T + self.a_T) < np.abs(self.V_T - 1.0)
        out["nearest_centre_absorbed_fraction"] = float(nearest_abs.mean())
        return out

    def summary(self) -> dict:
        return {
            "measure": self.measure,
            "T": self.T,
            "eps_floor": self.eps_floor,
            "a_T": self.a_T,
            "n_paths": self.n_paths,
            "grid": self.grid.summary(),
            "seed": self.seed,
            "substream_offset": self.substream_offset,
            "mean_V_T": self.mean_V.as_dict(),
            "rms_error": self.rms_error,
            "min_V_Zunits": float(self.min_V_Z.min()),
            "min_V_Bunits": float(self.min_V_B.min()),
            "flagged_paths": self.flagged_paths().tolist()[:100],
            "clusters": self.cluster_stats(),
        }

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO()
        buf.write(HEDGE_CSV_HEADER + "\n")
        err = self.repl_error
        for i in range(self.n_paths):
            tt = self.tau_time[i]
            buf.write(
                f"{i},{int(self.absorbed[i])},{'' if math.isinf(tt) else repr(float(tt))},"
                f"{float(self.V_T[i])!r},{float(err[i])!r},"
                f"{float(self.min_V_Z[i])!r},{float(self.min_V_B[i])!r}\n"
            )
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _wealth_on_grid(z: np.ndarray, times: np.ndarray, T: float, eps: float, coef: float):
    """Self-financing wealth for one block; returns (V, H).

    The left-point Itô sum is accumulated by ``cumsum`` so V_T is the
    sequential telescoped sum of the increments, bit for bit.
    """
    left = z[:, :-1]
    s = np.maximum(T - times[:-1], eps)
    H = np.exp(-0.5 * left * left / s)
    H *= coef / np.sqrt(s)
    H[left <= 0] = 0.0
    inc = np.diff(z, axis=1)
    inc *= H
    V = np.empty_like(z)
    V[:, 0] = 0.0
    np.cumsum(inc, axis=1, out=V[:, 1:])
    return V, H


def replicate_on_grids(
    measure: str,
    T: float,
    n_paths: int,
    sim_grid: TimeGrid,
    hedge_grids: Sequence[TimeGrid],
    seed: int,
    substream_offset: Optional[int] = None,
    threads: int = 1,
    bridge_correction: bool = True,
    keep_paths: int = 0,
) -> list:
    """Simulate Ž once on ``sim_grid`` and hedge on each sub-grid of it.

    Every hedge grid must be a subset of ``sim_grid`` ending at T and carry
    an ``eps_floor``.  Returns one HedgeRun per hedge grid, all driven by the
    same paths.
    """
    if measure not in paths.MEASURES:
        raise ValueError(f"measure must be one of {paths.MEASURES}, got {measure!r}")
    if not T > 0 or abs(sim_grid.horizon - T) > 1e-12:
        raise ValueError("simulation grid must end at T")
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    offset = _OFFSETS[measure] if substream_offset is None else substream_offset
    specs = []
    for g in hedge_grids:
        if g.eps_floor is None:
            raise ValueError("hedge grid needs an eps_floor (use TimeGrid.refined)")
        if abs(g.horizon - T) > 1e-12:
            raise ValueError("hedge grid must end at T")
        specs.append((g, sim_grid.indices_of(g)))
    dt = sim_grid.dt
    sqdt = np.sqrt(dt)
    coef = _hedge_coefficient(T)
    keep_paths = min(keep_paths, BLOCK_SIZE, n_paths)

    def block(b):
        rng = block_rng(seed, offset, b)
        if measure == "Q":
            zc = paths.bes3_block(rng, sqdt, 1.0)
            tau = np.full(BLOCK_SIZE, paths.NEVER, dtype=np.int64)
        else:
            zc, tau = paths.stopped_bm_block(rng, dt, 1.0, bridge_correction)
        rows = min(BLOCK_SIZE, n_paths - b * BLOCK_SIZE)
        zc = zc[:rows]
        tau = tau[:rows]
        results = []
        for g, idx in specs:
            z = zc[:, idx]
            V, H = _wealth_on_grid(z, g.times, T, g.eps_floor, coef)
            with np.errstate(divide="ignore", invalid="ignore"):
                vb = np.where(z > 0, V / z, np.inf)
            kept = {}
            if b == 0 and keep_paths:
                kept = {"zcheck": z[:keep_paths].copy(), "V": V[:keep_paths].copy(),
                        "H": H[:keep_paths].copy()}
            results.append((z[:, -1].copy(), V[:, -1].copy(), V.min(axis=1), vb.min(axis=1), kept))
        return tau, results

    parts = run_blocks(block, n_blocks_for(n_paths), threads)
    tau_idx = np.concatenate([p[0] for p in parts])
    absorbed = tau_idx >= 0
    tau_time = np.full(n_paths, np.inf)
    tau_time[absorbed] = sim_grid.times[tau_idx[absorbed]]
    a_T = a_constant(T)
    runs = []
    for k, (g, _) in enumerate(specs):
        cols = [np.concatenate([p[1][k][j] for p in parts]) for j in range(4)]
        runs.append(HedgeRun(
            g, measure, T, g.eps_floor, a_T, cols[0], absorbed.copy(), tau_time.copy(),
            cols[1], cols[2], cols[3], seed, offset, parts[0][1][k][4],
        ))
    return runs


def replicate(
    measure: str,
    T: float,
    n_paths: int,
    grid: Optional[TimeGrid],
    seed: int,
    substream_offset: Optional[int] = None,
    threads: int = 1,
    eps_floor: Optional[float] = None,
    bridge_correction: bool = True,
    keep_paths: int = 0,
) -> HedgeRun:
    """Delta-hedge the conditional default probability under ``measure``.

    ``grid`` defaults to ``TimeGrid.refined(T, eps_floor)``.  A grid without
    its own ``eps_floor`` (e.g. a uniform grid) needs ``eps_floor`` passed
    explicitly.
    """
    if grid is None:
        if eps_floor is None:
            raise ValueError("eps_floor is required when no grid is given")
        grid = TimeGrid.refined(T, eps_floor)
    elif grid.eps_floor is None or eps_floor is not None:
        if eps_floor is None:
            raise ValueError("grid has no eps_floor; pass one explicitly")
        grid = TimeGrid(grid.times, terminal=T, eps_floor=eps_floor)
    return replicate_on_grids(
        measure, T, n_paths, grid, [grid], seed, substream_offset, threads,
        bridge_correction, keep_paths,
    )[0]


# ---------------------------------------------------------------------------
# studies


@dataclass
class RefinementStudy:
    eps_floors: tuple
    runs: list

    @property
    def rms(self) -> list:
        return [r.rms_error for r in self.runs]

    @property
    def monotone(self) -> bool:
        """RMS strictly decreasing as the floor shrinks."""
        order = np.argsort(self.eps_floors)[::-1]
        r = [self.rms[i] for i in order]
        return all(b < a for a, b in zip(r, r[1:]))

    def summary(self) -> dict:
        rows = []
        for eps, run in zip(self.eps_floors, self.runs):
            rows.append({
                "eps_floor": eps,
                "n_times": run.grid.n_times,
                "rms_error": run.rms_error,
                "mean_V_T": run.mean_V.as_dict(),
            })
        return {"measure": self.runs[0].measure, "rows": rows, "monotone": self.monotone}


def refinement_study(
    T: float = 1.0,
    eps_floors: Sequence[float] = DEFAULT_EPS,
    n_paths: int = 20_000,
    seed: int = 0,
    measure: str = "Q",
    h_max: float = 2.0**-13,
    ratio: float = 0.125,
    threads: int = 1,
    substream_offset: Optional[int] = None,
) -> RefinementStudy:
    """Hedge the same simulated paths on geometric grids with several floors."""
    grids = [TimeGrid.refined(T, e, h_max=h_max, ratio=ratio) for e in eps_floors]
    union = TimeGrid.union(*grids)
    runs = replicate_on_grids(measure, T, n_paths, union, grids, seed, substream_offset, threads)
    return RefinementStudy(tuple(eps_floors), runs)


@dataclass
class AdmissibilityReport:
    budgets: tuple
    b_unit_minima: list
    z_unit_floor: float
    floor_bound: float
    floor_ok: bool
    minima_decrease: bool
    note: str

    def as_dict(self) -> dict:
        return {
            "budgets": list(self.budgets),
            "b_unit_minima": self.b_unit_minima,
            "z_unit_floor": self.z_unit_floor,
            "floor_bound": self.floor_bound,
            "floor_ok": self.floor_ok,
            "minima_decrease": self.minima_decrease,
            "note": self.note,
        }


def admissibility_probe(
    run: HedgeRun,
    budgets: Sequence[int] = DEFAULT_BUDGETS,
    tol: float = 0.05,
) -> AdmissibilityReport:
    """Empirical lower bounds of the wealth in Z units and in B units.

    The B-unit minimum is taken over the first n paths for each budget n;
    a minimum that keeps falling as n grows is evidence (not proof) that no
    finite floor exists.
    """
    if run.measure != "Q":
        raise ValueError("the admissibility probe applies to runs under Q")
    budgets = tuple(int(b) for b in budgets)
    if list(budgets) != sorted(budgets) or budgets[-1] > run.n_paths:
        raise ValueError(f"budgets must be increasing and at most {run.n_paths}")
    minima = [float(run.min_V_B[:b].min()) for b in budgets]
    floor = float(run.min_V_Z.min())
    bound = -run.a_T - tol
    decrease = minima[-1] < minima[0]
    note = (
        "B-unit minimum keeps falling with the path budget; no finite floor observed"
        if decrease else "B-unit minimum did not fall across budgets"
    )
    return AdmissibilityReport(budgets, minima, floor, bound, floor >= bound, decrease, note)


def measure_consistency(run_q: HedgeRun, run_qcheck: HedgeRun, k: float = 4.0) -> dict:
    """Compare E_Q[V_T] with E_Qcheck[Ž_T V_T] from two independent runs."""
    if run_q.measure != "Q" or run_qcheck.measure != "Qcheck":
        raise ValueError("need one run under Q and one under Qcheck")
    q = run_q.mean_V
    reweighted = mc_mean(run_qcheck.zcheck_T * run_qcheck.V_T)
    d = difference(q, reweighted)
    return {
        "Q_mean_V_T": q.as_dict(),
        "Qcheck_reweighted": reweighted.as_dict(),
        "z": d.z_score(0.0),
        "ok": d.within(0.0, k),
    }
