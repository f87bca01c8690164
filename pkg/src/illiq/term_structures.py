"""Two-price term structures.

For a foreign zero-coupon bond the *market price* in synthetic foreign
units is Q(t,T) = P~(t,T) / S_t, while its *liquidity-adjusted price* (the
fundamental value) is

    Qcheck(t,T) = E_Qcheck[ Bcheck_t / Bcheck_T | F_t ],

with the post-default replacement of the discount factor for T >= tau.
The illiquidity premium is L = S_t (Qcheck - Q) and the illiquidity factor
is Xi = Q / Qcheck.

At t = 0 the expectations are plain Monte Carlo means.  For t > 0 outer
states are drawn at time t (under Q by default) and the conditional
expectation at each state is estimated by restarting the Markov state and
simulating ``n_inner`` exact transitions to T.  The reported standard error
at t > 0 is the standard error of the per-state estimates over the outer
sample; it already contains the inner noise.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .foellmer import nested_map
from .scenarios import Scenario, classify_kind
from .stats import MCEstimate, difference, exact, excess_kurtosis, mc_mean, ratio_estimate

__all__ = [
    "DEFAULT_N_INNER",
    "DEFAULT_N_OUTER",
    "StateBatch",
    "PremiumEntry",
    "PremiumSurface",
    "market_price_Q",
    "liquidity_adjusted_price",
    "illiquidity_premium",
    "illiquidity_factor",
    "two_price_shortcut",
    "conditional_liquidity_adjusted_price",
    "premium_on_states",
    "ForwardWeights",
    "forward_measure_weights",
    "forward_martingale_check",
    "discounted_market_price_check",
    "BoundsReport",
    "kind4_bounds_check",
    "premium_surface",
    "CSV_HEADER",
]

log = logging.getLogger(__name__)

DEFAULT_N_INNER = 4096
DEFAULT_N_OUTER = 256
KURTOSIS_WARN = 50.0
CSV_HEADER = "t,T,Q_mean,Q_se,Qcheck_mean,Qcheck_se,S_mean,L_mean,L_se,Xi_mean,Xi_se,n_paths"

# substream offsets, one family per use so estimates never share draws
_OFF_T0 = 100
_OFF_OUTER = 20_000
_OFF_INNER = 40_000
_OFF_LOWER = 60_000
_OFF_FORWARD = 80_000
_OFF_LEMMA = 90_000


def _check_times(t: float, T: float) -> None:
    if not (0 <= t <= T):
        raise ValueError(f"need 0 <= t <= T, got t={t!r}, T={T!r}")


def _seed(scenario: Scenario, seed: Optional[int]) -> int:
    return scenario.spec.seed if seed is None else int(seed)


def _require_post_default(scenario: Scenario, T: float) -> None:
    if scenario.needs_post_default and scenario.post is None:
        p = scenario.deflator.explosion_probability(T)
        if p is None or p > 0:
            raise ValueError(f"{scenario.kind.value}: Qcheck[tau <= {T}] > 0 but no "
                             "post-default curve was supplied")


# ---------------------------------------------------------------------------
# conditional machinery


def conditional_liquidity_adjusted_price(t: float, T: float, scenario: Scenario, states: dict,
                                         n_inner: int = DEFAULT_N_INNER, seed: int = 0,
                                         substream_offset: int = _OFF_INNER,
                                         threads: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Nested estimate of Qcheck(t,T) at each given time-t state.

    Returns ``(values, stderr)`` arrays.
    """
    _check_times(t, T)
    n = len(next(iter(states.values())))
    if t == T:
        return np.ones(n), np.zeros(n)

    def inner(rep, rng):
        s_t = scenario.unpack(rep)
        s_T = scenario.advance(s_t, t, T - t, "Qcheck", rng)
        return scenario.discount(t, T, s_t, s_T)

    samples = nested_map(inner, scenario.pack(states), n_inner, seed, substream_offset, threads)
    return samples.mean(axis=1), samples.std(axis=1, ddof=1) / math.sqrt(n_inner)


def _conditional_lower_bound(t, T, scenario, states, n_inner, seed, offset, threads):
    def inner(rep, rng):
        s_t = scenario.unpack(rep)
        s_T = scenario.advance(s_t, t, T - t, "Q", rng)
        return scenario.bank_ratio(t, T, s_t, s_T)

    samples = nested_map(inner, scenario.pack(states), n_inner, seed, offset, threads)
    return samples.mean(axis=1), samples.std(axis=1, ddof=1) / math.sqrt(n_inner)


@dataclass
class StateBatch:
    """Per-state prices at time t for a sample of outer states."""

    t: float
    T: float
    states: dict
    S: np.ndarray
    Q: np.ndarray
    Qcheck: np.ndarray
    Qcheck_se: np.ndarray
    alive: np.ndarray

    @property
    def L(self) -> np.ndarray:
        return self.S * (self.Qcheck - self.Q)

    @property
    def L_se(self) -> np.ndarray:
        return self.S * self.Qcheck_se

    @property
    def Xi(self) -> np.ndarray:
        if np.any(self.Qcheck <= 0):
            raise ValueError("Qcheck estimate must be strictly positive")
        return self.Q / self.Qcheck


def premium_on_states(t: float, T: float, scenario: Scenario, n_outer: int = DEFAULT_N_OUTER,
                      n_inner: int = DEFAULT_N_INNER, seed: Optional[int] = None,
                      outer_measure: str = "Q", threads: int = 1, key: int = 0) -> StateBatch:
    """Sample ``n_outer`` states at t and price the bond at each of them."""
    _check_times(t, T)
    _require_post_default(scenario, T)
    seed = _seed(scenario, seed)
    states = scenario.sample_states(t, n_outer, outer_measure, seed, _OFF_OUTER + key, threads)
    qc, qc_se = conditional_liquidity_adjusted_price(t, T, scenario, states, n_inner, seed,
                                                     _OFF_INNER + key, threads)
    return StateBatch(t, T, states, scenario.S(states, t), scenario.market_price(t, T, states),
                      qc, qc_se, scenario.alive(states))


# ---------------------------------------------------------------------------
# single-quantity operations


def market_price_Q(t: float, T: float, scenario: Scenario, n_paths: Optional[int] = None,
                   seed: Optional[int] = None, method: str = "closed_form",
                   outer_measure: str = "Q", threads: int = 1,
                   ci_level: float = 0.95) -> MCEstimate:
    """Q(t,T) = P~(t,T) / S_t.

    ``method="closed_form"`` evaluates the scenario's price function (at t > 0
    averaged over sampled states).  ``method="mc"`` estimates
    Q(0,T) = E_Q[B_0 S_T / B_T] / S_0, which is valid only when P~/B is a true
    Q-martingale.
    """
    _check_times(t, T)
    n = n_paths or scenario.spec.n_paths
    if t == T:
        return exact(1.0, n, ci_level)
    seed = _seed(scenario, seed)
    s0 = scenario.initial_states(1)
    if method == "mc":
        if t != 0:
            raise ValueError("the Monte Carlo route is only defined at t = 0")
        if not scenario.ptilde_true_martingale:
            raise ValueError("E_Q[B_0 S_T / B_T] is only a lower bound when P~/B is a strict "
                             "local martingale")
        s_T = scenario.sample_states(T, n, "Q", seed, _OFF_T0 + 1, threads)
        s0n = scenario.initial_states(n)
        return mc_mean(scenario.bank_ratio(0.0, T, s0n, s_T), ci_level)
    if method != "closed_form":
        raise ValueError(f"unknown method {method!r}")
    if t == 0:
        return exact(float(scenario.market_price(0.0, T, s0)[0]), n, ci_level)
    states = scenario.sample_states(t, n, outer_measure, seed, _OFF_OUTER, threads)
    S = scenario.S(states, t)
    if np.any(S <= 0):
        raise ValueError("S_t must be strictly positive")
    return mc_mean(scenario.market_price(t, T, states), ci_level)


def _qcheck_t0(T, scenario, n, seed, threads, ci_level, key=0):
    s_T = scenario.sample_states(T, n, "Qcheck", seed, _OFF_T0 + 2 + key, threads)
    d = scenario.discount_from_zero(T, s_T)
    est = mc_mean(d, ci_level)
    k = excess_kurtosis(d)
    if k > KURTOSIS_WARN:
        log.warning("discount-factor samples are heavy tailed (excess kurtosis %.1f); "
                    "the standard error may be unreliable", k)
    return est, k


def liquidity_adjusted_price(t: float, T: float, scenario: Scenario,
                             n_paths: Optional[int] = None, n_outer: int = DEFAULT_N_OUTER,
                             n_inner: int = DEFAULT_N_INNER, seed: Optional[int] = None,
                             outer_measure: str = "Q", threads: int = 1,
                             ci_level: float = 0.95) -> MCEstimate:
    """Qcheck(t,T) = E_Qcheck[Bcheck_t / Bcheck_T | F_t].

    At t = 0 an unconditional mean over ``n_paths`` Qcheck samples; for t > 0
    the mean over ``n_outer`` states of nested estimates.
    """
    _check_times(t, T)
    _require_post_default(scenario, T)
    n = n_paths or scenario.spec.n_paths
    if t == T:
        return exact(1.0, n, ci_level)
    seed = _seed(scenario, seed)
    if t == 0:
        return _qcheck_t0(T, scenario, n, seed, threads, ci_level)[0]
    batch = premium_on_states(t, T, scenario, n_outer, n_inner, seed, outer_measure, threads)
    return mc_mean(batch.Qcheck, ci_level)


def illiquidity_premium(t: float, T: float, scenario: Scenario, **kw) -> MCEstimate:
    """L(t,T) = S_t (Qcheck(t,T) - Q(t,T))."""
    return _entry(t, T, scenario, **kw).L


def illiquidity_factor(t: float, T: float, scenario: Scenario, **kw) -> MCEstimate:
    """Xi(t,T) = Q(t,T) / Qcheck(t,T), first-order error propagation at t = 0."""
    return _entry(t, T, scenario, **kw).Xi


def two_price_shortcut(T: float, scenario: Scenario, n_paths: Optional[int] = None,
                       seed: Optional[int] = None, threads: int = 1,
                       ci_level: float = 0.95) -> MCEstimate:
    """Q(0,T) / E_Q[Z_T], with E_Q[Z_T] estimated under Q."""
    n = n_paths or scenario.spec.n_paths
    seed = _seed(scenario, seed)
    s_T = scenario.sample_states(T, n, "Q", seed, _OFF_T0 + 3, threads)
    ez = mc_mean(scenario.Z(s_T, T), ci_level)
    q = market_price_Q(0.0, T, scenario, n, seed)
    return ratio_estimate(q, ez)


# ---------------------------------------------------------------------------
# surface


@dataclass
class PremiumEntry:
    t: float
    T: float
    Q: MCEstimate
    Qcheck: MCEstimate
    S: MCEstimate
    L: MCEstimate
    Xi: MCEstimate
    n_paths: int
    method: str
    kurtosis: Optional[float] = None

    def csv_row(self) -> str:
        vals = [self.t, self.T, self.Q.mean, self.Q.stderr, self.Qcheck.mean, self.Qcheck.stderr,
                self.S.mean, self.L.mean, self.L.stderr, self.Xi.mean, self.Xi.stderr]
        return ",".join(repr(float(v)) for v in vals) + f",{self.n_paths}"

    def as_dict(self) -> dict:
        return {
            "t": self.t, "T": self.T, "method": self.method, "n_paths": self.n_paths,
            "Q": self.Q.as_dict(), "Qcheck": self.Qcheck.as_dict(), "S": self.S.as_dict(),
            "L": self.L.as_dict(), "Xi": self.Xi.as_dict(), "excess_kurtosis": self.kurtosis,
        }


def _entry(t: float, T: float, scenario: Scenario, n_paths: Optional[int] = None,
           n_outer: int = DEFAULT_N_OUTER, n_inner: int = DEFAULT_N_INNER,
           seed: Optional[int] = None, outer_measure: str = "Q", threads: int = 1,
           ci_level: float = 0.95, key: int = 0) -> PremiumEntry:
    _check_times(t, T)
    _require_post_default(scenario, T)
    n = n_paths or scenario.spec.n_paths
    seed = _seed(scenario, seed)
    if t == T:
        one = exact(1.0, n, ci_level)
        return PremiumEntry(t, T, one, one, one, exact(0.0, n, ci_level), one, n, "maturity")
    if t == 0:
        q = market_price_Q(0.0, T, scenario, n, seed, ci_level=ci_level)
        qc, kurt = _qcheck_t0(T, scenario, n, seed, threads, ci_level, key)
        s0 = float(scenario.S(scenario.initial_states(1), 0.0)[0])
        L = difference(qc, q).scaled(s0)
        return PremiumEntry(t, T, q, qc, exact(s0, n, ci_level), L, ratio_estimate(q, qc), n,
                            "unconditional", kurt)
    b = premium_on_states(t, T, scenario, n_outer, n_inner, seed, outer_measure, threads, key)
    return PremiumEntry(t, T, mc_mean(b.Q, ci_level), mc_mean(b.Qcheck, ci_level),
                        mc_mean(b.S, ci_level), mc_mean(b.L, ci_level), mc_mean(b.Xi, ci_level),
                        n_outer, "nested", excess_kurtosis(b.Qcheck))


@dataclass
class PremiumSurface:
    """Estimates of Q, Qcheck, S, L and Xi keyed by (t, T)."""

    entries: Dict[Tuple[float, float], PremiumEntry]
    scenario: dict
    seed: int
    table_cell: Optional[dict] = None

    def __getitem__(self, key) -> PremiumEntry:
        return self.entries[key]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for key in sorted(self.entries):
            buf.write(self.entries[key].csv_row() + "\n")
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "table_cell": self.table_cell,
            "entries": [self.entries[k].as_dict() for k in sorted(self.entries)],
        }

    def consistency_problems(self, rtol: float = 1e-9) -> List[str]:
        out = []
        for (t, T), e in self.entries.items():
            if not (e.Q.mean >= 0 and e.Qcheck.mean > 0):
                out.append(f"({t},{T}): prices not positive")
            if e.method != "nested":
                if not math.isclose(e.Xi.mean, e.Q.mean / e.Qcheck.mean, rel_tol=rtol):
                    out.append(f"({t},{T}): Xi != Q / Qcheck")
            if not math.isclose(e.L.mean, e.S.mean * (e.Qcheck.mean - e.Q.mean),
                                rel_tol=rtol, abs_tol=1e-12) and e.method != "nested":
                out.append(f"({t},{T}): L != S (Qcheck - Q)")
        return out


def premium_surface(scenario: Scenario, pairs: Iterable[Tuple[float, float]],
                    n_paths: Optional[int] = None, n_outer: int = DEFAULT_N_OUTER,
                    n_inner: int = DEFAULT_N_INNER, seed: Optional[int] = None,
                    outer_measure: str = "Q", threads: int = 1, ci_level: float = 0.95,
                    classify: bool = False) -> PremiumSurface:
    """Evaluate every (t, T) pair with t <= T; pairs with t > T are skipped."""
    seed = _seed(scenario, seed)
    entries = {}
    for k, (t, T) in enumerate(sorted(set((float(a), float(b)) for a, b in pairs))):
        if t > T:
            continue
        entries[(t, T)] = _entry(t, T, scenario, n_paths, n_outer, n_inner, seed,
                                 outer_measure, threads, ci_level, key=k)
    cell = None
    if classify:
        probe = max((T for _, T in entries), default=scenario.spec.horizon)
        cell = classify_kind(scenario, probe, n_paths or scenario.spec.n_paths,
                             seed=seed, threads=threads).as_dict()
    return PremiumSurface(entries, scenario.spec.echo(), seed, cell)


# ---------------------------------------------------------------------------
# forward measures


@dataclass
class ForwardWeights:
    """Per-path weights of the T-forward measures relative to Qcheck.

    ``qcheck_T`` is the Qcheck^T density (normalised discount factor
    Bcheck_0 / Bcheck_T), ``qtilde_T`` the Q~^T density, equal to
    ``qcheck_T * xi_t / xi_0``.
    """

    t: float
    T: float
    discount: np.ndarray
    qcheck_T: np.ndarray
    qtilde_T: np.ndarray
    xi_t: np.ndarray
    xi_0: float

    def weighted_xi(self, ci_level: float = 0.95) -> MCEstimate:
        """Qcheck^T mean of Xi(t,T) as a ratio estimator with delta-method error."""
        d, x = self.discount, self.xi_t
        n = d.size
        dbar = float(np.mean(d))
        r = float(np.mean(d * x)) / dbar
        resid = (d * x - r * d) / dbar
        return MCEstimate(r, float(np.std(resid, ddof=1)) / math.sqrt(n), n, ci_level)


def forward_measure_weights(t: float, T: float, scenario: Scenario,
                            n_paths: Optional[int] = None, seed: Optional[int] = None,
                            n_inner: int = DEFAULT_N_INNER, threads: int = 1,
                            key: int = 0) -> ForwardWeights:
    """Weights for Q~^T and Qcheck^T on paths sampled under Qcheck.

    Only defined when P~/B is a true Q-martingale.  Qcheck(t,T) per path uses
    the scenario's closed form when it has one, otherwise a nested estimate.
    """
    if not scenario.ptilde_true_martingale:
        raise ValueError(f"{scenario.kind.value}: P~/B is not a true Q-martingale, the "
                         "forward-measure relation does not apply")
    _check_times(t, T)
    _require_post_default(scenario, T)
    n = n_paths or scenario.spec.n_paths
    seed = _seed(scenario, seed)
    s_t, s_T = scenario.sample_states(t, n, "Qcheck", seed, _OFF_FORWARD + key, threads, then=T)
    d = scenario.discount_from_zero(T, s_T)
    w = d / np.mean(d)
    s0 = scenario.initial_states(1)
    qc0 = scenario.qcheck_closed_form(0.0, T, s0)
    qc0 = float(np.mean(d)) if qc0 is None else float(qc0[0])
    xi0 = float(scenario.market_price(0.0, T, s0)[0]) / qc0
    if t == 0:
        xi_t = np.full(n, xi0)
    else:
        qc = scenario.qcheck_closed_form(t, T, s_t)
        if qc is None:
            qc, _ = conditional_liquidity_adjusted_price(t, T, scenario, s_t, n_inner, seed,
                                                         _OFF_INNER + key, threads)
        xi_t = scenario.market_price(t, T, s_t) / qc
    return ForwardWeights(t, T, d, w, w * xi_t / xi0, xi_t, xi0)


def forward_martingale_check(T: float, ts: Sequence[float], scenario: Scenario,
                             n_paths: Optional[int] = None, seed: Optional[int] = None,
                             threads: int = 1, k: float = 4.0) -> dict:
    """Qcheck^T mean of Xi(t,T) at each t against its t = 0 value Xi(0,T)."""
    rows = []
    ok = True
    for j, t in enumerate(ts):
        fw = forward_measure_weights(t, T, scenario, n_paths, seed, threads=threads, key=j)
        est = fw.weighted_xi()
        within = est.within(fw.xi_0, k)
        ok &= within
        rows.append({"t": t, "mean": est.mean, "stderr": est.stderr, "xi_0": fw.xi_0,
                     "z": est.z_score(fw.xi_0), "within": within})
    return {"ok": ok, "rows": rows}


def discounted_market_price_check(T: float, ts: Sequence[float], scenario: Scenario,
                                  n_paths: Optional[int] = None, seed: Optional[int] = None,
                                  threads: int = 1, k: float = 4.0) -> dict:
    """Qcheck mean of Q(t,T) / Bcheck_t at each t, with Q 1{tau <= t} = 0.

    Compared against the exact t = 0 value Q(0,T).
    """
    n = n_paths or scenario.spec.n_paths
    seed = _seed(scenario, seed)
    ref = float(scenario.market_price(0.0, T, scenario.initial_states(1))[0])
    rows, ok = [], True
    for j, t in enumerate(ts):
        s = scenario.sample_states(t, n, "Qcheck", seed, _OFF_LEMMA + j, threads)
        alive = scenario.alive(s)
        bc = scenario.Bcheck(s, t)
        q = scenario.market_price(t, T, s)
        v = np.zeros(n)
        v[alive] = q[alive] / bc[alive]
        est = mc_mean(v) if t > 0 else exact(ref, n)
        within = est.within(ref, k)
        ok &= within
        rows.append({"t": t, "mean": est.mean, "stderr": est.stderr, "reference": ref,
                     "z": est.z_score(ref), "within": within})
    return {"ok": ok, "rows": rows}


# ---------------------------------------------------------------------------
# lower bound


@dataclass
class BoundsReport:
    t: float
    T: float
    lower: MCEstimate
    Q: MCEstimate
    Qcheck: MCEstimate
    holds: bool
    n_states: int
    n_violations: int
    buckets: List[dict] = field(default_factory=list)

    @property
    def signs(self) -> set:
        return {b["sign"] for b in self.buckets}

    def as_dict(self) -> dict:
        return {"t": self.t, "T": self.T, "lower": self.lower.as_dict(), "Q": self.Q.as_dict(),
                "Qcheck": self.Qcheck.as_dict(), "holds": self.holds,
                "n_states": self.n_states, "n_violations": self.n_violations,
                "buckets": self.buckets}


def kind4_bounds_check(t: float, T: float, scenario: Scenario, n_paths: Optional[int] = None,
                       n_outer: int = DEFAULT_N_OUTER, n_inner: int = DEFAULT_N_INNER,
                       seed: Optional[int] = None, n_buckets: int = 4, k: float = 4.0,
                       threads: int = 1) -> BoundsReport:
    """Check (1/S_t) E_Q[B_t S_T / B_T | F_t] <= min(Q, Qcheck) + k * joint stderr.

    At t = 0 the three unconditional estimates are compared.  At t > 0 the
    check runs state by state over ``n_outer`` Q-distributed states, and the
    sign of L is summarised per bucket of the scenario's bucket key.
    """
    _check_times(t, T)
    n = n_paths or scenario.spec.n_paths
    seed = _seed(scenario, seed)
    if t == 0 or t == T:
        s_T = scenario.sample_states(T, n, "Q", seed, _OFF_LOWER, threads)
        lower = (mc_mean(scenario.bank_ratio(0.0, T, scenario.initial_states(n), s_T))
                 if t == 0 else exact(1.0, n))
        e = _entry(t, T, scenario, n, n_outer, n_inner, seed, threads=threads)
        lo_q = e.Q if e.Q.mean <= e.Qcheck.mean else e.Qcheck
        holds = lower.mean <= lo_q.mean + k * math.hypot(lower.stderr, lo_q.stderr) + 1e-12
        return BoundsReport(t, T, lower, e.Q, e.Qcheck, holds, 1, 0 if holds else 1)
    b = premium_on_states(t, T, scenario, n_outer, n_inner, seed, "Q", threads)
    lb, lb_se = _conditional_lower_bound(t, T, scenario, b.states, n_inner, seed,
                                         _OFF_LOWER, threads)
    lo = np.minimum(b.Q, b.Qcheck)
    lo_se = np.where(b.Q <= b.Qcheck, 0.0, b.Qcheck_se)
    viol = lb > lo + k * np.hypot(lb_se, lo_se) + 1e-12
    key = scenario.bucket_key(b.states)
    order = np.argsort(key, kind="stable")
    buckets = []
    for j, idx in enumerate(np.array_split(order, n_buckets)):
        if idx.size < 2:
            continue
        est = mc_mean(b.L[idx])
        lo_ci, hi_ci = est.mean - 3 * est.stderr, est.mean + 3 * est.stderr
        sign = "+" if lo_ci > 0 else ("-" if hi_ci < 0 else "0")
        buckets.append({"bucket": j, "key_min": float(key[idx].min()),
                        "key_max": float(key[idx].max()), "L_mean": est.mean,
                        "L_se": est.stderr, "sign": sign, "n": int(idx.size)})
    return BoundsReport(t, T, mc_mean(lb), mc_mean(b.Q), mc_mean(b.Qcheck),
                        not np.any(viol), n_outer, int(viol.sum()), buckets)
