"""Named market models and the empirical kind classifier.

Every scenario is Markov in a small state vector and knows the exact
one-step transition of that state under Q and under Qcheck.  All quantities
of the FX-like setting (recovery rate S, domestic account B, foreign
account Bcheck, deflator Z, market price Q and the stochastic discount
factor Bcheck_t / Bcheck_T) are functions of the state.

Scenario summary (S = 1 throughout):

==================  =====================================  =====================
kind                state / dynamics under Q               deflator Z
==================  =====================================  =====================
Kind1               none beyond Z; B = e^{rt}              exp(sigma W - sigma^2 t/2)
Kind2Canonical      R ~ Bes3(z0); B = 1                    z0 / R
Kind3Hyper          X ~ Bes3(x0); B = Bcheck = X / x0      1
Kind4Composite      R ~ Bes3(z0), Y ~ Bes3(y0) indep.;     z0 / R
                    B = Y / y0
PureIlliquidity     Y = |x + W|^2 (4-D); B = X / X_0 with  |x|^2 / Y
                    X = Y / f(t)
==================  =====================================  =====================

Under Qcheck the Bes3 deflator driver R becomes Brownian motion stopped at 0
and Y in the pure-illiquidity model becomes a squared Bessel process of
dimension 0; both reach 0 at the explosion time tau.
"""

from __future__ import annotations

import enum
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .foellmer import (
    DeflatorModel,
    GeometricDeflator,
    InverseBes3Deflator,
    InverseBesq4Deflator,
    UnitDeflator,
)
from .paths import (
    AbsorptionInfo,
    BLOCK_SIZE,
    TimeGrid,
    besq0_step,
    block_rng,
    n_blocks_for,
    normal_cdf,
    run_blocks,
    simulate_bes3,
    simulate_besq0,
    simulate_bm,
    simulate_stopped_bm,
)
from .stats import DefectTest, Verdict, defect_test

__all__ = [
    "Kind",
    "SpecError",
    "DeterministicFunction",
    "PostDefaultCurve",
    "ScenarioSpec",
    "MarketState",
    "Scenario",
    "build_scenario",
    "pure_illiquidity_price",
    "hyperliquidity_price",
    "KindClassification",
    "classify_kind",
    "TABLE_CELLS",
]


class Kind(str, enum.Enum):
    KIND1 = "Kind1"
    KIND2 = "Kind2Canonical"
    KIND3 = "Kind3Hyper"
    KIND4 = "Kind4Composite"
    PURE = "PureIlliquidity"


class SpecError(ValueError):
    """Invalid scenario specification; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


# ---------------------------------------------------------------------------
# deterministic ingredients


@dataclass(frozen=True)
class DeterministicFunction:
    """Strictly positive deterministic càdlàg function of time.

    ``kind`` is ``"exponential"`` (``a * exp(g t)``, constants are g = 0) or
    ``"piecewise"`` (right-continuous steps: ``values[k]`` on
    ``[breaks[k], breaks[k+1])``, with ``breaks[0] = 0``).
    """

    kind: str = "exponential"
    a: float = 1.0
    g: float = 0.0
    breaks: Tuple[float, ...] = ()
    values: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "exponential":
            if not (self.a > 0 and math.isfinite(self.a) and math.isfinite(self.g)):
                raise SpecError("f", "exponential form needs a > 0 and finite g")
        elif self.kind == "piecewise":
            if len(self.breaks) != len(self.values) or not self.breaks:
                raise SpecError("f", "piecewise form needs matching breaks and values")
            if self.breaks[0] != 0 or any(b1 <= b0 for b0, b1 in zip(self.breaks, self.breaks[1:])):
                raise SpecError("f", "breaks must start at 0 and increase strictly")
            if any(not v > 0 for v in self.values):
                raise SpecError("f", "values must be strictly positive")
        else:
            raise SpecError("f", f"unknown function kind {self.kind!r}")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "exponential":
            out = self.a * np.exp(self.g * t)
        else:
            k = np.searchsorted(np.asarray(self.breaks), t, side="right") - 1
            out = np.asarray(self.values)[np.clip(k, 0, len(self.values) - 1)]
        return float(out) if out.ndim == 0 else out

    @classmethod
    def parse(cls, text: str) -> "DeterministicFunction":
        """``const c`` | ``exp a g`` | ``piecewise t0:v0 t1:v1 ...``."""
        tok = text.split()
        if not tok:
            raise SpecError("f", "empty function spec")
        try:
            if tok[0] == "const" and len(tok) == 2:
                return cls("exponential", float(tok[1]), 0.0)
            if tok[0] == "exp" and len(tok) == 3:
                return cls("exponential", float(tok[1]), float(tok[2]))
            if tok[0] == "piecewise" and len(tok) >= 2:
                pairs = [p.split(":") for p in tok[1:]]
                return cls("piecewise", breaks=tuple(float(b) for b, _ in pairs),
                           values=tuple(float(v) for _, v in pairs))
        except ValueError as exc:
            raise SpecError("f", f"cannot parse {text!r}: {exc}") from None
        raise SpecError("f", f"cannot parse {text!r}; use 'const c', 'exp a g' or "
                             "'piecewise t0:v0 t1:v1 ...'")

    def to_text(self) -> str:
        if self.kind == "exponential":
            return f"const {self.a!r}" if self.g == 0 else f"exp {self.a!r} {self.g!r}"
        return "piecewise " + " ".join(f"{b!r}:{v!r}" for b, v in zip(self.breaks, self.values))


@dataclass(frozen=True)
class PostDefaultCurve:
    """Replacement discounting after the explosion time.

    ``flat`` means Qcheck°(t,T) = 1; ``deterministic`` uses the yield curve
    Qcheck°(t,T) = exp(-rate (T - t)) with account Bcheck°_t = exp(rate t).

    ``discounting`` fixes how the discount factor Bcheck_t / Bcheck_T is read
    for T >= tau:

    * ``ratio`` (default): Bcheck°_t / Bcheck°_T for every t <= T, also when
      t < tau, so pre-default states see the replacement curve's own ratio;
    * ``account``: the foreign account is continued by Bcheck° after tau, so
      for t < tau <= T the factor is Bcheck_t / Bcheck°_T.
    """

    kind: str = "flat"
    rate: float = 0.0
    discounting: str = "ratio"

    def __post_init__(self):
        if self.kind not in ("flat", "deterministic"):
            raise SpecError("post_default.curve", f"unknown curve {self.kind!r}")
        if self.discounting not in ("ratio", "account"):
            raise SpecError("post_default.discounting", f"unknown convention {self.discounting!r}")
        if self.kind == "flat" and self.rate != 0.0:
            raise SpecError("post_default.rate", "a flat curve has rate 0")
        if not math.isfinite(self.rate):
            raise SpecError("post_default.rate", "rate must be finite")

    def discount(self, t, T):
        """Qcheck°(t,T)."""
        return np.exp(-self.rate * (np.asarray(T, dtype=float) - t))

    def account(self, t):
        """Bcheck°_t with Bcheck°_0 = 1."""
        return np.exp(self.rate * np.asarray(t, dtype=float))


# ---------------------------------------------------------------------------
# scenario specification


@dataclass(frozen=True)
class ScenarioSpec:
    """Declarative description of one named market model.

    Fields not used by ``kind`` are ignored.  ``component_offsets`` gives the
    substream offsets of the deflator driver and, for the composite model,
    of the independent bank-account driver.
    """

    kind: Kind
    horizon: float = 1.0
    n_steps: int = 64
    n_paths: int = 100_000
    seed: int = 20_240_601
    sigma: float = 0.2
    rate: float = 0.0
    z0: float = 1.0
    x0: float = 1.0
    y0: float = 1.0
    x: Tuple[float, ...] = (1.0, 0.0, 0.0, 0.0)
    f: DeterministicFunction = DeterministicFunction()
    component_offsets: Tuple[int, int] = (0, 1)
    post_default: Optional[PostDefaultCurve] = PostDefaultCurve()
    bridge_correction: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", Kind(self.kind))
        except ValueError:
            raise SpecError("kind", f"unknown kind {self.kind!r}; expected one of "
                                    f"{[k.value for k in Kind]}") from None
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        object.__setattr__(self, "component_offsets", tuple(int(v) for v in self.component_offsets))
        self.validate()

    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise SpecError(name, msg)

        need(self.horizon > 0 and math.isfinite(self.horizon), "horizon", "must be positive")
        need(self.n_steps >= 1, "n_steps", "must be at least 1")
        need(self.n_paths >= 1, "n_paths", "must be at least 1")
        need(self.seed >= 0, "seed", "must be non-negative")
        need(len(self.component_offsets) == 2 and min(self.component_offsets) >= 0,
             "component_offsets", "needs two non-negative integers")
        k = self.kind
        if k is Kind.KIND1:
            need(0 <= self.sigma <= 5, "sigma", "must lie in [0, 5] (bounded volatility)")
            need(math.isfinite(self.rate), "rate", "must be finite")
        if k in (Kind.KIND2, Kind.KIND4):
            need(self.z0 > 0, "z0", "must be positive")
        if k is Kind.KIND4:
            need(self.y0 > 0, "y0", "must be positive")
            need(self.component_offsets[0] != self.component_offsets[1], "component_offsets",
                 "the two drivers need distinct substreams")
        if k is Kind.KIND3:
            need(self.x0 > 0, "x0", "must be positive")
        if k is Kind.PURE:
            need(len(self.x) == 4, "x", "must have four components")
            need(any(v != 0 for v in self.x), "x", "must be non-zero")
            if self.f.kind == "exponential":
                need(self.f.a > 0, "f", "must be strictly positive")

    def with_(self, **kw) -> "ScenarioSpec":
        return replace(self, **kw)

    def echo(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Kind):
                v = v.value
            elif isinstance(v, DeterministicFunction):
                v = v.to_text()
            elif isinstance(v, PostDefaultCurve):
                v = {"curve": v.kind, "rate": v.rate, "discounting": v.discounting}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.horizon, self.n_steps)


# ---------------------------------------------------------------------------
# market state on a grid


@dataclass
class MarketState:
    """Per-path, per-grid-time values of the FX-like quantities.

    After the explosion time under Qcheck, Bcheck and Z may be +inf (the
    foreign account of the canonical model explodes) and B may reach 0 (the
    pure-illiquidity account); the positivity invariants are asserted on
    {tau > t}.
    """

    grid: TimeGrid
    measure: str
    S: np.ndarray
    B: np.ndarray
    Bcheck: np.ndarray
    Bcheck_circ: np.ndarray
    Z: np.ndarray
    tau: AbsorptionInfo
    states: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.S.shape[0]

    def alive_mask(self) -> np.ndarray:
        ti = np.where(self.tau.tau_index >= 0, self.tau.tau_index, self.grid.n_times)
        return np.arange(self.grid.n_times)[None, :] < ti[:, None]

    def invariant_violations(self, rtol: float = 1e-12) -> list:
        bad = []
        if not (np.all(self.S > 0) and np.all(self.S <= 1)):
            bad.append("S outside (0, 1]")
        for name in ("B", "Bcheck", "Z", "S"):
            if not np.allclose(getattr(self, name)[:, 0], 1.0, rtol=0, atol=1e-12):
                bad.append(f"{name}_0 != 1")
        alive = self.alive_mask()
        for name in ("B", "Bcheck", "Bcheck_circ"):
            arr = getattr(self, name)
            if not np.all(arr[alive] > 0) or not np.all(np.isfinite(arr[alive])):
                bad.append(f"{name} not strictly positive and finite before tau")
        if self.measure == "Q" and not np.all(np.isfinite(self.Z)):
            bad.append("Z explodes under Q")
        with np.errstate(invalid="ignore", divide="ignore"):
            ref = self.S * self.Bcheck / (self.S[:, :1] * self.B)
        if not np.allclose(ref[alive], self.Z[alive], rtol=rtol * 1e3, atol=0):
            bad.append("Z != S Bcheck / (S_0 B)")
        return bad


# ---------------------------------------------------------------------------
# scenarios


def _h(x, dt):
    """E[x / X_T] for a Bes3 X with X_t = x, T - t = dt: 1 - 2 Phi(-x / sqrt(dt))."""
    return 1.0 - 2.0 * normal_cdf(-np.asarray(x, dtype=float) / math.sqrt(dt))


def _g(r, dt):
    """Absorption probability of Brownian motion from r within dt: 2 Phi(-r / sqrt(dt))."""
    r = np.asarray(r, dtype=float)
    return np.where(r > 0, 2.0 * normal_cdf(-np.maximum(r, 0.0) / math.sqrt(dt)), 1.0)


def _bes3_step(x, h, rng):
    g = rng.standard_normal((3,) + np.shape(x))
    return np.sqrt((x + math.sqrt(h) * g[0]) ** 2 + h * (g[1] ** 2 + g[2] ** 2))


def _bes4sq_step(y, h, rng):
    g = rng.standard_normal((4,) + np.shape(y))
    return (np.sqrt(y) + math.sqrt(h) * g[0]) ** 2 + h * (g[1] ** 2 + g[2] ** 2 + g[3] ** 2)


def _stopped_step(r, h, rng):
    g = rng.standard_normal(np.shape(r))
    u = rng.random(np.shape(r))
    r1 = r + math.sqrt(h) * g
    with np.errstate(over="ignore", invalid="ignore"):
        cross = (r <= 0) | (r1 <= 0) | (u < np.exp(-2.0 * r * r1 / h))
    return np.where(cross, 0.0, r1)


class Scenario(ABC):
    """A built market model: state dynamics plus pricing functions.

    States are dicts of equally long arrays keyed by ``state_names``.
    """

    state_names: Tuple[str, ...] = ()
    ptilde_true_martingale: bool = True
    needs_post_default: bool = False

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.deflator: DeflatorModel = self._make_deflator()

    @property
    def kind(self) -> Kind:
        return self.spec.kind

    @property
    def markov(self) -> bool:
        return True

    @property
    def post(self) -> Optional[PostDefaultCurve]:
        return self.spec.post_default

    # -- hooks -------------------------------------------------------------

    @abstractmethod
    def _make_deflator(self) -> DeflatorModel: ...

    @abstractmethod
    def initial_state(self) -> Dict[str, float]: ...

    @abstractmethod
    def advance(self, s: dict, t: float, h: float, measure: str, rng) -> dict:
        """Exact transition of the state from time t to t + h."""

    def alive(self, s: dict) -> np.ndarray:
        return np.ones(len(next(iter(s.values()))), dtype=bool)

    def S(self, s: dict, t: float) -> np.ndarray:
        return np.ones(len(next(iter(s.values()))))

    @abstractmethod
    def B(self, s: dict, t: float) -> np.ndarray: ...

    @abstractmethod
    def Z(self, s: dict, t: float) -> np.ndarray: ...

    def Bcheck(self, s: dict, t: float) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return self.Z(s, t) * self.B(s, t) / self.S(s, t)

    @abstractmethod
    def market_price(self, t: float, T: float, s: dict) -> np.ndarray:
        """Q(t,T) per state (0 after default under Qcheck)."""

    @abstractmethod
    def discount(self, t: float, T: float, s_t: dict, s_T: dict) -> np.ndarray:
        """Bcheck_t / Bcheck_T with post-default replacement."""

    @abstractmethod
    def discount_from_zero(self, T: float, s_T: dict) -> np.ndarray:
        """Bcheck_0 / Bcheck_T with post-default replacement."""

    def qcheck_closed_form(self, t: float, T: float, s: dict) -> Optional[np.ndarray]:
        """Closed-form Qcheck(t,T) per state, where available."""
        return None

    @abstractmethod
    def bank_ratio(self, t: float, T: float, s_t: dict, s_T: dict) -> np.ndarray:
        """B_t S_T / (B_T S_t)."""

    def lower_bound_closed_form(self, t: float, T: float, s: dict) -> Optional[np.ndarray]:
        return None

    @abstractmethod
    def ptilde_ratio(self, T: float, s_T: dict) -> np.ndarray:
        """(P~(T,T)/B_T) / (P~(0,T)/B_0) under Q."""

    def bucket_key(self, s: dict) -> np.ndarray:
        return next(iter(s.values()))

    def _post_or_raise(self) -> PostDefaultCurve:
        if self.post is None:
            raise ValueError(f"{self.kind.value}: Qcheck[tau <= T] > 0 requires a post-default curve")
        return self.post

    # -- sampling ----------------------------------------------------------

    def initial_states(self, n: int) -> dict:
        return {k: np.full(n, float(v)) for k, v in self.initial_state().items()}

    def pack(self, s: dict) -> np.ndarray:
        return np.column_stack([s[k] for k in self.state_names])

    def unpack(self, arr: np.ndarray) -> dict:
        return {k: arr[:, j] for j, k in enumerate(self.state_names)}

    def sample_states(self, t: float, n: int, measure: str, seed: int,
                      substream_offset: int = 0, threads: int = 1,
                      then: Optional[float] = None) -> dict:
        """Exact samples of the state at t (and optionally at a later time).

        Returns a dict; with ``then`` the entries are ``(s_t, s_then)``.
        """
        if t < 0:
            raise ValueError("t must be non-negative")

        def block(b):
            rng = block_rng(seed, substream_offset, b)
            s = self.initial_states(BLOCK_SIZE)
            if t > 0:
                s = self.advance(s, 0.0, t, measure, rng)
            if then is None:
                return self.pack(s)
            s2 = self.advance(s, t, then - t, measure, rng) if then > t else s
            return np.hstack([self.pack(s), self.pack(s2)])

        arr = np.concatenate(run_blocks(block, n_blocks_for(n), threads), axis=0)[:n]
        if then is None:
            return self.unpack(arr)
        k = len(self.state_names)
        return self.unpack(arr[:, :k]), self.unpack(arr[:, k:])

    @abstractmethod
    def simulate(self, measure: str, grid: Optional[TimeGrid] = None,
                 n_paths: Optional[int] = None, seed: Optional[int] = None,
                 threads: int = 1) -> MarketState:
        """Exact path simulation of the market on a grid."""

    def _market_state(self, grid, measure, states, tau) -> MarketState:
        n = len(next(iter(states.values())))
        m = grid.n_times
        S = np.empty((n, m)); B = np.empty((n, m)); Zm = np.empty((n, m)); Bc = np.empty((n, m))
        for j, t in enumerate(grid.times):
            s = {k: v[:, j] for k, v in states.items()}
            S[:, j] = self.S(s, t)
            B[:, j] = self.B(s, t)
            Zm[:, j] = self.Z(s, t)
            Bc[:, j] = self.Bcheck(s, t)
        post = self.post or PostDefaultCurve()
        circ = np.broadcast_to(post.account(grid.times), (n, m)).copy()
        return MarketState(grid, measure, S, B, Bc, circ, Zm, tau, states)

    def _defaults(self, grid, n_paths, seed):
        return (grid or self.spec.grid(), n_paths or self.spec.n_paths,
                self.spec.seed if seed is None else seed)


class Kind1Scenario(Scenario):
    """Perfect liquidity: bounded-volatility exponential martingale deflator."""

    state_names = ("z",)

    def _make_deflator(self):
        return GeometricDeflator(self.spec.sigma)

    def initial_state(self):
        return {"z": 1.0}

    def advance(self, s, t, h, measure, rng):
        z = s["z"]
        step = self.deflator.step_Q if measure == "Q" else (
            lambda z, h, rng: 1.0 / self.deflator.step_Qcheck(1.0 / z, h, rng))
        return {"z": step(z, h, rng)}

    def B(self, s, t):
        return np.full(len(s["z"]), math.exp(self.spec.rate * t))

    def Z(self, s, t):
        return s["z"]

    def market_price(self, t, T, s):
        return np.full(len(s["z"]), math.exp(-self.spec.rate * (T - t)))

    def discount(self, t, T, s_t, s_T):
        return math.exp(-self.spec.rate * (T - t)) * s_t["z"] / s_T["z"]

    def discount_from_zero(self, T, s_T):
        return math.exp(-self.spec.rate * T) / s_T["z"]

    def qcheck_closed_form(self, t, T, s):
        return self.market_price(t, T, s)

    def bank_ratio(self, t, T, s_t, s_T):
        return np.full(len(s_t["z"]), math.exp(-self.spec.rate * (T - t)))

    def lower_bound_closed_form(self, t, T, s):
        return self.market_price(t, T, s)

    def ptilde_ratio(self, T, s_T):
        return np.ones(len(s_T["z"]))

    def simulate(self, measure, grid=None, n_paths=None, seed=None, threads=1):
        grid, n, seed = self._defaults(grid, n_paths, seed)
        d = self.deflator.sample(grid, n, measure, seed, self.spec.component_offsets[0],
                                 threads=threads)
        return self._market_state(grid, measure, {"z": d.Z}, d.tau)


class Kind2Scenario(Scenario):
    """Canonical second kind: S = B = 1, Bcheck = Z = z0 / R, P~ = 1."""

    state_names = ("r",)
    needs_post_default = True

    def _make_deflator(self):
        return InverseBes3Deflator(self.spec.z0)

    def initial_state(self):
        return {"r": self.spec.z0}

    def advance(self, s, t, h, measure, rng):
        if measure == "Q":
            return {"r": _bes3_step(s["r"], h, rng)}
        return {"r": _stopped_step(s["r"], h, rng)}

    def alive(self, s):
        return s["r"] > 0

    def B(self, s, t):
        return np.ones(len(s["r"]))

    def Z(self, s, t):
        r = s["r"]
        with np.errstate(divide="ignore"):
            return np.where(r > 0, self.spec.z0 / np.where(r > 0, r, 1.0), np.inf)

    def market_price(self, t, T, s):
        return self.alive(s).astype(float)

    def _bcheck(self, s, t):
        return self.Z(s, t)

    def discount(self, t, T, s_t, s_T):
        post = self._post_or_raise()
        a_t, a_T = self.alive(s_t), self.alive(s_T)
        bc_t = self._bcheck(s_t, t)
        out = np.empty(a_t.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[a_T] = bc_t[a_T] / self._bcheck(s_T, T)[a_T]
        dead = ~a_T
        if post.discounting == "ratio":
            out[dead] = post.discount(t, T)
        else:
            fresh = dead & a_t
            out[fresh] = bc_t[fresh] / post.account(T)
            out[dead & ~a_t] = post.discount(t, T)
        return out

    def discount_from_zero(self, T, s_T):
        post = self._post_or_raise()
        a = self.alive(s_T)
        with np.errstate(divide="ignore"):
            return np.where(a, 1.0 / self._bcheck(s_T, T), 1.0 / post.account(T))

    def qcheck_closed_form(self, t, T, s):
        post = self._post_or_raise()
        if t == T:
            return np.ones(len(s["r"]))
        a = self.alive(s)
        g = _g(s["r"], T - t)
        out = np.full(a.shape, float(post.discount(t, T)))
        if post.discounting == "ratio":
            out[a] = 1.0 + post.discount(t, T) * g[a]
        else:
            out[a] = 1.0 + self._bcheck(s, t)[a] * g[a] / post.account(T)
        return out

    def bank_ratio(self, t, T, s_t, s_T):
        return np.ones(len(s_t["r"]))

    def lower_bound_closed_form(self, t, T, s):
        return np.ones(len(s["r"]))

    def ptilde_ratio(self, T, s_T):
        return np.ones(len(s_T["r"]))

    def simulate(self, measure, grid=None, n_paths=None, seed=None, threads=1):
        grid, n, seed = self._defaults(grid, n_paths, seed)
        d = self.deflator.sample(grid, n, measure, seed, self.spec.component_offsets[0],
                                 self.spec.bridge_correction, threads)
        return self._market_state(grid, measure, {"r": self.spec.z0 * d.Zcheck}, d.tau)


class Kind3Scenario(Scenario):
    """Hyperliquidity: S = 1, Z = 1, B = Bcheck = Bes3 / x0, P = 1."""

    state_names = ("x",)
    ptilde_true_martingale = False

    def _make_deflator(self):
        return UnitDeflator()

    def initial_state(self):
        return {"x": self.spec.x0}

    def advance(self, s, t, h, measure, rng):
        return {"x": _bes3_step(s["x"], h, rng)}

    def B(self, s, t):
        return s["x"] / self.spec.x0

    def Z(self, s, t):
        return np.ones(len(s["x"]))

    def market_price(self, t, T, s):
        return np.ones(len(s["x"]))

    def discount(self, t, T, s_t, s_T):
        return s_t["x"] / s_T["x"]

    def discount_from_zero(self, T, s_T):
        return self.spec.x0 / s_T["x"]

    def qcheck_closed_form(self, t, T, s):
        if t == T:
            return np.ones(len(s["x"]))
        return hyperliquidity_price(t, T, s["x"])

    def bank_ratio(self, t, T, s_t, s_T):
        return s_t["x"] / s_T["x"]

    def lower_bound_closed_form(self, t, T, s):
        return self.qcheck_closed_form(t, T, s)

    def ptilde_ratio(self, T, s_T):
        return self.spec.x0 / s_T["x"]

    def simulate(self, measure, grid=None, n_paths=None, seed=None, threads=1):
        grid, n, seed = self._defaults(grid, n_paths, seed)
        x = simulate_bes3(grid, self.spec.x0, n, seed, self.spec.component_offsets[0],
                          threads, measure_tag=measure)["bes3"]
        return self._market_state(grid, measure, {"x": x}, AbsorptionInfo.never(n))


class Kind4Scenario(Scenario):
    """Composite fourth kind: the canonical deflator plus B = Y / y0 with Y an
    independent Bes3, so P~/B = y0 / Y is also a strict local martingale."""

    state_names = ("r", "y")
    ptilde_true_martingale = False
    needs_post_default = True

    def _make_deflator(self):
        return InverseBes3Deflator(self.spec.z0)

    def initial_state(self):
        return {"r": self.spec.z0, "y": self.spec.y0}

    def advance(self, s, t, h, measure, rng):
        r = _bes3_step(s["r"], h, rng) if measure == "Q" else _stopped_step(s["r"], h, rng)
        return {"r": r, "y": _bes3_step(s["y"], h, rng)}

    def alive(self, s):
        return s["r"] > 0

    def B(self, s, t):
        return s["y"] / self.spec.y0

    def Z(self, s, t):
        r = s["r"]
        with np.errstate(divide="ignore"):
            return np.where(r > 0, self.spec.z0 / np.where(r > 0, r, 1.0), np.inf)

    def market_price(self, t, T, s):
        return self.alive(s).astype(float)

    def discount(self, t, T, s_t, s_T):
        post = self._post_or_raise()
        a_t, a_T = self.alive(s_t), self.alive(s_T)
        bc_t = self.Bcheck(s_t, t)
        out = np.empty(a_t.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[a_T] = bc_t[a_T] / self.Bcheck(s_T, T)[a_T]
        dead = ~a_T
        if post.discounting == "ratio":
            out[dead] = post.discount(t, T)
        else:
            fresh = dead & a_t
            out[fresh] = bc_t[fresh] / post.account(T)
            out[dead & ~a_t] = post.discount(t, T)
        return out

    def discount_from_zero(self, T, s_T):
        post = self._post_or_raise()
        a = self.alive(s_T)
        with np.errstate(divide="ignore"):
            return np.where(a, 1.0 / self.Bcheck(s_T, T), 1.0 / post.account(T))

    def qcheck_closed_form(self, t, T, s):
        post = self._post_or_raise()
        if t == T:
            return np.ones(len(s["r"]))
        a = self.alive(s)
        out = np.full(a.shape, float(post.discount(t, T)))
        h = _h(s["y"], T - t)
        g = _g(s["r"], T - t)
        if post.discounting == "ratio":
            out[a] = h[a] + post.discount(t, T) * g[a]
        else:
            out[a] = h[a] + self.Bcheck(s, t)[a] * g[a] / post.account(T)
        return out

    def bank_ratio(self, t, T, s_t, s_T):
        return s_t["y"] / s_T["y"]

    def lower_bound_closed_form(self, t, T, s):
        return _h(s["y"], T - t) if T > t else np.ones(len(s["y"]))

    def ptilde_ratio(self, T, s_T):
        return self.spec.y0 / s_T["y"]

    def bucket_key(self, s):
        # relative distance to default of the deflator driver vs the account driver
        return s["r"] - s["y"]

    def simulate(self, measure, grid=None, n_paths=None, seed=None, threads=1):
        grid, n, seed = self._defaults(grid, n_paths, seed)
        o_r, o_y = self.spec.component_offsets
        d = self.deflator.sample(grid, n, measure, seed, o_r, self.spec.bridge_correction, threads)
        y = simulate_bes3(grid, self.spec.y0, n, seed, o_y, threads, measure_tag=measure)["bes3"]
        return self._market_state(grid, measure, {"r": self.spec.z0 * d.Zcheck, "y": y}, d.tau)


class PureIlliquidityScenario(Scenario):
    """Growth-optimal portfolio X = |x + W|^2 / f(t) as domestic numéraire,
    deterministic foreign account Bcheck = f(0) / f(t)."""

    state_names = ("y",)

    def __init__(self, spec):
        super().__init__(spec)
        self.x = np.asarray(spec.x, dtype=float)
        self.r2 = float(self.x @ self.x)

    def _make_deflator(self):
        return InverseBesq4Deflator(self.spec.x)

    def initial_state(self):
        return {"y": float(np.dot(self.spec.x, self.spec.x))}

    def advance(self, s, t, h, measure, rng):
        if measure == "Q":
            return {"y": _bes4sq_step(s["y"], h, rng)}
        return {"y": besq0_step(rng, s["y"], h)}

    def alive(self, s):
        return s["y"] > 0

    def B(self, s, t):
        f = self.spec.f
        return (s["y"] / self.r2) * (f(0.0) / f(t))

    def Bcheck(self, s, t):
        f = self.spec.f
        return np.full(len(s["y"]), f(0.0) / f(t))

    def Z(self, s, t):
        y = s["y"]
        with np.errstate(divide="ignore"):
            return np.where(y > 0, self.r2 / np.where(y > 0, y, 1.0), np.inf)

    def market_price(self, t, T, s):
        if t == T:
            return self.alive(s).astype(float)
        return pure_illiquidity_price(t, T, s["y"], self.spec.f)

    def discount(self, t, T, s_t, s_T):
        f = self.spec.f
        return np.full(len(s_t["y"]), f(T) / f(t))

    def discount_from_zero(self, T, s_T):
        f = self.spec.f
        return np.full(len(s_T["y"]), f(T) / f(0.0))

    def qcheck_closed_form(self, t, T, s):
        return self.discount(t, T, s, s)

    def bank_ratio(self, t, T, s_t, s_T):
        f = self.spec.f
        with np.errstate(divide="ignore", invalid="ignore"):
            return (s_t["y"] / s_T["y"]) * (f(T) / f(t))

    def lower_bound_closed_form(self, t, T, s):
        return self.market_price(t, T, s)

    def ptilde_ratio(self, T, s_T):
        p0 = float(self.market_price(0.0, T, self.initial_states(1))[0])
        return (1.0 / self.B(s_T, T)) / p0

    def simulate(self, measure, grid=None, n_paths=None, seed=None, threads=1):
        grid, n, seed = self._defaults(grid, n_paths, seed)
        d = self.deflator.sample(grid, n, measure, seed, self.spec.component_offsets[0],
                                 threads=threads)
        return self._market_state(grid, measure, {"y": self.r2 * d.Zcheck}, d.tau)


_BUILDERS = {
    Kind.KIND1: Kind1Scenario,
    Kind.KIND2: Kind2Scenario,
    Kind.KIND3: Kind3Scenario,
    Kind.KIND4: Kind4Scenario,
    Kind.PURE: PureIlliquidityScenario,
}


def build_scenario(spec: ScenarioSpec) -> Scenario:
    """Instantiate the market model described by ``spec``."""
    spec.validate()
    return _BUILDERS[spec.kind](spec)


# ---------------------------------------------------------------------------
# closed-form prices


def pure_illiquidity_price(t: float, T: float, state, f: Optional[DeterministicFunction] = None,
                           at_maturity: bool = False):
    """Market price P(t,T) in the pure-illiquidity model.

    ``state`` is |x + W_t|^2 (the squared norm of the 4-D driver).  The price
    is f(T)/f(t) (1 - exp(-|x + W_t|^2 / (2 (T - t)))), i.e. the expectation
    of X_t / X_T.  At t = T the formula degenerates; pass ``at_maturity`` to
    get the payoff 1.
    """
    f = f or DeterministicFunction()
    if t == T:
        if at_maturity:
            return np.ones_like(np.asarray(state, dtype=float)) if np.ndim(state) else 1.0
        raise ValueError("t == T: use at_maturity=True for the payoff value")
    if t > T:
        raise ValueError("t must not exceed T")
    y = np.asarray(state, dtype=float)
    out = (f(T) / f(t)) * -np.expm1(-y / (2.0 * (T - t)))
    return float(out) if out.ndim == 0 else out


def hyperliquidity_price(t: float, T: float, X_t):
    """Fundamental value 1 - 2 Phi(-X_t / sqrt(T - t)) in the hyperliquid model."""
    if t >= T:
        raise ValueError("hyperliquidity_price needs t < T")
    x = np.asarray(X_t, dtype=float)
    if np.any(x <= 0):
        raise ValueError("X_t must be positive")
    out = 1.0 - 2.0 * normal_cdf(-x / math.sqrt(T - t))
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# classification


TABLE_CELLS = {
    (True, True): ("model of the 1st kind", "==0"),
    (True, False): ("model of the 2nd kind", ">=0"),
    (False, True): ("model of the 3rd kind", "<=0"),
    (False, False): ("model of the 4th kind", "state-dependent"),
}


@dataclass
class KindClassification:
    ptilde: DefectTest
    deflator: DefectTest
    cell: str
    premium_sign: str

    def as_dict(self) -> dict:
        return {"cell": self.cell, "premium_sign": self.premium_sign,
                "ptilde_over_B": self.ptilde.as_dict(), "deflator": self.deflator.as_dict()}


def classify_kind(scenario: Scenario, T_probe: float = 1.0, n_paths: int = 100_000,
                  confidence: float = 0.99, seed: Optional[int] = None,
                  substream_offset: int = 77, threads: int = 1) -> KindClassification:
    """Estimate the martingale defects of P~/B and Z at ``T_probe`` under Q
    and map the verdict pair to a cell of the four-kind table."""
    seed = scenario.spec.seed if seed is None else seed
    s_T = scenario.sample_states(T_probe, n_paths, "Q", seed, substream_offset, threads)
    pt = defect_test(scenario.ptilde_ratio(T_probe, s_T), 1.0, confidence,
                     closed_form_confirms=scenario.ptilde_true_martingale)
    zt = defect_test(scenario.Z(s_T, T_probe), 1.0, confidence,
                     closed_form_confirms=scenario.deflator.true_martingale)
    verdicts = (pt.verdict, zt.verdict)
    if Verdict.INCONCLUSIVE in verdicts:
        return KindClassification(pt, zt, "undetermined", "unknown")
    key = (pt.verdict is Verdict.TRUE_MARTINGALE, zt.verdict is Verdict.TRUE_MARTINGALE)
    cell, sign = TABLE_CELLS[key]
    return KindClassification(pt, zt, cell, sign)
