"""Monte Carlo estimators, confidence intervals and martingale-defect tests."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

__all__ = [
    "MCEstimate",
    "Verdict",
    "DefectTest",
    "mc_mean",
    "mc_mean_antithetic",
    "exact",
    "ratio_estimate",
    "difference",
    "joint_z",
    "defect_test",
    "excess_kurtosis",
]


def _zcrit(ci_level: float) -> float:
    return float(special.ndtri(0.5 + ci_level / 2.0))


@dataclass(frozen=True)
class MCEstimate:
    """Sample mean with its standard error."""

    mean: float
    stderr: float
    n: int
    ci_level: float = 0.95

    def __post_init__(self):
        if not self.stderr >= 0:
            raise ValueError("stderr must be non-negative")
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must lie in (0, 1)")

    @property
    def ci(self) -> tuple:
        h = _zcrit(self.ci_level) * self.stderr
        return (self.mean - h, self.mean + h)

    def z_score(self, value: float) -> float:
        d = self.mean - value
        if self.stderr == 0:
            return 0.0 if d == 0 else math.copysign(math.inf, d)
        return d / self.stderr

    def within(self, value: float, k: float, atol: float = 1e-12) -> bool:
        """True if ``|mean - value| <= k * stderr`` (plus a rounding allowance)."""
        return abs(self.mean - value) <= k * self.stderr + atol * max(1.0, abs(value))

    def scaled(self, c: float) -> "MCEstimate":
        return MCEstimate(c * self.mean, abs(c) * self.stderr, self.n, self.ci_level)

    def shifted(self, c: float) -> "MCEstimate":
        return MCEstimate(self.mean + c, self.stderr, self.n, self.ci_level)

    def as_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n, "ci_level": self.ci_level}


def exact(value: float, n: int = 1, ci_level: float = 0.95) -> MCEstimate:
    """A deterministic value wrapped as an estimate with zero error."""
    return MCEstimate(float(value), 0.0, n, ci_level)


def mc_mean(samples, ci_level: float = 0.95) -> MCEstimate:
    """Mean and standard error (n-1 denominator) of i.i.d. samples.

    numpy's pairwise summation makes the result a deterministic function of
    the sample order.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise ValueError("at least two samples are required")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples are not finite")
    m = float(np.mean(x))
    sd = float(np.std(x, ddof=1))
    return MCEstimate(m, sd / math.sqrt(n), n, ci_level)


def mc_mean_antithetic(samples, ci_level: float = 0.95) -> MCEstimate:
    """Estimator for samples laid out as antithetic pairs (2k, 2k+1).

    The standard error is computed from the pair averages, so any negative
    correlation within pairs is credited.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size % 2:
        raise ValueError("antithetic samples must come in pairs")
    pairs = 0.5 * (x[0::2] + x[1::2])
    est = mc_mean(pairs, ci_level)
    return MCEstimate(est.mean, est.stderr, x.size, ci_level)


def difference(a: MCEstimate, b: MCEstimate) -> MCEstimate:
    """a - b for independent estimates."""
    return MCEstimate(a.mean - b.mean, math.hypot(a.stderr, b.stderr), min(a.n, b.n), a.ci_level)


def joint_z(a: MCEstimate, b: MCEstimate) -> float:
    return difference(a, b).z_score(0.0)


def ratio_estimate(num: MCEstimate, den: MCEstimate) -> MCEstimate:
    """num / den for independent estimates, first-order delta method."""
    if not den.mean > 0:
        raise ValueError("denominator estimate must be strictly positive")
    r = num.mean / den.mean
    rel = math.hypot(num.stderr / den.mean, r * den.stderr / den.mean)
    return MCEstimate(r, rel, min(num.n, den.n), num.ci_level)


def excess_kurtosis(samples) -> float:
    x = np.asarray(samples, dtype=float).ravel()
    c = x - x.mean()
    v = np.mean(c * c)
    if v == 0:
        return 0.0
    return float(np.mean(c**4) / v**2 - 3.0)


class Verdict(str, enum.Enum):
    TRUE_MARTINGALE = "TrueMartingale"
    STRICT_LOCAL = "StrictLocal"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class DefectTest:
    """Outcome of a one-sided test of ``E[Z_T] < claimed_mean``.

    ``defect`` estimates ``claimed_mean - E[Z_T]`` (for a density started at
    one, the martingale defect).
    """

    claimed_mean: float
    estimate: MCEstimate
    defect: MCEstimate
    z_statistic: float
    p_value: float
    verdict: Verdict
    confidence: float
    closed_form_confirms: Optional[bool]

    @property
    def mean(self) -> float:
        return self.estimate.mean

    @property
    def stderr(self) -> float:
        return self.estimate.stderr

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "claimed_mean": self.claimed_mean,
            "mean": self.estimate.mean,
            "stderr": self.estimate.stderr,
            "defect": self.defect.mean,
            "defect_ci": list(self.defect.ci),
            "z_statistic": self.z_statistic,
            "p_value": self.p_value,
            "n": self.estimate.n,
            "confidence": self.confidence,
            "closed_form_confirms": self.closed_form_confirms,
        }


def defect_test(
    samples,
    claimed_mean: float = 1.0,
    confidence: float = 0.99,
    closed_form_confirms: Optional[bool] = None,
    min_n: int = 100,
) -> DefectTest:
    """Test for a supermartingale defect at the given confidence.

    StrictLocal iff the one-sided test rejects ``mean >= claimed_mean``.
    TrueMartingale requires failing to reject, a two-sided confidence
    interval of the defect that contains 0, and ``closed_form_confirms``.
    Fewer than ``min_n`` samples always give Inconclusive.
    """
    x = np.asarray(samples, dtype=float).ravel()
    est = mc_mean(x, confidence)
    defect = MCEstimate(claimed_mean - est.mean, est.stderr, est.n, confidence)
    z = est.z_score(claimed_mean)
    if math.isinf(z) or math.isnan(z):
        p = 0.0 if z < 0 else 1.0
    else:
        p = float(special.ndtr(z))
    alpha = 1.0 - confidence
    if est.n < min_n:
        verdict = Verdict.INCONCLUSIVE
    elif p < alpha:
        # the reported (two-sided) interval must also exclude zero
        verdict = Verdict.STRICT_LOCAL if defect.ci[0] > 0 else Verdict.INCONCLUSIVE
    else:
        lo, hi = defect.ci
        contains = lo - 1e-12 <= 0.0 <= hi + 1e-12
        verdict = Verdict.TRUE_MARTINGALE if (contains and closed_form_confirms) else Verdict.INCONCLUSIVE
    return DefectTest(claimed_mean, est, defect, float(z), min(max(p, 0.0), 1.0),
                      verdict, confidence, closed_form_confirms)
