import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from illiq.paths import TimeGrid, simulate_bes3, simulate_bm
from illiq.stats import (
    MCEstimate, Verdict, defect_test, difference, exact, excess_kurtosis, joint_z, mc_mean,
    mc_mean_antithetic, ratio_estimate,
)


def test_two_point_sample_hand_computed():
    # mean 1/2; sample sd with n-1 denominator is sqrt(1/2), so se = sqrt(1/2)/sqrt(2) = 1/2
    est = mc_mean([0.0, 1.0])
    assert est.mean == 0.5
    assert est.stderr == pytest.approx(0.5, abs=1e-12)


def test_constant_samples_have_zero_error():
    est = mc_mean(np.full(1000, 3.25))
    assert est.mean == 3.25 and est.stderr == 0.0
    assert est.ci == (3.25, 3.25)


def test_mc_mean_rejects_degenerate_input():
    with pytest.raises(ValueError):
        mc_mean([1.0])
    with pytest.raises(ValueError):
        mc_mean([1.0, np.inf])
    with pytest.raises(ValueError):
        MCEstimate(0.0, -1.0, 2)
    with pytest.raises(ValueError):
        MCEstimate(0.0, 1.0, 2, ci_level=1.0)


def test_ci_and_z_score():
    est = MCEstimate(1.0, 0.1, 100)
    lo, hi = est.ci
    assert hi - lo == pytest.approx(2 * 1.959963984540054 * 0.1)
    assert est.z_score(0.8) == pytest.approx(2.0)
    assert exact(2.0).z_score(3.0) == -math.inf
    assert est.within(1.39, 4) and not est.within(1.41, 4)


def test_ci_coverage_near_nominal():
    rng = np.random.default_rng(2024)
    hits = 0
    for _ in range(1000):
        lo, hi = mc_mean(rng.standard_normal(200) + 0.3).ci
        hits += lo <= 0.3 <= hi
    assert 930 <= hits <= 970


def test_antithetic_no_worse_than_independent():
    g = TimeGrid.uniform(1.0, 1)
    n = 20_000
    anti = simulate_bm(g, 1, n, seed=4, antithetic=True)["bm"][:, -1, 0]
    ind = simulate_bm(g, 1, n, seed=4)["bm"][:, -1, 0]
    a = mc_mean_antithetic(np.exp(anti))
    b = mc_mean(np.exp(ind))
    assert a.n == b.n == n
    assert a.stderr <= b.stderr
    with pytest.raises(ValueError):
        mc_mean_antithetic([1.0, 2.0, 3.0])


def test_difference_and_ratio():
    a, b = MCEstimate(3.0, 0.3, 10), MCEstimate(1.0, 0.4, 20)
    d = difference(a, b)
    assert d.mean == 2.0 and d.stderr == pytest.approx(0.5)
    assert joint_z(a, b) == pytest.approx(4.0)
    r = ratio_estimate(MCEstimate(2.0, 0.0, 10), MCEstimate(4.0, 0.4, 10))
    assert r.mean == 0.5 and r.stderr == pytest.approx(0.05)
    with pytest.raises(ValueError):
        ratio_estimate(a, MCEstimate(0.0, 0.1, 10))


def test_excess_kurtosis_gaussian_near_zero(rng):
    assert abs(excess_kurtosis(rng.standard_normal(200_000))) < 0.1


class TestDefectTest:
    def test_inverse_bes3_is_strict_local(self):
        # 1 - E[1/R_1] = 2 Phi(-1) for Bes3 from 1 (mpmath)
        g = TimeGrid.uniform(1.0, 1)
        z = 1.0 / simulate_bes3(g, 1.0, 100_000, seed=8)["bes3"][:, -1]
        res = defect_test(z)
        assert res.verdict is Verdict.STRICT_LOCAL
        assert res.defect.within(0.3173105078629141, 4)
        assert res.p_value < 0.01

    def test_true_martingale_needs_closed_form(self):
        ones = np.ones(1000)
        assert defect_test(ones, closed_form_confirms=True).verdict is Verdict.TRUE_MARTINGALE
        assert defect_test(ones).verdict is Verdict.INCONCLUSIVE

    def test_small_samples_inconclusive(self, rng):
        res = defect_test(0.5 + 0.01 * rng.standard_normal(10))
        assert res.verdict is Verdict.INCONCLUSIVE

    def test_upward_deviation_is_not_a_defect(self, rng):
        res = defect_test(1.2 + 0.1 * rng.standard_normal(5000), closed_form_confirms=True)
        assert res.verdict is not Verdict.STRICT_LOCAL
        assert res.p_value > 0.99

    def test_as_dict_fields(self, rng):
        d = defect_test(rng.random(500) * 2).as_dict()
        assert {"verdict", "defect", "defect_ci", "p_value", "n"} <= set(d)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=2, max_size=300))
def test_defect_p_value_in_unit_interval(xs):
    res = defect_test(xs, min_n=2)
    assert 0.0 <= res.p_value <= 1.0
    assert res.verdict in set(Verdict)
