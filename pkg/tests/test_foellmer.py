import math

import mpmath
import numpy as np
import pytest

from illiq.foellmer import (
    GeneralizedDensity, GeometricDeflator, InverseBes3Deflator, InverseBesq4Deflator,
    UnitDeflator, bayes_conditional, expectation_under_Q, expectation_under_Qcheck_pre_tau,
    explosion_cdf, invert_density, nested_map,
)
from illiq.paths import AbsorptionInfo, TimeGrid, normal_cdf
from illiq.stats import joint_z, mc_mean

from conftest import mp_phi


def bes3_mean_ref(t=1.0):
    """E[R_t] for Bes3 from 1, integrating the transition density with mpmath."""
    s = mpmath.sqrt(t)
    phi = lambda u: mpmath.npdf(u, 0, s)
    return float(mpmath.quad(lambda r: r * r * (phi(r - 1) - phi(r + 1)), [0, mpmath.inf]))


def test_invert_density():
    Z = np.array([[1.0, 2.0, 0.0, np.inf]])
    out = invert_density(Z)
    assert out.tolist() == [[1.0, 0.5, 0.0, 0.0]]
    alive = np.array([[True, False, True, True]])
    assert invert_density(Z, alive).tolist() == [[1.0, 0.0, 0.0, 0.0]]


def test_density_validation():
    g = TimeGrid.uniform(1.0, 1)
    one = np.ones((2, 2))
    never = AbsorptionInfo.never(2)
    with pytest.raises(ValueError):
        GeneralizedDensity(g, one, one, never, "P")
    with pytest.raises(ValueError):
        GeneralizedDensity(g, 2 * one, one, never, "Q")
    with pytest.raises(ValueError):
        GeneralizedDensity(g, -one, one, never, "Q")
    with pytest.raises(ValueError):
        GeneralizedDensity(g, one, one, AbsorptionInfo.never(3), "Q")


@pytest.mark.parametrize("measure", ["Q", "Qcheck"])
def test_sampled_pair_is_reciprocal(measure):
    g = TimeGrid.uniform(1.0, 16)
    d = InverseBes3Deflator().sample(g, 4000, measure, seed=1)
    assert d.inversion_error() < 1e-12


def test_foellmer_identity_on_event():
    # Qcheck[A, tau > t] = E_Q[Z_t 1_A] with A = {Zcheck_t > 1}
    g = TimeGrid.uniform(0.5, 8)
    model = InverseBes3Deflator()
    q = model.sample(g, 100_000, "Q", seed=3)
    qc = model.sample(g, 100_000, "Qcheck", seed=4)
    lhs = mc_mean((qc.Zcheck[:, -1] > 1) & qc.alive(8))
    rhs = expectation_under_Qcheck_pre_tau(lambda d, i: d.Zcheck[:, i] > 1, q, 0.5)
    assert abs(joint_z(lhs, rhs)) < 4


def test_expectation_under_Q_from_Qcheck_samples():
    # E_Q[R_1] two ways: native Bes3 samples and reweighted stopped-BM samples
    ref = bes3_mean_ref()
    g = TimeGrid.uniform(1.0, 32)
    model = InverseBes3Deflator()
    q = model.sample(g, 100_000, "Q", seed=5)
    qc = model.sample(g, 100_000, "Qcheck", seed=6)
    native = mc_mean(q.Zcheck[:, -1])
    reweighted = expectation_under_Q(lambda d, i: d.Zcheck[:, i], qc, 1.0)
    assert native.within(ref, 4)
    assert reweighted.within(ref, 4)
    with pytest.raises(ValueError):
        expectation_under_Q(np.ones(q.n_paths), q, 1.0)


@pytest.mark.parametrize("T", [0.25, 1.0, 4.0])
def test_explosion_probability_matches_mpmath(T):
    assert InverseBes3Deflator().explosion_probability(T) == pytest.approx(
        2 * mp_phi(-1 / math.sqrt(T)), rel=1e-13)
    assert InverseBesq4Deflator().explosion_probability(T) == pytest.approx(
        math.exp(-1 / (2 * T)), rel=1e-13)


def test_explosion_cdf_both_routes():
    g = TimeGrid.uniform(1.0, 16)
    model = InverseBesq4Deflator()
    ref = model.explosion_probability(1.0)
    qc = explosion_cdf(1.0, model.sample(g, 50_000, "Qcheck", seed=7))
    q = explosion_cdf(1.0, model.sample(g, 50_000, "Q", seed=8))
    assert qc.within(ref, 4)
    assert q.within(ref, 4)


def test_true_martingale_deflators():
    g = TimeGrid.uniform(1.0, 4)
    d = GeometricDeflator(0.3).sample(g, 50_000, "Q", seed=9)
    assert mc_mean(d.Z[:, -1]).within(1.0, 4)
    assert explosion_cdf(1.0, d).within(0.0, 4)
    assert d.model.explosion_probability(1.0) == 0.0
    u = UnitDeflator().sample(g, 10, "Qcheck", seed=0)
    assert np.all(u.Z == 1) and np.all(u.Zcheck == 1)
    with pytest.raises(ValueError):
        GeometricDeflator(-1.0)


def test_bayes_conditional_matches_survival_closed_form():
    # (1/Z_t) E_Q[Z_T | F_t] = Qcheck[tau > T | F_t] = 1 - 2 Phi(-Zcheck_t / sqrt(T - t))
    g = TimeGrid.uniform(1.0, 4)
    d = InverseBes3Deflator().sample(g, 48, "Q", seed=10)
    ce = bayes_conditional(None, 0.5, 1.0, d, n_inner=8192)
    ref = 1.0 - 2.0 * normal_cdf(-d.Zcheck[:, 2] / math.sqrt(0.5))
    z = (ce.values - ref) / ce.stderr
    assert np.all(np.abs(z) < 4.5)
    assert ce.n_inner == 8192


def test_bayes_conditional_at_maturity_and_errors():
    g = TimeGrid.uniform(1.0, 2)
    d = InverseBes3Deflator().sample(g, 16, "Qcheck", seed=1)
    ce = bayes_conditional(None, 1.0, 1.0, d)
    assert np.array_equal(ce.values, d.alive(2).astype(float))
    bare = GeneralizedDensity(g, d.Z, d.Zcheck, d.tau, "Qcheck")
    with pytest.raises(ValueError):
        bayes_conditional(None, 0.5, 1.0, bare)
    with pytest.raises(ValueError):
        bayes_conditional(None, 1.0, 0.5, d)


def test_nested_map_is_chunk_deterministic():
    states = np.linspace(0.5, 2.0, 150)
    fn = lambda rep, rng: rep + rng.standard_normal(rep.shape)
    a = nested_map(fn, states, 16, seed=1, substream_offset=2)
    b = nested_map(fn, states, 16, seed=1, substream_offset=2, threads=3)
    c = nested_map(fn, states[:64], 16, seed=1, substream_offset=2)
    assert a.shape == (150, 16)
    assert np.array_equal(a, b)
    assert np.array_equal(a[:64], c)
