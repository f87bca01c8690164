import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from illiq.arbitrage import (
    HEDGE_CSV_HEADER, a_constant, admissibility_probe, conditional_default_prob, delta_hedge,
    measure_consistency, refinement_study, replicate, replicate_on_grids,
)
from illiq.paths import TimeGrid

from conftest import mp_phi

EPS = 2.0**-10
GRID = TimeGrid.refined(1.0, EPS, h_max=EPS)


def test_conditional_default_prob_matches_mpmath():
    assert conditional_default_prob(1.0, 0.0, 1.0) == pytest.approx(2 * mp_phi(-1.0), rel=1e-13)
    assert conditional_default_prob(0.5, 0.75, 1.0) == pytest.approx(2 * mp_phi(-1.0), rel=1e-13)
    assert conditional_default_prob(40.0, 0.0, 1.0) < 1e-300
    assert conditional_default_prob(1.0, 0.0, 1.0, absorbed=True) == 1.0
    assert conditional_default_prob(0.0, 0.0, 1.0) == 1.0
    with pytest.raises(ValueError):
        conditional_default_prob(1.0, 1.0, 1.0)


def test_a_constant():
    # a_1 = (1 - 2 Phi(-1)) / (2 Phi(-1)), evaluated with mpmath
    p = 2 * mp_phi(-1.0)
    assert a_constant(1.0) == pytest.approx((1 - p) / p, rel=1e-12)
    assert a_constant(1.0) == pytest.approx(2.151487, abs=1e-6)
    assert a_constant(0.25) > a_constant(1.0) > a_constant(4.0) > 0
    with pytest.raises(ValueError):
        a_constant(0.0)


def test_delta_hedge_values():
    h = delta_hedge(1.0, 0.0, 1.0)
    ref = (1 + a_constant(1.0)) * math.sqrt(2 / math.pi) * math.exp(-0.5)
    assert h == pytest.approx(ref, rel=1e-13)
    assert h == pytest.approx(1.52514, abs=1e-5)
    assert delta_hedge(0.0, 0.5, 1.0) == 0.0
    assert delta_hedge(-1.0, 0.5, 1.0) == 0.0


def test_delta_hedge_floor_clamps_remaining_time():
    eps = 2.0**-12
    at_floor = delta_hedge(0.01, 1.0 - eps, 1.0)
    assert delta_hedge(0.01, 1.0, 1.0, eps_floor=eps) == at_floor
    assert delta_hedge(0.01, 1.0 - eps / 2, 1.0, eps_floor=eps) == at_floor
    with pytest.raises(ValueError):
        delta_hedge(0.01, 1.0, 1.0)
    with pytest.raises(ValueError):
        delta_hedge(0.01, 0.5, 1.0, eps_floor=0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 0.999))
def test_delta_hedge_nonnegative(z, t):
    h = delta_hedge(z, t, 1.0, eps_floor=2.0**-14)
    assert h >= 0 and math.isfinite(h)


@pytest.fixture(scope="module")
def runs():
    q = replicate("Q", 1.0, 4096, GRID, seed=1, keep_paths=8)
    qc = replicate("Qcheck", 1.0, 4096, GRID, seed=2, keep_paths=8)
    return q, qc


def test_wealth_starts_at_zero_and_is_self_financing(runs):
    for run in runs:
        sp = run.sample_paths
        V, H, z = sp["V"], sp["H"], sp["zcheck"]
        assert np.all(V[:, 0] == 0.0)
        for k in range(V.shape[0]):
            acc = 0.0
            for j in range(H.shape[1]):
                acc += H[k, j] * (z[k, j + 1] - z[k, j])
            assert acc == V[k, -1] == run.V_T[k]


def test_hedge_is_zero_after_absorption(runs):
    sp = runs[1].sample_paths
    assert np.all(sp["H"][sp["zcheck"][:, :-1] <= 0] == 0.0)


def test_expected_terminal_wealth(runs):
    q, qc = runs
    assert abs(q.mean_V.mean - 1.0) < 0.05
    # wealth is a Qcheck-martingale in Z units
    assert qc.mean_V.within(0.0, 4)
    assert measure_consistency(q, qc)["ok"]
    with pytest.raises(ValueError):
        measure_consistency(qc, q)


def test_qcheck_clusters(runs):
    cs = runs[1].cluster_stats()
    assert abs(cs["survived"]["mean_V_T"] - 1.0) < 0.05
    assert abs(cs["absorbed"]["mean_V_T"] + a_constant(1.0)) < 0.1
    assert cs["survived"]["count"] + cs["absorbed"]["count"] == 4096
    assert cs["absorbed"]["weight"]["mean"] == pytest.approx(cs["absorbed"]["count"] / 4096)


def test_target_and_errors(runs):
    qc = runs[1]
    assert np.array_equal(qc.target, np.where(qc.absorbed, -qc.a_T, 1.0))
    assert np.allclose(qc.repl_error, qc.V_T - qc.target)
    assert math.isclose(qc.rms_error, math.sqrt(np.mean(qc.repl_error**2)))
    flagged = qc.flagged_paths(2.0)
    assert np.all(np.abs(qc.repl_error[flagged]) > 2.0 * qc.rms_error)


def test_prefix_and_thread_invariance():
    a = replicate("Qcheck", 1.0, 1500, GRID, seed=5)
    b = replicate("Qcheck", 1.0, 3000, GRID, seed=5, threads=2)
    assert np.array_equal(a.V_T, b.V_T[:1500])
    assert np.array_equal(a.V_T, b.prefix(1500).V_T)
    with pytest.raises(ValueError):
        b.prefix(0)


def test_shared_paths_across_hedge_grids():
    fine = TimeGrid.refined(1.0, 2.0**-12, h_max=2.0**-10)
    coarse = TimeGrid.refined(1.0, 2.0**-8, h_max=2.0**-8)
    sim = TimeGrid.union(fine, coarse)
    r = replicate_on_grids("Qcheck", 1.0, 2000, sim, [coarse, fine], seed=3)
    assert np.array_equal(r[0].absorbed, r[1].absorbed)
    assert np.array_equal(r[0].zcheck_T, r[1].zcheck_T)
    assert r[1].rms_error < r[0].rms_error


def test_replicate_validation():
    with pytest.raises(ValueError):
        replicate("P", 1.0, 100, GRID, seed=0)
    with pytest.raises(ValueError):
        replicate("Q", 1.0, 100, TimeGrid.uniform(1.0, 8), seed=0)
    with pytest.raises(ValueError):
        replicate("Q", 2.0, 100, GRID, seed=0)
    with pytest.raises(ValueError):
        replicate("Q", 1.0, 1, GRID, seed=0)
    with pytest.raises(ValueError):
        replicate("Q", 1.0, 100, None, seed=0)


def test_small_refinement_study():
    st_ = refinement_study(1.0, (2.0**-6, 2.0**-8, 2.0**-10), n_paths=4000, seed=1,
                           h_max=2.0**-10)
    assert st_.monotone
    assert len(st_.summary()["rows"]) == 3


def test_admissibility_probe(runs):
    q, qc = runs
    rep = admissibility_probe(q, (100, 1000, 4096))
    assert rep.b_unit_minima == sorted(rep.b_unit_minima, reverse=True)
    assert rep.floor_bound == pytest.approx(-a_constant(1.0) - 0.05)
    assert rep.z_unit_floor == float(q.min_V_Z.min())
    with pytest.raises(ValueError):
        admissibility_probe(qc, (100,))
    with pytest.raises(ValueError):
        admissibility_probe(q, (1000, 100))
    with pytest.raises(ValueError):
        admissibility_probe(q, (100, 10_000))


def test_csv_and_json(runs):
    qc = runs[1]
    buf = io.StringIO()
    text = qc.to_csv(buf)
    lines = text.splitlines()
    assert buf.getvalue() == text
    assert lines[0] == HEDGE_CSV_HEADER
    assert len(lines) == qc.n_paths + 1
    k = int(np.flatnonzero(~qc.absorbed)[0])
    assert lines[k + 1].split(",")[2] == ""
    assert '"rms_error"' in qc.to_json()
