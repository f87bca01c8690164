import math

import numpy as np
import pytest

from illiq.paths import TimeGrid
from illiq.scenarios import (
    DeterministicFunction, Kind, PostDefaultCurve, ScenarioSpec, SpecError, build_scenario,
    classify_kind, hyperliquidity_price, pure_illiquidity_price,
)
from illiq.stats import mc_mean

from conftest import load_scenario

ALL = ["kind1.ini", "kind2_canonical.ini", "kind3_hyper.ini", "kind4_composite.ini",
       "pure_illiquidity.ini"]


class TestDeterministicFunction:
    @pytest.mark.parametrize("text", ["const 1.0", "exp 2.0 0.05", "piecewise 0.0:1.0 0.5:2.0"])
    def test_round_trip(self, text):
        f = DeterministicFunction.parse(text)
        assert DeterministicFunction.parse(f.to_text()) == f

    def test_piecewise_is_right_continuous(self):
        f = DeterministicFunction.parse("piecewise 0:1 0.5:2")
        assert f(0.49) == 1.0 and f(0.5) == 2.0 and f(3.0) == 2.0

    @pytest.mark.parametrize("text", ["", "const", "const -1", "exp 0 1", "piecewise 0.1:1",
                                      "piecewise 0:1 0:2", "piecewise 0:0", "cubic 1", "const x"])
    def test_rejects(self, text):
        with pytest.raises(SpecError) as exc:
            DeterministicFunction.parse(text)
        assert exc.value.field == "f"


class TestSpecValidation:
    @pytest.mark.parametrize("kw,field", [
        ({"kind": "Kind9"}, "kind"),
        ({"kind": "Kind1", "sigma": 6.0}, "sigma"),
        ({"kind": "Kind2Canonical", "z0": 0.0}, "z0"),
        ({"kind": "Kind3Hyper", "x0": -1.0}, "x0"),
        ({"kind": "Kind4Composite", "component_offsets": (3, 3)}, "component_offsets"),
        ({"kind": "PureIlliquidity", "x": (0, 0, 0, 0)}, "x"),
        ({"kind": "PureIlliquidity", "x": (1, 0, 0)}, "x"),
        ({"kind": "Kind1", "n_paths": 0}, "n_paths"),
        ({"kind": "Kind1", "horizon": 0.0}, "horizon"),
    ])
    def test_field_named(self, kw, field):
        with pytest.raises(SpecError) as exc:
            ScenarioSpec(**kw)
        assert exc.value.field == field

    def test_post_default_curve(self):
        with pytest.raises(SpecError):
            PostDefaultCurve("flat", 0.01)
        with pytest.raises(SpecError):
            PostDefaultCurve("curvy")
        with pytest.raises(SpecError):
            PostDefaultCurve("flat", 0.0, "continuous")
        c = PostDefaultCurve("deterministic", 0.05)
        assert c.discount(0.0, 1.0) == pytest.approx(math.exp(-0.05))
        assert c.account(2.0) == pytest.approx(math.exp(0.1))

    def test_echo_is_plain(self):
        e = ScenarioSpec(kind="PureIlliquidity").echo()
        assert e["kind"] == "PureIlliquidity" and e["f"] == "const 1.0"
        assert e["post_default"]["discounting"] == "ratio"


@pytest.mark.parametrize("name", ALL)
@pytest.mark.parametrize("measure", ["Q", "Qcheck"])
def test_market_state_invariants(name, measure):
    sc = load_scenario(name)
    ms = sc.simulate(measure, TimeGrid.uniform(1.0, 8), n_paths=2000, seed=3)
    assert ms.invariant_violations() == []
    assert ms.S.shape == (2000, 9)


def test_kind_of_bundled_scenarios():
    assert {load_scenario(n).kind for n in ALL} == set(Kind)


class TestPureIlliquidity:
    def test_closed_form(self):
        assert pure_illiquidity_price(0.0, 1.0, 1.0) == pytest.approx(0.3934693402873666, rel=1e-14)
        f = DeterministicFunction.parse("exp 1 0.1")
        assert pure_illiquidity_price(0.0, 1.0, 1.0, f) == pytest.approx(
            math.exp(0.1) * (1 - math.exp(-0.5)))
        assert pure_illiquidity_price(1.0, 1.0, 2.0, at_maturity=True) == 1.0
        with pytest.raises(ValueError):
            pure_illiquidity_price(1.0, 1.0, 2.0)

    def test_exponent_uses_squared_norm(self):
        # start at |x| = 2: E[X_0 / X_1] = 1 - exp(-4/2); the reciprocal exponent
        # would give 1 - exp(-1/8) instead
        sc = load_scenario("pure_illiquidity.ini", x=(2.0, 0.0, 0.0, 0.0))
        s0 = sc.initial_states(1)
        cf = float(sc.market_price(0.0, 1.0, s0)[0])
        assert cf == pytest.approx(1 - math.exp(-2.0), rel=1e-12)
        s_T = sc.sample_states(1.0, 100_000, "Q", seed=1)
        est = mc_mean(sc.bank_ratio(0.0, 1.0, sc.initial_states(100_000), s_T))
        assert est.within(cf, 4)
        assert not est.within(1 - math.exp(-1 / 8), 20)

    def test_state_price_matches_restart(self):
        # P(0.5, 1) at sampled states against E_Q[X_0.5 / X_1 | state] by restart
        sc = load_scenario("pure_illiquidity.ini")
        s = sc.sample_states(0.5, 8, "Q", seed=2)
        cf = sc.market_price(0.5, 1.0, s)
        rng = np.random.default_rng(7)
        for k in range(8):
            rep = {name: np.repeat(v[k:k + 1], 50_000) for name, v in s.items()}
            s_T = sc.advance(rep, 0.5, 0.5, "Q", rng)
            assert mc_mean(sc.bank_ratio(0.5, 1.0, rep, s_T)).within(cf[k], 4.5)


def test_hyperliquidity_price():
    assert hyperliquidity_price(0.0, 1.0, 1.0) == pytest.approx(0.6826894921370859, rel=1e-13)
    with pytest.raises(ValueError):
        hyperliquidity_price(1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        hyperliquidity_price(0.0, 1.0, 0.0)


def test_classifier_small_sample_is_undetermined():
    c = classify_kind(load_scenario("kind2_canonical.ini"), 1.0, n_paths=50)
    assert c.cell == "undetermined"


@pytest.mark.parametrize("name,cell", [
    ("kind1.ini", "model of the 1st kind"),
    ("kind3_hyper.ini", "model of the 3rd kind"),
])
def test_classifier_moderate_sample(name, cell):
    c = classify_kind(load_scenario(name), 1.0, n_paths=30_000, seed=5)
    assert c.cell == cell
    assert c.as_dict()["cell"] == cell
