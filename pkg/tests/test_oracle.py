from collections import defaultdict
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from illiq.oracle import (
    MAX_DEPTH, DepthError, DiscreteMarket, JumpClass, MartingaleViolation, TreeFormatError,
    bundled_tree, classify_jump_to_zero, enumerate_measures, multiplicative_market,
    random_walk_market, verify_foellmer_identities,
)


def walk_absorption(depth, start=1):
    """P(simple symmetric walk from ``start`` hits 0 within ``depth`` steps), by DP."""
    dist = {start: Fraction(1)}
    dead = Fraction(0)
    for _ in range(depth):
        nxt = defaultdict(Fraction)
        for k, p in dist.items():
            for j in (k - 1, k + 1):
                if j == 0:
                    dead += p / 2
                else:
                    nxt[j] += p / 2
        dist = nxt
    return dead


def test_walk_oracle_sanity():
    assert walk_absorption(1) == Fraction(1, 2)
    assert walk_absorption(4) == Fraction(5, 8)
    assert walk_absorption(8) == Fraction(93, 128)


@pytest.mark.parametrize("name,depth", [("rw_depth1", 1), ("rw_depth4", 4), ("rw_depth8", 8)])
def test_bundled_walks(name, depth):
    m = bundled_tree(name)
    rep = verify_foellmer_identities(m)
    assert rep.ok, rep.summary()
    en = enumerate_measures(m)
    jr = classify_jump_to_zero(m)
    assert jr.classification is JumpClass.JUMPS_TO_ZERO
    assert jr.defect == walk_absorption(depth)
    for t in range(depth + 1):
        assert en.q_expectation_Z(t) == en.qcheck_survival(t)
        assert en.q_explosion(t) == 0
    assert sum(en.qcheck) == 1 and sum(en.q) == 1


def test_bundled_multiplicative():
    m = bundled_tree("multiplicative_depth6")
    assert verify_foellmer_identities(m).ok
    jr = classify_jump_to_zero(m)
    assert jr.classification is JumpClass.CONTINUOUS_OR_NEVER
    assert jr.defect == 0
    assert enumerate_measures(m).q_expectation_Z(6) == 1


def test_corrupted_tree_names_identity_and_event():
    m = bundled_tree("rw_depth4_corrupted")
    rep = verify_foellmer_identities(m)
    assert not rep.ok
    v = rep.violation
    assert v.identity == "foellmer1" and v.t == 0 and v.event == ("s1",)
    assert "foellmer1 violated at t=0, A=s1" in rep.summary()
    assert rep.martingale_problems
    with pytest.raises(MartingaleViolation):
        enumerate_measures(m)


def test_depth_cap():
    with pytest.raises(DepthError, match="line 2"):
        bundled_tree("rw_depth13")
    with pytest.raises(DepthError):
        random_walk_market(MAX_DEPTH + 1)
    random_walk_market(MAX_DEPTH)


@pytest.mark.parametrize("text,msg", [
    ("s1 1\n", "depth"),
    ("depth 1\ndepth 2\ns1 1\n", "repeated"),
    ("depth x\ns1 1\n", "integer"),
    ("depth 1\ns1 2 s0:1\ns0 0\n", "root value"),
    ("depth 1\ns1 1 s9:1\n", "unknown node"),
    ("depth 1\ns1 1 s0\ns0 0\n", "child:prob"),
    ("depth 1\ns1 1 s0:3/2\ns0 0\n", "outside"),
    ("depth 1\ns1 1 s0:a\ns0 0\n", "rational"),
    ("depth 1\ns1 1\ns1 1\n", "twice"),
    ("depth 1\n", "no nodes"),
])
def test_parse_errors(text, msg):
    with pytest.raises(TreeFormatError, match=msg):
        DiscreteMarket.parse(text)


def test_text_round_trip():
    m = multiplicative_market(3)
    assert DiscreteMarket.parse(m.to_text()) == m
    assert random_walk_market(2).to_text().startswith("depth 2\ns1 1 s2:1/2 s0:1/2")


def test_missing_children_is_a_martingale_problem():
    m = DiscreteMarket.parse("depth 2\ns1 1 s2:1/2 s0:1/2\ns2 2\ns0 0\n")
    assert any("no children" in p for p in m.martingale_problems())


def _prefix_supermartingale(en, depth):
    # E_Q[Z_{t+1} | prefix] <= Z_t on every Q-charged prefix
    for t in range(depth):
        groups = defaultdict(lambda: [Fraction(0), Fraction(0)])
        for path, z, q in zip(en.paths, en.zcheck, en.q):
            if q == 0:
                continue
            g = groups[path[: t + 1]]
            g[0] += q
            g[1] += q / z[t + 1]
        for prefix, (w, wz) in groups.items():
            zt = 1 / next(z[t] for p, z in zip(en.paths, en.zcheck) if p[: t + 1] == prefix)
            if wz / w > zt:
                return False
    return True


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4))
def test_random_walk_markets(depth, start):
    m = random_walk_market(depth, start)
    assert verify_foellmer_identities(m).ok
    en = enumerate_measures(m)
    assert classify_jump_to_zero(m).defect == walk_absorption(depth, start)
    assert _prefix_supermartingale(en, depth)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.fractions(Fraction(11, 10), Fraction(4)),
       st.fractions(Fraction(1, 10), Fraction(9, 10)))
def test_multiplicative_markets(depth, up, down):
    m = multiplicative_market(depth, up, down)
    assert verify_foellmer_identities(m).ok
    assert classify_jump_to_zero(m).defect == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.fractions(Fraction(0), Fraction(1)))
def test_single_edge_corruption_is_caught(depth, p):
    m = random_walk_market(depth)
    if p == Fraction(1, 2):
        return
    bad = m.with_edge_probability("s1", "s2", p)
    rep = verify_foellmer_identities(bad)
    assert not rep.ok
    assert rep.violation.identity in {"qcheck_mass", "foellmer1", "foellmer2", "bayes"}


def test_with_edge_probability_unknown_edge():
    with pytest.raises(KeyError):
        random_walk_market(2).with_edge_probability("s1", "s5", Fraction(1, 3))
