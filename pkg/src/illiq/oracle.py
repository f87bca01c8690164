"""Exact verification of the Föllmer identities on finite trees.

A :class:`DiscreteMarket` is a node graph carrying Zcheck values and
Qcheck transition probabilities, unrolled for ``depth`` periods from its
root.  Both trees and recombining lattices can be written this way.  The
measure Q is built from Qcheck by the inverse construction dQ/dQcheck = Zcheck
on the terminal level, and every identity is then checked with rational
arithmetic, so "holds" means literal equality.

Tree file grammar (one item per line, ``#`` starts a comment)::

    depth <N>
    <node-id> <value> [<child-id>:<prob> ...]

The first node line is the root, whose value must be 1.  Values and
probabilities are integers, ``p/q`` fractions or finite decimals.  A node
with value 0 and no children is absorbing (implicit self-loop).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Tuple

__all__ = [
    "MAX_DEPTH",
    "DepthError",
    "TreeFormatError",
    "MartingaleViolation",
    "DiscreteMarket",
    "PathEnumeration",
    "Violation",
    "IdentityReport",
    "JumpClass",
    "JumpReport",
    "enumerate_measures",
    "verify_foellmer_identities",
    "classify_jump_to_zero",
    "random_walk_market",
    "multiplicative_market",
    "bundled_tree",
]

MAX_DEPTH = 12
ZERO = Fraction(0)
ONE = Fraction(1)


class DepthError(ValueError):
    """Tree deeper than the enumeration cap."""


class TreeFormatError(ValueError):
    """Malformed tree description."""


class MartingaleViolation(ValueError):
    """Zcheck is not a martingale under the given transition probabilities."""


Edge = Tuple[str, Fraction]


@dataclass(frozen=True)
class DiscreteMarket:
    depth: int
    root: str
    values: Dict[str, Fraction]
    children: Dict[str, Tuple[Edge, ...]]

    def __post_init__(self):
        if not 0 <= self.depth:
            raise TreeFormatError("depth must be non-negative")
        if self.depth > MAX_DEPTH:
            raise DepthError(f"depth {self.depth} exceeds the cap of {MAX_DEPTH}")
        if self.root not in self.values:
            raise TreeFormatError(f"root {self.root!r} has no value")
        if self.values[self.root] != ONE:
            raise TreeFormatError(f"root value must be 1, got {self.values[self.root]}")
        for node, v in self.values.items():
            if v < 0:
                raise TreeFormatError(f"node {node!r} has a negative value")
        for node, edges in self.children.items():
            if node not in self.values:
                raise TreeFormatError(f"edges given for unknown node {node!r}")
            for child, p in edges:
                if child not in self.values:
                    raise TreeFormatError(f"node {node!r} points to unknown node {child!r}")
                if not ZERO <= p <= ONE:
                    raise TreeFormatError(f"edge {node}->{child} has probability {p} outside [0,1]")

    # -- structure ---------------------------------------------------------

    def transitions(self, node: str) -> Tuple[Edge, ...]:
        edges = self.children.get(node, ())
        if not edges and self.values[node] == 0:
            return ((node, ONE),)
        return edges

    def is_absorbing(self, node: str) -> bool:
        if self.values[node] != 0:
            return False
        return all(c == node for c, _ in self.transitions(node))

    def levels(self) -> List[set]:
        """Nodes reachable at each level 0..depth."""
        out = [{self.root}]
        for _ in range(self.depth):
            nxt = set()
            for node in out[-1]:
                nxt.update(c for c, _ in self.transitions(node))
            out.append(nxt)
        return out

    def martingale_problems(self) -> List[str]:
        """Nodes (visited before the last level) where the invariant fails."""
        problems = []
        seen = set()
        for node in (n for lvl in self.levels()[:-1] for n in sorted(lvl)):
            if node in seen:
                continue
            seen.add(node)
            edges = self.transitions(node)
            if not edges:
                problems.append(f"node {node} has value {self.values[node]} but no children")
                continue
            total = sum((p for _, p in edges), ZERO)
            if total != ONE:
                problems.append(f"node {node}: transition probabilities sum to {total}")
            mean = sum((p * self.values[c] for c, p in edges), ZERO)
            if mean != self.values[node]:
                problems.append(f"node {node}: E[Zcheck_next] = {mean} != {self.values[node]}")
            if self.values[node] == 0 and not self.is_absorbing(node):
                problems.append(f"node {node}: zero value must be absorbing")
        return problems

    def with_edge_probability(self, node: str, child: str, prob) -> "DiscreteMarket":
        """Copy with one edge probability overwritten (fault injection)."""
        prob = Fraction(prob)
        edges = list(self.transitions(node))
        for k, (c, _) in enumerate(edges):
            if c == child:
                edges[k] = (c, prob)
                break
        else:
            raise KeyError(f"no edge {node}->{child}")
        kids = dict(self.children)
        kids[node] = tuple(edges)
        return replace(self, children=kids)

    # -- text format -------------------------------------------------------

    @classmethod
    def parse(cls, text: str) -> "DiscreteMarket":
        depth = None
        root = None
        values: Dict[str, Fraction] = {}
        children: Dict[str, Tuple[Edge, ...]] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "depth":
                if len(tok) != 2 or depth is not None:
                    raise TreeFormatError(f"line {lineno}: malformed or repeated depth line")
                try:
                    depth = int(tok[1])
                except ValueError:
                    raise TreeFormatError(f"line {lineno}: depth must be an integer") from None
                if depth > MAX_DEPTH:
                    raise DepthError(f"line {lineno}: depth {depth} exceeds the cap of {MAX_DEPTH}")
                continue
            if len(tok) < 2:
                raise TreeFormatError(f"line {lineno}: expected '<id> <value> [child:prob ...]'")
            node = tok[0]
            if node in values:
                raise TreeFormatError(f"line {lineno}: node {node!r} defined twice")
            values[node] = _rational(tok[1], lineno)
            edges = []
            for item in tok[2:]:
                if ":" not in item:
                    raise TreeFormatError(f"line {lineno}: edge {item!r} is not 'child:prob'")
                c, p = item.rsplit(":", 1)
                edges.append((c, _rational(p, lineno)))
            if edges:
                children[node] = tuple(edges)
            if root is None:
                root = node
        if depth is None:
            raise TreeFormatError("missing 'depth' line")
        if root is None:
            raise TreeFormatError("no nodes defined")
        return cls(depth, root, values, children)

    @classmethod
    def load(cls, path) -> "DiscreteMarket":
        return cls.parse(Path(path).read_text())

    def to_text(self) -> str:
        order = [self.root] + sorted(n for n in self.values if n != self.root)
        lines = [f"depth {self.depth}"]
        for node in order:
            parts = [node, str(self.values[node])]
            parts += [f"{c}:{p}" for c, p in self.children.get(node, ())]
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"


def _rational(s: str, lineno: int) -> Fraction:
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        raise TreeFormatError(f"line {lineno}: {s!r} is not a rational number") from None


# ---------------------------------------------------------------------------
# enumeration


@dataclass
class PathEnumeration:
    """All root-to-leaf paths with their weights.

    ``tau[k]`` is the first level at which path k has Zcheck = 0, or None.
    """

    paths: List[Tuple[str, ...]]
    zcheck: List[Tuple[Fraction, ...]]
    qcheck: List[Fraction]
    q: List[Fraction]
    tau: List[Optional[int]]

    def qcheck_survival(self, t: int) -> Fraction:
        return sum((w for w, s in zip(self.qcheck, self.tau) if s is None or s > t), ZERO)

    def q_expectation_Z(self, t: int) -> Fraction:
        """E_Q[Z_t]; raises if Z_t is infinite on a Q-charged path."""
        total = ZERO
        for w, z in zip(self.q, self.zcheck):
            if w == 0:
                continue
            if z[t] == 0:
                raise ZeroDivisionError("Z_t is infinite on a path with positive Q-weight")
            total += w / z[t]
        return total

    def q_explosion(self, t: int) -> Fraction:
        return sum((w for w, s in zip(self.q, self.tau) if s is not None and s <= t), ZERO)


def _unroll(market: DiscreteMarket) -> PathEnumeration:
    paths, zc, qc, tau = [], [], [], []
    stack = [((market.root,), ONE)]
    while stack:
        prefix, w = stack.pop()
        if len(prefix) == market.depth + 1:
            vals = tuple(market.values[n] for n in prefix)
            paths.append(prefix)
            zc.append(vals)
            qc.append(w)
            tau.append(next((k for k, v in enumerate(vals) if v == 0), None))
            continue
        edges = market.transitions(prefix[-1])
        if not edges:
            raise TreeFormatError(f"node {prefix[-1]} has no children before the last level")
        for child, p in reversed(edges):
            stack.append((prefix + (child,), w * p))
    q = [w * z[-1] for w, z in zip(qc, zc)]
    return PathEnumeration(paths, zc, qc, q, tau)


def enumerate_measures(market: DiscreteMarket) -> PathEnumeration:
    """Q and Qcheck path weights and tau per path.

    Q-weight of a path = Qcheck-weight times terminal Zcheck.  Raises
    :class:`MartingaleViolation` if Zcheck is not a Qcheck-martingale.
    """
    problems = market.martingale_problems()
    if problems:
        raise MartingaleViolation("; ".join(problems))
    return _unroll(market)


# ---------------------------------------------------------------------------
# identity checks


@dataclass(frozen=True)
class Violation:
    identity: str
    t: int
    event: Tuple[str, ...]
    lhs: object
    rhs: object
    T: Optional[int] = None
    sub_event: Optional[Tuple[str, ...]] = None

    def describe(self) -> str:
        where = f"t={self.t}, A={'>'.join(self.event)}"
        if self.T is not None:
            where += f", T={self.T}, B={'>'.join(self.sub_event or ())}"
        return f"{self.identity} violated at {where}: lhs={self.lhs} rhs={self.rhs}"


@dataclass
class IdentityReport:
    ok: bool
    n_checks: int
    violation: Optional[Violation]
    martingale_problems: List[str]
    depth: int
    n_paths: int

    def summary(self) -> str:
        if self.ok:
            return (f"all Föllmer identities hold exactly ({self.n_checks} atom checks, "
                    f"depth {self.depth}, {self.n_paths} paths)")
        lines = ["identity check FAILED", "  " + self.violation.describe()]
        lines += ["  martingale: " + p for p in self.martingale_problems]
        return "\n".join(lines)


class _Stop(Exception):
    pass


def verify_foellmer_identities(market: DiscreteMarket) -> IdentityReport:
    """Check every identity atom by atom with exact arithmetic.

    Every event of F_t is a finite union of atoms (path prefixes of length
    t+1), and all three identities are additive in the event, so checking
    atoms covers all events.  Checks, in order, for t = 0..depth:

    * ``qcheck_mass``: transition probabilities out of each atom sum to 1;
    * ``foellmer1``: Qcheck[A, tau > t] = E_Q[Z_t 1_A];
    * ``foellmer2``: Q[A, Z_t > 0] = E_Qcheck[Zcheck_t 1_A];

    then ``bayes`` for all t <= T on indicator functionals 1_B, B an atom of
    F_T inside A.  The first failure is reported.
    """
    en = _unroll(market)
    D = market.depth
    n_checks = 0
    violation = None

    def check(ok, v):
        nonlocal n_checks, violation
        n_checks += 1
        if not ok:
            violation = v
            raise _Stop

    # per-level atom aggregates
    agg = []
    for t in range(D + 1):
        atoms: Dict[Tuple[str, ...], dict] = {}
        for k, path in enumerate(en.paths):
            a = atoms.setdefault(path[: t + 1], {
                "qc": ZERO, "qc_alive": ZERO, "q": ZERO, "qZ": ZERO,
                "qZ_inf": False, "qcZc": ZERO, "zc": en.zcheck[k][t]})
            w, q, z = en.qcheck[k], en.q[k], en.zcheck[k][t]
            alive = en.tau[k] is None or en.tau[k] > t
            a["qc"] += w
            a["q"] += q
            a["qcZc"] += w * z
            if alive:
                a["qc_alive"] += w
            if q != 0:
                if z == 0:
                    a["qZ_inf"] = True
                else:
                    a["qZ"] += q / z
        agg.append(atoms)

    try:
        for t in range(D + 1):
            for A, a in agg[t].items():
                if t < D:
                    total = sum((p for _, p in market.transitions(A[-1])), ZERO)
                    check(total == ONE, Violation("qcheck_mass", t, A, total, ONE))
                rhs1 = "inf" if a["qZ_inf"] else a["qZ"]
                check(not a["qZ_inf"] and a["qc_alive"] == a["qZ"],
                      Violation("foellmer1", t, A, a["qc_alive"], rhs1))
                check(a["q"] == a["qcZc"], Violation("foellmer2", t, A, a["q"], a["qcZc"]))
        for T in range(D + 1):
            for B, b in agg[T].items():
                for t in range(T + 1):
                    A = B[: t + 1]
                    a = agg[t][A]
                    if a["qc"] == 0:
                        continue  # Qcheck-null atom: the identity is a.s. only
                    lhs = b["qc_alive"] / a["qc"]
                    if a["zc"] == 0:
                        rhs = ZERO
                    elif a["q"] == 0 or b["qZ_inf"]:
                        rhs = "undefined"
                    else:
                        rhs = a["zc"] * b["qZ"] / a["q"]
                    check(lhs == rhs, Violation("bayes", t, A, lhs, rhs, T, B))
    except _Stop:
        pass
    return IdentityReport(violation is None, n_checks, violation,
                          market.martingale_problems(), D, len(en.paths))


class JumpClass(str, enum.Enum):
    JUMPS_TO_ZERO = "JumpsToZero"
    CONTINUOUS_OR_NEVER = "ReachesZeroContinuouslyOrNever"


@dataclass
class JumpReport:
    classification: JumpClass
    defect: Fraction
    jump_edges: List[Tuple[int, str, str, Fraction]]
    note: str = (
        "In finite discrete time every local martingale is a true martingale, so the "
        "continuous-time dichotomy appears here as: a positive-probability jump of "
        "Zcheck to zero <=> strict supermartingale defect 1 - E_Q[Z_depth] > 0."
    )

    def summary(self) -> str:
        s = f"{self.classification.value}; supermartingale defect 1 - E_Q[Z_depth] = {self.defect}"
        if self.jump_edges:
            lvl, a, b, p = self.jump_edges[0]
            s += f"; first jump {a}->{b} at level {lvl} with probability {p}"
        return s


def classify_jump_to_zero(market: DiscreteMarket) -> JumpReport:
    """Detect positive-probability transitions from Zcheck > 0 straight to 0."""
    jumps = []
    for lvl, nodes in enumerate(market.levels()[:-1]):
        for node in sorted(nodes):
            if market.values[node] <= 0:
                continue
            for child, p in market.transitions(node):
                if p > 0 and market.values[child] == 0:
                    jumps.append((lvl, node, child, p))
    en = _unroll(market)
    defect = ONE - en.qcheck_survival(market.depth)
    cls = JumpClass.JUMPS_TO_ZERO if jumps else JumpClass.CONTINUOUS_OR_NEVER
    return JumpReport(cls, defect, jumps)


# ---------------------------------------------------------------------------
# bundled markets


def random_walk_market(depth: int, start: int = 1) -> DiscreteMarket:
    """Symmetric +-1 walk from ``start`` absorbed at 0, scaled so Zcheck_0 = 1."""
    if start < 1:
        raise ValueError("start must be a positive integer")
    top = start + depth
    values = {f"s{k}": Fraction(k, start) for k in range(top + 1)}
    half = Fraction(1, 2)
    children = {f"s{k}": ((f"s{k + 1}", half), (f"s{k - 1}", half))
                for k in range(1, top)}
    # nodes at the top are only reached on the last level
    return DiscreteMarket(depth, f"s{start}", values, children)


def multiplicative_market(depth: int, up: Fraction = Fraction(3, 2),
                          down: Fraction = Fraction(1, 2)) -> DiscreteMarket:
    """Strictly positive binomial tree with Zcheck a martingale."""
    up, down = Fraction(up), Fraction(down)
    p = (1 - down) / (up - down)
    values, children = {}, {}
    for n in range(depth + 1):
        for i in range(n + 1):
            node = f"u{i}d{n - i}"
            values[node] = up**i * down ** (n - i)
            if n < depth:
                children[node] = ((f"u{i + 1}d{n - i}", p), (f"u{i}d{n - i + 1}", 1 - p))
    return DiscreteMarket(depth, "u0d0", values, children)


_DATA = Path(__file__).resolve().parent / "data" / "trees"


def bundled_tree(name: str) -> DiscreteMarket:
    """Load one of the tree files shipped with the package."""
    path = _DATA / (name if name.endswith(".tree") else name + ".tree")
    return DiscreteMarket.load(path)
