"""Scenario configuration files.

Configs are INI files read with :mod:`configparser`.  Every key is listed in
``SCHEMA`` with its type and default; unknown sections or keys are rejected
with the line they appear on.

Example::

    [meta]
    schema_version = 1

    [scenario]
    kind = Kind2Canonical
    z0 = 1.0

    [simulation]
    horizon = 1.0
    n_steps = 64
    n_paths = 100000
    seed = 20240601

    [post_default]
    curve = flat

    [premium]
    t_list = 0 0.5
    T_list = 1 2

    [arbitrage]
    T = 1.0
    eps_floor = 0.00006103515625
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

from .scenarios import DeterministicFunction, PostDefaultCurve, ScenarioSpec, SpecError

__all__ = ["SCHEMA_VERSION", "SCHEMA", "ConfigError", "RunConfig", "ArbitrageSettings",
           "load_config", "parse_config"]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; carries the offending key and line when known."""

    def __init__(self, msg: str, key: Optional[str] = None, line: Optional[int] = None,
                 source: str = "<config>"):
        self.key = key
        self.line = line
        self.source = source
        where = source if line is None else f"{source}:{line}"
        super().__init__(f"{where}: {key + ': ' if key else ''}{msg}")


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default, unit / description)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "meta": {
        "schema_version": (int, SCHEMA_VERSION, "config schema version"),
    },
    "scenario": {
        "kind": (str, None, "Kind1 | Kind2Canonical | Kind3Hyper | Kind4Composite | PureIlliquidity"),
        "sigma": (float, 0.2, "Kind1 deflator volatility (per sqrt-year)"),
        "rate": (float, 0.0, "Kind1 domestic short rate (per year)"),
        "z0": (float, 1.0, "start of the inverse-Bes3 deflator"),
        "x0": (float, 1.0, "Kind3 bank account start"),
        "y0": (float, 1.0, "Kind4 second driver start"),
        "x": (_floats, (1.0, 0.0, 0.0, 0.0), "PureIlliquidity start point in R^4"),
        "f": (DeterministicFunction.parse, DeterministicFunction(), "PureIlliquidity f(t)"),
        "component_offsets": (_ints, (0, 1), "substream offsets of the two drivers"),
    },
    "simulation": {
        "horizon": (float, 1.0, "simulation horizon (years)"),
        "n_steps": (int, 64, "uniform grid steps"),
        "n_paths": (int, 100_000, "Monte Carlo paths"),
        "seed": (int, 20_240_601, "root seed"),
        "bridge_correction": (_bool, True, "Brownian-bridge absorption correction"),
        "threads": (int, None, "worker threads (overridden by --threads)"),
    },
    "post_default": {
        "curve": (str, "flat", "flat | deterministic"),
        "rate": (float, 0.0, "replacement curve rate (per year)"),
        "discounting": (str, "ratio", "ratio | account"),
    },
    "premium": {
        "t_list": (_floats, (0.0,), "evaluation times (years)"),
        "T_list": (_floats, (1.0,), "maturities (years)"),
        "n_outer": (int, 256, "outer states per (t, T) with t > 0"),
        "n_inner": (int, 4096, "inner paths per outer state"),
        "classify": (_bool, True, "include the four-kind table cell in the summary"),
    },
    "arbitrage": {
        "T": (float, 1.0, "hedge maturity (years)"),
        "eps_floor": (float, None, "grid floor before T (years); required"),
        "h_max": (float, 2.0**-13, "largest grid step (years)"),
        "ratio": (float, 0.125, "step / remaining-time ratio of the refinement"),
        "measure": (str, "Q", "Q | Qcheck"),
        "n_paths": (int, None, "paths (defaults to simulation.n_paths)"),
    },
}


@dataclass
class ArbitrageSettings:
    T: float
    eps_floor: float
    h_max: float
    ratio: float
    measure: str
    n_paths: int


@dataclass
class RunConfig:
    spec: ScenarioSpec
    threads: Optional[int]
    premium: dict
    arbitrage_raw: dict
    source: str = "<config>"
    lines: Dict[Tuple[str, str], int] = field(default_factory=dict)
    present: frozenset = frozenset()

    def arbitrage(self) -> ArbitrageSettings:
        """Arbitrage settings; a missing eps_floor is a config error."""
        a = self.arbitrage_raw
        if "arbitrage" not in self.present:
            raise ConfigError("section [arbitrage] is required for this command",
                              source=self.source)
        if a.get("eps_floor") is None:
            raise ConfigError("eps_floor is required", key="arbitrage.eps_floor",
                              line=self.lines.get(("arbitrage", "__section__")), source=self.source)
        if not a["eps_floor"] > 0:
            raise ConfigError("must be positive", key="arbitrage.eps_floor",
                              line=self.lines.get(("arbitrage", "eps_floor")), source=self.source)
        if a["measure"] not in ("Q", "Qcheck"):
            raise ConfigError(f"unknown measure {a['measure']!r}", key="arbitrage.measure",
                              line=self.lines.get(("arbitrage", "measure")), source=self.source)
        n = a["n_paths"] if a["n_paths"] is not None else self.spec.n_paths
        return ArbitrageSettings(a["T"], a["eps_floor"], a["h_max"], a["ratio"], a["measure"], n)


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


def _line_map(text: str) -> Dict[Tuple[str, str], int]:
    """(section, key) -> 1-based line number; sections map under '__section__'."""
    out = {}
    section = None
    for no, line in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            out.setdefault((section, "__section__"), no)
            continue
        if section is None or line[:1].isspace():
            continue
        m = _KEY_RE.match(line)
        if m:
            out.setdefault((section, m.group(1).strip()), no)
    return out


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse config text; raises ConfigError on any problem."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], line=line, source=source) from None
    lines = _line_map(text)

    values: Dict[str, dict] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]",
                              line=lines.get((section, "__section__")), source=source)
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError("unknown key", key=f"{section}.{key}",
                                  line=lines.get((section, key)), source=source)
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (conv, default, _) in keys.items():
            if cp.has_option(section, key):
                raw = cp.get(section, key)
                try:
                    values[section][key] = conv(raw)
                except (ValueError, SpecError) as exc:
                    raise ConfigError(f"bad value {raw!r}: {exc}", key=f"{section}.{key}",
                                      line=lines.get((section, key)), source=source) from None
            else:
                values[section][key] = default

    if values["meta"]["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {values['meta']['schema_version']}",
                          key="meta.schema_version", line=lines.get(("meta", "schema_version")),
                          source=source)
    sc, sim, pd = values["scenario"], values["simulation"], values["post_default"]
    if sc["kind"] is None:
        raise ConfigError("kind is required", key="scenario.kind",
                          line=lines.get(("scenario", "__section__")), source=source)
    if sim["threads"] is not None and sim["threads"] < 1:
        raise ConfigError("must be at least 1", key="simulation.threads",
                          line=lines.get(("simulation", "threads")), source=source)
    try:
        post = PostDefaultCurve(pd["curve"], pd["rate"], pd["discounting"])
        spec = ScenarioSpec(
            kind=sc["kind"], horizon=sim["horizon"], n_steps=sim["n_steps"],
            n_paths=sim["n_paths"], seed=sim["seed"], sigma=sc["sigma"], rate=sc["rate"],
            z0=sc["z0"], x0=sc["x0"], y0=sc["y0"], x=sc["x"], f=sc["f"],
            component_offsets=sc["component_offsets"], post_default=post,
            bridge_correction=sim["bridge_correction"],
        )
    except SpecError as exc:
        key = _spec_key(exc.field)
        raise ConfigError(exc.message, key=key, line=lines.get(tuple(key.split(".", 1))),
                          source=source) from None

    prem = values["premium"]
    for name in ("t_list", "T_list"):
        if not prem[name]:
            raise ConfigError("needs at least one value", key=f"premium.{name}",
                              line=lines.get(("premium", name)), source=source)
    for name in ("n_outer", "n_inner"):
        if prem[name] < 2:
            raise ConfigError("must be at least 2", key=f"premium.{name}",
                              line=lines.get(("premium", name)), source=source)
    present = frozenset(cp.sections())
    return RunConfig(spec, sim["threads"], prem, values["arbitrage"], source, lines, present)


def _spec_key(name: str) -> str:
    """Map a ScenarioSpec field name to its config key."""
    if name.startswith("post_default."):
        return name
    for section in ("scenario", "simulation"):
        if name in SCHEMA[section]:
            return f"{section}.{name}"
    return f"scenario.{name}"


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(p)) from None
    return parse_config(text, source=str(p))
