import pytest

from illiq.acceptance import SCENARIO_DIR
from illiq.config import ConfigError, load_config, parse_config
from illiq.scenarios import Kind

BASE = """\
[meta]
schema_version = 1

[scenario]
kind = Kind2Canonical
z0 = 1.0

[simulation]
n_paths = 1000
"""


@pytest.mark.parametrize("path", sorted(SCENARIO_DIR.glob("*.ini")), ids=lambda p: p.name)
def test_bundled_configs_parse(path):
    cfg = load_config(path)
    assert cfg.spec.n_paths == 100_000
    assert cfg.source == str(path)


def test_defaults_and_overrides():
    cfg = parse_config(BASE + "threads = 3  # inline comment\n")
    assert cfg.spec.kind is Kind.KIND2
    assert cfg.spec.n_paths == 1000 and cfg.spec.n_steps == 64
    assert cfg.threads == 3
    assert cfg.premium["n_inner"] == 4096


def test_unknown_key_reports_line():
    text = BASE.replace("z0 = 1.0", "z0 = 1.0\nzz = 2")
    with pytest.raises(ConfigError) as exc:
        parse_config(text, source="x.ini")
    assert exc.value.key == "scenario.zz"
    assert exc.value.line == 7
    assert str(exc.value).startswith("x.ini:7: scenario.zz:")


def test_unknown_section():
    with pytest.raises(ConfigError, match=r"unknown section \[extra\]") as exc:
        parse_config(BASE + "[extra]\na = 1\n")
    assert exc.value.line == 10


@pytest.mark.parametrize("line,key", [
    ("n_paths = 0", "simulation.n_paths"),
    ("n_paths = many", "simulation.n_paths"),
    ("threads = 0", "simulation.threads"),
    ("horizon = -1", "simulation.horizon"),
    ("bridge_correction = maybe", "simulation.bridge_correction"),
])
def test_bad_simulation_values(line, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(BASE.replace("n_paths = 1000", line))
    assert exc.value.key == key
    assert exc.value.line == 9


def test_bad_scenario_values():
    with pytest.raises(ConfigError) as exc:
        parse_config(BASE.replace("z0 = 1.0", "z0 = -1.0"))
    assert exc.value.key == "scenario.z0" and exc.value.line == 6
    with pytest.raises(ConfigError) as exc:
        parse_config(BASE.replace("Kind2Canonical", "Kind7"))
    assert exc.value.key == "scenario.kind"
    with pytest.raises(ConfigError):
        parse_config(BASE.replace("kind = Kind2Canonical\n", ""))


def test_post_default_errors():
    with pytest.raises(ConfigError) as exc:
        parse_config(BASE + "[post_default]\ndiscounting = sideways\n")
    assert exc.value.key == "post_default.discounting"


def test_schema_version_checked():
    with pytest.raises(ConfigError, match="schema_version"):
        parse_config(BASE.replace("schema_version = 1", "schema_version = 2"))


def test_arbitrage_section():
    with pytest.raises(ConfigError, match=r"\[arbitrage\]"):
        parse_config(BASE).arbitrage()
    with pytest.raises(ConfigError) as exc:
        parse_config(BASE + "[arbitrage]\nT = 1.0\n").arbitrage()
    assert exc.value.key == "arbitrage.eps_floor"
    with pytest.raises(ConfigError):
        parse_config(BASE + "[arbitrage]\neps_floor = 0\n").arbitrage()
    a = parse_config(BASE + "[arbitrage]\neps_floor = 0.001\nmeasure = Qcheck\n").arbitrage()
    assert a.eps_floor == 0.001 and a.measure == "Qcheck" and a.n_paths == 1000


def test_syntax_error():
    with pytest.raises(ConfigError):
        parse_config("no section header\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.ini")
