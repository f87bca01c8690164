import csv
import json
import math
from pathlib import Path

import pytest

from illiq.acceptance import SCENARIO_DIR
from illiq.cli import (
    EXIT_ACCEPT, EXIT_CONFIG, EXIT_OK, EXIT_ORACLE, MANIFEST, SIMULATE_HEADER, main,
)
from illiq.arbitrage import HEDGE_CSV_HEADER
from illiq.term_structures import CSV_HEADER

KIND2 = str(SCENARIO_DIR / "kind2_canonical.ini")


def manifest(out):
    return [json.loads(l) for l in (Path(out) / MANIFEST).read_text().splitlines()]


def rows(out, record, suffix=".csv"):
    name = next(f for f in record["outputs"] if f.endswith(suffix))
    with open(Path(out) / name, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_writes_csv_and_manifest(tmp_path):
    out = tmp_path / "out"
    assert main(["simulate", "--config", KIND2, "--out", str(out), "--paths", "2000"]) == EXIT_OK
    assert main(["simulate", "--config", KIND2, "--out", str(out), "--paths", "2000"]) == EXIT_OK
    recs = manifest(out)
    assert len(recs) == 2 and recs[0]["run_id"] != recs[1]["run_id"]
    r = recs[0]
    assert r["exit_code"] == 0 and r["command"] == "simulate"
    assert r["scenario"]["n_paths"] == 2000
    listed = {f for rec in recs for f in rec["outputs"]}
    assert listed == {p.name for p in out.iterdir()} - {MANIFEST}
    csv_name = next(f for f in r["outputs"] if f.endswith(".csv"))
    assert (out / csv_name).read_text().splitlines()[0] == SIMULATE_HEADER
    # the two runs used the same seed, so their CSVs match byte for byte
    names = [next(f for f in rec["outputs"] if f.endswith(".csv")) for rec in recs]
    assert (out / names[0]).read_bytes() == (out / names[1]).read_bytes()


def test_unknown_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[scenario]\nkind = Kind1\nbogus = 1\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "scenario.bogus" in err and "bad.ini:3" in err


def test_zero_paths_exits_2(tmp_path, capsys):
    assert main(["simulate", "--config", KIND2, "--out", str(tmp_path), "--paths", "0"]) == EXIT_CONFIG
    assert "--paths" in capsys.readouterr().err


def test_bad_arguments_exit_2(tmp_path):
    assert main(["simulate"]) == EXIT_CONFIG
    assert main(["frobnicate"]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert main(["simulate", "--config", KIND2, "--out", str(tmp_path), "--ci-level", "1.5"]) == EXIT_CONFIG
    assert main(["simulate", "--config", KIND2, "--out", str(tmp_path), "--threads", "0"]) == EXIT_CONFIG


@pytest.mark.parametrize("name,expected", [
    ("kind2_canonical.ini", 0.3173105078629141),
    ("kind1.ini", 0.0),
    ("pure_illiquidity.ini", math.exp(-0.5)),
])
def test_premium_at_zero(tmp_path, name, expected, capsys):
    out = tmp_path / "out"
    code = main(["premium", "--config", str(SCENARIO_DIR / name), "--out", str(out),
                 "--t", "0", "--T", "1", "--paths", "50000"])
    assert code == EXIT_OK
    r = manifest(out)[0]
    row = rows(out, r)[0]
    assert list(row) == CSV_HEADER.split(",")
    L, se = float(row["L_mean"]), float(row["L_se"])
    assert abs(L - expected) <= 4 * se + 1e-12
    summary = json.loads((out / next(f for f in r["outputs"] if f.endswith(".json"))).read_text())
    assert summary["consistency_problems"] == []
    assert "table cell" in capsys.readouterr().out


def test_premium_rejects_empty_pairs(tmp_path):
    assert main(["premium", "--config", KIND2, "--out", str(tmp_path), "--t", "2", "--T", "1"]) == EXIT_CONFIG


@pytest.mark.parametrize("measure", ["Q", "Qcheck"])
def test_arbitrage(tmp_path, measure):
    cfg = tmp_path / "arb.ini"
    text = (SCENARIO_DIR / "kind2_canonical.ini").read_text()
    cfg.write_text(text.replace("eps_floor = 0.00006103515625", "eps_floor = 0.0009765625")
                   .replace("h_max = 0.0001220703125", "h_max = 0.0009765625"))
    out = tmp_path / "out"
    code = main(["arbitrage", "--config", str(cfg), "--out", str(out), "--measure", measure,
                 "--paths", "3000"])
    assert code == EXIT_OK
    r = manifest(out)[0]
    assert r["measure"] == measure and r["grid"]["eps_floor"] == 2.0**-10
    name = next(f for f in r["outputs"] if f.endswith(".csv"))
    lines = (out / name).read_text().splitlines()
    assert lines[0] == HEDGE_CSV_HEADER and len(lines) == 3001
    summary = json.loads((out / next(f for f in r["outputs"] if f.endswith(".json"))).read_text())
    assert ("admissibility" in summary) == (measure == "Q")


def test_arbitrage_needs_eps_floor(tmp_path, capsys):
    cfg = tmp_path / "arb.ini"
    cfg.write_text((SCENARIO_DIR / "kind2_canonical.ini").read_text()
                   .replace("eps_floor = 0.00006103515625\n", ""))
    assert main(["arbitrage", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "arbitrage.eps_floor" in capsys.readouterr().err
    k1 = str(SCENARIO_DIR / "kind1.ini")
    assert main(["arbitrage", "--config", k1, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_oracle_exit_codes(tmp_path, capsys):
    assert main(["oracle", "rw_depth4"]) == EXIT_OK
    assert "hold exactly" in capsys.readouterr().out
    assert main(["oracle", "rw_depth4_corrupted", "--out", str(tmp_path)]) == EXIT_ORACLE
    assert "foellmer1 violated at t=0, A=s1" in capsys.readouterr().out
    assert manifest(tmp_path)[0]["exit_code"] == EXIT_ORACLE
    assert main(["oracle", "rw_depth13"]) == EXIT_CONFIG
    assert "exceeds the cap" in capsys.readouterr().err
    assert main(["oracle", str(tmp_path / "none.tree")]) == EXIT_CONFIG
    bad = tmp_path / "bad.tree"
    bad.write_text("depth 1\ns1 1 s0:x\n")
    assert main(["oracle", str(bad)]) == EXIT_CONFIG


def test_accept_subset_and_fault(tmp_path, capsys):
    out = tmp_path / "acc"
    assert main(["accept", "--criteria", "1,7", "--out", str(out)]) == EXIT_OK
    assert "criterion  1 PASS" in capsys.readouterr().out
    assert main(["accept", "--criteria", "1", "--fault", "phi", "--out", str(out)]) == EXIT_ACCEPT
    assert "criterion  1 FAIL" in capsys.readouterr().out
    # the fault is confined to the run that asked for it
    assert main(["accept", "--criteria", "1", "--seed", "17", "--out", str(out)]) == EXIT_OK
    codes = [r["exit_code"] for r in manifest(out)]
    assert codes == [EXIT_OK, EXIT_ACCEPT, EXIT_OK]


def test_threads_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ILLIQ_THREADS", "2")
    out = tmp_path / "env"
    assert main(["premium", "--config", KIND2, "--out", str(out), "--t", "0", "--T", "1",
                 "--paths", "4000"]) == EXIT_OK
    monkeypatch.setenv("ILLIQ_THREADS", "two")
    assert main(["premium", "--config", KIND2, "--out", str(out), "--t", "0", "--T", "1",
                 "--paths", "4000"]) == EXIT_CONFIG
    monkeypatch.delenv("ILLIQ_THREADS")
    assert main(["premium", "--config", KIND2, "--out", str(out), "--t", "0", "--T", "1",
                 "--paths", "4000", "--threads", "1"]) == EXIT_OK
    a, b = [r for r in manifest(out) if r["exit_code"] == 0]
    assert (out / a["outputs"][0]).read_bytes() == (out / b["outputs"][0]).read_bytes()
