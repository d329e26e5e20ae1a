import json
import shutil
import subprocess
import sys

import pytest

from reachavoid import __version__
from reachavoid.cli import main

from .conftest import NEAR_TARGET, small_raw


@pytest.fixture
def scenario_file(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(small_raw(geometry=NEAR_TARGET)))
    return p


def test_version_and_list(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == __version__
    assert main(["--list"]) == 0
    assert "simple" in capsys.readouterr().out.split()


def test_console_script_is_installed():
    exe = shutil.which("reachavoid")
    cmd = [exe] if exe else [sys.executable, "-m", "reachavoid.cli"]
    out = subprocess.run(cmd + ["--version"], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == __version__


def test_scenario_errors_exit_2(tmp_path, capsys):
    assert main(["tighten"]) == 2
    assert main(["tighten", "--scenario", "no_such_scenario"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["grid", "--scenario", str(bad)]) == 2
    assert main(["run", "--scenario", "simple"]) == 2
    assert main(["discretize", "--scenario", "simple", "--seed", "-1"]) == 2
    assert main([]) == 2
    assert "error" in capsys.readouterr().err


def test_io_errors_exit_4(tmp_path, scenario_file):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", "--scenario", str(scenario_file), "--out", str(blocker / "x"), "--no-figures"]) == 4
    assert main(["report", "--out", str(tmp_path / "empty")]) == 4


def test_certificate_precondition_exit_2(tmp_path):
    raw = small_raw(initial_state=[0.5, 0.5, 0.2, 0.0])
    p = tmp_path / "moving.json"
    p.write_text(json.dumps(raw))
    assert main(["tighten", "--scenario", str(p)]) == 0
    assert main(["tighten", "--scenario", str(p), "--certificate-mode"]) == 2


def test_inspection_commands(tmp_path, scenario_file, capsys):
    out = tmp_path / "o"
    assert main(["discretize", "--scenario", str(scenario_file), "--out", str(out)]) == 0
    d = json.loads((out / "discretize.json").read_text())
    assert d["delta_t"] == 0.25 and len(d["A"]) == 4
    assert main(["tighten", "--scenario", str(scenario_file), "--out", str(out)]) == 0
    t = json.loads((out / "tighten.json").read_text())
    assert t["tightening"]["eta"] > 0
    assert main(["grid", "--scenario", str(scenario_file), "--out", str(out)]) == 0
    g = json.loads((out / "grid.json").read_text())
    lines = (out / "grid.csv").read_text().splitlines()
    assert len(lines) == 1 + g["shape"][0] * g["shape"][1]
    capsys.readouterr()


def test_stage_commands_and_report(tmp_path, scenario_file, capsys):
    cache = tmp_path / "cache"
    common = ["--scenario", str(scenario_file), "--cache", str(cache)]
    assert main(["kernel", *common, "--out", str(tmp_path / "k")]) == 0
    k = json.loads((tmp_path / "k" / "kernel.json").read_text())
    assert k["mode"] == "translation-invariant" and k["infeasible_samples"] == 0
    assert main(["solve", *common, "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "tables.npz").exists() and (tmp_path / "s" / "value_field.csv").exists()
    assert main(["eval", *common, "--trials", "3", "--out", str(tmp_path / "e")]) == 0
    assert len((tmp_path / "e" / "outcomes.csv").read_text().splitlines()) == 4
    assert main(["pareto", *common, "--out", str(tmp_path / "p")]) == 0
    p = json.loads((tmp_path / "p" / "pareto.json").read_text())
    assert len(p["points"]) == 4 and p["monotone_chain"] >= 1
    run = tmp_path / "r"
    assert main(["run", *common, "--trials", "4", "--out", str(run)]) == 0
    man = json.loads((run / "manifest.json").read_text())
    assert man["evaluation"]["trials"] == 4
    for png in run.glob("*.png"):
        png.unlink()
    assert main(["report", "--out", str(run)]) == 0
    assert (run / "value_field.png").exists()
    capsys.readouterr()
