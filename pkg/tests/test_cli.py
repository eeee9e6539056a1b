import json
import sys
from pathlib import Path

import pytest

from flagdoe.cli import main
from flagdoe.design import read_csv

EXAMPLE = Path(__file__).resolve().parents[1] / "docs" / "example.ini"

SIMULATED = """
[compiler]
command = simulated

[benchmark]
name = blowfish

[factors]
guess-branch-probability =
tree-dominator-opts =
tree-ch =
if-conversion =
tree-ter =
dce =
omit-frame-pointer =

[backend]
kind = simulated
base_power = 0.168
base_time = 0.05
power_effects = guess-branch-probability:0.02 tree-dominator-opts:-0.03
levels = O0:1.0:1.0 O1:0.5:1.0 O2:0.45:1.02
noise = 0.005
run_noise = 0.005
jitter = 0.05

[campaign]
base_level = O1
replicates = 8
seed = 1
resolution = IV
max_runs = 16
levels = O0 O1 O2 O4
exhaustive_flags = guess-branch-probability tree-dominator-opts
oneshot_flags = tree-dominator-opts tree-ch
"""


@pytest.fixture
def sim_config(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text(SIMULATED)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_design_half_fraction_csv(tmp_path, capsys):
    out = tmp_path / "o"
    assert run("design", "--n-factors", 3, "--resolution", "III", "--max-runs", 4, "--out", out) == 0
    d = read_csv(out / "design.csv")
    assert d.signs.tolist() == [[-1, -1, 1], [1, -1, -1], [-1, 1, -1], [1, 1, 1]]
    text = (out / "design.csv").read_text()
    assert "# generator C=A*B" in text
    assert text.splitlines()[-5:] == ["A,B,C", "-1,-1,+1", "+1,-1,-1", "-1,+1,-1", "+1,+1,+1"]
    assert (out / "aliases.txt").read_text().splitlines() == ["A <-> BC", "B <-> AC", "C <-> AB"]
    manifest = json.loads((out / "manifest_design.json").read_text())
    assert {"config_digest", "seed", "version"} <= set(manifest)


def test_design_infeasible_is_user_error(tmp_path, capsys):
    assert run("design", "--n-factors", 16, "--resolution", "IV", "--max-runs", 16, "--out", tmp_path) == 1
    assert "32" in capsys.readouterr().err


def test_simulate_then_analyze_finds_planted(sim_config, tmp_path):
    out = tmp_path / "o"
    assert run("simulate", "--config", sim_config, "--out", out) == 0
    planted = ["guess-branch-probability", "tree-dominator-opts"]
    assert sorted((out / "significant.txt").read_text().split()) == planted
    (out / "significant.txt").unlink()
    assert run("analyze", "--config", sim_config, "--out", out) == 0
    assert sorted((out / "significant.txt").read_text().split()) == planted
    assert (out / "effects_energy.csv").read_text().startswith("# metric=energy alpha=0.05")


def test_example_config_simulate(tmp_path):
    assert run("simulate", "--config", EXAMPLE, "--out", tmp_path, "--set", "compiler.command=simulated") == 0
    assert sorted((tmp_path / "significant.txt").read_text().split()) == \
        ["guess-branch-probability", "tree-dominator-opts"]


def test_run_twice_second_performs_nothing(sim_config, tmp_path, capsys):
    out = tmp_path / "o"
    assert run("run", "--config", sim_config, "--out", out) == 0
    first = json.loads((out / "manifest_run.json").read_text())
    assert first["executed"] == 16 * 8
    assert run("run", "--config", sim_config, "--out", out) == 0
    second = json.loads((out / "manifest_run.json").read_text())
    assert second["executed"] == 0 and second["added"] == 0
    assert "0 new records (0 executions, 0 compilations)" in capsys.readouterr().out


def test_seed_override_lands_in_manifest(sim_config, tmp_path):
    assert run("design", "--config", sim_config, "--out", tmp_path, "--seed", 99) == 0
    assert json.loads((tmp_path / "manifest_design.json").read_text())["seed"] == 99


@pytest.mark.parametrize("text,needle", [
    ("[compiler]\ncommand = simulated\nbogus = 1\n", "compiler.bogus"),
    ("[compiler]\ncommand = simulated\n[campaign]\nreplicates = many\n", "campaign.replicates"),
    ("[nope]\na = 1\n", "nope"),
])
def test_malformed_config_exit_one_with_key_and_line(tmp_path, capsys, text, needle):
    p = tmp_path / "bad.ini"
    p.write_text("# leading comment\n" + text)
    assert run("run", "--config", p, "--out", tmp_path / "o") == 1
    err = capsys.readouterr().err
    assert needle in err and "line" in err


def test_unknown_override_key_rejected(sim_config, tmp_path, capsys):
    assert run("design", "--config", sim_config, "--out", tmp_path, "--set", "campaign.colour=red") == 1
    assert "campaign.colour" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert run("run", "--config", tmp_path / "absent.ini", "--out", tmp_path) == 1


def test_pause_exit_two_then_resume(sim_config, tmp_path, capsys):
    counter = tmp_path / "count"
    script = tmp_path / "meter.py"
    script.write_text(
        "import pathlib, sys\n"
        f"p = pathlib.Path({str(counter)!r})\n"
        "n = int(p.read_text()) if p.exists() else 0\n"
        "p.write_text(str(n + 1))\n"
        "if n == 5 and not pathlib.Path(str(p) + '.back').exists():\n"
        "    sys.stderr.write('logger offline'); sys.exit(75)\n"
        "print('energy_j=0.01'); print('time_s=0.05')\n"
    )
    out = tmp_path / "o"
    overrides = ["--set", "backend.kind=external", "--set", f"backend.command={sys.executable} {script}",
                 "--set", "campaign.replicates=1"]
    assert run("run", "--config", sim_config, "--out", out, *overrides) == 2
    assert "paused" in capsys.readouterr().err
    assert len((out / "results.jsonl").read_text().splitlines()) == 5
    Path(str(counter) + ".back").write_text("")
    assert run("run", "--config", sim_config, "--out", out, *overrides) == 0
    assert len((out / "results.jsonl").read_text().splitlines()) == 16


def test_sweep_oneshot_exhaustive_report(sim_config, tmp_path):
    out = tmp_path / "o"
    assert run("sweep", "--config", sim_config, "--out", out) == 0
    sweep = (out / "sweep.txt").read_text()
    assert "-O3 -flto" in sweep and "relative to O0" in sweep
    assert run("oneshot", "--config", sim_config, "--out", out) == 0
    assert "tree-dominator-opts" in (out / "oneshot.txt").read_text()
    assert run("exhaustive", "--config", sim_config, "--out", out) == 0
    assert len((out / "exhaustive.csv").read_text().splitlines()) == 1 + 4
    assert run("simulate", "--config", sim_config, "--out", out) == 0
    assert run("report", "--config", sim_config, "--out", out) == 0
    names = {p.name for p in (out / "report").iterdir()}
    assert {"main_effects.txt", "main_effects_plot.csv", "top_flags.txt", "sweep.txt", "exhaustive.txt",
            "report_metadata.json"} <= names


def test_report_with_nothing_is_user_error(sim_config, tmp_path):
    assert run("report", "--config", sim_config, "--out", tmp_path) == 1
