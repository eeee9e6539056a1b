import csv
import io
import json

import pytest

from flagdoe.orchestrate import LevelResult, ToggleResult
from flagdoe.report import (
    DOT,
    MARK,
    ReportBundle,
    render_exhaustive,
    render_main_effects,
    render_sweep,
    render_toggles,
    render_top_flags,
    three_sig,
    verify_exhaustive,
)
from flagdoe.stats import EffectEstimate, TestConfig

from blowfish_exhaustive import ALL_ON, FLAGS, LEVELS, ROWS, rounding_interval, stored_joules


def est(label, pct, p=0.5):
    return EffectEstimate((0,), label, pct / 100, pct, 1.0, p, p < 0.05)


# -- main effects -----------------------------------------------------------


def test_main_effects_no_significant_rows():
    t = render_main_effects([est("a", 1.0), est("b", -0.5)], [est("a", 0.2), est("b", 0.1)])
    assert MARK not in "".join(t.text().splitlines()[1:-1])
    assert "0 marked cells" in t.text()


def test_main_effects_planted_top_row_marked():
    energy = [est("a", 0.4), est("planted", 6.0, p=1e-6), est("c", -1.1)]
    time = [est("a", 0.1), est("planted", 5.0, p=1e-5), est("c", 0.3)]
    t = render_main_effects(energy, time)
    assert [r[0] for r in t.rows] == ["planted", "c", "a"]
    first = t.text().splitlines()[1]
    assert first.startswith("planted") and first.count(MARK) == 2


def test_main_effects_both_metrics_every_row():
    energy = [est(x, i) for i, x in enumerate("abcd")]
    time = [est(x, -i) for i, x in enumerate("abcd")]
    t = render_main_effects(energy, time)
    rows = list(csv.DictReader(io.StringIO(t.csv())))
    assert len(rows) == 4
    assert all(r["energy_percent"] and r["time_percent"] for r in rows)
    plot = list(csv.DictReader(io.StringIO(t.plot_data())))
    assert {r["series"] for r in plot} == {"energy", "time"}
    assert len(plot) == 8


def test_main_effects_deterministic():
    e = [est("b", 2.0), est("a", -2.0), est("c", 1.0)]
    assert render_main_effects(e).text() == render_main_effects(list(reversed(e))).text()
    assert [r[0] for r in render_main_effects(e).rows] == ["a", "b", "c"]


# -- exhaustive -------------------------------------------------------------


def test_three_sig():
    assert three_sig(5783.2) == "5780"
    assert three_sig(5640.0) == "5640"
    assert three_sig(12.345) == "12.3"
    assert three_sig(0.1684) == "0.168"


@pytest.mark.parametrize("column", ["O1", "O2"])
def test_blowfish_exhaustive_rendered_percent_matches_recomputation(column):
    values = stored_joules(column)
    base = values[ALL_ON]
    t = render_exhaustive(values, base, FLAGS, column, order=LEVELS)
    assert verify_exhaustive(t, values) == []
    for (levels, mj, _), row in zip(ROWS[column], csv.DictReader(io.StringIO(t.csv()))):
        expect = 100.0 * (mj - ROWS[column][0][1]) / ROWS[column][0][1]
        assert float(row["percent_vs_base"]) == pytest.approx(expect, abs=0.10)
        assert row["energy_mj_display"] == str(mj)


def test_blowfish_exhaustive_all_enabled_row_is_zero():
    values = stored_joules("O1")
    t = render_exhaustive(values, values[ALL_ON], FLAGS, "O1", order=LEVELS)
    assert t.rows[0][0] == ALL_ON
    assert f"{t.rows[0][2]:.2f}" == "0.00"


def test_blowfish_exhaustive_rounded_input_caveat():
    values = stored_joules("O1")
    t = render_exhaustive(values, values[ALL_ON], FLAGS, "O1", order=LEVELS)
    row = dict((lv, pct) for lv, _, pct in t.rows)[(-1, 1, 1, 1)]
    assert f"{row:.2f}" == "-2.42"  # reference shows -2.49, derived from unrounded data
    lo, hi = rounding_interval(5640, 5780)
    assert lo <= -2.49 <= hi


@pytest.mark.parametrize("column", ["O1", "O2"])
def test_blowfish_exhaustive_printed_percents_consistent_with_rounding(column):
    base_mj = ROWS[column][0][1]
    for _, mj, printed in ROWS[column]:
        lo, hi = rounding_interval(mj, base_mj)
        assert lo - 0.005 <= printed <= hi + 0.005


def test_exhaustive_all_equal_and_missing():
    m = 3
    order = [tuple(1 if i >> f & 1 else -1 for f in range(m)) for i in range(1 << m)]
    values = {lv: 2.5 for lv in order[:-1]}
    t = render_exhaustive(values, 2.5, ["x", "y", "z"])
    assert all(f"{pct:.2f}" == "0.00" for _, _, pct in t.rows)
    assert t.missing == [order[-1]]
    assert "missing combinations: x=on y=on z=on" in t.text()


def test_verify_exhaustive_catches_tampering():
    values = stored_joules("O1")
    t = render_exhaustive(values, values[ALL_ON], FLAGS, order=LEVELS)
    levels, v, pct = t.rows[3]
    t.rows[3] = (levels, v, pct + 0.05)
    assert len(verify_exhaustive(t, values)) == 1


# -- top flags --------------------------------------------------------------


RANKINGS = {
    ("blowfish", "M0"): ["tree-ter", "inline-functions", "gcse"],
    ("blowfish", "A8"): ["tree-ter", "gcse"],
    ("crc32", "M0"): ["ipa-cp"],
    ("crc32", "A8"): [],
    ("fdct", "M0"): ["gcse", "tree-ter", "peephole2"],
}


def test_top_flags_single_flag_padded():
    t = render_top_flags(RANKINGS)
    assert t.grid[("crc32", "M0")][1:] == [DOT, DOT]
    assert t.grid[("crc32", "A8")] == [DOT] * 3
    assert t.grid[("fdct", "A8")] == [DOT] * 3


def test_top_flags_letters_by_frequency_then_name():
    t = render_top_flags(RANKINGS)
    assert t.legend[:2] == [("A", "gcse", 3), ("B", "tree-ter", 3)]
    assert [f for _, f, _ in t.legend[2:]] == ["inline-functions", "ipa-cp", "peephole2"]
    assert t.grid[("blowfish", "M0")] == ["B", "C", "A"]


def test_top_flags_legend_counts_sum_to_filled_cells():
    t = render_top_flags(RANKINGS)
    filled = sum(1 for cells in t.grid.values() for c in cells if c != DOT)
    assert sum(n for _, _, n in t.legend) == filled == 9
    text = t.text()
    assert "1st" in text and "gcse" in text


def test_top_flags_all_empty():
    t = render_top_flags({("a", "x"): [], ("b", "x"): []})
    assert all(cells == [DOT] * 3 for cells in t.grid.values())
    assert t.legend == []


# -- sweep, toggles, bundle -------------------------------------------------


def test_render_sweep_and_toggles():
    res = [LevelResult("O0", "-O0", 1.0, 1.0, 1.0, 1.0, 1.0, 1.0),
           LevelResult("O1", "-O1", 0.5, 0.5, 1.0, 0.5, 0.5, 1.0),
           LevelResult("O4", "-O3 -flto", None, None, None, None, None, None, "unavailable")]
    text = render_sweep(res)
    assert "0.500" in text and "n/a" in text and "relative to O0" in text
    tog = render_toggles([ToggleResult("tree-ter", 4.0, 0.0, -4.0, 0.0)], "-O1")
    assert "-4.00" in tog and "+4.00" in tog


def test_report_bundle_write(tmp_path):
    b = ReportBundle(("energy",), {"a.txt": "x\n"}, {"alpha": 0.05})
    paths = b.write(tmp_path / "r")
    assert (tmp_path / "r" / "a.txt").read_text() == "x\n"
    meta = json.loads((tmp_path / "r" / "report_metadata.json").read_text())
    assert meta == {"alpha": 0.05, "metrics": ["energy"]}
    assert len(paths) == 2


def test_alpha_in_footer():
    t = render_main_effects([est("a", 1.0)], cfg=TestConfig(alpha=0.01))
    assert "alpha=0.01" in t.text()
