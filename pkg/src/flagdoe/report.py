"""Plain-text and CSV renderings of the analysis results."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .stats import EffectEstimate, TestConfig

DOT = "·"
MARK = "*"


def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def align(rows: Sequence[Sequence[str]], right: Sequence[bool] = ()) -> str:
    """Column-aligned text; ``right[i]`` right-justifies column ``i``."""
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = []
        for i, c in enumerate(r):
            c = str(c)
            cells.append(c.rjust(widths[i]) if i < len(right) and right[i] else c.ljust(widths[i]))
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def _fmt_pct(v: Optional[float]) -> str:
    return "n/a" if v is None else f"{v:+.2f}"


# -- main effects -----------------------------------------------------------


@dataclass
class MainEffectsTable:
    rows: List[Tuple[str, Optional[EffectEstimate], Optional[EffectEstimate]]]
    alpha: float

    def text(self) -> str:
        header = ["flag", "energy %", "", "p(energy)", "time %", "", "p(time)"]
        body = [header]
        for name, en, ti in self.rows:
            body.append([
                name,
                _fmt_pct(en.percent_effect if en else None), MARK if en and en.significant else "",
                f"{en.p_value:.3g}" if en else "n/a",
                _fmt_pct(ti.percent_effect if ti else None), MARK if ti and ti.significant else "",
                f"{ti.p_value:.3g}" if ti else "n/a",
            ])
        marked = sum(1 for _, en, ti in self.rows for x in (en, ti) if x and x.significant)
        foot = f"{MARK} significant at alpha={self.alpha} (two-sided Mann-Whitney); {marked} marked cells\n"
        return align(body, [False, True, False, True, True, False, True]) + foot

    def csv(self) -> str:
        rows = [["term", "energy_effect", "energy_percent", "energy_p", "energy_significant",
                 "time_effect", "time_percent", "time_p", "time_significant"]]
        for name, en, ti in self.rows:
            row = [name]
            for est in (en, ti):
                row += [repr(est.effect), repr(est.percent_effect), repr(est.p_value), int(est.significant)] \
                    if est else ["", "", "", ""]
            rows.append(row)
        return _csv(rows)

    def plot_data(self) -> str:
        """Long-format series for external plotting: one series per metric."""
        rows = [["series", "term", "percent_effect", "significant"]]
        for metric, pos in (("energy", 1), ("time", 2)):
            for row in self.rows:
                est = row[pos]
                if est is not None:
                    rows.append([metric, row[0], repr(est.percent_effect), int(est.significant)])
        return _csv(rows)


def render_main_effects(energy: Sequence[EffectEstimate], time: Optional[Sequence[EffectEstimate]] = None,
                        cfg: TestConfig = TestConfig()) -> MainEffectsTable:
    """Pair energy and time estimates per flag, largest |energy %| first."""
    by_time = {e.label: e for e in (time or [])}
    primary = list(energy) if energy else list(time or [])
    primary.sort(key=lambda e: (-abs(e.percent_effect), e.label))
    rows = []
    for e in primary:
        if energy:
            rows.append((e.label, e, by_time.get(e.label)))
        else:
            rows.append((e.label, None, e))
    return MainEffectsTable(rows, cfg.alpha)


# -- exhaustive -------------------------------------------------------------


def three_sig(x: float) -> str:
    """Three significant figures without scientific notation (5783.2 -> '5780')."""
    if x == 0:
        return "0"
    s = f"{x:.3g}"
    if "e" in s:
        return str(int(round(float(s))))
    return s


@dataclass
class ExhaustiveTable:
    names: List[str]
    base_label: str
    base_value: float
    rows: List[Tuple[Tuple[int, ...], float, float]]  # levels, raw value (J), percent vs base
    missing: List[Tuple[int, ...]] = field(default_factory=list)

    def text(self) -> str:
        header = list(self.names) + ["(mJ)", f"% vs {self.base_label}"]
        body = [header]
        for levels, value, pct in self.rows:
            body.append(["on" if v > 0 else "off" for v in levels] + [three_sig(value * 1e3), f"{pct:.2f}"])
        out = align(body, [False] * len(self.names) + [True, True])
        if self.missing:
            miss = "; ".join(" ".join(f"{n}={'on' if v > 0 else 'off'}" for n, v in zip(self.names, m))
                             for m in self.missing)
            out += f"missing combinations: {miss}\n"
        out += "percentages use unrounded measurements; the mJ column is rounded for display only\n"
        return out

    def csv(self) -> str:
        rows = [list(self.names) + ["energy_j", "energy_mj_display", "percent_vs_base"]]
        for levels, value, pct in self.rows:
            rows.append(list(levels) + [repr(value), three_sig(value * 1e3), f"{pct:.2f}"])
        return _csv(rows)


def render_exhaustive(values: Mapping[Tuple[int, ...], float], base: float, names: Sequence[str],
                      base_label: str = "base", order: Optional[Sequence[Tuple[int, ...]]] = None) -> ExhaustiveTable:
    """One row per flag combination: absolute energy and percent vs ``base``.

    ``values`` maps a tuple of +/-1 levels to the raw mean energy in joules.
    Percentages come from these raw values; only the display is rounded.
    """
    if base == 0:
        raise ValueError("base energy must be non-zero")
    m = len(names)
    if order is None:
        order = [tuple(1 if i >> f & 1 else -1 for f in range(m)) for i in range(1 << m)]
    rows, missing = [], []
    for levels in order:
        levels = tuple(levels)
        if levels not in values:
            missing.append(levels)
            continue
        v = float(values[levels])
        rows.append((levels, v, 100.0 * (v - base) / base))
    return ExhaustiveTable(list(names), base_label, base, rows, missing)


def verify_exhaustive(table: ExhaustiveTable, values: Mapping[Tuple[int, ...], float]) -> List[str]:
    """Re-derive every printed number from the raw values.

    A cell passes when it lies within half a unit of its last printed digit.
    Returns a list of mismatch descriptions (empty when all cells agree).
    """
    problems = []
    for line, (levels, _, _) in zip(table.csv().splitlines()[1:], table.rows):
        cells = line.split(",")
        raw = float(values[levels])
        shown_mj, shown_pct = cells[-2], float(cells[-1])
        expect_pct = 100.0 * (raw - table.base_value) / table.base_value
        if abs(shown_pct - expect_pct) > 0.005 + 1e-12:
            problems.append(f"{levels}: percent {shown_pct} vs {expect_pct:.4f}")
        shown = float(shown_mj)
        # three significant figures: last printed digit sits two decades below the leading one
        unit = 10.0 ** (math.floor(math.log10(abs(shown))) - 2) if shown else 1.0
        if abs(float(shown_mj) - raw * 1e3) > 0.5 * unit * (1 + 1e-9):
            problems.append(f"{levels}: energy {shown_mj} mJ vs {raw * 1e3:.4f}")
    return problems


# -- top flags --------------------------------------------------------------


@dataclass
class TopFlagsTable:
    benchmarks: List[str]
    configs: List[str]
    grid: Dict[Tuple[str, str], List[str]]  # letters, padded with DOT
    legend: List[Tuple[str, str, int]]  # letter, flag, count
    depth: int = 3

    def text(self) -> str:
        ords = ["1st", "2nd", "3rd"] + [f"{i}th" for i in range(4, self.depth + 1)]
        head1 = ["benchmark"] + [c for c in self.configs for _ in range(self.depth)]
        head2 = [""] + [ords[i] for _ in self.configs for i in range(self.depth)]
        body = [head1, head2]
        for b in self.benchmarks:
            row = [b]
            for c in self.configs:
                row += self.grid[(b, c)]
            body.append(row)
        out = align(body)
        out += "\n" + align([["ID", "count", "flag"]] + [[l, str(n), f] for l, f, n in self.legend],
                            [False, True, False])
        return out

    def csv(self) -> str:
        rows = [["benchmark", "config", "rank", "letter", "flag"]]
        lookup = {l: f for l, f, _ in self.legend}
        for b in self.benchmarks:
            for c in self.configs:
                for i, letter in enumerate(self.grid[(b, c)]):
                    rows.append([b, c, i + 1, letter, lookup.get(letter, "")])
        return _csv(rows)


def _letter(i: int) -> str:
    s = ""
    i += 1
    while i:
        i, r = divmod(i - 1, 26)
        s = chr(65 + r) + s
    return s


def render_top_flags(rankings: Mapping[Tuple[str, str], Sequence[str]], depth: int = 3,
                     benchmarks: Optional[Sequence[str]] = None,
                     configs: Optional[Sequence[str]] = None) -> TopFlagsTable:
    """Benchmark x configuration grid of the top flags, lettered by frequency.

    ``rankings`` maps ``(benchmark, config)`` to flag names, best first.
    Letters go to flags by descending count, ties by name.
    """
    counts = Counter(f for flags in rankings.values() for f in list(flags)[:depth])
    ordered = sorted(counts, key=lambda f: (-counts[f], f))
    letters = {f: _letter(i) for i, f in enumerate(ordered)}
    if benchmarks is None:
        benchmarks = sorted({b for b, _ in rankings})
    if configs is None:
        configs = sorted({c for _, c in rankings})
    grid = {}
    for b in benchmarks:
        for c in configs:
            flags = list(rankings.get((b, c), []))[:depth]
            grid[(b, c)] = [letters[f] for f in flags] + [DOT] * (depth - len(flags))
    legend = [(letters[f], f, counts[f]) for f in ordered]
    return TopFlagsTable(list(benchmarks), list(configs), grid, legend, depth)


# -- sweep / one-at-a-time tables -------------------------------------------


def render_sweep(results) -> str:
    def r(x):
        return "n/a" if x is None else f"{x:.3f}"

    body = [["level", "flags", "energy", "time", "power"]]
    for res in results:
        body.append([res.level, res.flags, r(res.energy_ratio), r(res.time_ratio), r(res.power_ratio)])
    return align(body, [False, False, True, True, True]) + f"ratios relative to {results[0].level}\n"


def render_toggles(results, base_label: str) -> str:
    body = [["flag", "enable energy %", "enable time %", "disable energy %", "disable time %"]]
    for t in results:
        body.append([t.flag, _fmt_pct(t.enable_energy_pct), _fmt_pct(t.enable_time_pct),
                     _fmt_pct(t.disable_energy_pct), _fmt_pct(t.disable_time_pct)])
    return align(body, [False, True, True, True, True]) + f"percent change relative to {base_label}\n"


# -- bundle -----------------------------------------------------------------


@dataclass
class ReportBundle:
    metrics: Tuple[str, ...]
    tables: Dict[str, str] = field(default_factory=dict)
    metadata: Dict = field(default_factory=dict)

    def write(self, outdir) -> List[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        written = []
        for name, content in sorted(self.tables.items()):
            p = outdir / name
            p.write_text(content, encoding="utf-8")
            written.append(p)
        meta = outdir / "report_metadata.json"
        meta.write_text(json.dumps({"metrics": list(self.metrics), **self.metadata}, indent=2, sort_keys=True) + "\n")
        written.append(meta)
        return written
