"""Effect estimation (Yates, contrasts) and Mann-Whitney significance."""

from __future__ import annotations

import csv
import io
import math
import sys
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .design import DesignMatrix, alias_structure

METRICS = ("energy", "time", "power")


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class TestConfig:
    alpha: float = 0.05
    # exact null distribution when n1 + n2 <= exact_threshold and no ties
    exact_threshold: int = 20

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise StatsError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.exact_threshold < 0:
            raise StatsError("exact_threshold must be non-negative")


@dataclass
class ResponseSet:
    """Replicate measurements per design run, aligned with a design's rows.

    A run whose entry is empty (or ``None``) is treated as unavailable.
    """

    samples: List[Optional[Sequence[float]]]
    metric: str = "energy"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise StatsError(f"unknown metric {self.metric!r}")
        cleaned = []
        for i, s in enumerate(self.samples):
            if s is None or len(s) == 0:
                cleaned.append(None)
                continue
            arr = np.asarray(s, dtype=float)
            if not np.all(np.isfinite(arr)):
                raise StatsError(f"run {i} has non-finite responses")
            cleaned.append(arr)
        self.samples = cleaned

    @property
    def n_runs(self) -> int:
        return len(self.samples)

    def available(self) -> np.ndarray:
        return np.array([s is not None for s in self.samples], dtype=bool)

    def run_means(self) -> np.ndarray:
        return np.array([s.mean() if s is not None else np.nan for s in self.samples])

    def scaled(self, factor: float) -> "ResponseSet":
        return ResponseSet([None if s is None else s * factor for s in self.samples], self.metric)


@dataclass
class EffectEstimate:
    term: Tuple[int, ...]
    label: str
    effect: float
    percent_effect: float
    u_statistic: float
    p_value: float
    significant: bool
    aliases: List[str] = field(default_factory=list)
    note: str = ""


# -- effects ----------------------------------------------------------------


def yates_labels(k: int) -> List[Tuple[int, ...]]:
    """Terms in Yates standard order: (), (A), (B), (A,B), (C), ..."""
    return [tuple(f for f in range(k) if i >> f & 1) for i in range(1 << k)]


def yates_effects(responses: Sequence[float], k: int) -> List[Tuple[Tuple[int, ...], float]]:
    """Yates's algorithm on ``2**k`` standard-order run means.

    Returns ``[((), grand_mean), ((0,), effect_A), ((1,), effect_B), ...]``.
    """
    y = np.asarray(responses, dtype=float)
    if k < 1 or y.ndim != 1 or y.size != 1 << k:
        raise StatsError(f"Yates needs exactly 2**k = {1 << max(k, 0)} responses, got {y.size}")
    col = y.copy()
    for _ in range(k):
        pairs = col.reshape(-1, 2)
        col = np.concatenate([pairs[:, 0] + pairs[:, 1], pairs[:, 1] - pairs[:, 0]])
    out = col / (1 << (k - 1))
    out[0] = col[0] / (1 << k)
    return list(zip(yates_labels(k), out.tolist()))


def contrast_effect(column: Sequence[int], responses: Sequence[float]) -> float:
    """Mean response where ``column`` is +1 minus mean where it is -1."""
    c = np.asarray(column)
    y = np.asarray(responses, dtype=float)
    if c.shape != y.shape:
        raise StatsError("column and responses differ in length")
    plus = c > 0
    n_plus = int(plus.sum())
    if n_plus * 2 != c.size or not np.all(np.abs(c) == 1):
        raise StatsError("contrast column must be balanced over {-1, +1}")
    return float(y[plus].mean() - y[~plus].mean())


def interaction_effect(d: DesignMatrix, term: Iterable[int], responses: Sequence[float]) -> float:
    return contrast_effect(d.term_column(term), responses)


# -- Mann-Whitney -----------------------------------------------------------


def _midranks(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Average ranks (1-based) and the sizes of the tie groups."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [xs.size]])
    sizes = ends - starts
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, sizes)
    return ranks, sizes


def _rank_sum_counts(n1: int, n: int) -> np.ndarray:
    """Number of size-``n1`` subsets of ranks 1..n by their U value.

    Counts every rank assignment, computed by the usual subset-sum recurrence
    instead of listing the ``C(n, n1)`` subsets one by one.
    """
    n2 = n - n1
    # table[j][u]: subsets of size j from the first i ranks with U-part u
    table = [np.zeros(n1 * n2 + 1, dtype=object) for _ in range(n1 + 1)]
    table[0][0] = 1
    for i in range(1, n + 1):
        for j in range(min(i, n1), 0, -1):
            # choosing rank i as the j-th smallest of the sample adds (i - j) to U
            shift = i - j
            if shift > n1 * n2:
                continue
            prev = table[j - 1]
            table[j][shift:] = table[j][shift:] + prev[: prev.size - shift]
    return table[n1]


def _exact_p(u_min: float, n1: int, n2: int) -> float:
    counts = _rank_sum_counts(n1, n1 + n2)
    total = math.comb(n1 + n2, n1)
    hits = int(sum(counts[: int(u_min) + 1]))
    return min(1.0, 2 * hits / total)


def mann_whitney(a: Sequence[float], b: Sequence[float], cfg: TestConfig = TestConfig()) -> Tuple[float, float]:
    """Two-sided Mann-Whitney U test; returns ``(U, p)`` with ``U = min(U_a, U_b)``."""
    x = np.asarray(a, dtype=float).ravel()
    y = np.asarray(b, dtype=float).ravel()
    n1, n2 = x.size, y.size
    if n1 == 0 or n2 == 0:
        raise StatsError("Mann-Whitney needs two non-empty samples")
    ranks, ties = _midranks(np.concatenate([x, y]))
    u_a = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    u_b = n1 * n2 - u_a
    u = min(u_a, u_b)
    n = n1 + n2
    tied = bool(np.any(ties > 1))

    if not tied and n <= cfg.exact_threshold:
        return u, _exact_p(u, n1, n2)

    tie_term = float(np.sum(ties.astype(float) ** 3 - ties)) / (n * (n - 1)) if n > 1 else 0.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return u, 1.0
    z = (abs(u - n1 * n2 / 2.0) - 0.5) / math.sqrt(var)
    if z <= 0:
        return u, 1.0
    p = math.erfc(z / math.sqrt(2.0))
    return u, min(1.0, max(p, sys.float_info.min))


# -- design analysis --------------------------------------------------------


def analyze_design(d: DesignMatrix, r: ResponseSet, cfg: TestConfig = TestConfig()) -> List[EffectEstimate]:
    """Main effect, percent effect and Mann-Whitney verdict for every factor.

    Effects are contrasts on run means.  Significance pools every replicate
    at +1 against every replicate at -1.  Unavailable runs are dropped
    together with their fold partner (the run with every sign flipped) when
    one exists, so the remaining columns stay balanced; the dropped runs are
    noted on each estimate.
    """
    if r.n_runs != d.n_runs:
        raise StatsError(f"responses cover {r.n_runs} runs but the design has {d.n_runs}")
    keep = r.available()
    note = ""
    if not keep.all():
        keep, note = _balanced_subset(d, keep)
    if not keep.any():
        raise StatsError("no available runs to analyse")

    means = r.run_means()
    pooled = np.concatenate([r.samples[i] for i in np.flatnonzero(keep)])
    grand_mean = float(pooled.mean())
    aliases = alias_structure(d, 2)
    out = []
    for f in range(d.n_factors):
        col = d.signs[:, f]
        plus_runs = np.flatnonzero(keep & (col > 0))
        minus_runs = np.flatnonzero(keep & (col < 0))
        if plus_runs.size == 0 or minus_runs.size == 0:
            raise StatsError(f"factor {d.names[f]} has no runs left at one of its levels")
        effect = float(means[plus_runs].mean() - means[minus_runs].mean())
        plus = np.concatenate([r.samples[i] for i in plus_runs])
        minus = np.concatenate([r.samples[i] for i in minus_runs])
        u, p = mann_whitney(plus, minus, cfg)
        pct = 100.0 * effect / grand_mean if grand_mean != 0 else float("nan")
        alias_labels = [d.term_label(t) for t in aliases[f]]
        out.append(EffectEstimate((f,), d.names[f], effect, pct, u, p, p < cfg.alpha, alias_labels, note))
    return out


def _balanced_subset(d: DesignMatrix, keep: np.ndarray) -> Tuple[np.ndarray, str]:
    rows = {row.tobytes(): i for i, row in enumerate(d.signs)}
    keep = keep.copy()
    dropped = [int(i) for i in np.flatnonzero(~keep)]
    partners = []
    for i in dropped:
        j = rows.get((-d.signs[i]).tobytes())
        if j is not None and keep[j]:
            keep[j] = False
            partners.append(int(j))
    note = f"unavailable runs {dropped}"
    if partners:
        note += f"; excluded with their mirrored complement runs {partners}"
    return keep, note


def term_effects(d: DesignMatrix, r: ResponseSet, terms: Iterable[Iterable[int]]) -> Dict[Tuple[int, ...], float]:
    """Contrast effects for arbitrary terms, aliased ones included."""
    means = r.run_means()
    if np.isnan(means).any():
        raise StatsError("term effects need every run available")
    return {tuple(t): interaction_effect(d, t, means) for t in terms}


def rank_top_flags(estimates: Sequence[EffectEstimate], k: int) -> List[EffectEstimate]:
    if k < 1:
        raise StatsError("k must be at least 1")
    sig = [e for e in estimates if e.significant]
    sig.sort(key=lambda e: (-abs(e.percent_effect), e.label))
    return sig[:k]


def effects_to_csv(estimates: Sequence[EffectEstimate], alpha: Optional[float] = None, metric: str = "") -> str:
    buf = io.StringIO()
    if alpha is not None:
        buf.write(f"# metric={metric} alpha={alpha} test=mann-whitney two-sided midranks\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["term", "effect", "percent_effect", "u", "p", "significant"])
    for e in estimates:
        w.writerow([e.label, repr(e.effect), repr(e.percent_effect), repr(e.u_statistic), repr(e.p_value), int(e.significant)])
    return buf.getvalue()


def effects_from_csv(text: str) -> List[EffectEstimate]:
    rows = csv.DictReader(line for line in text.splitlines() if not line.startswith("#"))
    out = []
    for i, row in enumerate(rows):
        out.append(
            EffectEstimate(
                (i,),
                row["term"],
                float(row["effect"]),
                float(row["percent_effect"]),
                float(row["u"]),
                float(row["p"]),
                row["significant"] in ("1", "True", "true"),
            )
        )
    return out
