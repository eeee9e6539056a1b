"""Regular two-level full and fractional factorial designs.

Columns are handled internally as Python integers used as bit sets over the
runs: bit ``i`` is set when run ``i`` sits at the -1 level.  With that
encoding the elementwise product of two sign columns is a plain XOR and the
negation of a column is an XOR with the all-ones mask, which keeps the
aliasing checks cheap even for 82 factors in 2048 runs.
"""

from __future__ import annotations

import enum
import functools
import itertools
import math
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

MAX_FULL_FACTORS = 20


class DesignError(ValueError):
    """Raised when a design cannot be built or read."""


@functools.total_ordering
class Resolution(enum.Enum):
    III = 3
    IV = 4
    V = 5
    FULL = 99

    def __lt__(self, other):
        if not isinstance(other, Resolution):
            return NotImplemented
        return self.value < other.value

    @classmethod
    def parse(cls, value) -> "Resolution":
        if isinstance(value, Resolution):
            return value
        text = str(value).strip().upper()
        aliases = {"3": "III", "4": "IV", "5": "V", "FULL": "FULL"}
        text = aliases.get(text, text)
        try:
            return cls[text]
        except KeyError:
            raise DesignError(f"unknown resolution {value!r}; expected III, IV, V or FULL") from None


def default_names(n: int) -> List[str]:
    """A, B, ..., Z, AA, AB, ... (spreadsheet style)."""
    names = []
    letters = string.ascii_uppercase
    for i in range(n):
        label = ""
        j = i
        while True:
            label = letters[j % 26] + label
            j = j // 26 - 1
            if j < 0:
                break
        names.append(label)
    return names


@dataclass(frozen=True)
class DesignMatrix:
    """A two-level experimental plan, ``n_runs`` x ``n_factors`` of +/-1."""

    signs: np.ndarray
    base_count: int
    generators: Dict[int, Tuple[int, ...]] = field(default_factory=dict)
    resolution: Optional[Resolution] = None
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        signs = np.asarray(self.signs, dtype=np.int8)
        if signs.ndim != 2:
            raise DesignError("sign grid must be two-dimensional")
        if not np.all(np.abs(signs) == 1):
            raise DesignError("sign grid may only contain -1 and +1")
        signs.setflags(write=False)
        object.__setattr__(self, "signs", signs)
        if not self.names:
            object.__setattr__(self, "names", tuple(default_names(signs.shape[1])))
        elif len(self.names) != signs.shape[1]:
            raise DesignError("one name per factor column is required")
        if len(set(self.names)) != len(self.names):
            raise DesignError("factor names must be unique")
        if self.resolution is None:
            object.__setattr__(self, "resolution", achieved_resolution(self))

    @property
    def n_runs(self) -> int:
        return self.signs.shape[0]

    @property
    def n_factors(self) -> int:
        return self.signs.shape[1]

    def column(self, factor: int) -> np.ndarray:
        return self.signs[:, factor]

    def term_column(self, term: Iterable[int]) -> np.ndarray:
        """Elementwise product of the columns in ``term``."""
        term = tuple(term)
        if not term:
            raise DesignError("an effect term needs at least one factor")
        out = np.ones(self.n_runs, dtype=np.int8)
        for f in term:
            if not 0 <= f < self.n_factors:
                raise DesignError(f"factor index {f} out of range")
            out = out * self.signs[:, f]
        return out

    def term_label(self, term: Iterable[int]) -> str:
        parts = [self.names[f] for f in term]
        sep = "" if all(len(n) == 1 for n in self.names) else ":"
        return sep.join(parts)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DesignError(f"unknown factor {name!r}") from None

    def renamed(self, names: Sequence[str]) -> "DesignMatrix":
        return DesignMatrix(self.signs, self.base_count, dict(self.generators), self.resolution, tuple(names))


# -- bit-set helpers --------------------------------------------------------


def _column_bits(column: np.ndarray) -> int:
    neg = np.asarray(column) < 0
    return int.from_bytes(np.packbits(neg, bitorder="little").tobytes(), "little")


def _canonical(bits: int, full: int) -> int:
    # sign is a labeling artifact: fix run 0 at +1
    return bits ^ full if bits & 1 else bits


def _design_bits(d: DesignMatrix) -> Tuple[List[int], int]:
    full = (1 << d.n_runs) - 1
    return [_column_bits(d.signs[:, j]) for j in range(d.n_factors)], full


# -- construction -----------------------------------------------------------


def full_factorial(k: int) -> DesignMatrix:
    """All ``2**k`` sign combinations in standard order (first factor fastest)."""
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= MAX_FULL_FACTORS:
        raise DesignError(f"full factorial needs 1 <= k <= {MAX_FULL_FACTORS}, got {k!r}")
    return DesignMatrix(_base_grid(int(k)), base_count=int(k), generators={}, resolution=Resolution.FULL)


def _base_grid(k: int) -> np.ndarray:
    runs = np.arange(1 << k)[:, None]
    bits = (runs >> np.arange(k)[None, :]) & 1
    return (2 * bits - 1).astype(np.int8)


def _candidates(k: int, odd_first: bool) -> List[int]:
    """Interaction words of the base factors (weight >= 2) as bit masks.

    Ordered by descending weight, then lexicographically on the sorted
    factor indices.  ``odd_first`` moves every odd-weight word ahead of the
    even-weight ones while keeping that order inside each group.
    """
    words = []
    for w in range(k, 1, -1):
        for combo in itertools.combinations(range(k), w):
            words.append((combo, sum(1 << i for i in combo)))
    if odd_first:
        words = [x for x in words if len(x[0]) % 2] + [x for x in words if not len(x[0]) % 2]
    return [mask for _, mask in words]


def _accepts(chosen: List[int], chosen_set: set, pair_xors: Optional[set], cand: int, target: Resolution) -> bool:
    """Would the word set still pass ``target`` with ``cand`` added?

    Words are base-factor masks, so the product of two effect columns is the
    XOR of their masks and equality of columns is equality of masks.
    """
    if cand in chosen_set:
        return False
    if target >= Resolution.IV:
        # new main effect must not equal an existing 2FI, and no 2FI involving
        # it may coincide with an existing main effect
        if cand in pair_xors:
            return False
        for w in chosen:
            if cand ^ w in chosen_set:
                return False
    if target >= Resolution.V:
        new_pairs = set()
        for w in chosen:
            p = cand ^ w
            if p in pair_xors or p in new_pairs:
                return False
            new_pairs.add(p)
    return True


def _greedy_words(k: int, n_factors: int, target: Resolution, odd_first: bool) -> Optional[List[int]]:
    chosen = [1 << i for i in range(k)]
    chosen_set = set(chosen)
    track_pairs = target >= Resolution.IV
    pair_xors = {a ^ b for a, b in itertools.combinations(chosen, 2)} if track_pairs else None
    for cand in _candidates(k, odd_first):
        if len(chosen) == n_factors:
            break
        if _accepts(chosen, chosen_set, pair_xors, cand, target):
            if track_pairs:
                pair_xors.update(cand ^ w for w in chosen)
            chosen.append(cand)
            chosen_set.add(cand)
    return chosen if len(chosen) == n_factors else None


def _build(k: int, n_factors: int, target: Resolution) -> Optional[DesignMatrix]:
    if n_factors == k:
        return full_factorial(k)
    if n_factors > (1 << k) - 1:
        return None
    words = _greedy_words(k, n_factors, target, odd_first=False)
    if words is None:
        words = _greedy_words(k, n_factors, target, odd_first=True)
    if words is None:
        return None
    base = _base_grid(k)
    signs = np.empty((1 << k, n_factors), dtype=np.int8)
    signs[:, :k] = base
    generators = {}
    for j, mask in enumerate(words[k:], start=k):
        members = tuple(i for i in range(k) if mask >> i & 1)
        generators[j] = members
        signs[:, j] = np.prod(base[:, members], axis=1)
    d = DesignMatrix(signs, base_count=k, generators=generators, resolution=Resolution.III)
    # acceptance above reasons on masks; confirm on the actual sign grid
    if not verify_resolution(d, target):
        return None
    return DesignMatrix(signs, base_count=k, generators=generators, resolution=achieved_resolution(d))


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def generate_fractional(n_factors: int, target, max_runs: int) -> DesignMatrix:
    """Build a regular two-level design of at least ``target`` resolution.

    The run count is the largest the budget allows, ``min(max_runs,
    2**n_factors)``.  Non-base factors are assigned to interaction columns of
    the base full factorial by a deterministic greedy pass (descending word
    weight, then lexicographic).  If that pass falls short, a second pass
    tries odd-weight words first, which is the classic route to resolution IV
    at capacity.  Raises :class:`DesignError` rather than returning a weaker
    design.
    """
    target = Resolution.parse(target)
    if not isinstance(n_factors, (int, np.integer)) or n_factors < 1:
        raise DesignError(f"n_factors must be a positive integer, got {n_factors!r}")
    if not isinstance(max_runs, (int, np.integer)) or max_runs < 4 or not _is_power_of_two(max_runs):
        raise DesignError(f"max_runs must be a power of two >= 4, got {max_runs!r}")
    n_factors, max_runs = int(n_factors), int(max_runs)
    k_budget = int(math.log2(max_runs))

    if target is Resolution.FULL:
        if n_factors <= k_budget:
            return full_factorial(n_factors)
        raise DesignError(
            f"a full factorial in {n_factors} factors needs {1 << n_factors} runs, over the budget of {max_runs}"
        )

    k = min(k_budget, n_factors)
    d = _build(k, n_factors, target)
    if d is not None:
        return d

    smallest = None
    for k_more in range(k + 1, min(n_factors, MAX_FULL_FACTORS) + 1):
        if _build(k_more, n_factors, target) is not None:
            smallest = 1 << k_more
            break
    msg = f"no resolution {target.name} design for {n_factors} factors within {max_runs} runs"
    if smallest is not None:
        msg += f"; smallest run count that succeeded: {smallest}"
    raise DesignError(msg)


# -- verification -----------------------------------------------------------


def verify_resolution(d: DesignMatrix, target) -> bool:
    """Column-distinctness check of a design against a resolution target.

    III: main-effect columns non-constant and pairwise distinct up to sign.
    IV:  also no main effect equals (+/-) a two-factor interaction.
    V:   also all two-factor interactions distinct from each other and from
         the main effects.
    FULL: every one of the ``2**n`` sign combinations present.
    """
    target = Resolution.parse(target)
    if target is Resolution.FULL:
        if d.n_runs != 1 << d.n_factors:
            return False
        return len({row.tobytes() for row in d.signs}) == d.n_runs

    mains, full = _design_bits(d)
    canon = []
    for b in mains:
        if b == 0 or b == full:
            return False
        canon.append(_canonical(b, full))
    main_set = set(canon)
    if len(main_set) != len(canon):
        return False
    if target is Resolution.III:
        return True

    # canonical columns have run 0 at +1, so their XOR is canonical too
    pairs = set()
    n_pairs = 0
    for i, j in itertools.combinations(range(len(canon)), 2):
        p = canon[i] ^ canon[j]
        if p in main_set:
            return False
        pairs.add(p)
        n_pairs += 1
    if target is Resolution.IV:
        return True
    return len(pairs) == n_pairs


def achieved_resolution(d: DesignMatrix) -> Optional[Resolution]:
    """Highest resolution the design verifies at, or ``None`` below III."""
    best = None
    for r in (Resolution.III, Resolution.IV, Resolution.V):
        if not verify_resolution(d, r):
            break
        best = r
    if verify_resolution(d, Resolution.FULL):
        best = Resolution.FULL
    return best


def alias_structure(d: DesignMatrix, max_order: int = 2) -> Dict[int, List[Tuple[int, ...]]]:
    """Interaction terms (order 2..max_order) whose column equals +/- each main effect."""
    if max_order not in (2, 3):
        raise DesignError(f"max_order must be 2 or 3, got {max_order!r}")
    mains, full = _design_bits(d)
    canon = [_canonical(b, full) for b in mains]
    lookup: Dict[int, List[int]] = {}
    for f, c in enumerate(canon):
        lookup.setdefault(c, []).append(f)
    out: Dict[int, List[Tuple[int, ...]]] = {f: [] for f in range(d.n_factors)}
    n = d.n_factors
    for order in range(2, max_order + 1):
        for term in itertools.combinations(range(n), order):
            p = 0
            for f in term:
                p ^= canon[f]
            hits = lookup.get(_canonical(p, full))
            if hits:
                for f in hits:
                    if f not in term:
                        out[f].append(term)
    return out


def format_aliases(d: DesignMatrix, aliases: Dict[int, List[Tuple[int, ...]]]) -> List[str]:
    lines = []
    for f in range(d.n_factors):
        terms = aliases.get(f, [])
        rhs = ", ".join(d.term_label(t) for t in terms) if terms else "-"
        lines.append(f"{d.names[f]} <-> {rhs}")
    return lines


def signs_for_run(d: DesignMatrix, run_index: int) -> Dict[str, int]:
    if not 0 <= run_index < d.n_runs:
        raise DesignError(f"run index {run_index} outside 0..{d.n_runs - 1}")
    return {name: int(v) for name, v in zip(d.names, d.signs[run_index])}


# -- CSV interchange --------------------------------------------------------


def to_csv(d: DesignMatrix) -> str:
    lines = [f"# k={d.base_count}"]
    for j, members in sorted(d.generators.items()):
        gen = "*".join(d.names[m] for m in members)
        lines.append(f"# generator {d.names[j]}={gen}")
    lines.append(f"# resolution={d.resolution.name if d.resolution else 'NONE'}")
    lines.append(",".join(d.names))
    for row in d.signs:
        lines.append(",".join("+1" if v > 0 else "-1" for v in row))
    return "\n".join(lines) + "\n"


def write_csv(d: DesignMatrix, path) -> None:
    Path(path).write_text(to_csv(d), encoding="utf-8")


def from_csv(text: str) -> DesignMatrix:
    """Parse the CSV produced by :func:`to_csv`.

    Metadata is re-derived rather than trusted: generators are read back but
    the resolution is re-verified on the parsed grid.
    """
    k = None
    raw_generators = {}
    rows = []
    header = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("k="):
                k = int(body[2:])
            elif body.startswith("generator "):
                lhs, rhs = body[len("generator "):].split("=", 1)
                raw_generators[lhs.strip()] = [s.strip() for s in rhs.split("*")]
            continue
        fields = [s.strip() for s in line.split(",")]
        if header is None:
            header = fields
            continue
        if len(fields) != len(header):
            raise DesignError(f"line {lineno}: expected {len(header)} fields, got {len(fields)}")
        try:
            rows.append([int(s) for s in fields])
        except ValueError:
            raise DesignError(f"line {lineno}: fields must be +1 or -1") from None
        if any(v not in (1, -1) for v in rows[-1]):
            raise DesignError(f"line {lineno}: fields must be +1 or -1")
    if header is None or not rows:
        raise DesignError("design CSV has no header or no runs")
    index = {n: i for i, n in enumerate(header)}
    generators = {}
    for lhs, members in raw_generators.items():
        try:
            generators[index[lhs]] = tuple(index[m] for m in members)
        except KeyError as exc:
            raise DesignError(f"generator refers to unknown factor {exc.args[0]!r}") from None
    if k is None:
        k = int(math.log2(len(rows))) if _is_power_of_two(len(rows)) else 0
    return DesignMatrix(np.array(rows, dtype=np.int8), base_count=k, generators=generators, names=tuple(header))


def read_csv(path) -> DesignMatrix:
    return from_csv(Path(path).read_text(encoding="utf-8"))
