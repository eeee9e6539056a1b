"""Reference exhaustive-exploration data: 4 flags over O1 and O2 on blowfish.

Energies are in mJ, rounded to three significant figures; percents are as
printed alongside them.  Rows start with all flags enabled, X1 toggling
fastest.  Each entry is (levels X1..X4, mJ, printed percent).
"""

import itertools

FLAGS = ["guess-branch-probability", "tree-dominator-opts", "tree-ch", "if-conversion"]

_O1 = [(5780, 0.00), (5640, -2.49), (5680, -1.76), (5730, -0.93), (5650, -2.28), (5720, -0.97),
       (5610, -2.90), (5640, -2.33), (5760, -0.34), (5720, -1.09), (5860, 1.45), (5960, 3.08),
       (5890, 1.91), (5870, 1.61), (5690, -1.56), (5880, 1.81)]
_O2 = [(5480, 0.00), (5540, 1.00), (5480, -0.05), (5620, 2.49), (5490, 0.09), (5580, 1.75),
       (5480, -0.03), (5530, 0.85), (5460, -0.43), (5480, 0.03), (5490, 0.15), (5480, 0.00),
       (5470, -0.19), (5570, 1.57), (5480, -0.03), (5510, 0.41)]

LEVELS = [tuple(-1 if i >> f & 1 else 1 for f in range(4)) for i in range(16)]
ROWS = {
    "O1": [(lv, mj, pct) for lv, (mj, pct) in zip(LEVELS, _O1)],
    "O2": [(lv, mj, pct) for lv, (mj, pct) in zip(LEVELS, _O2)],
}
ALL_ON = (1, 1, 1, 1)


def stored_joules(column):
    return {lv: mj / 1000.0 for lv, mj, _ in ROWS[column]}


def rounding_interval(mj, base_mj, half=5.0):
    """Range of percents consistent with both energies rounded to the nearest 10 mJ."""
    ends = [100.0 * (v - b) / b for v, b in itertools.product((mj - half, mj + half), (base_mj - half, base_mj + half))]
    return min(ends), max(ends)
