"""Energy/time measurement: power-trace integration, a simulated device and
pluggable measurement backends."""

from __future__ import annotations

import hashlib
import math
import re
import shlex
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np


class MeasureError(ValueError):
    pass


class DeviceUnavailable(RuntimeError):
    """The measurement device cannot be reached; the campaign should pause."""


@dataclass(frozen=True)
class PowerTrace:
    timestamps: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        p = np.asarray(self.power, dtype=float)
        if t.shape != p.shape or t.ndim != 1:
            raise MeasureError("timestamps and power must be 1-D and the same length")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
            raise MeasureError("trace contains non-finite values")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise MeasureError("trace timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "power", p)

    def __len__(self):
        return self.timestamps.size

    @property
    def start(self) -> float:
        return float(self.timestamps[0])

    @property
    def end(self) -> float:
        return float(self.timestamps[-1])


@dataclass(frozen=True)
class Measurement:
    energy: Optional[float]
    time: Optional[float]
    avg_power: Optional[float]
    status: str = "ok"
    reason: str = ""

    @classmethod
    def ok(cls, energy: Optional[float], time_s: float) -> "Measurement":
        power = energy / time_s if energy is not None and time_s > 0 else None
        return cls(energy, time_s, power)

    @classmethod
    def unavailable(cls, reason: str) -> "Measurement":
        return cls(None, None, None, "unavailable", reason)

    @property
    def is_ok(self) -> bool:
        return self.status == "ok"

    def value(self, metric: str) -> Optional[float]:
        return {"energy": self.energy, "time": self.time, "power": self.avg_power}[metric]


# -- trace math -------------------------------------------------------------


def integrate_trace(t: PowerTrace) -> Measurement:
    """Trapezoidal energy over the trace's span."""
    if len(t) < 2:
        raise MeasureError("need at least two samples to integrate")
    ts, p = t.timestamps, t.power
    energy = float(np.sum(0.5 * (p[1:] + p[:-1]) * np.diff(ts)))
    return Measurement.ok(energy, float(ts[-1] - ts[0]))


def window_trace(t: PowerTrace, start: float, end: float) -> PowerTrace:
    """Cut ``[start, end]`` out of a trace, interpolating the boundary samples."""
    if not start < end:
        raise MeasureError("window start must precede its end")
    if start < t.start or end > t.end:
        raise MeasureError(f"window [{start}, {end}] outside trace span [{t.start}, {t.end}]")
    ts, p = t.timestamps, t.power
    inside = (ts > start) & (ts < end)
    new_t = np.concatenate([[start], ts[inside], [end]])
    new_p = np.concatenate([[np.interp(start, ts, p)], p[inside], [np.interp(end, ts, p)]])
    return PowerTrace(new_t, new_p)


def read_trace(path) -> PowerTrace:
    """Parse ``<timestamp_s> <power_w>`` lines; ``#`` starts a comment line."""
    ts, ps = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise MeasureError(f"{path}:{lineno}: expected '<timestamp_s> <power_w>'")
        try:
            ts.append(float(parts[0]))
            ps.append(float(parts[1]))
        except ValueError:
            raise MeasureError(f"{path}:{lineno}: unparseable number") from None
    return PowerTrace(np.array(ts), np.array(ps))


def write_trace(t: PowerTrace, path) -> None:
    lines = ["# timestamp_s power_w"]
    lines += [f"{a!r} {b!r}" for a, b in zip(t.timestamps.tolist(), t.power.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- simulated device -------------------------------------------------------


@dataclass
class DeviceModel:
    """Planted-effect power/time model for hardware-free campaigns.

    Power is ``base_power * prod(1 + e_j * x_j)`` over ``power_effects`` and
    run time ``base_time * prod(1 + t_j * x_j)`` over ``time_effects``, both
    further scaled by the optimisation level's entry in ``levels`` (keyed by
    the level flag such as ``-O1``; value ``(time_scale, power_scale)``).
    ``noise`` perturbs each power sample, ``run_noise`` each execution as a
    whole; both are relative standard deviations.
    """

    base_power: float = 1.0
    base_time: float = 1.0
    power_effects: Dict[str, float] = field(default_factory=dict)
    time_effects: Dict[str, float] = field(default_factory=dict)
    levels: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    noise: float = 0.0
    run_noise: float = 0.0
    sample_period: float = 1e-3
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sample_period <= 0:
            raise MeasureError("sample_period must be positive")
        if self.base_power <= 0 or self.base_time <= 0:
            raise MeasureError("base power and base time must be positive")
        for name, e in {**self.power_effects, **self.time_effects}.items():
            if not -1 < e < 1:
                raise MeasureError(f"effect for {name!r} must lie in (-1, 1) to keep the model positive")
        if self.noise < 0 or self.run_noise < 0 or self.jitter < 0:
            raise MeasureError("noise and jitter must be non-negative")

    def power(self, levels: Mapping[str, int], level: str = "") -> float:
        scale = self.levels.get(level, (1.0, 1.0))[1]
        return self.base_power * scale * _product(self.power_effects, levels)

    def duration(self, levels: Mapping[str, int], level: str = "") -> float:
        scale = self.levels.get(level, (1.0, 1.0))[0]
        return self.base_time * scale * _product(self.time_effects, levels)


def _product(effects: Mapping[str, float], levels: Mapping[str, int]) -> float:
    out = 1.0
    for name, e in effects.items():
        out *= 1.0 + e * levels.get(name, 0)
    return out


def derive_seed(*parts) -> int:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def simulate_execution(
    m: DeviceModel,
    levels: Mapping[str, int],
    duration: Optional[float] = None,
    *,
    level: str = "",
    seed: Optional[int] = None,
) -> PowerTrace:
    """Sample a power trace for one execution on the simulated device.

    ``duration`` defaults to the model's run time for these levels.  The
    trace always spans exactly ``[0, duration]``.
    """
    if duration is None:
        duration = m.duration(levels, level)
    if duration < 10 * m.sample_period:
        raise MeasureError(f"duration {duration} s is shorter than ten sample periods")
    rng = np.random.default_rng(m.seed if seed is None else seed)
    n = max(int(math.ceil(duration / m.sample_period - 1e-9)), 1)
    if m.jitter > 0:
        steps = m.sample_period * (1.0 + m.jitter * rng.standard_normal(n))
        steps = np.clip(steps, 0.1 * m.sample_period, None)
        ts = np.concatenate([[0.0], np.cumsum(steps)])
        ts *= duration / ts[-1]
    else:
        ts = np.arange(n + 1) * (duration / n)
    level_power = m.power(levels, level)
    if m.run_noise > 0:
        level_power *= 1.0 + m.run_noise * rng.standard_normal()
    p = np.full(ts.size, level_power)
    if m.noise > 0:
        p = p * (1.0 + m.noise * rng.standard_normal(ts.size))
    return PowerTrace(ts, p)


# -- backends ---------------------------------------------------------------

_LEVEL_RE = re.compile(r"^-O(\d|s|fast|g|z)?$")


def split_flags(flags: str) -> Tuple[str, Dict[str, str]]:
    """Level token (e.g. ``-O1``) and the remaining flag tokens."""
    level = ""
    rest = {}
    for tok in shlex.split(flags):
        if _LEVEL_RE.match(tok):
            level = tok
        else:
            rest[tok] = tok
    return level, rest


@dataclass
class RunContext:
    """What a backend may know about the execution it measures."""

    command: str
    flags: str = ""
    key: str = ""
    binary: str = ""


class Backend:
    kind = "abstract"
    metrics = ("energy", "time", "power")

    def measure(self, ctx: RunContext) -> Measurement:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}


def _run(command: str, timeout: Optional[float]) -> subprocess.CompletedProcess:
    return subprocess.run(command, shell=True, capture_output=True, text=True, timeout=timeout)


class WallClockBackend(Backend):
    """Times the command; energy only when a nominal power is configured."""

    kind = "wall-clock"

    def __init__(self, nominal_power: Optional[float] = None, timeout: Optional[float] = None):
        self.nominal_power = nominal_power
        self.timeout = timeout
        if nominal_power is None:
            self.metrics = ("time",)

    def measure(self, ctx: RunContext) -> Measurement:
        t0 = time.perf_counter()
        try:
            proc = _run(ctx.command, self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            return Measurement.unavailable(f"run failed: {exc}")
        elapsed = time.perf_counter() - t0
        if proc.returncode != 0:
            return Measurement.unavailable(f"exit status {proc.returncode}: {proc.stderr.strip()[-500:]}")
        energy = elapsed * self.nominal_power if self.nominal_power is not None else None
        return Measurement.ok(energy, elapsed)

    def describe(self) -> dict:
        return {"kind": self.kind, "nominal_power": self.nominal_power}


_KV_RE = re.compile(r"^\s*(energy_j|time_s)\s*=\s*(\S+)\s*$", re.MULTILINE)


def parse_energy_output(text: str) -> Tuple[float, float]:
    found = {}
    for key, value in _KV_RE.findall(text):
        try:
            found[key] = float(value)
        except ValueError:
            raise MeasureError(f"unparseable value for {key}: {value!r}") from None
    missing = {"energy_j", "time_s"} - set(found)
    if missing:
        raise MeasureError(f"measurement output lacks {', '.join(sorted(missing))}")
    if not all(math.isfinite(v) for v in found.values()) or found["time_s"] < 0:
        raise MeasureError("measurement output holds invalid values")
    return found["energy_j"], found["time_s"]


# sysexits EX_TEMPFAIL: the measurement command reports the device itself is gone
DEVICE_UNAVAILABLE_STATUS = 75


class ExternalCommandBackend(Backend):
    """Runs a user command that prints ``energy_j=<float>`` and ``time_s=<float>``.

    ``template`` may use ``{cmd}`` (the run command) and ``{bin}``; by default
    the run command itself is expected to print the two lines.  Exit status
    75 means the power logger is unreachable and pauses the campaign.
    """

    kind = "external"

    def __init__(self, template: str = "{cmd}", timeout: Optional[float] = None):
        self.template = template
        self.timeout = timeout

    def measure(self, ctx: RunContext) -> Measurement:
        command = self.template.format(cmd=ctx.command, bin=ctx.binary)
        try:
            proc = _run(command, self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            return Measurement.unavailable(f"measurement command failed: {exc}")
        if proc.returncode == DEVICE_UNAVAILABLE_STATUS:
            raise DeviceUnavailable(proc.stderr.strip()[-500:] or "measurement device unavailable")
        if proc.returncode != 0:
            return Measurement.unavailable(f"exit status {proc.returncode}: {proc.stderr.strip()[-500:]}")
        try:
            energy, elapsed = parse_energy_output(proc.stdout)
        except MeasureError as exc:
            return Measurement.unavailable(str(exc))
        return Measurement.ok(energy, elapsed)

    def describe(self) -> dict:
        return {"kind": self.kind, "template": self.template}


class TraceFileBackend(Backend):
    """Runs the command, then integrates the trace file it left behind.

    ``path`` is a template over ``{bin}``; ``window`` optionally restricts
    integration to ``(start, end)`` seconds.
    """

    kind = "trace-file"

    def __init__(self, path: str, window: Optional[Tuple[float, float]] = None, run: bool = True,
                 timeout: Optional[float] = None):
        self.path = path
        self.window = window
        self.run = run
        self.timeout = timeout

    def measure(self, ctx: RunContext) -> Measurement:
        if self.run and ctx.command:
            try:
                proc = _run(ctx.command, self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                return Measurement.unavailable(f"run failed: {exc}")
            if proc.returncode != 0:
                return Measurement.unavailable(f"exit status {proc.returncode}: {proc.stderr.strip()[-500:]}")
        path = self.path.format(bin=ctx.binary)
        try:
            trace = read_trace(path)
            if self.window is not None:
                trace = window_trace(trace, *self.window)
            return integrate_trace(trace)
        except (OSError, MeasureError) as exc:
            return Measurement.unavailable(f"trace {path}: {exc}")

    def describe(self) -> dict:
        return {"kind": self.kind, "path": self.path, "window": self.window}


class SimulatedBackend(Backend):
    """Measures on a :class:`DeviceModel` instead of hardware.

    Factor levels come from the flag string: the enable spelling gives +1,
    the disable spelling -1, and an absent flag 0.  Each measurement is
    seeded from the model seed and the run key, so results do not depend
    on execution order.
    """

    kind = "simulated"

    def __init__(self, model: DeviceModel, spellings: Optional[Mapping[str, Tuple[str, str]]] = None):
        self.model = model
        names = set(model.power_effects) | set(model.time_effects)
        self.spellings = {n: (f"-f{n}", f"-fno-{n}") for n in names}
        if spellings:
            self.spellings.update(spellings)

    def levels_for(self, flags: str) -> Tuple[str, Dict[str, int]]:
        level, tokens = split_flags(flags)
        out = {}
        for name, (on, off) in self.spellings.items():
            if on in tokens:
                out[name] = 1
            elif off in tokens:
                out[name] = -1
        return level, out

    def measure(self, ctx: RunContext) -> Measurement:
        level, levels = self.levels_for(ctx.flags)
        trace = simulate_execution(self.model, levels, level=level, seed=derive_seed(self.model.seed, ctx.key))
        return integrate_trace(trace)

    def describe(self) -> dict:
        m = self.model
        return {
            "kind": self.kind,
            "base_power": m.base_power,
            "base_time": m.base_time,
            "power_effects": dict(sorted(m.power_effects.items())),
            "time_effects": dict(sorted(m.time_effects.items())),
            "levels": {k: list(v) for k, v in sorted(m.levels.items())},
            "noise": m.noise,
            "run_noise": m.run_noise,
            "sample_period": m.sample_period,
            "jitter": m.jitter,
            "seed": m.seed,
        }


def measure_via_backend(backend: Backend, command: str, **context) -> Measurement:
    """Measure one execution; failures come back as ``status="unavailable"``.

    :class:`DeviceUnavailable` is the one exception allowed through, since it
    means the device itself is gone rather than this run being bad.
    """
    ctx = RunContext(command=command, **context)
    try:
        return backend.measure(ctx)
    except DeviceUnavailable:
        raise
    except (MeasureError, OSError, ValueError) as exc:
        return Measurement.unavailable(f"{type(exc).__name__}: {exc}")
