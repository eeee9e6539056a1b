"""Compile-execute-measure campaigns over planned flag combinations."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import shlex
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .design import DesignMatrix, full_factorial
from .measure import Backend, DeviceUnavailable, Measurement, measure_via_backend
from .stats import ResponseSet

log = logging.getLogger(__name__)

MAX_EXHAUSTIVE_FLAGS = 12


class CampaignError(ValueError):
    pass


class CampaignPaused(RuntimeError):
    """Raised when the device disappears mid-campaign; rerun to resume."""

    def __init__(self, message: str, added: int):
        super().__init__(message)
        self.added = added


@dataclass(frozen=True)
class FlagFactor:
    name: str
    enable: str = ""
    disable: str = ""

    def __post_init__(self):
        if not self.name:
            raise CampaignError("flag name must be non-empty")
        if not self.enable:
            object.__setattr__(self, "enable", f"-f{self.name}")
        if not self.disable:
            object.__setattr__(self, "disable", f"-fno-{self.name}")
        if self.enable == self.disable:
            raise CampaignError(f"flag {self.name!r} has identical enable and disable spellings")

    def spelling(self, level: int) -> str:
        return self.enable if level > 0 else self.disable


def expand_level(level: str, lto_flag: str = "-flto") -> str:
    """``O4`` is ``-O3`` plus link-time optimisation; other names gain a dash."""
    text = level.strip()
    bare = text.lstrip("-")
    if bare == "O4":
        return f"-O3 {lto_flag}".strip()
    return text if text.startswith("-") else f"-{text}"


@dataclass
class Experiment:
    compiler: str = "gcc {flags} {src} -o {out}"
    run: str = "{bin}"
    sources: Tuple[str, ...] = ()
    base_level: str = "O1"
    factors: Tuple[FlagFactor, ...] = ()
    replicates: int = 8
    backend: Dict = field(default_factory=lambda: {"kind": "simulated"})
    seed: int = 0
    order: str = "random"
    lto_flag: str = "-flto"
    jobs: int = 1
    name: str = "benchmark"

    def __post_init__(self):
        self.sources = tuple(self.sources)
        self.factors = tuple(self.factors)
        if self.replicates < 1:
            raise CampaignError("replicates must be at least 1")
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise CampaignError("factor names must be unique")
        if self.order not in ("random", "design"):
            raise CampaignError(f"order must be 'random' or 'design', got {self.order!r}")

    @property
    def factor_names(self) -> List[str]:
        return [f.name for f in self.factors]


@dataclass(frozen=True)
class RunSpec:
    index: int
    flags: str
    run_id: str
    label: str = ""
    levels: Tuple[Tuple[str, int], ...] = ()


@dataclass
class RunPlan:
    specs: List[RunSpec]
    order: List[int]

    def in_execution_order(self) -> List[RunSpec]:
        return [self.specs[i] for i in self.order]


def source_digest(paths: Iterable[str]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(str(p).encode() + b"\0")
        try:
            h.update(Path(p).read_bytes())
        except OSError:
            h.update(b"<missing>")
        h.update(b"\0")
    return h.hexdigest()


def run_id(compiler: str, flags: str, digest: str, backend: Mapping) -> str:
    payload = json.dumps([compiler, flags, digest, backend], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:20]


def _execution_order(n: int, e: Experiment) -> List[int]:
    order = list(range(n))
    if e.order == "random":
        random.Random(e.seed).shuffle(order)
    return order


def plan_flag_sets(e: Experiment, flag_sets: Sequence[str], labels: Optional[Sequence[str]] = None,
                   levels: Optional[Sequence[Tuple[Tuple[str, int], ...]]] = None) -> RunPlan:
    digest = source_digest(e.sources)
    specs = []
    for i, flags in enumerate(flag_sets):
        specs.append(
            RunSpec(
                index=i,
                flags=flags,
                run_id=run_id(e.compiler, flags, digest, e.backend),
                label=labels[i] if labels else flags,
                levels=levels[i] if levels else (),
            )
        )
    return RunPlan(specs, _execution_order(len(specs), e))


def plan_runs(e: Experiment, d: DesignMatrix) -> RunPlan:
    """One run per design row; flags are the base level then one spelling per factor."""
    if d.n_factors != len(e.factors):
        raise CampaignError(f"design has {d.n_factors} factors, experiment declares {len(e.factors)}")
    base = expand_level(e.base_level, e.lto_flag)
    flag_sets, levels = [], []
    for i in range(d.n_runs):
        row = d.signs[i]
        flag_sets.append(" ".join([base] + [f.spelling(int(s)) for f, s in zip(e.factors, row)]))
        levels.append(tuple((f.name, int(s)) for f, s in zip(e.factors, row)))
    return plan_flag_sets(e, flag_sets, [f"run{i}" for i in range(d.n_runs)], levels)


def exhaustive_plan(e: Experiment, base_level: str, flags: Sequence[FlagFactor]) -> Tuple[DesignMatrix, RunPlan]:
    """Every on/off combination of up to 12 flags over ``base_level``, standard order."""
    flags = tuple(flags)
    if not 1 <= len(flags) <= MAX_EXHAUSTIVE_FLAGS:
        raise CampaignError(f"exhaustive mode takes 1..{MAX_EXHAUSTIVE_FLAGS} flags, got {len(flags)}")
    sub = replace(e, base_level=base_level, factors=flags)
    d = full_factorial(len(flags)).renamed([f.name for f in flags])
    return d, plan_runs(sub, d)


# -- compilation ------------------------------------------------------------


@dataclass
class Artifact:
    run_id: str
    path: Optional[str]
    status: str
    diagnostics: str = ""
    cached: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "ok"


class Compiler:
    """Shared artifact cache keyed by run id; subclasses do the actual build."""

    def __init__(self, cache_dir):
        self.cache_dir = Path(cache_dir)
        self.invocations = 0

    def compile(self, spec: RunSpec) -> Artifact:
        slot = self.cache_dir / spec.run_id
        meta_path = slot / "meta.json"
        if meta_path.exists():
            try:
                meta = json.loads(meta_path.read_text())
                path = meta.get("path")
                if meta["status"] != "ok" or (path and Path(path).exists()):
                    return Artifact(spec.run_id, path, meta["status"], meta.get("diagnostics", ""), cached=True)
            except (ValueError, KeyError):
                pass
        slot.mkdir(parents=True, exist_ok=True)
        out = slot / "bin"
        self.invocations += 1
        ok, diagnostics = self._build(spec, out)
        if ok and not out.exists():
            ok, diagnostics = False, (diagnostics + "\ncompiler produced no output binary").strip()
        art = Artifact(spec.run_id, str(out) if ok else None, "ok" if ok else "unavailable", diagnostics)
        tmp = meta_path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"status": art.status, "path": art.path, "flags": spec.flags,
                                   "diagnostics": diagnostics}))
        os.replace(tmp, meta_path)
        return art

    def _build(self, spec: RunSpec, out: Path) -> Tuple[bool, str]:
        raise NotImplementedError


class CommandCompiler(Compiler):
    """Fills ``{flags} {src} {out}`` in a shell command template."""

    def __init__(self, template: str, sources: Sequence[str], cache_dir, timeout: Optional[float] = None):
        super().__init__(cache_dir)
        self.template = template
        self.sources = list(sources)
        self.timeout = timeout

    def _build(self, spec, out):
        src = " ".join(shlex.quote(str(s)) for s in self.sources)
        command = self.template.format(flags=spec.flags, src=src, out=shlex.quote(str(out)))
        try:
            proc = subprocess.run(command, shell=True, capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            return False, str(exc)
        diag = (proc.stdout + proc.stderr).strip()[-4000:]
        if proc.returncode != 0:
            return False, f"exit status {proc.returncode}\n{diag}".strip()
        return True, diag


class SimulatedCompiler(Compiler):
    """Writes a stand-in artifact; ``crash`` decides which flag strings 'crash' the compiler."""

    def __init__(self, cache_dir, crash: Optional[Callable[[str], bool]] = None):
        super().__init__(cache_dir)
        self.crash = crash

    def _build(self, spec, out):
        if self.crash is not None and self.crash(spec.flags):
            return False, "internal compiler error (simulated)"
        out.write_text(spec.flags + "\n")
        return True, ""


def compile(spec: RunSpec, compiler: Compiler) -> Artifact:
    """Build one run's binary, from cache when possible; never raises on build failure."""
    return compiler.compile(spec)


# -- result store -----------------------------------------------------------

RECORD_FIELDS = ("run_id", "index", "label", "flags", "replicate", "status", "energy_j", "time_s",
                 "power_w", "reason", "started", "finished")
TIMESTAMP_FIELDS = ("started", "finished")


def make_record(spec: RunSpec, replicate: int, m: Measurement, started: float, finished: float) -> dict:
    values = {
        "run_id": spec.run_id,
        "index": spec.index,
        "label": spec.label,
        "flags": spec.flags,
        "replicate": replicate,
        "status": m.status,
        "energy_j": m.energy,
        "time_s": m.time,
        "power_w": m.avg_power,
        "reason": m.reason,
        "started": started,
        "finished": finished,
    }
    return {k: values[k] for k in RECORD_FIELDS}


class ResultStore:
    """Append-only newline-delimited JSON records, one per measurement.

    A torn final line (interrupted write) is ignored when reading and cut off
    before the next append.
    """

    def __init__(self, path):
        self.path = Path(path)

    def _read_lines(self) -> Tuple[List[dict], int]:
        if not self.path.exists():
            return [], 0
        data = self.path.read_bytes()
        records, good = [], 0
        pos = 0
        while pos < len(data):
            nl = data.find(b"\n", pos)
            if nl < 0:
                break
            line = data[pos:nl]
            try:
                records.append(json.loads(line))
            except ValueError:
                break
            pos = nl + 1
            good = pos
        return records, good

    def records(self) -> List[dict]:
        return self._read_lines()[0]

    def keys(self) -> set:
        return {(r["run_id"], r["replicate"]) for r in self.records()}

    def append(self, record: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        _, good = self._read_lines() if self._torn() else (None, None)
        with open(self.path, "ab") as fh:
            if good is not None:
                fh.truncate(good)
            fh.write((json.dumps(record, separators=(",", ":")) + "\n").encode())
            fh.flush()
            os.fsync(fh.fileno())

    def _torn(self) -> bool:
        if not self.path.exists() or self.path.stat().st_size == 0:
            return False
        with open(self.path, "rb") as fh:
            fh.seek(-1, os.SEEK_END)
            return fh.read(1) != b"\n"


def strip_timestamps(records: Iterable[dict]) -> List[dict]:
    return [{k: v for k, v in r.items() if k not in TIMESTAMP_FIELDS} for r in records]


# -- campaigns --------------------------------------------------------------


@dataclass
class CampaignResult:
    added: int
    executed: int
    compiled: int
    records: List[dict]


def execute_campaign(
    e: Experiment,
    plan: RunPlan,
    store: ResultStore,
    backend: Backend,
    compiler: Compiler,
    jobs: Optional[int] = None,
) -> CampaignResult:
    """Measure every planned run ``e.replicates`` times, appending as it goes.

    Records already in the store are skipped, so rerunning after an
    interruption resumes where it stopped.  Builds run in parallel up to
    ``jobs``; measurements are strictly one at a time.
    """
    done = store.keys()
    todo = [s for s in plan.in_execution_order()
            if any((s.run_id, r) not in done for r in range(e.replicates))]
    seen, unique = set(), []
    for s in todo:
        if s.run_id not in seen:
            seen.add(s.run_id)
            unique.append(s)
    before = compiler.invocations
    width = max(1, jobs if jobs is not None else e.jobs)
    if width > 1 and len(unique) > 1:
        with ThreadPoolExecutor(max_workers=width) as pool:
            artifacts = dict(zip((s.run_id for s in unique), pool.map(compiler.compile, unique)))
    else:
        artifacts = {s.run_id: compiler.compile(s) for s in unique}

    added = executed = 0
    for spec in todo:
        art = artifacts[spec.run_id]
        command = e.run.format(bin=shlex.quote(art.path)) if art.ok else ""
        for rep in range(e.replicates):
            key = (spec.run_id, rep)
            if key in done:
                continue
            started = time.time()
            if not art.ok:
                m = Measurement.unavailable(f"compile failed: {art.diagnostics}")
            else:
                try:
                    m = measure_via_backend(backend, command, flags=spec.flags,
                                            key=f"{spec.run_id}:{rep}", binary=art.path)
                except DeviceUnavailable as exc:
                    raise CampaignPaused(f"device unavailable after {added} new records: {exc}", added) from exc
                executed += 1
            store.append(make_record(spec, rep, m, started, time.time()))
            done.add(key)
            added += 1
    return CampaignResult(added, executed, compiler.invocations - before, store.records())


def collect_responses(plan: RunPlan, records: Iterable[dict], metric: str = "energy",
                      match: str = "run_id") -> ResponseSet:
    """Replicate values per planned run (design order); runs with no ok records are unavailable.

    ``match="flags"`` pairs records with runs by flag string instead of run id,
    which ignores the compiler and backend that produced them.
    """
    key = {"energy": "energy_j", "time": "time_s", "power": "power_w"}[metric]
    if match not in ("run_id", "flags"):
        raise CampaignError(f"cannot match records on {match!r}")
    by_key: Dict[str, List[Tuple[int, float]]] = {}
    for r in records:
        if r.get("status") == "ok" and r.get(key) is not None:
            by_key.setdefault(r[match], []).append((r["replicate"], r[key]))
    samples = []
    for spec in plan.specs:
        vals = [v for _, v in sorted(by_key.get(getattr(spec, match), []))]
        samples.append(vals or None)
    return ResponseSet(samples, metric)


def _mean_measurement(values: Optional[np.ndarray]) -> Optional[float]:
    return float(np.mean(values)) if values is not None else None


@dataclass
class LevelResult:
    level: str
    flags: str
    energy: Optional[float]
    time: Optional[float]
    power: Optional[float]
    energy_ratio: Optional[float]
    time_ratio: Optional[float]
    power_ratio: Optional[float]
    status: str = "ok"


def _metric_means(plan: RunPlan, records: List[dict], match: str = "run_id") -> Dict[str, List[Optional[float]]]:
    return {m: [_mean_measurement(s) for s in collect_responses(plan, records, m, match).samples]
            for m in ("energy", "time", "power")}


def _ratio(a: Optional[float], b: Optional[float]) -> Optional[float]:
    if a is None or b is None or b == 0:
        return None
    return a / b


def sweep_plan(e: Experiment, levels: Sequence[str]) -> RunPlan:
    if not levels:
        raise CampaignError("level sweep needs at least one level")
    return plan_flag_sets(e, [expand_level(lv, e.lto_flag) for lv in levels], list(levels))


def summarize_sweep(plan: RunPlan, records: List[dict], match: str = "run_id") -> List[LevelResult]:
    """Per-level means as ratios to the first level of the plan."""
    means = _metric_means(plan, records, match)
    if means["time"][0] is None:
        raise CampaignError(f"baseline level {plan.specs[0].label} is unavailable; nothing to compare against")
    out = []
    for i, spec in enumerate(plan.specs):
        en, ti, po = means["energy"][i], means["time"][i], means["power"][i]
        status = "ok" if ti is not None else "unavailable"
        out.append(LevelResult(spec.label, spec.flags, en, ti, po, _ratio(en, means["energy"][0]),
                               _ratio(ti, means["time"][0]), _ratio(po, means["power"][0]), status))
    return out


def level_sweep(e: Experiment, levels: Sequence[str], store: ResultStore, backend: Backend,
                compiler: Compiler) -> List[LevelResult]:
    """Measure whole optimisation levels as ratios to the first one."""
    plan = sweep_plan(e, levels)
    execute_campaign(e, plan, store, backend, compiler)
    return summarize_sweep(plan, store.records())


@dataclass
class ToggleResult:
    flag: str
    enable_energy_pct: Optional[float]
    enable_time_pct: Optional[float]
    disable_energy_pct: Optional[float]
    disable_time_pct: Optional[float]


def _pct(a: Optional[float], base: Optional[float]) -> Optional[float]:
    r = _ratio(a, base)
    return None if r is None else 100.0 * (r - 1.0)


def one_at_a_time(e: Experiment, base_level: str, flags: Sequence[FlagFactor], store: ResultStore,
                  backend: Backend, compiler: Compiler) -> Tuple[List[ToggleResult], RunPlan]:
    """Each flag enabled and disabled on top of ``base_level``: 2n+1 builds."""
    if not flags:
        raise CampaignError("one-at-a-time mode needs at least one flag")
    base = expand_level(base_level, e.lto_flag)
    flag_sets, labels = [base], ["base"]
    for f in flags:
        flag_sets += [f"{base} {f.enable}", f"{base} {f.disable}"]
        labels += [f.enable, f.disable]
    plan = plan_flag_sets(e, flag_sets, labels)
    execute_campaign(e, plan, store, backend, compiler)
    means = _metric_means(plan, store.records())
    out = []
    for i, f in enumerate(flags):
        on, off = 1 + 2 * i, 2 + 2 * i
        out.append(ToggleResult(
            f.name,
            _pct(means["energy"][on], means["energy"][0]),
            _pct(means["time"][on], means["time"][0]),
            _pct(means["energy"][off], means["energy"][0]),
            _pct(means["time"][off], means["time"][0]),
        ))
    return out, plan


def run_means_by_levels(plan: RunPlan, records: Iterable[dict], metric: str = "energy",
                        match: str = "run_id") -> Dict[Tuple[int, ...], float]:
    """Mean response per flag combination, keyed by the tuple of +/-1 levels."""
    resp = collect_responses(plan, records, metric, match)
    out = {}
    for spec, s in zip(plan.specs, resp.samples):
        if s is not None:
            out[tuple(v for _, v in spec.levels)] = float(np.mean(s))
    return out
