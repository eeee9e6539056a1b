"""INI experiment configuration: parsing, validation, overrides.

Sections and keys are fixed; anything unknown is rejected together with the
line it was found on.  See ``docs/example.ini`` for a commented example.
"""

from __future__ import annotations

import configparser
import hashlib
import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .measure import (Backend, DeviceModel, ExternalCommandBackend, MeasureError, SimulatedBackend,
                      TraceFileBackend, WallClockBackend)
from .orchestrate import CampaignError, Compiler, CommandCompiler, Experiment, FlagFactor, SimulatedCompiler

SCHEMA: Dict[str, Tuple[str, ...]] = {
    "compiler": ("command", "lto_flag", "jobs", "timeout"),
    "benchmark": ("name", "sources", "run"),
    "factors": (),  # free-form: one key per flag
    "backend": ("kind", "command", "trace", "window", "nominal_power", "timeout", "base_power", "base_time",
                "power_effects", "time_effects", "levels", "noise", "run_noise", "jitter", "sample_period",
                "seed", "crash_flags"),
    "campaign": ("base_level", "replicates", "seed", "order", "resolution", "max_runs", "alpha", "metric",
                 "levels", "oneshot_flags", "exhaustive_flags", "top"),
}
BACKEND_KINDS = ("simulated", "wall-clock", "external", "trace-file")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = "", line: Optional[int] = None):
        where = ""
        if key:
            where += f" [{key}]"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"config error{where}: {message}")
        self.key = key
        self.line = line


@dataclass
class Config:
    values: Dict[str, Dict[str, str]]
    lines: Dict[Tuple[str, str], int] = field(default_factory=dict)
    path: Optional[Path] = None
    text: str = ""

    @property
    def base_dir(self) -> Path:
        return self.path.parent if self.path else Path.cwd()

    def digest(self) -> str:
        canon = "\n".join(f"[{s}] {k}={v}" for s in sorted(self.values) for k, v in sorted(self.values[s].items()))
        return hashlib.sha256(canon.encode()).hexdigest()

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    def _where(self, section: str, key: str):
        return f"{section}.{key}", self.lines.get((section, key))

    def typed(self, section: str, key: str, kind, default=None):
        raw = self.get(section, key)
        if raw is None or raw == "":
            return default
        try:
            return kind(raw)
        except ValueError:
            k, line = self._where(section, key)
            raise ConfigError(f"expected {kind.__name__}, got {raw!r}", k, line) from None

    def set(self, section: str, key: str, value: str) -> None:
        _check_key(section, key, None)
        self.values.setdefault(section, {})[key] = value


def _check_key(section: str, key: str, line: Optional[int]):
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]", section, line)
    if SCHEMA[section] and key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r}", f"{section}.{key}", line)


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]\s*$")
_KEY_RE = re.compile(r"^([^\s=:#;][^=:]*?)\s*(?:[=:]|$)")


def _key_lines(text: str) -> Dict[Tuple[str, str], int]:
    lines = {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith(("#", ";")):
            continue
        m = _SECTION_RE.match(raw)
        if m:
            section = m.group(1).strip()
            lines.setdefault((section, ""), n)
            continue
        if raw[0].isspace():
            continue  # continuation line
        m = _KEY_RE.match(raw)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip()), n)
    return lines


def parse_config(text: str, path: Optional[Path] = None) -> Config:
    parser = configparser.ConfigParser(allow_no_value=True, interpolation=None, inline_comment_prefixes=None,
                                       strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path or "<config>"))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        key = getattr(exc, "option", "") or getattr(exc, "section", "") or ""
        raise ConfigError(str(exc).splitlines()[0], str(key), line) from None
    lines = _key_lines(text)
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", section, lines.get((section, "")))
        values[section] = {}
        for key, value in parser.items(section):
            _check_key(section, key, lines.get((section, key)))
            values[section][key] = (value or "").strip()
    return Config(values, lines, path, text)


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, path)


def apply_overrides(cfg: Config, overrides: Sequence[str]) -> None:
    """``section.key=value`` assignments, validated against the schema."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        cfg.set(section.strip(), key.strip(), value.strip())


# -- builders ---------------------------------------------------------------


def _pairs(cfg: Config, section: str, key: str) -> Dict[str, str]:
    raw = cfg.get(section, key, "") or ""
    out = {}
    for tok in raw.replace(",", " ").split():
        name, sep, value = tok.rpartition(":")
        if not sep or not name:
            k, line = cfg._where(section, key)
            raise ConfigError(f"expected name:value entries, got {tok!r}", k, line)
        out[name] = value
    return out


def factors(cfg: Config) -> List[FlagFactor]:
    out = []
    for name, value in cfg.values.get("factors", {}).items():
        enable = disable = ""
        if value:
            parts = [p.strip() for p in value.split(",")]
            if len(parts) != 2 or not all(parts):
                raise ConfigError("expected '<enable spelling>, <disable spelling>'", f"factors.{name}",
                                  cfg.lines.get(("factors", name)))
            enable, disable = parts
        try:
            out.append(FlagFactor(name, enable, disable))
        except CampaignError as exc:
            raise ConfigError(str(exc), f"factors.{name}", cfg.lines.get(("factors", name))) from None
    return out


def device_model(cfg: Config) -> DeviceModel:
    def floats(key):
        pairs = _pairs(cfg, "backend", key)
        try:
            return {k: float(v) for k, v in pairs.items()}
        except ValueError:
            k, line = cfg._where("backend", key)
            raise ConfigError("effects must be numbers", k, line) from None

    levels = {}
    for tok in (cfg.get("backend", "levels", "") or "").replace(",", " ").split():
        parts = tok.split(":")
        try:
            name, t_scale, p_scale = parts[0], float(parts[1]), float(parts[2])
        except (IndexError, ValueError):
            k, line = cfg._where("backend", "levels")
            raise ConfigError(f"expected level:time_scale:power_scale, got {tok!r}", k, line) from None
        levels[name if name.startswith("-") else f"-{name}"] = (t_scale, p_scale)
    seed = cfg.typed("backend", "seed", int)
    if seed is None:
        seed = cfg.typed("campaign", "seed", int, 0)
    try:
        return DeviceModel(
            base_power=cfg.typed("backend", "base_power", float, 1.0),
            base_time=cfg.typed("backend", "base_time", float, 0.1),
            power_effects=floats("power_effects"),
            time_effects=floats("time_effects"),
            levels=levels,
            noise=cfg.typed("backend", "noise", float, 0.0),
            run_noise=cfg.typed("backend", "run_noise", float, 0.0),
            sample_period=cfg.typed("backend", "sample_period", float, 1e-3),
            jitter=cfg.typed("backend", "jitter", float, 0.0),
            seed=seed,
        )
    except MeasureError as exc:
        raise ConfigError(str(exc), "backend") from None


def backend_kind(cfg: Config) -> str:
    kind = cfg.get("backend", "kind", "simulated") or "simulated"
    if kind not in BACKEND_KINDS:
        k, line = cfg._where("backend", "kind")
        raise ConfigError(f"unknown backend {kind!r}; expected one of {', '.join(BACKEND_KINDS)}", k, line)
    return kind


def build_backend(cfg: Config, flags: Sequence[FlagFactor] = ()) -> Backend:
    kind = backend_kind(cfg)
    timeout = cfg.typed("backend", "timeout", float)
    if kind == "simulated":
        return SimulatedBackend(device_model(cfg), {f.name: (f.enable, f.disable) for f in flags})
    if kind == "wall-clock":
        return WallClockBackend(cfg.typed("backend", "nominal_power", float), timeout)
    if kind == "external":
        return ExternalCommandBackend(cfg.get("backend", "command") or "{cmd}", timeout)
    trace = cfg.get("backend", "trace")
    if not trace:
        k, line = cfg._where("backend", "trace")
        raise ConfigError("trace-file backend needs a trace path template", k, line)
    window = None
    if cfg.get("backend", "window"):
        try:
            a, b = (float(x) for x in cfg.get("backend", "window").split())
        except ValueError:
            k, line = cfg._where("backend", "window")
            raise ConfigError("window must be two numbers: start end", k, line) from None
        window = (a, b)
    return TraceFileBackend(trace, window, timeout=timeout)


def build_compiler(cfg: Config, cache_dir, simulated: bool = False) -> Compiler:
    command = cfg.get("compiler", "command", "") or ""
    if simulated or command == "simulated":
        crash = (cfg.get("backend", "crash_flags", "") or "").split()
        return SimulatedCompiler(cache_dir, (lambda flags: any(c in flags.split() for c in crash)) if crash else None)
    if not command:
        raise ConfigError("a compiler command template is required", "compiler.command")
    sources = [str((cfg.base_dir / s)) for s in shlex.split(cfg.get("benchmark", "sources", "") or "")]
    return CommandCompiler(command, sources, cache_dir, cfg.typed("compiler", "timeout", float))


def experiment(cfg: Config, simulated: bool = False) -> Experiment:
    sources = [str(cfg.base_dir / s) for s in shlex.split(cfg.get("benchmark", "sources", "") or "")]
    flags = factors(cfg)
    backend = build_backend(cfg, flags) if not simulated else SimulatedBackend(
        device_model(cfg), {f.name: (f.enable, f.disable) for f in flags})
    compiler = "simulated" if simulated else (cfg.get("compiler", "command", "") or "")
    try:
        return Experiment(
            compiler=compiler,
            run=cfg.get("benchmark", "run", "{bin}") or "{bin}",
            sources=tuple(sources),
            base_level=cfg.get("campaign", "base_level", "O1") or "O1",
            factors=tuple(flags),
            replicates=cfg.typed("campaign", "replicates", int, 8),
            backend=backend.describe(),
            seed=cfg.typed("campaign", "seed", int, 0),
            order=cfg.get("campaign", "order", "random") or "random",
            lto_flag=cfg.get("compiler", "lto_flag", "-flto") or "-flto",
            jobs=cfg.typed("compiler", "jobs", int, 1),
            name=cfg.get("benchmark", "name", "benchmark") or "benchmark",
        )
    except CampaignError as exc:
        raise ConfigError(str(exc)) from None


def flag_subset(cfg: Config, key: str) -> List[FlagFactor]:
    flags = factors(cfg)
    wanted = (cfg.get("campaign", key, "") or "").split()
    if not wanted:
        return flags
    by_name = {f.name: f for f in flags}
    missing = [w for w in wanted if w not in by_name]
    if missing:
        k, line = cfg._where("campaign", key)
        raise ConfigError(f"unknown flags {', '.join(missing)}", k, line)
    return [by_name[w] for w in wanted]
