"""Command-line entry point: ``flagdoe <subcommand> --config exp.ini --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import __version__
from . import config as cfgmod
from .design import (DesignError, Resolution, alias_structure, format_aliases, generate_fractional, read_csv,
                     write_csv)
from .measure import SimulatedBackend
from .orchestrate import (CampaignError, CampaignPaused, ResultStore, exhaustive_plan, execute_campaign,
                          expand_level, level_sweep, one_at_a_time, plan_flag_sets, plan_runs,
                          collect_responses, run_means_by_levels, summarize_sweep, sweep_plan)
from .report import (ReportBundle, render_exhaustive, render_main_effects, render_sweep, render_toggles,
                     render_top_flags, verify_exhaustive)
from .stats import StatsError, TestConfig, analyze_design, effects_to_csv, rank_top_flags

log = logging.getLogger("flagdoe")

EXIT_OK, EXIT_USER, EXIT_PAUSED = 0, 1, 2


class UserError(Exception):
    pass


# -- helpers ----------------------------------------------------------------


def _load(args) -> cfgmod.Config:
    if args.config:
        cfg = cfgmod.load_config(args.config)
    else:
        cfg = cfgmod.parse_config("")
    cfgmod.apply_overrides(cfg, args.set or [])
    if args.seed is not None:
        cfg.set("campaign", "seed", str(args.seed))
    if args.alpha is not None:
        cfg.set("campaign", "alpha", str(args.alpha))
    if args.metric is not None:
        cfg.set("campaign", "metric", args.metric)
    return cfg


def _require_config(args):
    if not args.config:
        raise UserError(f"'{args.command}' needs --config")


def _write_manifest(out: Path, args, cfg: cfgmod.Config, extra: Optional[dict] = None) -> None:
    manifest = {
        "subcommand": args.command,
        "tool": "flagdoe",
        "version": __version__,
        "config": str(args.config) if args.config else None,
        "config_digest": cfg.digest(),
        "seed": cfg.typed("campaign", "seed", int, 0),
        "overrides": list(args.set or []),
        "argv": sys.argv[1:],
        "written": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    manifest.update(extra or {})
    (out / f"manifest_{args.command}.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _test_config(cfg) -> TestConfig:
    try:
        return TestConfig(alpha=cfg.typed("campaign", "alpha", float, 0.05))
    except StatsError as exc:
        raise cfgmod.ConfigError(str(exc), "campaign.alpha") from None


def _metric(cfg) -> str:
    metric = cfg.get("campaign", "metric", "energy") or "energy"
    if metric not in ("energy", "time", "power"):
        raise cfgmod.ConfigError(f"unknown metric {metric!r}", "campaign.metric")
    return metric


def _build_design(cfg, n_factors: Optional[int] = None):
    flags = cfgmod.factors(cfg)
    n = n_factors if n_factors is not None else len(flags)
    if n < 1:
        raise UserError("no factors: list flags under [factors] or pass --n-factors")
    res = cfg.get("campaign", "resolution", "IV") or "IV"
    max_runs = cfg.typed("campaign", "max_runs", int, 256)
    d = generate_fractional(n, Resolution.parse(res), max_runs)
    if flags and len(flags) == n:
        d = d.renamed([f.name for f in flags])
    return d


def _campaign_parts(cfg, out: Path, simulated: bool):
    e = cfgmod.experiment(cfg, simulated=simulated)
    if simulated:
        backend = SimulatedBackend(cfgmod.device_model(cfg), {f.name: (f.enable, f.disable) for f in e.factors})
    else:
        backend = cfgmod.build_backend(cfg, e.factors)
    compiler = cfgmod.build_compiler(cfg, out / "cache", simulated=simulated)
    return e, backend, compiler


def _design_for_store(cfg, out: Path):
    path = out / "design.csv"
    if path.exists():
        return read_csv(path)
    return _build_design(cfg)


def _analyze(cfg, out: Path, metric: str):
    # only the flag strings matter here, so the simulated stand-ins are fine
    e = cfgmod.experiment(cfg, simulated=True)
    d = _design_for_store(cfg, out)
    plan = plan_runs(e, d)
    store = ResultStore(out / "results.jsonl")
    records = store.records()
    if not records:
        raise UserError(f"no records in {store.path}; run the campaign first")
    responses = collect_responses(plan, records, metric, match="flags")
    if not responses.available().any():
        raise UserError(f"no usable {metric} measurements in {store.path}")
    return d, analyze_design(d, responses, _test_config(cfg))


# -- subcommands ------------------------------------------------------------


def cmd_design(args, cfg, out):
    n = args.n_factors
    if args.resolution:
        cfg.set("campaign", "resolution", args.resolution)
    if args.max_runs:
        cfg.set("campaign", "max_runs", str(args.max_runs))
    d = _build_design(cfg, n)
    write_csv(d, out / "design.csv")
    lines = format_aliases(d, alias_structure(d, 2))
    (out / "aliases.txt").write_text("\n".join(lines) + "\n")
    print(f"{d.n_runs} runs x {d.n_factors} factors, resolution {d.resolution.name}")
    print("\n".join(lines))
    return EXIT_OK, {"runs": d.n_runs, "resolution": d.resolution.name}


def _run_campaign(cfg, out, simulated):
    e, backend, compiler = _campaign_parts(cfg, out, simulated)
    d = _design_for_store(cfg, out)
    if d.n_factors != len(e.factors):
        raise UserError(f"{out / 'design.csv'} has {d.n_factors} factors but the config lists {len(e.factors)}")
    if not (out / "design.csv").exists():
        write_csv(d, out / "design.csv")
    plan = plan_runs(e, d)
    store = ResultStore(out / "results.jsonl")
    res = execute_campaign(e, plan, store, backend, compiler)
    print(f"{res.added} new records ({res.executed} executions, {res.compiled} compilations); "
          f"{len(res.records)} in store")
    return res


def cmd_run(args, cfg, out):
    _require_config(args)
    res = _run_campaign(cfg, out, simulated=False)
    return EXIT_OK, {"added": res.added, "executed": res.executed}


def _write_effects(cfg, out, d, estimates, metric):
    tc = _test_config(cfg)
    (out / f"effects_{metric}.csv").write_text(effects_to_csv(estimates, tc.alpha, metric))
    sig = [e.label for e in estimates if e.significant]
    (out / "significant.txt").write_text("".join(f"{s}\n" for s in sig))
    table = render_main_effects(estimates if metric != "time" else [], estimates if metric == "time" else None, tc)
    print(table.text(), end="")
    return sig


def cmd_analyze(args, cfg, out):
    _require_config(args)
    metric = _metric(cfg)
    d, est = _analyze(cfg, out, metric)
    sig = _write_effects(cfg, out, d, est, metric)
    return EXIT_OK, {"metric": metric, "significant": sig}


def cmd_simulate(args, cfg, out):
    _require_config(args)
    cfg.set("backend", "kind", "simulated")
    _run_campaign(cfg, out, simulated=True)
    metric = _metric(cfg)
    d, est = _analyze(cfg, out, metric)
    sig = _write_effects(cfg, out, d, est, metric)
    return EXIT_OK, {"metric": metric, "significant": sig}


def cmd_sweep(args, cfg, out):
    _require_config(args)
    levels = (cfg.get("campaign", "levels", "") or "O0 O1 O2 O3 O4 Os").split()
    e, backend, compiler = _campaign_parts(cfg, out, simulated=False)
    results = level_sweep(e, levels, ResultStore(out / "sweep.jsonl"), backend, compiler)
    text = render_sweep(results)
    (out / "sweep.txt").write_text(text)
    print(text, end="")
    return EXIT_OK, {"levels": levels}


def cmd_oneshot(args, cfg, out):
    _require_config(args)
    e, backend, compiler = _campaign_parts(cfg, out, simulated=False)
    flags = cfgmod.flag_subset(cfg, "oneshot_flags")
    results, _ = one_at_a_time(e, e.base_level, flags, ResultStore(out / "oneshot.jsonl"), backend, compiler)
    text = render_toggles(results, expand_level(e.base_level, e.lto_flag))
    (out / "oneshot.txt").write_text(text)
    print(text, end="")
    return EXIT_OK, {"flags": [f.name for f in flags]}


def _exhaustive_table(cfg, out, e, backend=None, compiler=None):
    flags = cfgmod.flag_subset(cfg, "exhaustive_flags")
    d, plan = exhaustive_plan(e, e.base_level, flags)
    base_flags = expand_level(e.base_level, e.lto_flag)
    base_plan = plan_flag_sets(e, [base_flags], ["base"])
    store = ResultStore(out / "exhaustive.jsonl")
    if backend is not None:
        execute_campaign(e, base_plan, store, backend, compiler)
        execute_campaign(e, plan, store, backend, compiler)
    records = store.records()
    base = collect_responses(base_plan, records, "energy", match="flags").samples[0]
    if base is None:
        raise UserError(f"base level {base_flags} has no energy measurement")
    values = run_means_by_levels(plan, records, "energy", match="flags")
    table = render_exhaustive(values, float(base.mean()), [f.name for f in flags], base_flags)
    problems = verify_exhaustive(table, values)
    if problems:
        raise UserError("rendered exhaustive table does not match the store: " + "; ".join(problems))
    return table


def cmd_exhaustive(args, cfg, out):
    _require_config(args)
    e, backend, compiler = _campaign_parts(cfg, out, simulated=False)
    table = _exhaustive_table(cfg, out, e, backend, compiler)
    (out / "exhaustive.txt").write_text(table.text())
    (out / "exhaustive.csv").write_text(table.csv())
    print(table.text(), end="")
    return EXIT_OK, {"rows": len(table.rows), "missing": len(table.missing)}


def cmd_report(args, cfg, out):
    _require_config(args)
    tc = _test_config(cfg)
    bundle = ReportBundle(("energy", "time", "power"), metadata={"alpha": tc.alpha, "test": "mann-whitney two-sided"})
    e = cfgmod.experiment(cfg, simulated=True)
    notes = []
    if (out / "results.jsonl").exists():
        d, energy = _analyze(cfg, out, "energy")
        _, timing = _analyze(cfg, out, "time")
        table = render_main_effects(energy, timing, tc)
        bundle.tables.update({"main_effects.txt": table.text(), "main_effects.csv": table.csv(),
                              "main_effects_plot.csv": table.plot_data()})
        top = cfg.typed("campaign", "top", int, 3)
        ranked = [x.label for x in rank_top_flags(energy, top)]
        tf = render_top_flags({(e.name, e.base_level): ranked}, depth=top)
        bundle.tables.update({"top_flags.txt": tf.text(), "top_flags.csv": tf.csv()})
        bundle.metadata["design_resolution"] = d.resolution.name if d.resolution else None
        notes += sorted({x.note for x in energy if x.note})
    if (out / "sweep.jsonl").exists():
        levels = (cfg.get("campaign", "levels", "") or "O0 O1 O2 O3 O4 Os").split()
        results = summarize_sweep(sweep_plan(e, levels), ResultStore(out / "sweep.jsonl").records(), "flags")
        bundle.tables["sweep.txt"] = render_sweep(results)
    if (out / "exhaustive.jsonl").exists():
        table = _exhaustive_table(cfg, out, e)
        bundle.tables.update({"exhaustive.txt": table.text(), "exhaustive.csv": table.csv()})
    if not bundle.tables:
        raise UserError(f"nothing to report in {out}")
    bundle.metadata["seed"] = e.seed
    bundle.metadata["unavailable_runs"] = notes
    written = bundle.write(out / "report")
    for p in written:
        print(p)
    return EXIT_OK, {"files": [p.name for p in written]}


COMMANDS = {
    "design": cmd_design,
    "run": cmd_run,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
    "oneshot": cmd_oneshot,
    "exhaustive": cmd_exhaustive,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flagdoe", description=__doc__)
    parser.add_argument("--version", action="version", version=f"flagdoe {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment INI file")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="override campaign.seed")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--metric", choices=("energy", "time", "power"))
    common.add_argument("--alpha", type=float)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "design":
            p.add_argument("--n-factors", type=int, help="factor count (default: flags under [factors])")
            p.add_argument("--resolution", help="III, IV, V or FULL")
            p.add_argument("--max-runs", type=int)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        status, extra = COMMANDS[args.command](args, cfg, out)
        _write_manifest(out, args, cfg, extra)
        return status
    except CampaignPaused as exc:
        print(f"paused: {exc}; rerun the same command to resume", file=sys.stderr)
        try:
            _write_manifest(args.out, args, cfg, {"paused": True, "added": exc.added})
        except OSError:
            pass
        return EXIT_PAUSED
    except (cfgmod.ConfigError, DesignError, CampaignError, StatsError, UserError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
