"""Command-line experiment runner.

Subcommands::

    prunesim gen-pet   --means means.json --seed 1 --out pet.json
    prunesim gen-trace --pet pet.json --tasks 1200 --pattern spiky --out trace.csv
    prunesim run       config.json --trials 30 --out results/
    prunesim sweep     config.json --axis engine.heuristic --values mm msd pam

A run configuration is a JSON object; any field can be overridden from the
command line with ``--set engine.heuristic=mm``.  Trial ``i`` uses seed
``seed + i`` for both the trace and the engine, and every sweep point reuses
the same trial seeds so that differences between points are paired.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from functools import lru_cache
from pathlib import Path

from . import __version__
from .engine import ConfigError, SimConfig, Simulator
from .merger import MergeConfig
from .metrics import MachineRates, mean_ci, reports_to_csv
from .pruner import PrunerConfig
from .workload import (
    PATTERNS,
    ArrivalConfig,
    WorkloadError,
    default_means,
    generate_pet,
    generate_trace,
    load_means,
    load_pet,
    load_trace,
    pet_to_json,
    save_pet,
    trace_to_csv,
)

log = logging.getLogger("prunesim")

DEFAULT_CONFIG = {
    "pet": None,
    "means": None,
    "pet_seed": 1,
    "trace": None,
    "workload": {},
    "engine": {},
    "pruner": None,
    "merger": None,
    "rates": None,
    "compare": None,
    "trials": 30,
    "seed": 0,
}

# nested blocks and the dataclass whose fields they may set
BLOCKS = {
    "workload": ArrivalConfig,
    "engine": SimConfig,
    "pruner": PrunerConfig,
    "merger": MergeConfig,
}
ENGINE_EXCLUDED = {"pruning", "merging", "seed", "log_events"}
# alternative field names accepted in the pruner block
PRUNER_ALIASES = {"lambda": "lam", "schmitt_on": "on_level"}

# headline metrics reported first in summaries
HEADLINE = ("robustness", "deadline_miss_rate", "makespan", "fairness_std", "cost_per_ontime", "energy_per_ontime")


# -- configuration -----------------------------------------------------------------


def _block_fields(name: str) -> set[str]:
    names = {f.name for f in fields(BLOCKS[name])}
    if name == "engine":
        names -= ENGINE_EXCLUDED
    if name == "workload":
        names.discard("seed")
    if name == "pruner":
        names |= set(PRUNER_ALIASES)
    return names


def parse_value(text: str):
    """JSON literal if it parses, otherwise the bare string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def check_path(path: str) -> None:
    parts = path.split(".")
    if parts[0] not in DEFAULT_CONFIG:
        raise ConfigError(f"unknown config field {path!r}")
    if parts[0] in BLOCKS and len(parts) > 1:
        if len(parts) != 2 or parts[1] not in _block_fields(parts[0]):
            raise ConfigError(f"unknown config field {path!r}")
    elif len(parts) > 1 and parts[0] != "compare":
        raise ConfigError(f"unknown config field {path!r}")


def set_path(doc: dict, path: str, value) -> None:
    check_path(path)
    parts = path.split(".")
    if parts[0] == "compare" and len(parts) > 1:
        doc["compare"] = dict(doc.get("compare") or {})
        doc["compare"][".".join(parts[1:])] = value
        return
    node = doc
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def load_config(path: str | None, overrides: list[str] = ()) -> dict:
    doc = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        for key, value in user.items():
            if key in BLOCKS and isinstance(value, dict):
                for sub, v in value.items():
                    check_path(f"{key}.{sub}")
            elif key not in DEFAULT_CONFIG:
                check_path(key)
            doc[key] = copy.deepcopy(value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, _, raw = item.partition("=")
        set_path(doc, key.strip(), parse_value(raw))
    validate(doc)
    return doc


def validate(doc: dict) -> None:
    """Check the schema eagerly so a bad field fails before any trial runs."""
    if not isinstance(doc["trials"], int) or doc["trials"] < 1:
        raise ConfigError("trials must be an integer >= 1")
    if not isinstance(doc["seed"], int):
        raise ConfigError("seed must be an integer")
    for key in ("pet", "means", "trace", "rates"):
        if doc[key] is not None and not Path(doc[key]).is_file():
            raise ConfigError(f"{key}: file not found: {doc[key]}")
    if doc["compare"] is not None:
        if not isinstance(doc["compare"], dict):
            raise ConfigError("compare must map dotted fields to values")
        for k in doc["compare"]:
            if k.split(".")[0] in ("trials", "seed", "compare"):
                raise ConfigError(f"compare cannot change {k!r}")
            check_path(k)
    build_sim_config(doc, 0)
    build_arrival(doc, 0)
    if doc["compare"]:
        validate_arm = arm(doc, doc["compare"])
        build_sim_config(validate_arm, 0)
        build_arrival(validate_arm, 0)


def _make(name: str, cls, kwargs: dict):
    if not isinstance(kwargs, dict):
        raise ConfigError(f"{name} must be an object or null")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def build_sim_config(doc: dict, seed: int) -> SimConfig:
    eng = dict(doc["engine"] or {})
    bad = set(eng) - _block_fields("engine")
    if bad:
        raise ConfigError(f"unknown config field 'engine.{sorted(bad)[0]}'")
    pr = None
    if doc["pruner"] is not None:
        if not isinstance(doc["pruner"], dict):
            raise ConfigError("pruner must be an object or null")
        pr = _make("pruner", PrunerConfig, {PRUNER_ALIASES.get(k, k): v for k, v in doc["pruner"].items()})
    mg = _make("merger", MergeConfig, doc["merger"]) if doc["merger"] is not None else None
    return _make("engine", SimConfig, {**eng, "pruning": pr, "merging": mg, "seed": seed})


def build_arrival(doc: dict, seed: int) -> ArrivalConfig:
    wl = dict(doc["workload"] or {})
    if "beta_range" in wl:
        wl["beta_range"] = tuple(wl["beta_range"])
    pattern = wl.pop("pattern", "spiky")
    presets = {"spiky": ArrivalConfig.spiky, "basehigh": ArrivalConfig.base_high}
    if pattern not in presets:
        return _make("workload", ArrivalConfig, {**wl, "pattern": pattern, "seed": seed})
    return _make("workload", presets[pattern], {**wl, "seed": seed})


def arm(doc: dict, overrides: dict) -> dict:
    out = copy.deepcopy(doc)
    out["compare"] = None
    for k, v in overrides.items():
        set_path(out, k, v)
    return out


def config_hash(doc: dict) -> str:
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- trials ------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _pet(pet_path, means_path, pet_seed):
    if pet_path is not None:
        return load_pet(pet_path)
    tt, mt, means = load_means(means_path) if means_path else default_means()
    return generate_pet(means, tt, mt, seed=pet_seed)


def run_trial(doc: dict, seed: int) -> dict:
    pet = _pet(doc["pet"], doc["means"], doc["pet_seed"])
    if doc["trace"] is not None:
        trace = load_trace(doc["trace"], n_types=pet.shape[0])
    else:
        trace = generate_trace(build_arrival(doc, seed), pet)
    rates = MachineRates.load(doc["rates"]) if doc["rates"] else None
    sim = Simulator(build_sim_config(doc, seed), trace, pet, rates)
    rep = sim.run()
    row = {"seed": seed}
    row.update(rep.flat())
    row["mapping_time"] = sim.mapping_time
    return row


def _trial_pair(args) -> dict:
    doc, seed = args
    row = run_trial(doc, seed)
    if doc["compare"]:
        other = run_trial(arm(doc, doc["compare"]), seed)
        for k in HEADLINE:
            a, b = row.get(k), other.get(k)
            if a is not None and b is not None:
                row[f"delta_{k}"] = a - b
    return row


def run_trials(doc: dict, jobs: int = 1, timing: bool = False) -> list[dict]:
    seeds = [doc["seed"] + i for i in range(doc["trials"])]
    work = [(doc, s) for s in seeds]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_trial_pair, work))
    else:
        rows = [_trial_pair(w) for w in work]
    h = config_hash(doc)
    out = []
    for i, r in enumerate(rows):
        if not timing:
            r.pop("mapping_time", None)
        out.append({"trial": i, "config_hash": h, **r})
    return out


def _finite(v):
    return v if isinstance(v, (int, float)) and math.isfinite(v) else None


def aggregate(rows: list[dict], doc: dict) -> dict:
    metrics = {}
    keys = [k for k in rows[0] if k not in ("trial", "seed", "config_hash")]
    for k in keys:
        vals = [r[k] for r in rows if isinstance(r.get(k), (int, float))]
        if len(vals) != len(rows):
            continue
        m, lo, hi = mean_ci(vals)
        metrics[k] = {"mean": _finite(m), "ci_low": _finite(lo), "ci_high": _finite(hi)}
    return {
        "version": __version__,
        "config_hash": config_hash(doc),
        "seed": doc["seed"],
        "trials": len(rows),
        # a single trial has no spread to estimate
        "ci_degenerate": len(rows) < 2,
        "metrics": metrics,
    }


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _summary(agg: dict, label: str = "") -> str:
    lines = []
    head = f"{label}  " if label else ""
    lines.append(f"{head}trials={agg['trials']} config={agg['config_hash']}")
    for k in HEADLINE + tuple(f"delta_{h}" for h in HEADLINE):
        s = agg["metrics"].get(k)
        if s is None or s["mean"] is None:
            continue
        lo = "nan" if s["ci_low"] is None else f"{s['ci_low']:.4g}"
        hi = "nan" if s["ci_high"] is None else f"{s['ci_high']:.4g}"
        lines.append(f"  {k:<22} {s['mean']:.4g}  [{lo}, {hi}]")
    return "\n".join(lines)


# -- subcommands -------------------------------------------------------------------


def cmd_gen_pet(args) -> int:
    if args.means:
        tt, mt, means = load_means(args.means)
    else:
        tt, mt, means = default_means()
    pet = generate_pet(means, tt, mt, shape_range=tuple(args.shape_range), samples=args.samples, seed=args.seed)
    if args.out:
        save_pet(pet, args.out)
        log.info("wrote %dx%d PET to %s", *pet.shape, args.out)
    else:
        sys.stdout.write(pet_to_json(pet) + "\n")
    return 0


def cmd_gen_trace(args) -> int:
    pet = load_pet(args.pet)
    kw = dict(total_tasks=args.tasks, span=args.span, seed=args.seed, group_size=args.group_size)
    if args.pattern == "spiky":
        cfg = ArrivalConfig.spiky(**kw)
    elif args.pattern == "basehigh":
        cfg = ArrivalConfig.base_high(**kw)
    else:
        cfg = ArrivalConfig(pattern=args.pattern, **kw)
    text = trace_to_csv(generate_trace(cfg, pet))
    if args.out:
        _write(Path(args.out), text)
        log.info("wrote %d tasks to %s", args.tasks, args.out)
    else:
        sys.stdout.write(text)
    return 0


def _apply_common(args) -> dict:
    overrides = list(args.set or [])
    if args.trials is not None:
        overrides.append(f"trials={args.trials}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def cmd_run(args) -> int:
    doc = _apply_common(args)
    rows = run_trials(doc, jobs=args.jobs, timing=args.timing)
    agg = aggregate(rows, doc)
    agg["config"] = doc
    agg_text = json.dumps(agg, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        _write(out / "trials.csv", reports_to_csv(rows))
        _write(out / "aggregate.json", agg_text + "\n")
        log.info("wrote %s and %s", out / "trials.csv", out / "aggregate.json")
    if args.quiet:
        sys.stdout.write(agg_text + "\n")
    else:
        print(_summary(agg))
    return 0


def cmd_sweep(args) -> int:
    doc = _apply_common(args)
    try:
        check_path(args.axis)
    except ConfigError:
        raise ConfigError(f"unknown sweep axis {args.axis!r}") from None
    if args.axis.split(".")[0] in ("trials", "seed", "compare"):
        raise ConfigError(f"cannot sweep over {args.axis!r}")
    points = []
    for raw in args.values:
        point = copy.deepcopy(doc)
        set_path(point, args.axis, parse_value(raw))
        validate(point)
        points.append((raw, point))
    all_rows, aggs = [], []
    for raw, point in points:
        rows = run_trials(point, jobs=args.jobs, timing=args.timing)
        agg = aggregate(rows, point)
        agg["axis"] = args.axis
        agg["value"] = parse_value(raw)
        aggs.append(agg)
        all_rows.extend({"point": raw, **r} for r in rows)
        if not args.quiet:
            print(_summary(agg, f"{args.axis}={raw}"))
    doc_out = {"axis": args.axis, "seed": doc["seed"], "config_hash": config_hash(doc), "points": aggs}
    text = json.dumps(doc_out, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        _write(out / "sweep.csv", reports_to_csv(all_rows))
        _write(out / "sweep.json", text + "\n")
        log.info("wrote %s and %s", out / "sweep.csv", out / "sweep.json")
    if args.quiet:
        sys.stdout.write(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prunesim", description="Task pruning and merging simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="machine-readable stdout only")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", dest="quiet_sub", action="store_true", help=argparse.SUPPRESS)

    g = sub.add_parser("gen-pet", parents=[common], help="sample a PET matrix from a means table")
    g.add_argument("--means", help="means JSON (default: bundled 12x8 table)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=500)
    g.add_argument("--shape-range", type=float, nargs=2, default=(1.0, 20.0), metavar=("LO", "HI"))
    g.add_argument("--out", help="output path (default: stdout)")
    g.set_defaults(func=cmd_gen_pet)

    t = sub.add_parser("gen-trace", parents=[common], help="generate a task arrival trace")
    t.add_argument("--pet", required=True, help="PET JSON used for deadlines")
    t.add_argument("--tasks", type=int, default=1200)
    t.add_argument("--span", type=int, default=6000)
    t.add_argument("--pattern", choices=PATTERNS, default="spiky")
    t.add_argument("--group-size", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", help="output CSV (default: stdout)")
    t.set_defaults(func=cmd_gen_trace)

    for name, func, text in (("run", cmd_run, "run repeated trials"), ("sweep", cmd_sweep, "sweep one config field")):
        r = sub.add_parser(name, parents=[common], help=text)
        r.add_argument("config", nargs="?", help="JSON run configuration")
        r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config field")
        r.add_argument("--trials", type=int)
        r.add_argument("--seed", type=int)
        r.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        r.add_argument("--timing", action="store_true", help="include wall-clock mapping time")
        r.add_argument("--out", help="output directory")
        if name == "sweep":
            r.add_argument("--axis", required=True, help="dotted config field to vary")
            r.add_argument("--values", nargs="+", required=True)
        r.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # the flag may also follow the subcommand
    args.quiet = args.quiet or getattr(args, "quiet_sub", False)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(name)s: %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"prunesim: error: file not found: {exc.filename}", file=sys.stderr)
    except (ConfigError, WorkloadError, ValueError) as exc:
        print(f"prunesim: error: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
