"""Command-line front end: estimate, simulate, sweep, power and bounds runs.

Settings come from built-in defaults, then an optional JSON config (flat keys
named like the long flags, dashes as underscores), then explicit flags. Every
run writes its tables plus a ``manifest.json`` that can be passed back through
``--config`` to reproduce the tables exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
import traceback
from pathlib import Path

from . import __version__
from .errors import ConfigError, PathDidError
from .estimators import METHODS, estimate_many, partial_id_bounds
from .panel_data import EstimandSpec, TreatmentPath, load_csv
from .simulation import (SCENARIOS, DgpConfig, power_curve, run_monte_carlo,
                         sweep_misspecification, sweep_missingness)

COMMANDS = ("estimate", "simulate", "sweep", "power", "bounds")
OUTPUT_ENV = "PATHDID_OUTPUT_DIR"

DEFAULTS = {
    "estimator": "R,DR,OR,IPW",
    "pdatt": "11,10,01",
    "level": 0.95,
    "seed": 0,
    "threads": None,
    "output_dir": "pathdid-output",
    "format": "csv,json",
    # data
    "input": None,
    "d1_col": "d1",
    "d2_col": "d2",
    "delta_y_col": None,
    "y0_col": None,
    "y2_col": None,
    "s_col": None,
    "x_cols": None,
    "y_min": None,
    # design
    "scenario": None,
    "n": 10_000,
    "eta_p": 1.0,
    "eta_m": 1.0,
    "eta_o": 1.0,
    "c": 0.0,
    "reps": 1000,
    "with_seb": False,
    "kind": "c",
    "grid": None,
    "n_large": 100_000,
}

_SWEEP_GRIDS = {"c": [-5.0 + 0.5 * i for i in range(21)],
                "eta_m": [i / 10 for i in range(11)]}
_POWER_GRID = [-0.3, -0.2, -0.1, -0.05, 0.0, 0.05, 0.1, 0.2, 0.3]


# ---------------------------------------------------------------------------
# Argument parsing

def _common(p):
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON config or a manifest from an earlier run")
    p.add_argument("--output-dir", default=S, help=f"output directory (env {OUTPUT_ENV})")
    p.add_argument("--format", default=S, help="comma list of csv,json")
    p.add_argument("--estimator", default=S, help=f"comma list from {','.join(METHODS)}")
    p.add_argument("--pdatt", default=S, help="comma list of paths among 11,10,01")
    p.add_argument("--level", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--threads", type=int, default=S, help="worker processes (default: all cores)")


def _data_flags(p):
    S = argparse.SUPPRESS
    p.add_argument("--input", default=S, help="CSV file")
    p.add_argument("--d1-col", default=S)
    p.add_argument("--d2-col", default=S)
    p.add_argument("--delta-y-col", default=S)
    p.add_argument("--y0-col", default=S)
    p.add_argument("--y2-col", default=S)
    p.add_argument("--s-col", default=S)
    p.add_argument("--x-cols", default=S, help="comma list; default is every unmapped column")


def _design_flags(p):
    S = argparse.SUPPRESS
    p.add_argument("--scenario", default=S,
                   help=f"misspecification cell among {','.join(SCENARIOS)}; sets eta_p, eta_m, eta_o")
    p.add_argument("--n", type=int, default=S)
    p.add_argument("--eta-p", type=float, default=S)
    p.add_argument("--eta-m", type=float, default=S)
    p.add_argument("--eta-o", type=float, default=S)
    p.add_argument("--c", type=float, default=S, help="missingness intercept")
    p.add_argument("--reps", type=int, default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathdid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pathdid {__version__}")
    _common(parser)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("estimate", help="estimate PDATTs from a CSV panel")
    _common(p)
    _data_flags(p)

    p = sub.add_parser("bounds", help="partial-identification bounds from a CSV panel")
    _common(p)
    _data_flags(p)
    p.add_argument("--y-min", type=float, default=argparse.SUPPRESS,
                   help="lower bound of the outcome support")

    p = sub.add_parser("simulate", help="Monte Carlo bias, coverage and variance tables")
    _common(p)
    _design_flags(p)
    p.add_argument("--with-seb", action="store_true", default=argparse.SUPPRESS,
                   help="also report the efficiency-bound estimate")

    p = sub.add_parser("sweep", help="bias along a missingness or misspecification grid")
    _common(p)
    _design_flags(p)
    p.add_argument("--kind", choices=("c", "eta_m"), default=argparse.SUPPRESS)
    p.add_argument("--grid", default=argparse.SUPPRESS,
                   help="comma list of grid values (write --grid=-5,0,5 for negative leads)")
    p.add_argument("--n-large", type=int, default=argparse.SUPPRESS)

    p = sub.add_parser("power", help="rejection frequency of tau_11 = 0 along a grid of true effects")
    _common(p)
    _design_flags(p)
    p.add_argument("--grid", default=argparse.SUPPRESS, help="comma list of true tau_11 values")
    return parser


# ---------------------------------------------------------------------------
# Config resolution

def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    # A manifest nests the settings under "config".
    if "config" in raw and isinstance(raw["config"], dict):
        raw = raw["config"]
    cfg = {k.replace("-", "_"): v for k, v in raw.items()}
    unknown = set(cfg) - set(DEFAULTS) - {"command"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _csv_list(value, label, cast=str) -> list:
    if value is None:
        return []
    items = value if isinstance(value, (list, tuple)) else str(value).split(",")
    out = []
    for item in items:
        if isinstance(item, str):
            item = item.strip()
            if not item:
                continue
        try:
            out.append(cast(item))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad {label} entry {item!r}") from exc
    return out


def resolve_config(argv=None) -> dict:
    """Merge defaults, the JSON config and explicit flags (flags win)."""
    argv = list(sys.argv[1:] if argv is None else argv)
    if not set(argv) & set(COMMANDS):
        # Command-specific flags need the subparser; borrow the command named in the config.
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            command = _load_config(known.config).get("command")
            if command in COMMANDS:
                argv = [command] + argv
    ns = vars(build_parser().parse_args(argv))
    flag_cmd = ns.pop("command", None)
    file_cfg = _load_config(ns.pop("config")) if "config" in ns else {}
    cfg = dict(DEFAULTS)
    cfg.update(file_cfg)
    if os.environ.get(OUTPUT_ENV):
        cfg["output_dir"] = os.environ[OUTPUT_ENV]
    cfg.update(ns)
    command = flag_cmd or file_cfg.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"exactly one command required, one of {list(COMMANDS)}")
    cfg["command"] = command
    return _validate(cfg)


def _validate(cfg: dict) -> dict:
    cfg["estimator"] = _csv_list(cfg["estimator"], "estimator")
    bad = [m for m in cfg["estimator"] if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown estimator tag(s) {bad}; expected tags from {list(METHODS)}")
    if not cfg["estimator"]:
        raise ConfigError("no estimator selected")
    paths = _csv_list(cfg["pdatt"], "pdatt")
    try:
        cfg["pdatt"] = [TreatmentPath.parse(p).label for p in paths]
    except PathDidError as exc:
        raise ConfigError(str(exc)) from exc
    if not cfg["pdatt"]:
        raise ConfigError("no PDATT selected")
    cfg["format"] = _csv_list(cfg["format"], "format")
    if not cfg["format"] or set(cfg["format"]) - {"csv", "json"}:
        raise ConfigError(f"format must be a subset of csv,json, got {cfg['format']}")
    if not 0.0 < float(cfg["level"]) < 1.0:
        raise ConfigError(f"level must lie in (0,1), got {cfg['level']}")
    if cfg["threads"] is not None and int(cfg["threads"]) < 1:
        raise ConfigError("threads must be at least 1")
    if cfg["command"] in ("estimate", "bounds"):
        if not cfg["input"]:
            raise ConfigError(f"{cfg['command']} needs --input")
        if not Path(cfg["input"]).is_file():
            raise ConfigError(f"input file not found: {cfg['input']}")
        # Stored absolute so a manifest replays from any working directory.
        cfg["input"] = str(Path(cfg["input"]).resolve())
        cfg["x_cols"] = _csv_list(cfg["x_cols"], "x_cols") or None
    if cfg["command"] == "bounds" and cfg["y_min"] is None:
        raise ConfigError("bounds needs --y-min")
    if cfg["scenario"] is not None:
        key = {k.lower(): k for k in SCENARIOS}.get(str(cfg["scenario"]).lower())
        if key is None:
            raise ConfigError(f"unknown scenario {cfg['scenario']!r}")
        cfg["scenario"] = key
        cfg.update(SCENARIOS[key])
    if cfg["command"] in ("sweep", "power"):
        default = _POWER_GRID if cfg["command"] == "power" else _SWEEP_GRIDS[cfg["kind"]]
        cfg["grid"] = _csv_list(cfg["grid"], "grid", float) or list(default)
    for key in ("n", "reps", "n_large", "seed"):
        if int(cfg[key]) < (0 if key == "seed" else 1):
            raise ConfigError(f"{key} must be positive")
    return cfg


# ---------------------------------------------------------------------------
# Output

def _fmt(v):
    if isinstance(v, float):
        return "NaN" if math.isnan(v) else repr(v)
    return v


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "item"):
        return v.item()
    return v


def _write_table(rows: list, out_dir: Path, stem: str, formats) -> list:
    written = []
    if "csv" in formats:
        path = out_dir / f"{stem}.csv"
        cols = list(rows[0]) if rows else []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in rows:
                w.writerow([_fmt(row[c]) for c in cols])
        written.append(path.name)
    if "json" in formats:
        path = out_dir / f"{stem}.json"
        path.write_text(json.dumps(_jsonable(rows), indent=1, sort_keys=False) + "\n")
        written.append(path.name)
    return written


def _prepare_output(cfg) -> Path:
    out = Path(cfg["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc.strerror}") from exc
    return out


# ---------------------------------------------------------------------------
# Commands

def _load(cfg):
    schema = {"d1": cfg["d1_col"], "d2": cfg["d2_col"]}
    for key in ("delta_y", "y0", "y2", "s"):
        if cfg[f"{key}_col"]:
            schema[key] = cfg[f"{key}_col"]
    if cfg["x_cols"]:
        schema["x"] = list(cfg["x_cols"])
    return load_csv(cfg["input"], schema)


def _dgp(cfg) -> DgpConfig:
    return DgpConfig(n=int(cfg["n"]), eta_p=float(cfg["eta_p"]), eta_m=float(cfg["eta_m"]),
                     eta_o=float(cfg["eta_o"]), c=float(cfg["c"]), seed=int(cfg["seed"]))


def cmd_estimate(cfg) -> dict:
    sample = _load(cfg)
    specs = [EstimandSpec(TreatmentPath.parse(p), level=float(cfg["level"])) for p in cfg["pdatt"]]
    rows = []
    for e in estimate_many(sample, specs, cfg["estimator"]):
        row = e.row()
        row["n"] = sample.n
        row["diagnostics"] = json.dumps(_jsonable(e.diagnostics), sort_keys=True)
        rows.append(row)
    return {"estimates": rows}


def cmd_bounds(cfg) -> dict:
    b = partial_id_bounds(_load(cfg), float(cfg["y_min"]))
    return {"bounds": [{"lower": b.lower, "upper": b.upper, "y_min": b.y_min}]}


def cmd_simulate(cfg) -> dict:
    res = run_monte_carlo(_dgp(cfg), int(cfg["reps"]), cfg["estimator"], cfg["pdatt"],
                          float(cfg["level"]), cfg["threads"], bool(cfg["with_seb"]))
    return {"simulation": res.rows(cfg["scenario"] or "custom")}


def cmd_sweep(cfg) -> dict:
    fn = sweep_missingness if cfg["kind"] == "c" else sweep_misspecification
    rows = fn(cfg["grid"], _dgp(cfg), int(cfg["n_large"]), cfg["estimator"], cfg["pdatt"],
              cfg["threads"])
    return {f"sweep_{cfg['kind']}": rows}


def cmd_power(cfg) -> dict:
    curve = power_curve(_dgp(cfg), cfg["grid"], int(cfg["reps"]), cfg["estimator"],
                        float(cfg["level"]), cfg["threads"])
    return {"power": curve.rows(cfg["scenario"] or "custom")}


_HANDLERS = {"estimate": cmd_estimate, "bounds": cmd_bounds, "simulate": cmd_simulate,
             "sweep": cmd_sweep, "power": cmd_power}


def run(cfg: dict) -> dict:
    """Execute a resolved config; returns the manifest that was written."""
    out = _prepare_output(cfg)
    start = time.perf_counter()
    tables = _HANDLERS[cfg["command"]](cfg)
    files = []
    for stem, rows in tables.items():
        files += _write_table(rows, out, stem, cfg["format"])
    manifest = {"engine": "pathdid", "version": __version__, "command": cfg["command"],
                "seed": cfg["seed"], "wall_time_s": time.perf_counter() - start,
                "outputs": files, "config": _jsonable(cfg)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def _error_origin(exc) -> str:
    mod = getattr(exc, "module", None)
    for frame in reversed(traceback.extract_tb(exc.__traceback__)):
        name = Path(frame.filename).stem
        if Path(frame.filename).parent.name == "pathdid" and name != "cli":
            return name
    return mod or "cli"


def main(argv=None) -> int:
    try:
        cfg = resolve_config(argv)
        manifest = run(cfg)
    except PathDidError as exc:
        err = {"error": type(exc).__name__, "module": _error_origin(exc), "cause": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    print(json.dumps({"outputs": manifest["outputs"], "output_dir": cfg["output_dir"],
                      "wall_time_s": round(manifest["wall_time_s"], 3)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
