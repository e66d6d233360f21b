"""Command-line front end.

Each subcommand reads one JSON config file; relative paths inside it are
resolved against the config file's directory. Every output carries the
SHA-256 of the canonical config text.

Exit codes: 0 ok, 2 configuration error, 3 empty controller domain,
4 empty invariant region, 5 iteration budget exceeded, 6 safety violation,
7 unreadable or corrupt input file.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .abstraction import GridError
from .dynamics import (discretize, load_linear_plant, pendulum_safe_set, pendulum_system)
from .faults import FaultSpec, run_campaign, standard_faults, with_faults
from .geometry import HyperInterval, dumps as dumps_polytope, loads as loads_polytope
from .invariant_linear import (DEFAULT_P_MAX, BudgetExceeded, InvariantRegion, RegionEmpty,
                               compute_inv_region)
from .runtime import ConfigError, run_simulation
from .scenarios import HELICOPTER_X0, PENDULUM_X0, helicopter_scenario, pendulum_scenario
from .synthesis import ControllerFileError, load_controller, region_csv, save_controller, synthesize_grid

EXIT_OK, EXIT_CONFIG, EXIT_EMPTY_DOMAIN, EXIT_EMPTY_REGION, EXIT_BUDGET, EXIT_UNSAFE, EXIT_LOAD = 0, 2, 3, 4, 5, 6, 7
REGION_FORMAT = "rsimplex-region"
REGION_VERSION = 1
GRID_PLANTS = ("pendulum",)

logger = logging.getLogger("rsimplex")


class LoadError(Exception):
    pass


# --- config helpers -----------------------------------------------------------------

class Config:
    def __init__(self, data: dict, base: Path, digest: str):
        self.data = data
        self.base = base
        self.digest = digest

    @classmethod
    def read(cls, path) -> "Config":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return cls(data, path.resolve().parent, hashlib.sha256(canon.encode()).hexdigest())

    def get(self, key, default=None):
        return self.data.get(key, default)

    def require(self, key):
        if key not in self.data:
            raise ConfigError(f"config lacks required key {key!r}")
        return self.data[key]

    def number(self, key, default=None, positive=True) -> float:
        raw = self.get(key, default)
        if raw is None:
            raise ConfigError(f"config lacks required key {key!r}")
        try:
            val = float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be a number") from None
        if positive and not val > 0:
            raise ConfigError(f"{key} must be positive")
        return val

    def integer(self, key, default=None, minimum=1) -> int:
        raw = self.get(key, default)
        if not isinstance(raw, int) or isinstance(raw, bool) or raw < minimum:
            raise ConfigError(f"{key} must be an integer >= {minimum}")
        return raw

    def vector(self, key, n=None, default=None) -> np.ndarray:
        raw = self.get(key, default)
        try:
            v = np.asarray(raw, dtype=float).reshape(-1)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be a list of numbers") from None
        if n is not None and len(v) != n:
            raise ConfigError(f"{key} must have {n} entries")
        if not np.all(np.isfinite(v)):
            raise ConfigError(f"{key} must be finite")
        return v

    def input_path(self, key, section=None) -> Path:
        src = self.data if section is None else self.data.get(section, {})
        if key not in src:
            raise ConfigError(f"config lacks required path {key!r}")
        p = self.base / src[key]
        if not p.exists():
            raise ConfigError(f"referenced file {p} does not exist")
        return p

    def output_path(self, key, default) -> Path:
        out = self.data.get("output", {})
        p = self.base / out.get(key, default)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def _write(path: Path, text: str, digest: str, comment="#") -> None:
    path.write_text(f"{comment} config_sha256={digest}\n{text}")


def _plant_name(cfg: Config) -> str:
    return str(cfg.get("plant", "pendulum"))


def _linear_plant(cfg: Config):
    if "plant_file" in cfg.data:
        try:
            return load_linear_plant(cfg.input_path("plant_file"))
        except ValueError as exc:
            raise ConfigError(f"bad plant file: {exc}") from None
    name = _plant_name(cfg)
    if name != "helicopter":
        raise ConfigError(f"unknown linear plant {name!r} (use 'helicopter' or plant_file)")
    return load_linear_plant()


def _helicopter_plant(cfg: Config):
    if "plant_file" in cfg.data:
        return _linear_plant(cfg)
    return load_linear_plant()


def _schedule(cfg: Config, tau_c=None, tau_r=None):
    tc = cfg.number("tau_c", tau_c)
    tr = cfg.number("tau_r", tau_r)
    m = tr / tc
    if abs(m - round(m)) > 1e-9 or round(m) < 1:
        raise ConfigError("tau_r must be a positive integer multiple of tau_c")
    return tc, tr


# --- region files -------------------------------------------------------------------

def dumps_region(region: InvariantRegion, plant: str, tau_c: float, tau_r: float, digest: str) -> str:
    return json.dumps({
        "format": REGION_FORMAT, "version": REGION_VERSION, "plant": plant, "tau_c": tau_c,
        "tau_r": tau_r, "iterations": region.iterations, "config_sha256": digest,
        "polytope": dumps_polytope(region.polytope),
    }, indent=1, sort_keys=True) + "\n"


def load_region(path) -> tuple:
    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != REGION_FORMAT or doc.get("version") != REGION_VERSION:
            raise ValueError("not a region file of a supported version")
        poly = loads_polytope(doc["polytope"])
        region = InvariantRegion(poly, int(doc["iterations"]))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise LoadError(f"cannot load region file {path}: {exc}") from None
    return region, doc


def _load_controller(path):
    try:
        return load_controller(path)
    except (OSError, ControllerFileError) as exc:
        raise LoadError(f"cannot load controller {path}: {exc}") from None


def _check_meta(meta: dict, tau_c: float, tau_r: float, what: str):
    for key, val in (("tau_c", tau_c), ("tau_r", tau_r)):
        if key in meta and abs(float(meta[key]) - val) > 1e-12:
            raise ConfigError(f"{what} was built for {key}={meta[key]}, config asks for {val}")


# --- subcommands --------------------------------------------------------------------

def cmd_synth_grid(cfg: Config) -> int:
    plant = _plant_name(cfg)
    if plant not in GRID_PLANTS:
        raise ConfigError(f"no growth model for plant {plant!r}")
    sys_ = pendulum_system()
    s = pendulum_safe_set()
    tau_c, tau_r = _schedule(cfg, 0.05, 0.25)
    eta = cfg.vector("eta", 2)
    if np.any(eta <= 0):
        raise ConfigError("eta entries must be positive")
    n_inputs = cfg.integer("n_inputs", 17, minimum=2)
    bounds = None
    if "bounds" in cfg.data:
        b = cfg.get("bounds")
        if not isinstance(b, dict):
            raise ConfigError("bounds must be an object with lower and upper")
        lo = np.asarray(b.get("lower"), dtype=float)
        hi = np.asarray(b.get("upper"), dtype=float)
        if lo.shape != (2,) or hi.shape != (2,) or np.any(hi - lo <= 0):
            raise ConfigError("bounds must have positive width in every dimension")
        bounds = HyperInterval(lo, hi)
    ctl_path = cfg.output_path("controller", "controller.rsc")
    reg_path = cfg.output_path("region", "region.csv")
    stats_path = cfg.output_path("stats", "stats.json")
    syn = synthesize_grid(sys_, s, eta, tau_c, tau_r, n_inputs=n_inputs, bounds=bounds)
    rc = syn.controller
    rc.meta["config_sha256"] = cfg.digest
    rc.meta["eta"] = eta.tolist()
    save_controller(rc, ctl_path)
    _write(reg_path, region_csv(rc), cfg.digest)
    stats = dict(syn.stats, config_sha256=cfg.digest, plant=plant)
    stats_path.write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n")
    print(f"cells={stats['cells']} inputs={stats['inputs']} safe={stats['safe_cells']} "
          f"domain={stats['domain_cells']} wall_time={stats['wall_time_s']:.1f}s")
    if rc.controller.is_empty:
        died = rc.controller.death_order[:10].tolist()
        print(f"empty controller domain; first cells removed by the fixed point: {died}", file=sys.stderr)
        return EXIT_EMPTY_DOMAIN
    return EXIT_OK


def cmd_synth_linear(cfg: Config) -> int:
    plant = _linear_plant(cfg)
    tau_c, tau_r = _schedule(cfg, plant.tau_c, plant.tau_r)
    m = int(round(tau_r / tau_c))
    p_max = cfg.integer("p_max", DEFAULT_P_MAX)
    reg_path = cfg.output_path("region", "region.json")
    log_path = cfg.output_path("log", "iterations.csv")
    pair = discretize(plant.model, tau_c)
    t0 = time.perf_counter()
    log = []

    def on_iteration(entry):
        log.append(entry)
        print(f"iteration {entry.p}: {entry.rows} rows{' (empty)' if entry.empty else ''}", flush=True)

    def write_log():
        _write(log_path, "p,rows,empty\n" + "".join(f"{e.p},{e.rows},{int(e.empty)}\n" for e in log), cfg.digest)

    try:
        region = compute_inv_region(plant.adjusted_safe_set, plant.input_set, pair, m, p_max,
                                    on_iteration=on_iteration)
    except RegionEmpty as exc:
        write_log()
        print(f"EMPTY: {exc}", file=sys.stderr)
        return EXIT_EMPTY_REGION
    except BudgetExceeded as exc:
        write_log()
        print(f"BUDGET_EXCEEDED: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    write_log()
    reg_path.write_text(dumps_region(region, plant.name, tau_c, tau_r, cfg.digest))
    print(f"region: {region.n_rows} inequalities after {region.iterations} iterations "
          f"({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def _faults(cfg: Config, default=()):
    raw = cfg.get("faults", default)
    if raw == "standard":
        return standard_faults()
    if not isinstance(raw, list):
        raise ConfigError("faults must be a list or 'standard'")
    raw = list(raw)
    out = []
    for item in raw:
        if not isinstance(item, dict) or "kind" not in item:
            raise ConfigError("each fault needs a kind")
        try:
            out.append(FaultSpec(item["kind"], tuple(item.get("cycles", ())), item.get("period"),
                                 item.get("rate"), int(item.get("seed", cfg.get("seed", 0))),
                                 dict(item.get("params", {}))))
        except TypeError as exc:
            raise ConfigError(f"bad fault entry {item}: {exc}") from None
    return out


def _scenario(cfg: Config, plant: str, section: dict, n_cycles: int):
    """Build a Scenario for one plant from ``section`` (controller/region path, x0, epsilon)."""
    eps = section.get("epsilon", cfg.get("epsilon"))
    seed = int(cfg.get("seed", 0))
    if plant == "pendulum":
        if "controller" not in section:
            raise ConfigError("pendulum simulation needs a controller file")
        path = cfg.base / section["controller"]
        if not path.exists():
            raise ConfigError(f"referenced file {path} does not exist")
        rc = _load_controller(path)
        tau_c, tau_r = _schedule(cfg, rc.meta.get("tau_c", 0.05), rc.meta.get("tau_r", 0.25))
        _check_meta(rc.meta, tau_c, tau_r, "controller")
        x0 = section.get("x0", PENDULUM_X0)
        return pendulum_scenario(rc, n_cycles, x0, epsilon=eps, seed=seed)
    if plant != "helicopter":
        raise ConfigError(f"unknown plant {plant!r}")
    lin = _helicopter_plant(cfg)
    if "region" not in section:
        raise ConfigError("helicopter simulation needs a region file")
    path = cfg.base / section["region"]
    if not path.exists():
        raise ConfigError(f"referenced file {path} does not exist")
    region, doc = load_region(path)
    tau_c, tau_r = _schedule(cfg, doc.get("tau_c", lin.tau_c), doc.get("tau_r", lin.tau_r))
    _check_meta(doc, tau_c, tau_r, "region")
    x0 = section.get("x0", HELICOPTER_X0)
    return helicopter_scenario(lin, region, n_cycles, x0, epsilon=eps, seed=seed)


def cmd_simulate(cfg: Config) -> int:
    plant = _plant_name(cfg)
    n_cycles = cfg.integer("cycles", 200)
    sc = _scenario(cfg, plant, cfg.data, n_cycles)
    sc = with_faults(sc, _faults(cfg))
    trace_path = cfg.output_path("trace", "trace.csv")
    summary_path = cfg.output_path("summary", "summary.json")
    trace = run_simulation(sc)
    _write(trace_path, trace.to_csv(), cfg.digest)
    summary = {"config_sha256": cfg.digest, "plant": plant, "cycles": n_cycles,
               "decisions": trace.decisions(), "restarts": trace.n_restarts,
               "restart_times": trace.restart_times, "violations": trace.violations,
               "trace_sha256": trace.digest()}
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    d = summary["decisions"]
    print(f"cycles={n_cycles} MC={d['MC']} BC={d['BC']} restarts={trace.n_restarts} "
          f"violations={trace.violations}")
    return EXIT_UNSAFE if trace.violations else EXIT_OK


def cmd_campaign(cfg: Config) -> int:
    plants = cfg.require("plants")
    if not isinstance(plants, dict) or not plants:
        raise ConfigError("plants must map plant names to their controller sections")
    n_cycles = cfg.integer("cycles", 100)
    trials = cfg.integer("trials", 1)
    scenarios = {name: _scenario(cfg, name, sec, n_cycles) for name, sec in plants.items()}
    faults = _faults(cfg, default="standard")
    csv_path = cfg.output_path("csv", "campaign.csv")
    table_path = cfg.output_path("table", "campaign.txt")
    rep = run_campaign(scenarios, faults, trials,
                       progress=lambda r: print(f"{r.plant:<12}{r.fault:<22}restarts={r.restarts} "
                                                f"violations={r.violations}", flush=True))
    _write(csv_path, rep.to_csv(), cfg.digest)
    _write(table_path, rep.table(), cfg.digest)
    print(rep.table(), end="")
    print("restart pattern matches expectations" if rep.conforms else "restart pattern DIFFERS from expectations")
    return EXIT_UNSAFE if rep.total_violations else EXIT_OK


def cmd_export_region(cfg: Config) -> int:
    """Gnuplot-friendly columns for a grid controller, a region file or a trace."""
    out = cfg.output_path("data", "region.dat")
    lines = []
    if "controller" in cfg.data:
        rc = _load_controller(cfg.input_path("controller"))
        g = rc.grid
        dom = rc.controller.domain
        lines.append("# " + " ".join(f"x{i + 1}" for i in range(g.dim)) + " in_domain")
        for c, flag in zip(g.centers(), dom):
            lines.append(" ".join(repr(float(v)) for v in c) + f" {int(flag)}")
    elif "region" in cfg.data:
        region, _ = load_region(cfg.input_path("region"))
        p = region.polytope
        lines.append("# " + " ".join(f"a{i + 1}" for i in range(p.dim)) + " b   (rows of a x <= b)")
        for a, b in zip(p.a_mat, p.b_vec):
            lines.append(" ".join(repr(float(v)) for v in a) + f" {float(b)!r}")
    elif "trace" in cfg.data:
        rows = [ln for ln in cfg.input_path("trace").read_text().splitlines() if not ln.startswith("#")]
        if not rows:
            raise LoadError("trace file is empty")
        head = rows[0].split(",")
        keep = [i for i, h in enumerate(head) if h == "t" or h[:1] in "xu" and h[1:].isdigit()]
        lines.append("# " + " ".join(head[i] for i in keep))
        for row in rows[1:]:
            cells = row.split(",")
            lines.append(" ".join(cells[i] for i in keep))
    else:
        raise ConfigError("export-region needs one of controller, region or trace")
    _write(out, "\n".join(lines) + "\n", cfg.digest)
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {
    "synth-grid": cmd_synth_grid,
    "synth-linear": cmd_synth_linear,
    "simulate": cmd_simulate,
    "campaign": cmd_campaign,
    "export-region": cmd_export_region,
}


HELP = {
    "synth-grid": "grid abstraction and safety controller for the pendulum",
    "synth-linear": "polytopic invariant region for a linear plant",
    "simulate": "closed-loop simulation with optional faults",
    "campaign": "fault campaign over plants and fault kinds",
    "export-region": "gnuplot data for a controller, region or trace",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsimplex", description="Restart-tolerant Simplex toolkit")
    parser.add_argument("--version", action="version", version=f"rsimplex {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("config", help="JSON config file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = Config.read(args.config)
        return COMMANDS[args.command](cfg)
    except (ConfigError, GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LoadError as exc:
        print(f"load error: {exc}", file=sys.stderr)
        return EXIT_LOAD


if __name__ == "__main__":
    sys.exit(main())
