"""Command-line entry point: ``nsaqkd <command> ...``.

Exit status: 0 on success with a positive key rate, 2 when the computed rate
is zero, 1 on any error (bad input, schema violation, resource guard).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import montecarlo
from .config import WorkbenchConfig, resolve_config_path
from .mdi_keyrate import mdi_secure_key_rate
from .bb84_keyrate import bb84_secure_key_rate
from .network import (NetworkTopology, analytic_rate_fn, assign_protocols, end_to_end_rate,
                      enumerate_compromise_scenarios, survivability, to_dot)
from .optimizer import ConstraintError, SearchSpace, evaluate_objective, evaluate_report, optimize
from .report import fingerprint
from .schema import SchemaError
from .stats import ObservedStatisticsBB84, ObservedStatisticsMDI, dump_statistics, load_statistics

log = logging.getLogger("nsaqkd")

EXIT_OK, EXIT_ERROR, EXIT_ZERO = 0, 1, 2
MAX_PULSES = 10 ** 9
SWEEP_ALIASES = {"distance": "link.length_km", "mu": "source.mu", "nu": "source.nu",
                 "omega": "source.omega"}


class CliError(Exception):
    """User-facing failure; the message is printed and the exit status is 1."""


def bundled_path(name: str) -> Path | None:
    ref = resources.files("nsaqkd.data").joinpath(name)
    return Path(str(ref)) if ref.is_file() else None


def locate(path: str) -> Path:
    """Resolve a file argument: as given, under the config dir, or bundled."""
    try:
        return resolve_config_path(path)
    except FileNotFoundError:
        found = bundled_path(path)
        if found is None:
            raise CliError(f"file not found: {path}") from None
        return found


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _stamp(report_dict: dict, enabled: bool) -> dict:
    if enabled:
        report_dict["timestamp"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    return report_dict


# ---------------------------------------------------------------------------
# keyrate

def cmd_keyrate(args) -> int:
    cfg = WorkbenchConfig.load(locate(args.config))
    stats = load_statistics(locate(args.stats))
    protocol = "MDI" if isinstance(stats, ObservedStatisticsMDI) else "BB84"
    if args.protocol and args.protocol != protocol:
        raise CliError(f"--protocol {args.protocol} does not match statistics file ({protocol})")
    if cfg.protocol != protocol:
        raise CliError(f"config is for {cfg.protocol} but statistics are {protocol}")
    # Raw counts fix the trial numbers; the config's n_total only serves
    # tables that report rates alone.
    n_total = None if stats.has_counts else cfg.keyrate_section().get("n_total")
    if args.n_total is not None:
        n_total = args.n_total
    if protocol == "MDI":
        report = mdi_secure_key_rate(stats, cfg.mdi_keyrate_config(n_total))
    else:
        report = bb84_secure_key_rate(stats, cfg.bb84_keyrate_config(n_total))
    report.repetition_rate = args.repetition_rate or cfg.repetition_rate
    report.input_fingerprint = fingerprint(cfg.canonical(), stats.to_dict(), n_total,
                                           report.repetition_rate)
    for w in report.warnings:
        log.warning(w)
    d = _stamp(report.to_dict(), args.timestamp)
    _write(json.dumps(d, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK if report.positive else EXIT_ZERO


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(args) -> int:
    cfg = WorkbenchConfig.load(locate(args.config))
    sim = cfg.data.get("simulation", {})
    n = args.pulses if args.pulses is not None else sim.get("pulses")
    if n is None:
        raise CliError("number of pulses not given (--pulses or simulation.pulses)")
    if n < 1:
        raise CliError(f"--pulses must be >= 1, got {n}")
    if n > MAX_PULSES:
        raise CliError(f"--pulses {n} exceeds the resource guard of {MAX_PULSES:.0e}")
    seed = args.seed if args.seed is not None else sim.get("seed", 0)
    workers = args.workers or sim.get("workers", 1)
    session = montecarlo.SessionConfig(int(n), int(seed), cfg.protocol, cfg.source_a(), cfg.link(),
                                       source_b=cfg.source_b() if cfg.protocol == "MDI" else None,
                                       receiver_prob=cfg.keyrate_options().get("receiver_prob"),
                                       workers=workers)
    stats = montecarlo.simulate_mdi(session) if cfg.protocol == "MDI" else montecarlo.simulate_bb84(session)
    stats.source = f"montecarlo: scenario={cfg.scenario} pulses={n} seed={seed}"
    if args.out:
        dump_statistics(stats, args.out)
    else:
        sys.stdout.write(json.dumps(stats.to_dict(), indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep

def parse_vary(spec: str) -> tuple[str, np.ndarray]:
    try:
        name, rng = spec.split("=", 1)
        lo, hi, steps = rng.split(":")
        lo, hi, steps = float(lo), float(hi), int(steps)
    except ValueError:
        raise CliError(f"--vary expects name=lo:hi:steps, got {spec!r}") from None
    if steps < 1:
        raise CliError("sweep needs at least one step")
    if lo == hi:
        return name, np.array([lo])
    return name, np.linspace(lo, hi, steps)


def sweep_rows(cfg: WorkbenchConfig, name: str, values) -> list[tuple[float, float, float, str]]:
    dotted = SWEEP_ALIASES.get(name, name)
    rows = []
    for v in values:
        note = ""
        try:
            c = cfg.with_value(dotted, float(v))
            rep = evaluate_report(c.parameters(), c.protocol, c.link(), c.mode(), c.keyrate_options(),
                                  c.gain_convention)
            rate = rep.rate
        except (ValueError, ArithmeticError) as exc:
            rate, note = 0.0, str(exc).splitlines()[0]
            log.warning("%s=%g: %s", name, v, note)
        rows.append((float(v), rate, rate * cfg.repetition_rate, note))
    return rows


def cmd_sweep(args) -> int:
    cfg = WorkbenchConfig.load(locate(args.config))
    name, values = parse_vary(args.vary)
    rows = sweep_rows(cfg, name, values)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([name, "rate_per_pulse", "rate_per_second", "note"])
    for v, r, rs, note in rows:
        w.writerow([repr(v), repr(r), repr(rs), note])
    _write(buf.getvalue(), args.out)
    return EXIT_OK if any(r > 0 for _, r, _, _ in rows) else EXIT_ZERO


# ---------------------------------------------------------------------------
# optimize

def cmd_optimize(args) -> int:
    cfg = WorkbenchConfig.load(locate(args.config))
    pso_cfg = cfg.pso()
    over = {k: getattr(args, k) for k in ("swarm", "iterations", "seed") if getattr(args, k) is not None}
    if over:
        pso_cfg = type(pso_cfg)(**{**pso_cfg.__dict__, **over})
    mode, link, opts = cfg.mode(), cfg.link(), cfg.keyrate_options()
    baseline = cfg.parameters()
    base_rate = evaluate_objective(baseline, cfg.protocol, link, mode, opts, cfg.gain_convention)
    # The configured source settings join the initial swarm unless disabled:
    # in finite mode most of the box yields no key and a cold swarm can stall.
    warm = cfg.data.get("pso", {}).get("warm_start", True)
    res = optimize(cfg.protocol, link, mode, pso_cfg, SearchSpace(cfg.protocol),
                   initial=[baseline] if warm else (), keyrate_options=opts,
                   gain_convention=cfg.gain_convention)
    out = {"scenario": cfg.scenario, **res.to_dict(),
           "rate_per_second": res.rate * cfg.repetition_rate,
           "baseline": {"parameters": baseline.to_dict(), "rate": base_rate}, "warm_start": warm,
           "ratio_to_baseline": res.rate / base_rate if base_rate > 0 else None,
           "pso": pso_cfg.__dict__, "input_fingerprint": fingerprint(cfg.canonical(), pso_cfg.__dict__)}
    _write(json.dumps(out, indent=2, sort_keys=True) + "\n", args.out)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "best_rate"])
            for i, r in enumerate(res.trace, 1):
                w.writerow([i, repr(r)])
    return EXIT_OK if res.rate > 0 else EXIT_ZERO


# ---------------------------------------------------------------------------
# network

def cmd_network(args) -> int:
    topo = NetworkTopology.load(locate(args.topology))
    rate_fn = analytic_rate_fn(topo)
    plan = assign_protocols(topo, rate_fn)
    rates = end_to_end_rate(plan, rate_fn)
    out = {"plan": plan.to_dict(), "rates": rates,
           "input_fingerprint": fingerprint(topo.to_dict())}
    compromised = [c for group in (args.compromise or []) for c in group.split(",") if c]
    if compromised or not args.enumerate:
        out["survivability"] = survivability(topo, plan, compromised).to_dict()
    if args.enumerate is not None:
        out["scenarios"] = enumerate_compromise_scenarios(topo, args.enumerate, plan,
                                                          force=args.force).to_dict()
    if args.dot:
        Path(args.dot).write_text(to_dot(topo, plan, rates))
    _write(json.dumps(out, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsaqkd", description="Decoy-state MDI/BB84 QKD workbench")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("keyrate", help="secure key rate from observed statistics")
    k.add_argument("stats", help="statistics JSON (path or bundled name, e.g. table3_mdi.json)")
    k.add_argument("-c", "--config", required=True, help="scenario config (TOML or JSON)")
    k.add_argument("--protocol", choices=["MDI", "BB84"])
    k.add_argument("--n-total", type=float, help="override the trial count for rate-only tables")
    k.add_argument("--repetition-rate", type=float, help="pulses per second (default 40 MHz)")
    k.add_argument("--timestamp", action="store_true", help="add a timestamp to the report")
    k.add_argument("-o", "--out")
    k.set_defaults(func=cmd_keyrate)

    s = sub.add_parser("simulate", help="Monte Carlo statistics for a scenario")
    s.add_argument("config")
    s.add_argument("-n", "--pulses", type=int)
    s.add_argument("-s", "--seed", type=int)
    s.add_argument("-j", "--workers", type=int)
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="analytic key rate over a parameter range (CSV)")
    w.add_argument("config")
    w.add_argument("--vary", required=True, help="name=lo:hi:steps; name is section.key or "
                                                 + ", ".join(SWEEP_ALIASES))
    w.add_argument("-o", "--out")
    w.set_defaults(func=cmd_sweep)

    o = sub.add_parser("optimize", help="particle-swarm search of source parameters")
    o.add_argument("config")
    o.add_argument("--swarm", type=int)
    o.add_argument("--iterations", type=int)
    o.add_argument("--seed", type=int)
    o.add_argument("-o", "--out")
    o.add_argument("--trace", help="write the per-iteration best rate as CSV")
    o.set_defaults(func=cmd_optimize)

    n = sub.add_parser("network", help="protocol plan and survivability of a topology")
    n.add_argument("action", choices=["analyze"])
    n.add_argument("topology")
    n.add_argument("--compromise", action="append", help="node id(s), comma separated; repeatable")
    n.add_argument("--enumerate", type=int, metavar="K", help="all compromise sets up to size K")
    n.add_argument("--force", action="store_true", help="lift the scenario-count guard")
    n.add_argument("--dot", help="write a Graphviz DOT file")
    n.add_argument("-o", "--out")
    n.set_defaults(func=cmd_network)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (CliError, ConstraintError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
