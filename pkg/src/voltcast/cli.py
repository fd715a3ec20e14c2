"""Command-line entry point.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, network
from .estimator import forecast_voltage_stats, llse_update, recover_voltages, wls_pseudo_estimate
from .forecast import LoadStatistics
from .linear_pf import NumericalError, assemble, load_model, save_model
from .network import FeederError, SensorSet
from .placement import greedy_place

log = logging.getLogger("voltcast")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _parse_buses(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise FeederError(f"bad bus list {text!r}") from exc


def _config(args) -> harness.ScenarioConfig:
    cfg = harness.ScenarioConfig.load(args.config) if args.config else harness.ScenarioConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "feeder", None):
        cfg.feeder = args.feeder
    if getattr(args, "sensors", None):
        cfg.sensors = _parse_buses(args.sensors)
    if getattr(args, "budget", None):
        cfg.placement_budget = args.budget
    cfg.validate()
    return cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out / default


def _load_feeder(path: str | None) -> network.Feeder:
    if not path or path == "ieee37":
        return network.ieee37()
    return network.load_feeder(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    feeder = _load_feeder(args.feeder_path or args.feeder)
    sensors = SensorSet(feeder, _parse_buses(args.sensors)) if args.sensors else None
    if sensors is not None:
        assemble(feeder, sensors)
    print(f"ok: {feeder.n_buses} buses, {feeder.n_lines} lines"
          + (f", {len(sensors.buses)} sensors" if sensors else ""))
    return EXIT_OK


def cmd_build_model(args) -> int:
    feeder = _load_feeder(args.feeder)
    model = assemble(feeder, SensorSet(feeder, _parse_buses(args.sensors)))
    path = _out(args, "model.zip")
    save_model(model, path)
    print(path)
    return EXIT_OK


def cmd_forecast(args) -> int:
    cfg = _config(args)
    feeder = harness.load_scenario_feeder(cfg)
    data = harness.scenario_loads(cfg, feeder)
    fset = harness.fit_forecasts(cfg, feeder, data)
    path = _out(args, "forecast.csv")
    n = feeder.n_lines
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestep", "node", "phase", "p_mean", "p_var", "q_mean", "q_var"])
        for t in range(cfg.n_history, cfg.n_history + cfg.timesteps):
            st = harness.load_statistics(cfg, feeder, fset, t)
            var = np.diag(st.covariance)
            for bus in range(1, feeder.n_buses):
                for k, ph in enumerate("abc"):
                    if ph not in feeder.buses[bus].phases:
                        continue
                    i = 3 * (bus - 1) + k
                    w.writerow([t, bus, ph, repr(float(st.mean[i])), repr(float(var[i])),
                                repr(float(st.mean[3 * n + i])), repr(float(var[3 * n + i]))])
    print(path)
    return EXIT_OK


def _read_forecast(path, n_lines: int) -> dict[int, LoadStatistics]:
    mean: dict[int, np.ndarray] = {}
    var: dict[int, np.ndarray] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            t = int(rec["timestep"])
            m = mean.setdefault(t, np.zeros(6 * n_lines))
            v = var.setdefault(t, np.zeros(6 * n_lines))
            bus = int(rec["node"])
            if not 1 <= bus <= n_lines:
                raise FeederError(f"{path}: unknown bus reference: {bus}")
            i = 3 * (bus - 1) + "abc".index(rec["phase"])
            m[i], v[i] = float(rec["p_mean"]), float(rec["p_var"])
            m[3 * n_lines + i], v[3 * n_lines + i] = float(rec["q_mean"]), float(rec["q_var"])
    return {t: LoadStatistics(mean[t], np.diag(var[t]), t) for t in sorted(mean)}


def _read_readings(path, n_buses: int) -> dict[int, dict[int, np.ndarray]]:
    out: dict[int, dict[int, np.ndarray]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            bus = int(rec["bus"])
            if not 0 <= bus < n_buses:
                raise FeederError(f"{path}: unknown bus reference: {bus}")
            y = out.setdefault(int(rec["timestep"]), {}).setdefault(bus, np.zeros(3))
            y["abc".index(rec["phase"])] = float(rec["v_pu"]) ** 2
    return out


def cmd_estimate(args) -> int:
    model = load_model(args.model)
    stats = _read_forecast(args.forecast, model.feeder.n_lines)
    readings = _read_readings(args.readings, model.feeder.n_buses)
    path = _out(args, "estimates.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestep", "bus", "phase", "v_forecast", "v_llse", "v_wls"])
        for t, st in stats.items():
            if t not in readings:
                raise FeederError(f"no sensor readings for timestep {t}")
            y = readings[t]
            missing = [b for b in model.sensors if b not in y]
            if missing:
                raise FeederError(f"timestep {t}: missing readings for sensor buses {missing}")
            dy_m = np.concatenate([np.where(model.m_active[3 * i: 3 * i + 3], y[v] - y[u], 0.0)
                                   for i, (u, v) in enumerate(model.measurement_pairs)]) \
                if model.measurement_pairs else np.zeros(0)
            fc = forecast_voltage_stats(model, st, args.sensor_noise_sd**2)
            v_fc, _ = recover_voltages(model, y, fc.mu_x)
            v_ll, _ = recover_voltages(model, y, llse_update(fc, dy_m))
            v_w, _ = recover_voltages(model, y, wls_pseudo_estimate(
                model, dy_m, st.mean, max(args.sensor_noise_sd, 1e-6), args.pseudo_sd))
            for i, (_s, bus) in enumerate(model.estimation_pairs):
                for k, ph in enumerate("abc"):
                    if np.isfinite(v_ll[i, k]):
                        w.writerow([t, bus, ph, repr(float(v_fc[i, k])), repr(float(v_ll[i, k])),
                                    repr(float(v_w[i, k]))])
    print(path)
    return EXIT_OK


def cmd_place(args) -> int:
    cfg = _config(args)
    if not cfg.placement_budget:
        raise FeederError("placement needs --budget or placement_budget in the config")
    feeder = harness.load_scenario_feeder(cfg)
    data = harness.scenario_loads(cfg, feeder)
    result = greedy_place(harness.placement_problem(cfg, feeder, data))
    for step, (bus, secs) in enumerate(zip(result.chosen, result.step_seconds), 1):
        log.info("placement step %d: bus %d, objective %.6g, %.3fs", step, bus,
                 result.trace[step], secs)
    doc = result.to_dict()
    doc.pop("step_seconds")
    path = _out(args, "placement.json")
    path.write_text(json.dumps(doc, indent=2) + "\n")
    print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.workers:
        cfg.workers = args.workers
    result = harness.run_scenario(cfg)
    out = Path(args.out or cfg.out or "out")
    harness.write_result(result, out, cfg)
    log.info("mean LLSE update %.3g s", result.runtime["mean_update_seconds"])
    print(f"ARMSE forecast {result.aggregate['forecast']:.6g}  llse {result.aggregate['llse']:.6g}"
          f"  wls {result.aggregate['wls']:.6g}  improvement {result.aggregate_improvement:.3f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    mults = [float(m) for m in args.multipliers.split(",")] if args.multipliers else None
    rows = harness.sweep_uncertainty(cfg, mults)
    path = _out(args, "sweep.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) for k, v in r.items()})
    print(path)
    return EXIT_OK


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = harness.benchmark_scaling(sizes, n_updates=args.updates, seed=args.seed or 0)
    for r in rows:
        print(f"{r['n_buses']:6d} buses {r['n_sensors']:5d} sensors "
              f"{r['mean_update_seconds'] * 1e6:10.2f} us/update")
    if args.out:
        _out(args, "bench.json").write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------

def _common(default) -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; the copy on
    # subcommands suppresses defaults so it never clobbers the top-level value
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=default, help="root random seed")
    common.add_argument("--out", default=default, help="output directory")
    common.add_argument("--config", default=default, help="scenario JSON file")
    common.add_argument("-v", "--verbose", action="store_true",
                        default=False if default is None else default)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="voltcast", parents=[_common(None)],
                                description="Distribution feeder voltage estimation from sparse sensors.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", parents=[common], help="check a feeder (and sensor set)")
    s.add_argument("feeder_path", nargs="?", default=None, help="feeder JSON (default: built-in 37-bus)")
    s.add_argument("--feeder", default=None)
    s.add_argument("--sensors", default=None, help="comma-separated sensor bus ids")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("build-model", parents=[common], help="assemble and save linear model")
    s.add_argument("--feeder", default="ieee37")
    s.add_argument("--sensors", default="")
    s.set_defaults(func=cmd_build_model)

    s = sub.add_parser("forecast", parents=[common], help="fit load forecasts, write forecast.csv")
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("estimate", parents=[common], help="estimate voltages from files")
    s.add_argument("--model", required=True)
    s.add_argument("--forecast", required=True)
    s.add_argument("--readings", required=True)
    s.add_argument("--sensor-noise-sd", type=float, default=1e-4)
    s.add_argument("--pseudo-sd", type=float, default=0.05)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("place-sensors", parents=[common], help="greedy sensor placement")
    s.add_argument("--feeder", default=None)
    s.add_argument("--budget", type=int, default=None)
    s.set_defaults(func=cmd_place)

    s = sub.add_parser("run", parents=[common], help="run a full scenario")
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", parents=[common], help="sweep forecast uncertainty")
    s.add_argument("--multipliers", default=None, help="ascending comma-separated list")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("bench", parents=[common], help="time LLSE updates vs feeder size")
    s.add_argument("--sizes", default="37,370")
    s.add_argument("--updates", type=int, default=200)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except harness.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, RuntimeError) else EXIT_INPUT
    except (FeederError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
