"""End-to-end scenario runner: synthetic or recorded loads, GP forecasts,
oracle truth, LLSE and WLS estimates, and ARMSE metrics."""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import network
from .estimator import (
    armse,
    estimate,
    forecast_voltage_stats,
    llse_update,
    recover_voltages,
    wls_pseudo_estimate,
)
from .forecast import (
    FeatureConfig,
    KernelConfig,
    LoadStatistics,
    ProfileForecaster,
    SynthConfig,
    assemble_load_statistics,
    average_profile,
    fit_node_forecaster,
    loads_to_vector,
    phase_shares,
    synth_loads,
)
from .linear_pf import assemble
from .network import Feeder, FeederError, SensorSet
from .oracle import measurements_from_solution, sensor_readings, sweep_solve
from .placement import PlacementProblem, greedy_place

log = logging.getLogger(__name__)

_STREAMS = {"loads": 1, "noise": 2, "trials": 3, "metering": 4, "bench": 5}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose derived from the root seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_STREAMS[name], *extra)))


class StageError(RuntimeError):
    def __init__(self, stage: str, timestep: int | None, cause: Exception):
        self.stage, self.timestep, self.cause = stage, timestep, cause
        where = f" at timestep {timestep}" if timestep is not None else ""
        super().__init__(f"stage {stage!r}{where}: {cause}")


@dataclass
class ScenarioConfig:
    feeder: str = "ieee37"
    sensors: list[int] | None = None
    placement_budget: int | None = None
    timesteps: int = 96
    history_steps: int | None = None     # default: max(4 x timesteps, two days)
    resolution_minutes: int = 15
    load_source: str = "synthetic"       # or a load-history CSV path
    weather: str | None = None
    load_scale: float = 1.0
    synth_noise: float = 0.1
    synth_scale_spread: float = 0.3
    synth_time_shift_hours: float = 2.0
    power_factor: float = 0.9
    lags: int = 0
    use_temperature: bool = False
    use_humidity: bool = False
    signal_variance: float = 0.05
    noise_variance: float = 0.01
    rho: float = 0.0
    metered_fraction: float = 1.0
    fallback_inflation: float = 2.0
    sensor_noise_sd: float = 1e-4
    uncertainty_multiplier: float = 1.0
    multipliers: list[float] = field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0])
    truth: str = "synthetic"             # or "sampled" from the forecast distribution
    variance_ratio: float = 0.2          # sampled truth: sd = ratio * |mean|
    wls_pseudo_sd: float = 0.05
    anomaly_threshold: float = 4.0
    seed: int = 0
    out: str | None = None
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FeederError(f"unknown scenario keys: {sorted(unknown)}")
        cfg = cls(**d)
        if base_dir is not None:
            for key in ("feeder", "load_source", "weather"):
                val = getattr(cfg, key)
                if val and val not in ("ieee37", "synthetic") and not os.path.isabs(val):
                    setattr(cfg, key, str(Path(base_dir) / val))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), Path(path).parent)

    def validate(self) -> None:
        if self.timesteps < 1:
            raise FeederError("timesteps must be at least 1")
        for key in ("feeder", "load_source", "weather"):
            val = getattr(self, key)
            if val and val not in ("ieee37", "synthetic") and not Path(val).exists():
                raise FeederError(f"{key}: path {val} does not exist")
        if any(m <= 0 for m in self.multipliers) or self.uncertainty_multiplier < 0:
            raise FeederError("uncertainty multipliers must be positive")
        if not 0.0 <= self.metered_fraction <= 1.0:
            raise FeederError("metered_fraction must lie in [0, 1]")
        if self.truth not in ("synthetic", "sampled"):
            raise FeederError("truth must be 'synthetic' or 'sampled'")

    @property
    def n_history(self) -> int:
        if self.history_steps is not None:
            return self.history_steps
        # 80/20 split, but never less than two days so every slot of day is seen
        return max(4 * self.timesteps, 2 * 24 * 60 // self.resolution_minutes)


def load_scenario_feeder(cfg: ScenarioConfig) -> Feeder:
    if cfg.feeder == "ieee37":
        return network.ieee37()
    return network.load_feeder(cfg.feeder)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def read_load_csv(path, n_buses: int) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Load history CSV (timestamp, node_id, p_pu, q_pu) to (T, n_buses) arrays."""
    rows: dict[str, dict[int, tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            node = int(rec["node_id"])
            if not 0 <= node < n_buses:
                raise FeederError(f"{path}: unknown bus reference: {node}")
            rows.setdefault(rec["timestamp"], {})[node] = (float(rec["p_pu"]), float(rec["q_pu"]))
    stamps = sorted(rows)
    p = np.zeros((len(stamps), n_buses))
    q = np.zeros_like(p)
    for i, ts in enumerate(stamps):
        for node, (pv, qv) in rows[ts].items():
            p[i, node], q[i, node] = pv, qv
    return p, q, stamps


def write_load_csv(path, p: np.ndarray, q: np.ndarray, start: dt.datetime, resolution: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "node_id", "p_pu", "q_pu"])
        for t in range(p.shape[0]):
            ts = (start + dt.timedelta(minutes=resolution * t)).isoformat()
            for b in range(p.shape[1]):
                w.writerow([ts, b, repr(float(p[t, b])), repr(float(q[t, b]))])


def read_weather_csv(path) -> dict[str, np.ndarray]:
    temp, hum = [], []
    with open(path, newline="") as fh:
        for rec in sorted(csv.DictReader(fh), key=lambda r: r["timestamp"]):
            temp.append(float(rec["temp_c"]))
            hum.append(float(rec["humidity_pct"]))
    return {"temperature": np.array(temp), "humidity": np.array(hum)}


@dataclass
class LoadData:
    p: np.ndarray      # (H + T, n_buses) aggregate per bus
    q: np.ndarray
    weather: dict | None
    start: dt.datetime


def scenario_loads(cfg: ScenarioConfig, feeder: Feeder) -> LoadData:
    n_steps = cfg.n_history + cfg.timesteps
    start = dt.datetime(2013, 7, 1)
    if cfg.load_source == "synthetic":
        nominal = feeder.peaks()[:, 0, :].sum(1) * cfg.load_scale
        sc = SynthConfig(n_steps, nominal, cfg.resolution_minutes, cfg.power_factor,
                         noise=cfg.synth_noise, scale_spread=cfg.synth_scale_spread,
                         time_shift_hours=cfg.synth_time_shift_hours, start=start)
        series = synth_loads(sc, substream(cfg.seed, "loads"))
        p, q = series.p, series.q
    else:
        p, q, stamps = read_load_csv(cfg.load_source, feeder.n_buses)
        start = dt.datetime.fromisoformat(stamps[0])
        if p.shape[0] < n_steps:
            raise FeederError(
                f"{cfg.load_source}: {p.shape[0]} timesteps, need {n_steps}"
            )
        p, q = p[:n_steps], q[:n_steps]
    weather = read_weather_csv(cfg.weather) if cfg.weather else None
    return LoadData(p, q, weather, start)


# ---------------------------------------------------------------------------
# forecasting stage
# ---------------------------------------------------------------------------

@dataclass
class ForecastSet:
    forecasters: dict
    fallback: ProfileForecaster
    metered: list[int]


def fit_forecasts(cfg: ScenarioConfig, feeder: Feeder, data: LoadData) -> ForecastSet:
    fcfg = FeatureConfig(lags=cfg.lags, temperature=cfg.use_temperature,
                         humidity=cfg.use_humidity, resolution_minutes=cfg.resolution_minutes,
                         start=data.start)
    hyper = KernelConfig(signal_variance=cfg.signal_variance, noise_variance=cfg.noise_variance)
    nominal = feeder.peaks().sum(2) * cfg.load_scale        # (n_buses, 2)
    load_buses = [b.id for b in feeder.buses if b.has_load]
    n_metered = int(round(cfg.metered_fraction * len(load_buses)))
    rng = substream(cfg.seed, "metering")
    metered = sorted(int(b) for b in rng.choice(load_buses, n_metered, replace=False)) if n_metered else []
    train = range(cfg.lags, cfg.n_history)
    forecasters = {}
    for b in metered:
        scale = nominal[b, 0] if nominal[b, 0] > 0 else float(np.abs(data.p[:, b]).max())
        forecasters[b] = fit_node_forecaster(data.p[:, b], data.q[:, b], train, fcfg, hyper,
                                             scale, data.weather)
    steps_per_day = 24 * 60 // cfg.resolution_minutes
    shape, shape_var = average_profile([data.p[:, b] for b in metered],
                                       [nominal[b, 0] for b in metered], train,
                                       steps_per_day, cfg.fallback_inflation)
    fallback = _FallbackByBus(shape, shape_var, nominal, steps_per_day)
    return ForecastSet(forecasters, fallback, metered)


class _FallbackByBus:
    """Average profile scaled by each bus's nominal load."""

    def __init__(self, shape, shape_var, nominal, steps_per_day):
        self.profiles = {
            b: ProfileForecaster(shape, shape_var, nominal[b, 0], nominal[b, 1], steps_per_day)
            for b in range(nominal.shape[0])
        }

    def for_bus(self, bus: int) -> ProfileForecaster:
        return self.profiles[bus]


def load_statistics(cfg: ScenarioConfig, feeder: Feeder, fset: ForecastSet, t: int) -> LoadStatistics:
    forecasters = dict(fset.forecasters)
    for b in feeder.buses:
        if b.has_load and b.id not in forecasters:
            forecasters[b.id] = fset.fallback.for_bus(b.id)
    return assemble_load_statistics(feeder, forecasters, t, cfg.rho)


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    timestep: int
    est_buses: list[int]
    v_true: np.ndarray
    v_forecast: np.ndarray
    v_llse: np.ndarray
    v_wls: np.ndarray
    flags: list[str]
    update_seconds: float


@dataclass
class ScenarioResult:
    records: list[StepRecord]
    est_buses: list[int]
    sensors: list[int]
    per_bus: dict[str, np.ndarray]     # method -> ARMSE per estimated bus
    aggregate: dict[str, float]        # method -> ARMSE over all estimated entries
    runtime: dict[str, float] = field(default_factory=dict)

    @property
    def improvement(self) -> np.ndarray:
        fc, ll = self.per_bus["forecast"], self.per_bus["llse"]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(fc > 0, 1.0 - ll / fc, 0.0)

    @property
    def aggregate_improvement(self) -> float:
        fc = self.aggregate["forecast"]
        return 1.0 - self.aggregate["llse"] / fc if fc > 0 else 0.0


def choose_sensors(cfg: ScenarioConfig, feeder: Feeder, data: LoadData) -> SensorSet:
    if cfg.sensors is not None:
        return SensorSet(feeder, cfg.sensors)
    if cfg.placement_budget:
        return greedy_place(placement_problem(cfg, feeder, data)).sensors
    return SensorSet(feeder, [])


def placement_problem(cfg: ScenarioConfig, feeder: Feeder, data: LoadData) -> PlacementProblem:
    """Placement over all non-substation buses using (at most ~96) training load vectors."""
    shares = phase_shares(feeder)
    cols = range(0, cfg.n_history, max(1, cfg.n_history // 96))
    xi = np.column_stack([loads_to_vector(feeder, data.p[t], data.q[t], shares) for t in cols])
    return PlacementProblem(feeder, range(1, feeder.n_buses), xi, None, cfg.placement_budget)


def run_scenario(cfg: ScenarioConfig, feeder: Feeder | None = None) -> ScenarioResult:
    """Run the full pipeline; deterministic for a given ``cfg.seed``."""
    stage = "parse"
    try:
        feeder = feeder or load_scenario_feeder(cfg)
        stage = "loads"
        data = scenario_loads(cfg, feeder)
        stage = "forecast"
        fset = fit_forecasts(cfg, feeder, data)
        stage = "placement"
        sensors = choose_sensors(cfg, feeder, data)
        stage = "assemble"
        model = assemble(feeder, sensors)
    except FeederError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with stage context
        raise StageError(stage, None, exc) from exc

    shares = phase_shares(feeder)
    est_buses = [b for _, b in model.estimation_pairs]
    steps = list(range(cfg.n_history, cfg.n_history + cfg.timesteps))

    def one(t: int) -> StepRecord:
        return _run_step(cfg, feeder, model, fset, data, shares, t)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            records = list(pool.map(one, steps))
    else:
        records = [one(t) for t in steps]
    return _summarize(records, est_buses, list(sensors.buses))


def _run_step(cfg, feeder, model, fset, data, shares, t) -> StepRecord:
    stage = "statistics"
    try:
        stats = load_statistics(cfg, feeder, fset, t)
        if cfg.truth == "sampled":
            sd = cfg.variance_ratio * np.abs(stats.mean)
            stats = LoadStatistics(stats.mean, np.diag(sd**2), t)
        stats = stats.scaled(max(cfg.uncertainty_multiplier, 1e-12))
        stage = "truth"
        if cfg.truth == "sampled":
            xi = substream(cfg.seed, "trials", t).standard_normal(stats.mean.size)
            s_true = stats.mean + np.sqrt(np.diag(stats.covariance)) * xi
        else:
            s_true = loads_to_vector(feeder, data.p[t], data.q[t], shares)
        sol = sweep_solve(feeder, s_true)
        if not sol.converged:
            raise RuntimeError(f"oracle did not converge (mismatch {sol.max_mismatch:.3g})")
        stage = "measurement"
        rng = substream(cfg.seed, "noise", t)
        dy_m = measurements_from_solution(sol, model.measurement_pairs, cfg.sensor_noise_sd, rng)
        readings = sensor_readings(sol, model.sensors, cfg.sensor_noise_sd, rng)
        y_sensor = dict(zip(model.sensors, readings))
        stage = "estimate"
        fc = forecast_voltage_stats(model, stats, cfg.sensor_noise_sd**2)
        t0 = time.perf_counter()
        llse_update(fc, dy_m)
        elapsed = time.perf_counter() - t0
        res = estimate(model, fc, dy_m, y_sensor, cfg.anomaly_threshold)
        v_fc, _ = recover_voltages(model, y_sensor, fc.mu_x)
        dy_wls = wls_pseudo_estimate(model, dy_m, stats.mean, max(cfg.sensor_noise_sd, 1e-6),
                                     cfg.wls_pseudo_sd)
        v_wls, _ = recover_voltages(model, y_sensor, dy_wls)
    except Exception as exc:  # noqa: BLE001
        raise StageError(stage, t, exc) from exc

    est_buses = [b for _, b in model.estimation_pairs]
    present = feeder.phase_mask()[est_buses] if est_buses else np.zeros((0, 3), bool)
    v_true = np.where(present, np.abs(sol.voltages[est_buses]), np.nan)
    flagged_sensors = {model.measurement_pairs[i][1] for i in np.flatnonzero(res.anomaly_flags)}
    flags = []
    for i, (sensor, _b) in enumerate(model.estimation_pairs):
        f = []
        if res.clamped[i].any():
            f.append("clamped")
        if sensor in flagged_sensors:
            f.append("anomaly")
        flags.append("|".join(f))
    return StepRecord(t, est_buses, v_true, v_fc, res.v_hat, v_wls, flags, elapsed)


def _summarize(records: list[StepRecord], est_buses, sensors) -> ScenarioResult:
    per_bus, aggregate = {}, {}
    for name in ("forecast", "llse", "wls"):
        est = np.array([getattr(r, f"v_{name}") for r in records])   # (T, n_est, 3)
        tru = np.array([r.v_true for r in records])
        per_bus[name] = np.array([armse(est[:, i], tru[:, i]) for i in range(len(est_buses))])
        aggregate[name] = armse(est, tru) if est_buses else 0.0
    runtime = {"mean_update_seconds": float(np.mean([r.update_seconds for r in records]))}
    return ScenarioResult(records, est_buses, sensors, per_bus, aggregate, runtime)


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


_RUNTIME_KEYS = ("workers", "out")


def write_result(result: ScenarioResult, out_dir, cfg: ScenarioConfig | None = None) -> list[Path]:
    """Write estimates.csv, per_bus.csv and summary.json; byte-stable for equal results."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    est_path = out / "estimates.csv"
    with open(est_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestep", "bus", "phase", "v_true", "v_forecast", "v_llse", "v_wls", "flags"])
        for r in result.records:
            for i, bus in enumerate(r.est_buses):
                for k, ph in enumerate("abc"):
                    if not np.isfinite(r.v_true[i, k]):
                        continue
                    w.writerow([r.timestep, bus, ph, _fmt(r.v_true[i, k]), _fmt(r.v_forecast[i, k]),
                                _fmt(r.v_llse[i, k]), _fmt(r.v_wls[i, k]), r.flags[i]])
    bus_path = out / "per_bus.csv"
    imp = result.improvement
    with open(bus_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bus", "armse_forecast", "armse_llse", "armse_wls", "improvement"])
        for i, bus in enumerate(result.est_buses):
            w.writerow([bus, _fmt(result.per_bus["forecast"][i]), _fmt(result.per_bus["llse"][i]),
                        _fmt(result.per_bus["wls"][i]), _fmt(imp[i])])
    summary = {
        "sensors": result.sensors,
        "estimated_buses": result.est_buses,
        "timesteps": len(result.records),
        "armse": result.aggregate,
        "aggregate_improvement": result.aggregate_improvement,
        "mean_bus_improvement": float(np.mean(imp)) if imp.size else 0.0,
        "buses_llse_not_worse": int(np.sum(result.per_bus["llse"] <= result.per_bus["forecast"])),
    }
    if cfg is not None:
        summary["config"] = {k: v for k, v in asdict(cfg).items() if k not in _RUNTIME_KEYS}
    sum_path = out / "summary.json"
    sum_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return [est_path, bus_path, sum_path]


def read_estimates(path) -> dict[str, float]:
    """Recompute aggregate ARMSE per method from an estimates.csv file."""
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(int(rec["timestep"]), []).append(rec)
    out = {}
    for name in ("forecast", "llse", "wls"):
        err = np.array([[float(r[f"v_{name}"]) - float(r["v_true"]) for r in rows[t]] for t in sorted(rows)])
        out[name] = float(np.sqrt(np.mean(np.sum(err**2, axis=1))))
    return out


# ---------------------------------------------------------------------------
# sweeps and benchmarks
# ---------------------------------------------------------------------------

def sweep_uncertainty(cfg: ScenarioConfig, multipliers=None, feeder: Feeder | None = None) -> list[dict]:
    """One sampled-truth scenario per variance multiplier with a shared seed."""
    multipliers = list(cfg.multipliers if multipliers is None else multipliers)
    if any(b <= a for a, b in zip(multipliers, multipliers[1:])):
        raise FeederError("multipliers must be ascending")
    feeder = feeder or load_scenario_feeder(cfg)
    rows = []
    for m in multipliers:
        c = ScenarioConfig(**{**asdict(cfg), "uncertainty_multiplier": m, "truth": "sampled"})
        res = run_scenario(c, feeder)
        rows.append({"multiplier": m, "armse_forecast": res.aggregate["forecast"],
                     "armse_llse": res.aggregate["llse"], "armse_wls": res.aggregate["wls"]})
    return rows


def benchmark_scaling(sizes, sensor_fraction: float = 10 / 37, n_updates: int = 200,
                      seed: int = 0, repeats: int = 5) -> list[dict]:
    """Mean wall time of one LLSE update on random feeders of the given sizes."""
    rows = []
    for n_bus in sizes:
        rng = substream(seed, "bench", n_bus)
        feeder = network.random_feeder(n_bus, rng)
        m = max(2, int(round(sensor_fraction * n_bus)))
        picks = rng.choice(np.arange(1, n_bus), size=min(m - 1, n_bus - 1), replace=False)
        model = assemble(feeder, SensorSet(feeder, [int(p) for p in picks]))
        n = model.Z_m.shape[1]
        stats = LoadStatistics(rng.uniform(0, 0.05, n), np.diag(rng.uniform(1e-5, 1e-4, n)))
        fc = forecast_voltage_stats(model, stats, 1e-8)
        dys = fc.mu_z + rng.standard_normal((n_updates, fc.mu_z.size)) * 1e-3
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            for d in dys:
                llse_update(fc, d)
            best = min(best, (time.perf_counter() - t0) / n_updates)
        rows.append({"n_buses": n_bus, "n_sensors": len(model.sensors), "mean_update_seconds": best})
    return rows
