"""Load forecasting: calendar/weather/lag features, Gaussian-process
regression with an explicit basis, nodal load statistics and a synthetic
load generator.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence
from zoneinfo import ZoneInfo

import numpy as np
from scipy import linalg

from .linear_pf import NumericalError
from .network import Feeder

CALENDAR_GROUPS = ("DST", "MOY", "BD", "DOW", "HOD", "MOH")


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureConfig:
    lags: int = 0
    temperature: bool = False
    humidity: bool = False
    calendar: tuple[str, ...] = CALENDAR_GROUPS
    resolution_minutes: int = 15
    start: dt.datetime = dt.datetime(2013, 7, 1)
    timezone: str = "America/Chicago"

    def timestamp(self, t: int) -> dt.datetime:
        return self.start + dt.timedelta(minutes=self.resolution_minutes * int(t))

    def layout(self) -> list[tuple[str, str, int]]:
        """Feature groups as (name, 'cont'|'disc', width), in encoding order."""
        out = []
        if self.lags:
            out.append(("lag", "cont", self.lags))
            if self.lags > 1:
                out.append(("diff", "cont", self.lags - 1))
        if self.temperature:
            out.append(("temperature", "cont", 1))
        if self.humidity:
            out.append(("humidity", "cont", 1))
        sizes = {"DST": 2, "MOY": 12, "BD": 2, "DOW": 7, "HOD": 24,
                 "MOH": max(1, 60 // self.resolution_minutes)}
        for g in self.calendar:
            out.append((g, "disc", sizes[g]))
        return out

    @property
    def width(self) -> int:
        return sum(w for _, _, w in self.layout())


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    layout: tuple[tuple[str, str, int], ...]

    def group(self, name: str) -> np.ndarray:
        start = 0
        for g, _, w in self.layout:
            if g == name:
                return self.values[start : start + w]
            start += w
        raise KeyError(name)


def _one_hot(index: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[index] = 1.0
    return v


def calendar_encoding(config: FeatureConfig, t: int) -> dict[str, np.ndarray]:
    ts = config.timestamp(t)
    dst = ts.replace(tzinfo=ZoneInfo(config.timezone)).dst()
    n_moh = max(1, 60 // config.resolution_minutes)
    return {
        "DST": _one_hot(int(bool(dst)), 2),
        "MOY": _one_hot(ts.month - 1, 12),
        "BD": _one_hot(int(ts.weekday() < 5), 2),
        "DOW": _one_hot(ts.weekday(), 7),
        "HOD": _one_hot(ts.hour, 24),
        "MOH": _one_hot(min(ts.minute // config.resolution_minutes, n_moh - 1), n_moh),
    }


def build_features(config: FeatureConfig, history: np.ndarray | None,
                   exogenous: Mapping[str, np.ndarray] | None, t: int) -> FeatureVector:
    """Encode the inputs for predicting the load at time index ``t``.

    ``history[j]`` is the load at time ``j``; only entries before ``t`` are
    read. ``exogenous`` maps ``'temperature'`` / ``'humidity'`` to series
    indexed the same way.
    """
    parts = []
    if config.lags:
        if history is None or t < config.lags or len(history) < t:
            raise ValueError(
                f"insufficient history for {config.lags} lags at t={t}"
            )
        lags = np.array([history[t - j] for j in range(1, config.lags + 1)], dtype=float)
        parts.append(lags)
        if config.lags > 1:
            parts.append(lags[:-1] - lags[1:])
    for name in ("temperature", "humidity"):
        if getattr(config, name):
            if exogenous is None or name not in exogenous:
                raise ValueError(f"missing exogenous series {name!r}")
            parts.append(np.array([exogenous[name][t]], dtype=float))
    cal = calendar_encoding(config, t)
    for g in config.calendar:
        parts.append(cal[g])
    values = np.concatenate(parts) if parts else np.zeros(0)
    return FeatureVector(values, tuple(config.layout()))


def feature_matrix(config: FeatureConfig, history, exogenous, times: Sequence[int]) -> np.ndarray:
    return np.array([build_features(config, history, exogenous, t).values for t in times])


# ---------------------------------------------------------------------------
# Gaussian process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelConfig:
    """Squared exponential over continuous groups times a categorical kernel
    ``exp(-w_g [x_g != x'_g])`` over each one-hot group."""

    signal_variance: float = 1.0
    noise_variance: float = 1e-2
    length_scales: Mapping[str, float] = field(
        default_factory=lambda: {"lag": 1.0, "diff": 1.0, "temperature": 10.0, "humidity": 30.0}
    )
    group_weights: Mapping[str, float] = field(
        default_factory=lambda: {"DST": 0.5, "MOY": 0.5, "BD": 1.0, "DOW": 0.5, "HOD": 3.0, "MOH": 0.5}
    )
    basis: str = "constant"


def kernel_matrix(a: np.ndarray, b: np.ndarray, layout, hyper: KernelConfig) -> np.ndarray:
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    log_k = np.zeros((a.shape[0], b.shape[0]))
    start = 0
    for name, kind, width in layout:
        xa, xb = a[:, start : start + width], b[:, start : start + width]
        start += width
        if kind == "cont":
            ell = hyper.length_scales.get(name, 1.0)
            xa, xb = xa / ell, xb / ell
            sq = (np.sum(xa**2, 1)[:, None] + np.sum(xb**2, 1)[None, :] - 2 * xa @ xb.T)
            log_k -= 0.5 * np.maximum(sq, 0.0)
        else:
            same = xa @ xb.T
            log_k -= hyper.group_weights.get(name, 1.0) * (1.0 - same)
    return hyper.signal_variance * np.exp(log_k)


def basis_matrix(x: np.ndarray, kind: str) -> np.ndarray:
    x = np.atleast_2d(x)
    if kind == "none":
        return np.zeros((x.shape[0], 0))
    if kind == "constant":
        return np.ones((x.shape[0], 1))
    if kind == "linear":
        return np.hstack([np.ones((x.shape[0], 1)), x])
    raise ValueError(f"unknown basis {kind!r}")


@dataclass
class GpModel:
    hyper: KernelConfig
    layout: tuple
    inputs: np.ndarray
    targets: np.ndarray
    beta: np.ndarray
    _chol: tuple = field(repr=False)
    _alpha: np.ndarray = field(repr=False)

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance of the latent function at ``x``.

        ``x`` may be a FeatureVector, a single encoded row or a matrix of rows.
        """
        if isinstance(x, FeatureVector):
            x = x.values
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xs = np.atleast_2d(x)
        k_star = kernel_matrix(xs, self.inputs, self.layout, self.hyper)
        mean = basis_matrix(xs, self.hyper.basis) @ self.beta + k_star @ self._alpha
        v = linalg.cho_solve(self._chol, k_star.T)
        var = self.hyper.signal_variance - np.sum(k_star * v.T, axis=1)
        var = np.maximum(var, 0.0)
        if single:
            return mean[0], var[0]
        return mean, var


def fit_gp(inputs, targets, hyper: KernelConfig, layout=None) -> GpModel:
    """Fit a GP with generalized-least-squares basis weights; no hyperparameter search."""
    if isinstance(inputs, (list, tuple)) and inputs and isinstance(inputs[0], FeatureVector):
        layout = inputs[0].layout
        inputs = np.array([f.values for f in inputs])
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if layout is None:
        raise ValueError("feature layout required for raw input arrays")
    if x.shape[0] < 2 or x.shape[0] != y.shape[0]:
        raise ValueError("need at least two training points with matching targets")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    if hyper.noise_variance <= 0:
        raise ValueError("noise variance must be positive")
    k = kernel_matrix(x, x, layout, hyper) + hyper.noise_variance * np.eye(len(y))
    try:
        chol = linalg.cho_factor(k, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(
            "kernel matrix not positive definite; increase noise_variance"
        ) from exc
    phi = basis_matrix(x, hyper.basis)
    if phi.shape[1]:
        kinv_phi = linalg.cho_solve(chol, phi)
        a = phi.T @ kinv_phi
        if np.linalg.matrix_rank(a) < a.shape[0]:
            raise NumericalError("singular basis design")
        beta = np.linalg.solve(a, kinv_phi.T @ y)
    else:
        beta = np.zeros(0)
    alpha = linalg.cho_solve(chol, y - phi @ beta)
    return GpModel(hyper, tuple(layout), x, y, beta, chol, alpha)


# ---------------------------------------------------------------------------
# nodal load statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadStatistics:
    mean: np.ndarray         # (6N,) p then q, per-unit
    covariance: np.ndarray   # (6N, 6N)
    timestep: int = 0

    def scaled(self, multiplier: float) -> "LoadStatistics":
        return LoadStatistics(self.mean, self.covariance * multiplier, self.timestep)


class NodeForecaster(Protocol):
    def predict(self, t: int) -> tuple[float, float, float, float]:
        """Aggregate (p_mean, p_var, q_mean, q_var) for one bus at time ``t``."""


def phase_shares(feeder: Feeder) -> np.ndarray:
    """Per-bus split of an aggregate load over phases, shape (n_buses, 3).

    Uses the declared nominal loads where present, equal shares over the
    bus's phases otherwise.
    """
    present = feeder.phase_mask().astype(float)
    nominal = feeder.peaks()[:, 0, :]
    shares = present / present.sum(1, keepdims=True)
    tot = nominal.sum(1)
    has = tot > 0
    shares[has] = nominal[has] / tot[has, None]
    return shares


def assemble_load_statistics(feeder: Feeder, forecasters: Mapping[int, NodeForecaster],
                             t: int, rho: float = 0.0,
                             fallback: NodeForecaster | None = None) -> LoadStatistics:
    """Stack nodal forecasts into ``(mu_s, Sigma_s)`` at time ``t``.

    Each bus forecast is split over its phases by :func:`phase_shares`
    (means and variances both split, phases independent). The covariance
    is ``rho * sd sd^T + (1 - rho) diag(var)``.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"correlation rho must lie in [0, 1), got {rho}")
    n = feeder.n_lines
    shares = phase_shares(feeder)
    mean = np.zeros(6 * n)
    var = np.zeros(6 * n)
    for bus in range(1, feeder.n_buses):
        fc = forecasters.get(bus)
        if fc is None:
            if not feeder.buses[bus].has_load:
                continue
            fc = fallback
            if fc is None:
                raise ValueError(f"bus {bus}: no forecaster and no fallback profile")
        pm, pv, qm, qv = fc.predict(t)
        sl = slice(3 * (bus - 1), 3 * bus)
        w = shares[bus]
        mean[sl], var[sl] = pm * w, pv * w
        sl_q = slice(3 * n + 3 * (bus - 1), 3 * n + 3 * bus)
        mean[sl_q], var[sl_q] = qm * w, qv * w
    sd = np.sqrt(var)
    cov = rho * np.outer(sd, sd) + (1.0 - rho) * np.diag(var)
    return LoadStatistics(mean, _psd(cov), t)


def _psd(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    if not np.any(np.triu(cov, 1)):
        return np.diag(np.maximum(np.diag(cov), 0.0))
    w, v = np.linalg.eigh(cov)
    if w.min() >= 0:
        return cov
    w = np.where(w < 0, 0.0, w)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


@dataclass
class GpNodeForecaster:
    """GP pair for one bus, trained on loads normalized by ``scale``."""

    p_model: GpModel
    q_model: GpModel
    config: FeatureConfig
    scale: float
    history_p: np.ndarray | None = None
    history_q: np.ndarray | None = None
    exogenous: Mapping[str, np.ndarray] | None = None
    include_noise: bool = True

    def predict(self, t: int) -> tuple[float, float, float, float]:
        out = []
        for model, hist in ((self.p_model, self.history_p), (self.q_model, self.history_q)):
            h = None if hist is None else hist / self.scale
            x = build_features(self.config, h, self.exogenous, t)
            m, v = model.predict(x)
            if self.include_noise:
                v = v + model.hyper.noise_variance
            out += [float(m) * self.scale, float(v) * self.scale**2]
        return tuple(out)


@dataclass
class ProfileForecaster:
    """Average-profile forecast for an unmetered bus."""

    shape: np.ndarray          # normalized mean per slot of day
    shape_var: np.ndarray      # normalized variance per slot of day
    peak_p: float
    peak_q: float
    steps_per_day: int

    def predict(self, t: int) -> tuple[float, float, float, float]:
        k = int(t) % self.steps_per_day
        m, v = self.shape[k], self.shape_var[k]
        return (m * self.peak_p, v * self.peak_p**2, m * self.peak_q, v * self.peak_q**2)


def fit_node_forecaster(p_hist: np.ndarray, q_hist: np.ndarray, train_times: Sequence[int],
                        config: FeatureConfig, hyper: KernelConfig, scale: float,
                        exogenous=None) -> GpNodeForecaster:
    scale = scale if scale > 0 else 1.0
    models = []
    for hist in (p_hist, q_hist):
        h = np.asarray(hist, dtype=float) / scale
        x = feature_matrix(config, h, exogenous, train_times)
        models.append(fit_gp(x, h[list(train_times)], hyper, config.layout()))
    return GpNodeForecaster(models[0], models[1], config, scale,
                            np.asarray(p_hist, float), np.asarray(q_hist, float), exogenous)


def average_profile(series: Sequence[np.ndarray], scales: Sequence[float], train_times,
                    steps_per_day: int, inflation: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Slot-of-day mean and inflated variance of peak-normalized series."""
    times = np.asarray(list(train_times))
    slots = times % steps_per_day
    rows = [np.asarray(s, float)[times] / (sc if sc > 0 else 1.0) for s, sc in zip(series, scales)]
    if not rows:
        return np.full(steps_per_day, 0.6), np.full(steps_per_day, 0.3**2)
    data = np.vstack(rows)
    mean = np.zeros(steps_per_day)
    var = np.zeros(steps_per_day)
    for k in range(steps_per_day):
        vals = data[:, slots == k].ravel()
        if vals.size == 0:
            vals = data.ravel()   # slot never observed: use the overall level
        mean[k] = vals.mean()
        var[k] = vals.var()
    return mean, np.maximum(var * inflation, 1e-6)


# ---------------------------------------------------------------------------
# synthetic loads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_steps: int
    peaks: np.ndarray              # (n_buses,) nominal aggregate real-power peak per bus
    resolution_minutes: int = 15
    power_factor: float = 0.9
    noise: float = 0.1             # stationary sd of the AR(1) term, relative to peak
    ar_coefficient: float = 0.9
    weekend_factor: float = 0.85
    scale_spread: float = 0.3      # per-bus actual/nominal level drawn from 1 +- spread
    time_shift_hours: float = 2.0
    start: dt.datetime = dt.datetime(2013, 7, 1)


@dataclass
class LoadSeries:
    p: np.ndarray   # (T, n_buses) aggregate per bus, per-unit
    q: np.ndarray
    resolution_minutes: int = 15


def daily_shape(hours: np.ndarray, shift: float, morning: float, evening: float) -> np.ndarray:
    h = np.mod(hours - shift, 24.0)
    return (0.35 + morning * np.exp(-0.5 * ((h - 8.0) / 1.5) ** 2)
            + evening * np.exp(-0.5 * ((h - 19.0) / 2.0) ** 2))


def synth_loads(config: SynthConfig, seed: int | np.random.Generator = 0) -> LoadSeries:
    """Seeded synthetic load series: daily double-peak shape per bus, weekday
    modulation and AR(1) noise; reactive power at a fixed power factor."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    peaks = np.asarray(config.peaks, dtype=float)
    n_bus = peaks.shape[0]
    t = np.arange(config.n_steps)
    hours = t * config.resolution_minutes / 60.0
    stamps = [config.start + dt.timedelta(minutes=config.resolution_minutes * int(k)) for k in t]
    weekday = np.array([s.weekday() < 5 for s in stamps])
    week = np.where(weekday, 1.0, config.weekend_factor)

    shift = rng.uniform(-config.time_shift_hours, config.time_shift_hours, n_bus)
    morning = rng.uniform(0.2, 0.6, n_bus)
    evening = rng.uniform(0.4, 0.9, n_bus)
    level = 1.0 + rng.uniform(-config.scale_spread, config.scale_spread, n_bus)
    xi = rng.standard_normal((config.n_steps, n_bus))

    p = np.zeros((config.n_steps, n_bus))
    grid = np.linspace(0.0, 24.0, 24 * 60, endpoint=False)
    innov = config.noise * np.sqrt(1.0 - config.ar_coefficient**2)
    for b in range(n_bus):
        norm = daily_shape(grid, shift[b], morning[b], evening[b]).max()
        base = daily_shape(hours, shift[b], morning[b], evening[b]) / norm * week
        e = np.zeros(config.n_steps)
        if config.noise > 0:
            e[0] = config.noise * xi[0, b]
            for k in range(1, config.n_steps):
                e[k] = config.ar_coefficient * e[k - 1] + innov * xi[k, b]
        p[:, b] = peaks[b] * level[b] * (base + e)
    q = p * np.tan(np.arccos(config.power_factor))
    return LoadSeries(p, q, config.resolution_minutes)


def loads_to_vector(feeder: Feeder, p_bus: np.ndarray, q_bus: np.ndarray,
                    shares: np.ndarray | None = None) -> np.ndarray:
    """Split aggregate bus loads over phases into a stacked 6N load vector."""
    if shares is None:
        shares = phase_shares(feeder)
    p = (np.asarray(p_bus)[:, None] * shares)[1:]
    q = (np.asarray(q_bus)[:, None] * shares)[1:]
    return np.concatenate([p.ravel(), q.ravel()])
