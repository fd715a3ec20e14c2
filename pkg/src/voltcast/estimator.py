"""Bayesian linear least-squares voltage estimation and its baselines."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .forecast import LoadStatistics
from .linear_pf import EstimatorModel, NumericalError

NOISE_FLOOR = 1e-8


@dataclass(frozen=True)
class VoltageForecast:
    """Prior statistics of measured (z) and estimated (x) differences."""

    mu_z: np.ndarray
    mu_x: np.ndarray
    sigma_z: np.ndarray
    sigma_xz: np.ndarray
    timestep: int = 0
    _chol: tuple = field(default=None, repr=False, compare=False)

    @property
    def chol(self) -> tuple:
        return self._chol


def forecast_voltage_stats(model: EstimatorModel, loads: LoadStatistics,
                           sensor_noise_var: float = 0.0,
                           noise_floor: float = NOISE_FLOOR) -> VoltageForecast:
    """Push load statistics through ``Z_m`` and ``Z_e``.

    ``sigma_z`` receives ``sensor_noise_var + noise_floor`` on its diagonal
    and is factorized once here, so later updates only do triangular solves.
    """
    mu_s, cov_s = loads.mean, loads.covariance
    if mu_s.shape != (model.Z_m.shape[1],) or cov_s.shape != (mu_s.size, mu_s.size):
        raise ValueError("load statistics do not match the model dimensions")
    zm_cov = model.Z_m @ cov_s
    sigma_z = zm_cov @ model.Z_m.T
    sigma_z = 0.5 * (sigma_z + sigma_z.T) + (sensor_noise_var + noise_floor) * np.eye(len(sigma_z))
    sigma_xz = model.Z_e @ zm_cov.T
    chol = None
    if len(sigma_z):
        try:
            chol = linalg.cho_factor(sigma_z, lower=True)
        except linalg.LinAlgError as exc:
            d = np.diag(sigma_z)
            bad = [model.measurement_rows[i] for i in np.flatnonzero(d <= noise_floor * 1.0000001)]
            raise NumericalError(f"measurement covariance not invertible; deficient rows {bad}") from exc
    return VoltageForecast(model.Z_m @ mu_s, model.Z_e @ mu_s, sigma_z, sigma_xz, loads.timestep, chol)


def llse_update(fc: VoltageForecast, dy_m: np.ndarray) -> np.ndarray:
    """``mu_x + Sigma_xz Sigma_z^-1 (dy_m - mu_z)`` via the cached Cholesky factor."""
    if fc.chol is None:
        return fc.mu_x.copy()
    innov = np.asarray(dy_m, dtype=float) - fc.mu_z
    return fc.mu_x + fc.sigma_xz @ linalg.cho_solve(fc.chol, innov, check_finite=False)


def posterior_covariance(fc: VoltageForecast, sigma_x: np.ndarray) -> np.ndarray:
    """Error covariance ``Sigma_x - Sigma_xz Sigma_z^-1 Sigma_zx`` of the update."""
    if fc.chol is None:
        return sigma_x
    return sigma_x - fc.sigma_xz @ linalg.cho_solve(fc.chol, fc.sigma_xz.T)


@dataclass
class EstimateResult:
    delta_y_e_hat: np.ndarray
    v_hat: np.ndarray              # (n_est, 3), NaN on absent phases
    innovation: np.ndarray
    anomaly_flags: np.ndarray      # per measurement pair
    clamped: np.ndarray            # (n_est, 3) radicand < 0


def recover_voltages(model: EstimatorModel, sensor_sq_voltages: dict[int, np.ndarray],
                     dy_e_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Absolute magnitudes from the nearest sensor reading plus the estimated rise.

    Returns ``(v_hat, clamped)``, both shaped (n_estimated_buses, 3);
    negative radicands are clamped to zero and flagged.
    """
    n_est = len(model.estimation_pairs)
    y_near = np.zeros((n_est, 3))
    for i, (sensor, _bus) in enumerate(model.estimation_pairs):
        if sensor not in sensor_sq_voltages:
            raise KeyError(f"missing sensor reading for bus {sensor}")
        y_near[i] = sensor_sq_voltages[sensor]
    radicand = y_near + np.asarray(dy_e_hat, dtype=float).reshape(n_est, 3)
    active = model.e_active.reshape(n_est, 3) if n_est else np.zeros((0, 3), bool)
    clamped = active & (radicand < 0)
    v = np.sqrt(np.where(clamped, 0.0, np.abs(radicand)))
    return np.where(active, v, np.nan), clamped


def flag_innovations(fc: VoltageForecast, dy_m: np.ndarray, threshold: float = 4.0,
                     active: np.ndarray | None = None) -> np.ndarray:
    """Flag measurement pairs whose own innovation block has Mahalanobis norm above ``threshold``."""
    innov = np.asarray(dy_m, dtype=float) - fc.mu_z
    n_pairs = len(innov) // 3
    if active is None:
        active = np.ones(len(innov), dtype=bool)
    flags = np.zeros(n_pairs, dtype=bool)
    for i in range(n_pairs):
        rows = np.arange(3 * i, 3 * i + 3)[active[3 * i : 3 * i + 3]]
        if rows.size == 0:
            continue
        e = innov[rows]
        block = fc.sigma_z[np.ix_(rows, rows)]
        d2 = float(e @ np.linalg.solve(block, e))
        flags[i] = np.sqrt(max(d2, 0.0)) > threshold
    return flags


def estimate(model: EstimatorModel, fc: VoltageForecast, dy_m: np.ndarray,
             sensor_sq_voltages: dict[int, np.ndarray], threshold: float = 4.0) -> EstimateResult:
    dy_e = llse_update(fc, dy_m)
    v_hat, clamped = recover_voltages(model, sensor_sq_voltages, dy_e)
    flags = flag_innovations(fc, dy_m, threshold, model.m_active)
    return EstimateResult(dy_e, v_hat, np.asarray(dy_m) - fc.mu_z, flags, clamped)


class UnobservableError(NumericalError):
    def __init__(self, directions: np.ndarray):
        self.directions = directions
        super().__init__(
            f"unobservable state: gain matrix has {directions.shape[1]} null-space "
            f"direction(s), e.g. {np.round(directions[:, 0], 6).tolist()}"
        )


@dataclass
class WlsResult:
    x: np.ndarray
    residual_norm: float


def wls_estimate(H: np.ndarray, z: np.ndarray, W: np.ndarray) -> WlsResult:
    """Linear weighted least squares via the normal equations.

    ``W`` may be a full weight matrix or a vector of diagonal weights.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    z = np.asarray(z, dtype=float)
    W = np.asarray(W, dtype=float)
    hw = H.T * W if W.ndim == 1 else H.T @ W
    gain = hw @ H
    sv_u, sv, _ = np.linalg.svd(gain)
    tol = max(gain.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    null = sv <= tol
    if np.any(null) or sv.size == 0:
        raise UnobservableError(sv_u[:, null] if np.any(null) else np.eye(gain.shape[0]))
    try:
        x = linalg.cho_solve(linalg.cho_factor(gain), hw @ z)
    except linalg.LinAlgError as exc:
        raise NumericalError("WLS gain matrix factorization failed") from exc
    r = z - H @ x
    return WlsResult(x, float(np.linalg.norm(r)))


def wls_pseudo_estimate(model: EstimatorModel, dy_m: np.ndarray, pseudo_loads: np.ndarray,
                        sensor_sd: float, pseudo_sd: float) -> np.ndarray:
    """Conventional WLS baseline: loads as state, sensor differences plus load
    pseudo-measurements, uniform weights; returns the estimated ``dy_e``."""
    active = model.m_active
    H = np.vstack([model.Z_m[active], np.eye(model.Z_m.shape[1])])
    z = np.concatenate([np.asarray(dy_m)[active], pseudo_loads])
    w = np.concatenate([np.full(active.sum(), 1.0 / max(sensor_sd, 1e-6) ** 2),
                        np.full(len(pseudo_loads), 1.0 / pseudo_sd**2)])
    s_hat = wls_estimate(H, z, w).x
    return model.Z_e @ s_hat


def armse(estimates: np.ndarray, truth: np.ndarray) -> float:
    """Root of the time-averaged squared error norm; axis 0 is time.

    NaN entries (absent phases) are skipped.
    """
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    if est.shape[0] == 0:
        raise ValueError("empty series")
    err = (est - tru).reshape(est.shape[0], -1)
    return float(np.sqrt(np.mean(np.nansum(err**2, axis=1))))
