"""Linearized unbalanced power flow in squared voltage magnitudes.

Losses and the higher-order voltage-drop term are dropped and phase
voltage ratios are fixed to the balanced rotation, so per-branch changes
in squared voltage magnitude become a linear function of the branch flows,
and, through the lossless flow balance, of the nodal loads.

Sign convention: every difference is ``y_second - y_first`` for a pair
``(first, second)``; per branch that is ``y_child - y_parent``, which is
negative for consuming loads.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .network import (
    Feeder,
    FeederError,
    Line,
    SensorSet,
    default_sensor_paths,
    downstream_matrix,
    path_matrix,
)

SQRT3 = np.sqrt(3.0)
RANK_RTOL = 1e-10


class NumericalError(RuntimeError):
    """Raised on rank deficiency or factorization failure."""


@dataclass(frozen=True)
class BranchSensitivity:
    """``M`` and ``N`` blocks of one line (per-unit, 3x3)."""

    M: np.ndarray
    N: np.ndarray
    branch: int


def branch_sensitivities(line: Line, branch: int = -1) -> BranchSensitivity:
    r, x = line.r, line.x
    # sign pattern of the balanced-ratio product Re/Im{Gamma o conj(Z)}:
    # +1 where Gamma holds alpha (upper cyclic), -1 where it holds alpha^2
    s = np.array([[0.0, 1.0, -1.0], [-1.0, 0.0, 1.0], [1.0, -1.0, 0.0]])
    off = 1.0 - np.eye(3)
    two_m = np.where(off > 0, -r + s * SQRT3 * x, 2.0 * r)
    two_n = np.where(off > 0, x + s * SQRT3 * r, -2.0 * x)
    mask = line.mask
    keep = np.outer(mask, mask)
    return BranchSensitivity(np.where(keep, two_m / 2, 0.0), np.where(keep, two_n / 2, 0.0), branch)


def _gamma_balanced() -> np.ndarray:
    a = np.exp(2j * np.pi / 3)
    return np.array([[1, a, a**2], [a**2, 1, a], [a, a**2, 1]])


def sensitivities_from_gamma(line: Line) -> tuple[np.ndarray, np.ndarray]:
    """Reference evaluation ``(Re, Im){Gamma o conj(Z)}`` with the balanced Gamma."""
    g = _gamma_balanced() * np.conj(line.z)
    return g.real, g.imag


@dataclass(frozen=True)
class EstimatorModel:
    """Assembled linear maps from the stacked load vector to voltage differences.

    ``Z_n @ s`` gives per-branch rises ``y_child - y_parent``; ``Z_m @ s``
    the measured pair differences and ``Z_e @ s`` the estimated ones.
    """

    feeder: Feeder = field(repr=False)
    sensors: tuple[int, ...]
    Z_b: np.ndarray = field(repr=False)
    P_b: np.ndarray = field(repr=False)
    Z_n: np.ndarray = field(repr=False)
    P_m: np.ndarray = field(repr=False)
    P_e: np.ndarray = field(repr=False)
    Z_m: np.ndarray = field(repr=False)
    Z_e: np.ndarray = field(repr=False)
    measurement_pairs: tuple[tuple[int, int], ...]
    estimation_pairs: tuple[tuple[int, int], ...]

    @property
    def n_lines(self) -> int:
        return self.feeder.n_lines

    @property
    def load_columns(self) -> list[tuple[int, str, str]]:
        """(bus, phase, 'p'|'q') for every entry of the load vector."""
        cols = []
        for kind in "pq":
            for bus in range(1, self.feeder.n_buses):
                for ph in "abc":
                    cols.append((bus, ph, kind))
        return cols

    @property
    def branch_rows(self) -> list[tuple[int, str]]:
        """(child bus, phase) for every row of ``Z_b`` / ``Z_n``."""
        return [(b, ph) for b in range(1, self.feeder.n_buses) for ph in "abc"]

    @property
    def measurement_rows(self) -> list[tuple[int, int, str]]:
        return [(u, v, ph) for (u, v) in self.measurement_pairs for ph in "abc"]

    @property
    def estimation_rows(self) -> list[tuple[int, int, str]]:
        return [(u, v, ph) for (u, v) in self.estimation_pairs for ph in "abc"]

    @property
    def m_active(self) -> np.ndarray:
        """Mask of measurement rows that are not structurally zero."""
        return _phases_of_rows(self.feeder, self.measurement_pairs)

    @property
    def e_active(self) -> np.ndarray:
        """Mask of estimation rows whose phase exists at both ends of the pair."""
        return _phases_of_rows(self.feeder, self.estimation_pairs)


def _phases_of_rows(feeder: Feeder, pairs) -> np.ndarray:
    present = feeder.phase_mask()
    if not pairs:
        return np.zeros(0, dtype=bool)
    return np.concatenate([present[u] & present[v] for u, v in pairs])


def branch_matrix(feeder: Feeder) -> np.ndarray:
    """``Z_b`` (3N x 6N): per-branch rises as a function of branch flows."""
    n = feeder.n_lines
    zb = np.zeros((3 * n, 6 * n))
    for b, line in enumerate(feeder.lines):
        sens = branch_sensitivities(line, b)
        sl = slice(3 * b, 3 * b + 3)
        zb[sl, sl] = -2.0 * sens.M
        zb[sl, 3 * n + 3 * b : 3 * n + 3 * b + 3] = 2.0 * sens.N
    return zb


def effective_rank(a: np.ndarray) -> int:
    rows = a[np.any(a != 0, axis=1)]
    if rows.size == 0:
        return 0
    sv = np.linalg.svd(rows, compute_uv=False)
    return int(np.sum(sv > RANK_RTOL * sv[0]))


def assemble(feeder: Feeder, sensors: SensorSet | list[int]) -> EstimatorModel:
    """Build every matrix of the estimator for a sensor placement.

    Raises
    ------
    NumericalError
        If the measurement map loses rank ("overlapping sensor paths").
    """
    if not isinstance(sensors, SensorSet):
        sensors = SensorSet(feeder, sensors)
    meas, est = default_sensor_paths(feeder, sensors)
    return assemble_pairs(feeder, sensors.buses, meas, est)


def assemble_pairs(feeder: Feeder, sensors, meas, est) -> EstimatorModel:
    """Like :func:`assemble` but with explicit measurement/estimation pairs."""
    z_b = branch_matrix(feeder)
    p_b = downstream_matrix(feeder)
    z_n = z_b @ p_b
    p_m = path_matrix(feeder, meas)
    p_e = path_matrix(feeder, est)
    z_m = p_m @ z_n
    z_e = p_e @ z_n
    structural = np.count_nonzero(np.any(p_m != 0, axis=1))
    if effective_rank(z_m) != structural:
        raise NumericalError("overlapping sensor paths: measurement matrix is rank deficient")
    return EstimatorModel(feeder, tuple(sensors), z_b, p_b, z_n, p_m, p_e, z_m, z_e,
                          tuple(map(tuple, meas)), tuple(map(tuple, est)))


def predict_sq_diffs(model: EstimatorModel, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=float)
    if s.shape != (model.Z_m.shape[1],):
        raise ValueError(f"load vector must have length {model.Z_m.shape[1]}, got {s.shape}")
    return model.Z_m @ s, model.Z_e @ s


def root_rise_matrix(feeder: Feeder) -> np.ndarray:
    """Map (3(N+1) x 6N) from loads to ``y_bus - y_root`` for every bus/phase."""
    pairs = [(0, b) for b in range(feeder.n_buses)]
    return path_matrix(feeder, pairs) @ branch_matrix(feeder) @ downstream_matrix(feeder)


def linear_sq_voltages(feeder: Feeder, s: np.ndarray, slack_sq: np.ndarray | float = 1.0) -> np.ndarray:
    """Squared voltage magnitudes (n_buses, 3) predicted by the linear model."""
    y = (root_rise_matrix(feeder) @ s).reshape(-1, 3)
    y = y + np.broadcast_to(np.asarray(slack_sq, dtype=float), (3,))
    return np.where(feeder.phase_mask(), y, 0.0)


@dataclass
class LinearizationReport:
    sq_diff_abs_error: np.ndarray   # per-branch |dy_linear - dy_oracle|, shape (N, 3)
    v_rel_error: np.ndarray         # |V_lin - V_oracle| / |V_oracle|, shape (n_buses, 3)

    @property
    def max_v_rel_error(self) -> float:
        return float(np.max(self.v_rel_error)) if self.v_rel_error.size else 0.0


def linearization_report(feeder: Feeder, s: np.ndarray, oracle_solution) -> LinearizationReport:
    """Compare the linear model against a converged nonlinear solution."""
    present = feeder.phase_mask()
    v_true = np.abs(oracle_solution.voltages)
    y_true = v_true**2
    y_lin = linear_sq_voltages(feeder, s, y_true[0])
    dy_lin = (branch_matrix(feeder) @ downstream_matrix(feeder) @ s).reshape(-1, 3)
    parents = np.array(feeder.parent[1:])
    dy_true = y_true[1:] - y_true[parents]
    dy_err = np.where(present[1:], np.abs(dy_lin - dy_true), 0.0)
    v_lin = np.sqrt(np.clip(y_lin, 0.0, None))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(present, np.abs(v_lin - v_true) / v_true, 0.0)
    return LinearizationReport(dy_err, rel)


# ---------------------------------------------------------------------------
# serialization: zip container with a JSON header and raw little-endian f8
# ---------------------------------------------------------------------------

_ARRAYS = ("Z_b", "P_b", "Z_n", "P_m", "P_e", "Z_m", "Z_e")


def save_model(model: EstimatorModel, path) -> None:
    header = {
        "format": "voltcast-model/1",
        "dtype": "<f8",
        "feeder": model.feeder.to_dict(),
        "sensors": list(model.sensors),
        "measurement_pairs": [list(p) for p in model.measurement_pairs],
        "estimation_pairs": [list(p) for p in model.estimation_pairs],
        "load_columns": [list(c) for c in model.load_columns],
        "measurement_rows": [list(r) for r in model.measurement_rows],
        "estimation_rows": [list(r) for r in model.estimation_rows],
        "shapes": {k: list(getattr(model, k).shape) for k in _ARRAYS},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        _write(zf, "model.json", json.dumps(header, indent=1).encode())
        for k in _ARRAYS:
            _write(zf, f"{k}.bin", np.ascontiguousarray(getattr(model, k), dtype="<f8").tobytes())


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    # fixed timestamp keeps the container byte-stable
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def load_model(path) -> EstimatorModel:
    from .network import feeder_from_dict

    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("model.json"))
        if header.get("format") != "voltcast-model/1":
            raise FeederError(f"{path}: not a voltcast model container")
        arrays = {
            k: np.frombuffer(zf.read(f"{k}.bin"), dtype="<f8").reshape(header["shapes"][k]).copy()
            for k in _ARRAYS
        }
    feeder = feeder_from_dict(header["feeder"])
    return EstimatorModel(
        feeder,
        tuple(header["sensors"]),
        measurement_pairs=tuple(tuple(p) for p in header["measurement_pairs"]),
        estimation_pairs=tuple(tuple(p) for p in header["estimation_pairs"]),
        **arrays,
    )


def model_bytes(model: EstimatorModel) -> bytes:
    buf = io.BytesIO()
    save_model(model, buf)
    return buf.getvalue()
