"""Backward/forward sweep solver for the exact radial power flow.

Used as ground truth: it keeps the line losses and the higher-order
voltage-drop term that the linear model discards.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .network import Feeder

ALPHA = np.exp(2j * np.pi / 3)


def balanced_slack(magnitude: float = 1.0) -> np.ndarray:
    """Positive-sequence reference: a at 0 deg, b at -120 deg, c at +120 deg."""
    return magnitude * np.array([1.0, ALPHA**2, ALPHA])


def loads_to_complex(feeder: Feeder, s: np.ndarray) -> np.ndarray:
    """Stacked load vector (6N) to complex per-bus loads (n_buses, 3)."""
    n = feeder.n_lines
    s = np.asarray(s, dtype=float)
    if s.shape != (6 * n,):
        raise ValueError(f"load vector must have length {6 * n}, got {s.shape}")
    out = np.zeros((feeder.n_buses, 3), dtype=complex)
    out[1:] = (s[: 3 * n] + 1j * s[3 * n :]).reshape(n, 3)
    return out


@dataclass
class PowerFlowSolution:
    voltages: np.ndarray          # (n_buses, 3) complex phasors, 0 on absent phases
    branch_currents: np.ndarray   # (N, 3) complex, branch b feeds bus b + 1
    converged: bool
    iterations: int
    max_mismatch: float

    @property
    def sq_magnitudes(self) -> np.ndarray:
        return np.abs(self.voltages) ** 2

    def to_csv(self, path, feeder: Feeder | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bus", "phase", "v_pu", "angle_deg"])
            for bus, row in enumerate(self.voltages):
                for k, ph in enumerate("abc"):
                    if feeder is not None and ph not in feeder.buses[bus].phases:
                        continue
                    w.writerow([bus, ph, repr(float(abs(row[k]))),
                                repr(float(np.degrees(np.angle(row[k]))))])


def sweep_solve(feeder: Feeder, s: np.ndarray, slack: np.ndarray | None = None,
                tol: float = 1e-9, max_iter: int = 100) -> PowerFlowSolution:
    """Solve constant-power radial power flow by backward/forward sweep.

    Iterates from a flat start until the largest voltage update is below
    ``tol`` and the nodal power mismatch is at most ``tol``. Never raises on
    non-convergence; check ``converged`` and ``max_mismatch`` instead.
    """
    present = feeder.phase_mask()
    loads = loads_to_complex(feeder, s) * present
    if slack is None:
        slack = balanced_slack()
    slack = np.asarray(slack, dtype=complex)
    z = np.array([ln.z for ln in feeder.lines])
    order = feeder.preorder
    parent = feeder.parent

    v = np.where(present, slack[None, :], 0.0)
    i_line = np.zeros((feeder.n_lines, 3), dtype=complex)
    mismatch = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        i_load = np.zeros_like(v)
        np.divide(loads, v, out=i_load, where=present)
        i_load = np.conj(i_load)
        i_line = np.zeros((feeder.n_lines, 3), dtype=complex)
        for j in reversed(order[1:]):
            i_line[j - 1] += i_load[j]
            if parent[j] != 0:
                i_line[parent[j] - 1] += i_line[j - 1]
        v_new = v.copy()
        v_new[0] = np.where(present[0], slack, 0.0)
        for j in order[1:]:
            v_new[j] = v_new[parent[j]] - z[j - 1] @ i_line[j - 1]
        v_new = np.where(present, v_new, 0.0)
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        mismatch = _mismatch(feeder, v, i_line, loads)
        if delta < tol and mismatch <= tol:
            converged = True
            break
    return PowerFlowSolution(v, i_line, converged, it, mismatch)


def _mismatch(feeder: Feeder, v, i_line, loads) -> float:
    net = i_line.copy()
    for j in range(1, feeder.n_buses):
        for c in feeder.children[j]:
            net[j - 1] -= i_line[c - 1]
    s_calc = v[1:] * np.conj(net)
    return float(np.max(np.abs(s_calc - loads[1:]))) if len(net) else 0.0


def kvl_residuals(feeder: Feeder, sol: PowerFlowSolution) -> np.ndarray:
    """Norm of ``V_m - V_n - Z_mn I_mn`` per branch."""
    out = np.zeros(feeder.n_lines)
    for b, ln in enumerate(feeder.lines):
        r = sol.voltages[ln.from_bus] - sol.voltages[ln.to_bus] - ln.z @ sol.branch_currents[b]
        out[b] = np.linalg.norm(r * ln.mask)
    return out


def branch_flows(feeder: Feeder, sol: PowerFlowSolution) -> tuple[np.ndarray, np.ndarray]:
    """Receiving-end complex flows ``V_n o conj(I_mn)`` and drop terms ``|Z I|^2``."""
    children = np.array([ln.to_bus for ln in feeder.lines])
    flows = sol.voltages[children] * np.conj(sol.branch_currents)
    drops = np.array([ln.z @ sol.branch_currents[b] for b, ln in enumerate(feeder.lines)])
    return flows, np.abs(drops) ** 2


def substation_injection(feeder: Feeder, sol: PowerFlowSolution) -> np.ndarray:
    total = np.zeros(3, dtype=complex)
    for c in feeder.children[0]:
        total += sol.branch_currents[c - 1]
    return sol.voltages[0] * np.conj(total)


def measurements_from_solution(sol: PowerFlowSolution, pairs, noise_sd: float = 0.0,
                               seed: int | np.random.Generator = 0) -> np.ndarray:
    """Squared-magnitude differences ``|V_second|^2 - |V_first|^2`` per pair and phase.

    Additive Gaussian noise with standard deviation ``noise_sd`` is drawn
    from a generator seeded by ``seed``; rows for phases missing at either
    end stay exactly zero.
    """
    y = sol.sq_magnitudes
    present = np.abs(sol.voltages) > 0
    n_bus = y.shape[0]
    out = np.zeros(3 * len(pairs))
    mask = np.zeros(3 * len(pairs), dtype=bool)
    for i, (u, v) in enumerate(pairs):
        for end in (u, v):
            if not 0 <= end < n_bus:
                raise ValueError(f"pair ({u},{v}) references bus {end} absent from solution")
        m = present[u] & present[v]
        out[3 * i : 3 * i + 3] = np.where(m, y[v] - y[u], 0.0)
        mask[3 * i : 3 * i + 3] = m
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=out.shape) * noise_sd
    return np.where(mask, out + noise, 0.0)


def sensor_readings(sol: PowerFlowSolution, buses, noise_sd: float = 0.0,
                    seed: int | np.random.Generator = 0) -> np.ndarray:
    """Squared magnitudes at the given buses, shape (len(buses), 3), with noise."""
    y = sol.sq_magnitudes[list(buses)]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=y.shape) * noise_sd
    return np.where(y > 0, y + noise, 0.0)
