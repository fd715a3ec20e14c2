"""Observability split of load profiles and data-driven sensor placement."""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linear_pf import RANK_RTOL, NumericalError, assemble
from .network import Feeder, SensorSet


def _row_basis(z_m: np.ndarray) -> np.ndarray:
    """Orthonormal basis (columns) of the row space of ``z_m``, zero rows dropped."""
    rows = z_m[np.any(z_m != 0, axis=1)]
    if rows.size == 0:
        return np.zeros((z_m.shape[1], 0))
    _, sv, vt = np.linalg.svd(rows, full_matrices=False)
    rank = int(np.sum(sv > RANK_RTOL * sv[0]))
    return vt[:rank].T


@dataclass(frozen=True)
class ObservabilitySplit:
    s_o: np.ndarray
    s_u: np.ndarray


def observable_split(z_m: np.ndarray, s: np.ndarray) -> ObservabilitySplit:
    """Split ``s`` into its row-space part and its null-space part w.r.t. ``z_m``."""
    q = _row_basis(np.atleast_2d(z_m))
    s = np.asarray(s, dtype=float)
    s_o = q @ (q.T @ s)
    return ObservabilitySplit(s_o, s - s_o)


def placement_objective(z_e: np.ndarray, z_m: np.ndarray, xi: np.ndarray,
                        w: np.ndarray | None = None) -> float:
    """Squared Frobenius norm of ``Z_e (I - P_Zm) Xi W``.

    ``w`` holds the diagonal of ``W`` (defaults to ones).
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if w is None:
        w = np.ones(xi.shape[1])
    w = np.asarray(w, dtype=float)
    if z_e.shape[0] == 0:
        return 0.0
    nz = z_m[np.any(z_m != 0, axis=1)]
    q = _row_basis(z_m)
    if q.shape[1] != nz.shape[0]:
        raise NumericalError("rank-deficient measurement matrix")
    xw = xi * w[None, :]
    resid = xw - q @ (q.T @ xw)
    return float(np.sum((z_e @ resid) ** 2))


@dataclass
class PlacementProblem:
    feeder: Feeder
    candidates: Sequence[int]
    xi: np.ndarray                    # (6N, T) historical load profiles
    weights: np.ndarray | None = None  # diagonal of W, length T
    budget: int = 1

    def __post_init__(self):
        if self.xi.ndim != 2 or self.xi.shape[1] < 1:
            raise ValueError("historical load matrix must have at least one column")
        if self.weights is not None and np.any(np.asarray(self.weights) <= 0):
            raise ValueError("weights must be positive")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")


@dataclass
class PlacementResult:
    sensors: SensorSet
    chosen: list[int]
    trace: list[float]
    step_seconds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"chosen": self.chosen, "sensors": list(self.sensors.buses),
                "objective_trace": self.trace, "step_seconds": self.step_seconds}


def evaluate_placement(problem: PlacementProblem, buses: Sequence[int]) -> float:
    model = assemble(problem.feeder, SensorSet(problem.feeder, buses))
    return placement_objective(model.Z_e, model.Z_m, problem.xi, problem.weights)


def greedy_place(problem: PlacementProblem) -> PlacementResult:
    """Forward greedy selection starting from the substation.

    Each step adds the candidate with the lowest objective (ties to the
    smaller bus id); candidates giving a rank-deficient measurement matrix
    are skipped.
    """
    cands = sorted(set(int(c) for c in problem.candidates) - {0})
    if problem.budget > len(cands):
        raise ValueError(f"budget {problem.budget} exceeds {len(cands)} candidates")
    chosen: list[int] = []
    trace = [evaluate_placement(problem, [])]
    seconds = []
    for _ in range(problem.budget):
        t0 = time.perf_counter()
        best = None
        for c in cands:
            if c in chosen:
                continue
            try:
                val = evaluate_placement(problem, chosen + [c])
            except NumericalError:
                continue
            if best is None or val < best[0]:
                best = (val, c)
        if best is None:
            raise NumericalError("every candidate gives a rank-deficient measurement matrix")
        chosen.append(best[1])
        trace.append(best[0])
        seconds.append(time.perf_counter() - t0)
    return PlacementResult(SensorSet(problem.feeder, chosen), chosen, trace, seconds)


def exhaustive_place(problem: PlacementProblem, k: int | None = None) -> tuple[list[int], float]:
    """Best ``k``-subset of candidates by brute force (small feeders only).

    Uses an explicit pseudo-inverse projection so it stays independent of
    the factorization path in :func:`placement_objective`.
    """
    k = problem.budget if k is None else k
    cands = sorted(set(int(c) for c in problem.candidates) - {0})
    if len(cands) > 10:
        raise ValueError("exhaustive search limited to 10 candidates")
    best: tuple[float, list[int]] | None = None
    for subset in itertools.combinations(cands, k):
        try:
            model = assemble(problem.feeder, SensorSet(problem.feeder, subset))
        except NumericalError:
            continue
        val = dense_objective(model.Z_e, model.Z_m, problem.xi, problem.weights)
        if best is None or val < best[0] - 1e-15:
            best = (val, list(subset))
    if best is None:
        raise NumericalError("no feasible placement")
    return best[1], best[0]


def dense_objective(z_e, z_m, xi, w=None) -> float:
    if w is None:
        w = np.ones(xi.shape[1])
    if z_e.shape[0] == 0:
        return 0.0
    a = z_m[np.any(z_m != 0, axis=1)]
    proj = a.T @ np.linalg.pinv(a @ a.T) @ a
    m = z_e @ (np.eye(xi.shape[0]) - proj) @ xi @ np.diag(w)
    return float(np.sum(m * m))
