import numpy as np
import pytest
from hypothesis import given, settings

from voltcast import network
from voltcast.oracle import (
    ALPHA,
    branch_flows,
    kvl_residuals,
    measurements_from_solution,
    sensor_readings,
    substation_injection,
    sweep_solve,
)

from conftest import tree_doc, trees


def two_bus_closed_form(r, x, p, q, v0=1.0):
    """|V1|^2 of the two-bus constant-power flow, high-voltage root."""
    b = v0**2 - 2 * (r * p + x * q)
    return 0.5 * (b + np.sqrt(b**2 - 4 * (r**2 + x**2) * (p**2 + q**2)))


def load_vector(f, p, q):
    n = f.n_lines
    return np.concatenate([np.resize(p, 3 * n), np.resize(q, 3 * n)])


def test_zero_load_flat():
    f = network.chain_feeder(4, phases="abc")
    sol = sweep_solve(f, np.zeros(6 * 3))
    assert sol.converged and sol.iterations == 1
    np.testing.assert_array_equal(sol.voltages, np.tile([1.0, ALPHA**2, ALPHA], (4, 1)))


def test_two_bus_against_quadratic():
    f = network.chain_feeder(2)
    sol = sweep_solve(f, load_vector(f, [1.0, 0, 0], [0.5, 0, 0]))
    y1 = sol.sq_magnitudes[1, 0]
    assert sol.converged
    assert y1 == pytest.approx(two_bus_closed_form(0.01, 0.02, 1.0, 0.5), abs=1e-8)
    assert abs(y1 - 0.96) / 0.96 < 0.005
    assert sol.voltages[0, 0] == 1.0


def test_balanced_symmetry():
    f = network.chain_feeder(3, phases="abc", r_mutual=0.002, x_mutual=0.004)
    sol = sweep_solve(f, load_vector(f, 0.3, 0.1))
    v = sol.voltages
    np.testing.assert_allclose(v[:, 1], v[:, 0] * ALPHA**2, atol=1e-10)
    np.testing.assert_allclose(v[:, 2], v[:, 0] * ALPHA, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(trees())
def test_kvl_and_losses(f):
    s = np.concatenate([f.peaks()[1:, 0].ravel(), f.peaks()[1:, 1].ravel()])
    sol = sweep_solve(f, s)
    assert sol.converged and sol.max_mismatch <= 1e-9
    assert kvl_residuals(f, sol).max() <= 1e-10
    inj = substation_injection(f, sol)
    assert inj.real.sum() >= s[: 3 * f.n_lines].sum() - 1e-12


def test_receiving_flows_balance():
    f = network.feeder_from_dict(tree_doc([0, 1, 1]))
    s = load_vector(f, [0.2, 0, 0, 0.3, 0, 0, 0.1, 0, 0], [0.1, 0, 0, 0.1, 0, 0, 0.05, 0, 0])
    sol = sweep_solve(f, s)
    flows, _ = branch_flows(f, sol)
    # the last branch feeds a leaf: its receiving-end flow is the leaf load
    assert flows[2, 0] == pytest.approx(0.1 + 0.05j, abs=1e-9)


def test_non_convergence_reported():
    f = network.chain_feeder(2)
    sol = sweep_solve(f, load_vector(f, [30.0, 0, 0], [30.0, 0, 0]), max_iter=20)
    assert not sol.converged and sol.iterations == 20 and sol.max_mismatch > 1e-9


def test_measurements():
    f = network.chain_feeder(3, phases="abc")
    sol = sweep_solve(f, load_vector(f, 0.2, 0.1))
    pairs = [(0, 1), (1, 2)]
    exact = measurements_from_solution(sol, pairs, 0.0)
    y = sol.sq_magnitudes
    np.testing.assert_array_equal(exact, np.concatenate([y[1] - y[0], y[2] - y[1]]))
    a = measurements_from_solution(sol, pairs, 1e-3, seed=7)
    b = measurements_from_solution(sol, pairs, 1e-3, seed=7)
    assert a.tobytes() == b.tobytes() and not np.array_equal(a, exact)
    flat = sweep_solve(f, np.zeros(12))
    assert not measurements_from_solution(flat, pairs).any()
    with pytest.raises(ValueError, match="absent"):
        measurements_from_solution(sol, [(0, 5)])
    r = sensor_readings(sol, [0, 2], 0.0)
    np.testing.assert_array_equal(r, y[[0, 2]])


def test_csv_export(tmp_path):
    f = network.chain_feeder(2, phases="ab")
    sol = sweep_solve(f, load_vector(f, [0.1, 0.1, 0], [0, 0, 0]))
    path = tmp_path / "v.csv"
    sol.to_csv(path, f)
    lines = path.read_text().splitlines()
    assert lines[0] == "bus,phase,v_pu,angle_deg" and len(lines) == 1 + 4
    assert float(lines[1].split(",")[2]) == 1.0
