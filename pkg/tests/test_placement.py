import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voltcast import network
from voltcast import placement as pl
from voltcast.linear_pf import NumericalError, assemble
from voltcast.network import SensorSet


def gram_schmidt_projection(a, s):
    basis = []
    for row in a:
        v = row.astype(float).copy()
        for q in basis:
            v -= (q @ v) * q
        if np.linalg.norm(v) > 1e-12:
            basis.append(v / np.linalg.norm(v))
    return sum(((q @ s) * q for q in basis), np.zeros_like(s))


def history(f, rng, t=12):
    return rng.uniform(0, 0.05, (6 * f.n_lines, t))


def test_split_examples():
    rng = np.random.default_rng(0)
    zm = rng.normal(size=(3, 8))
    s = zm.T @ rng.normal(size=3)
    sp = pl.observable_split(zm, s)
    np.testing.assert_allclose(sp.s_u, 0, atol=1e-12)
    null = np.linalg.svd(zm)[2][3:]
    sp = pl.observable_split(zm, null[0])
    np.testing.assert_allclose(sp.s_o, 0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_split_matches_gram_schmidt(seed):
    rng = np.random.default_rng(seed)
    zm, s = rng.normal(size=(3, 8)), rng.normal(size=8)
    sp = pl.observable_split(zm, s)
    np.testing.assert_allclose(sp.s_o, gram_schmidt_projection(zm, s), atol=1e-10)
    np.testing.assert_allclose(sp.s_o + sp.s_u, s, atol=1e-10)
    assert abs(sp.s_o @ sp.s_u) <= 1e-10
    assert np.linalg.norm(zm @ sp.s_u) <= 1e-10 * np.linalg.norm(zm) * np.linalg.norm(s)


def test_objective_examples():
    zm = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    ze = np.array([[1.0, 1, 1, 1]])
    xi = np.array([[1.0], [2], [3], [4]])
    # residual keeps entries 3 and 4; Z_e sums them to 7; weight 2 gives 14
    assert pl.placement_objective(ze, zm, xi, np.array([2.0])) == pytest.approx(196.0)
    assert pl.dense_objective(ze, zm, xi, np.array([2.0])) == pytest.approx(196.0)
    in_row_space = zm.T @ np.array([[1.0, 2], [3, 4]])
    assert pl.placement_objective(ze, zm, in_row_space) == pytest.approx(0.0, abs=1e-24)
    assert pl.placement_objective(np.zeros((0, 4)), zm, xi) == 0.0
    with pytest.raises(NumericalError):
        pl.placement_objective(ze, np.vstack([zm, zm[:1]]), xi)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_objective_structure(seed):
    rng = np.random.default_rng(seed)
    zm, ze = rng.normal(size=(3, 8)), rng.normal(size=(4, 8))
    xi = rng.normal(size=(8, 5))
    w = rng.uniform(0.5, 2, 5)
    val = pl.placement_objective(ze, zm, xi, w)
    assert val == pytest.approx(pl.dense_objective(ze, zm, xi, w), rel=1e-10)
    # weight covariance: scaling w_t by c scales column t's contribution by c^2
    c = 3.0
    w2 = w.copy()
    w2[2] *= c
    col = pl.placement_objective(ze, zm, xi[:, [2]], w[[2]])
    assert pl.placement_objective(ze, zm, xi, w2) == pytest.approx(val + (c**2 - 1) * col, rel=1e-10)
    # projection idempotence
    q = pl._row_basis(zm)
    r1 = xi - q @ (q.T @ xi)
    r2 = r1 - q @ (q.T @ r1)
    np.testing.assert_allclose(r1, r2, atol=1e-10)
    # split consistency per column
    for t in range(xi.shape[1]):
        sp = pl.observable_split(zm, xi[:, t])
        np.testing.assert_allclose(sp.s_o + sp.s_u, xi[:, t], atol=1e-12)


def test_problem_validation():
    f = network.chain_feeder(3)
    with pytest.raises(ValueError, match="column"):
        pl.PlacementProblem(f, [1, 2], np.zeros((12, 0)))
    with pytest.raises(ValueError, match="positive"):
        pl.PlacementProblem(f, [1, 2], np.ones((12, 2)), np.array([1.0, 0.0]))
    with pytest.raises(ValueError, match="budget"):
        pl.PlacementProblem(f, [1, 2], np.ones((12, 2)), budget=0)
    with pytest.raises(ValueError, match="exceeds"):
        pl.greedy_place(pl.PlacementProblem(f, [1, 2], np.ones((12, 2)), budget=3))


def test_budget_all_candidates_reaches_zero():
    rng = np.random.default_rng(1)
    f = network.random_feeder(6, rng)
    prob = pl.PlacementProblem(f, range(1, 6), history(f, rng), budget=5)
    res = pl.greedy_place(prob)
    assert res.trace[-1] == 0.0 and sorted(res.chosen) == [1, 2, 3, 4, 5]
    assert len(res.trace) == 6 and len(res.step_seconds) == 5
    doc = res.to_dict()
    assert doc["chosen"] == res.chosen and doc["sensors"][0] == 0


def test_dominant_load_first_pick():
    f = network.chain_feeder(7)
    rng = np.random.default_rng(2)
    xi = history(f, rng) * 0.01
    xi[3 * 4] = rng.uniform(0.5, 1.0, xi.shape[1])          # bus 5 dominates
    prob = pl.PlacementProblem(f, range(1, 7), xi, budget=1)
    best, val = pl.exhaustive_place(prob, 1)
    res = pl.greedy_place(prob)
    assert res.chosen == best and res.trace[1] == pytest.approx(val, rel=1e-9)
    # the measured path from the root must run through the dominant load's branch
    assert best[0] in f.subtree(5)


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 8), st.integers(0, 2**31 - 1))
def test_greedy_trace_nonincreasing_and_first_pick(n_bus, seed):
    rng = np.random.default_rng(seed)
    f = network.random_feeder(n_bus, rng)
    xi = history(f, rng, t=int(rng.integers(1, 10)))
    prob = pl.PlacementProblem(f, range(1, n_bus), xi, rng.uniform(0.5, 2, xi.shape[1]),
                               budget=min(3, n_bus - 1))
    res = pl.greedy_place(prob)
    assert all(b <= a * (1 + 1e-9) + 1e-18 for a, b in zip(res.trace, res.trace[1:]))
    best, val = pl.exhaustive_place(prob, 1)
    assert res.trace[1] == pytest.approx(val, rel=1e-8, abs=1e-18)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_adding_sensor_shrinks_projection_residual(seed):
    rng = np.random.default_rng(seed)
    f = network.random_feeder(8, rng)
    xi = history(f, rng)
    base = [int(b) for b in rng.choice(np.arange(1, 8), 2, replace=False)]
    extra = int(rng.choice([b for b in range(1, 8) if b not in base]))

    def residual(buses):
        q = pl._row_basis(assemble(f, SensorSet(f, buses)).Z_m)
        return np.linalg.norm(xi - q @ (q.T @ xi))

    assert residual(base + [extra]) <= residual(base) * (1 + 1e-12)


def test_adding_sensor_can_raise_objective():
    # Z_e (I - P) Xi is not monotone in the projection: here a third sensor
    # shrinks the residual yet raises the objective, also under the dense oracle
    rng = np.random.default_rng(7412)
    f = network.random_feeder(8, rng)
    xi = rng.uniform(0, 0.05, (6 * f.n_lines, 12))
    two, three = assemble(f, SensorSet(f, [4, 3])), assemble(f, SensorSet(f, [4, 3, 1]))
    before = pl.dense_objective(two.Z_e, two.Z_m, xi)
    after = pl.dense_objective(three.Z_e, three.Z_m, xi)
    assert after > before * (1 + 1e-5)
    prob = pl.PlacementProblem(f, range(1, 8), xi)
    assert pl.evaluate_placement(prob, [4, 3, 1]) == pytest.approx(after, rel=1e-10)
    # the same increase with the two-sensor Z_e held fixed, so pairing is not the cause
    assert pl.dense_objective(two.Z_e, three.Z_m, xi) > before * (1 + 1e-5)


def test_exhaustive_limit():
    f = network.chain_feeder(13)
    prob = pl.PlacementProblem(f, range(1, 13), np.ones((72, 1)))
    with pytest.raises(ValueError, match="10 candidates"):
        pl.exhaustive_place(prob, 1)


def test_evaluate_matches_model():
    rng = np.random.default_rng(3)
    f = network.random_feeder(7, rng)
    xi = history(f, rng)
    m = assemble(f, SensorSet(f, [2, 5]))
    prob = pl.PlacementProblem(f, range(1, 7), xi)
    assert pl.evaluate_placement(prob, [2, 5]) == pytest.approx(pl.dense_objective(m.Z_e, m.Z_m, xi), rel=1e-10)
