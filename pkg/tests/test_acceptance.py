"""Acceptance checks. Each test prints one PASS/FAIL line with the measured
value and its runtime; the lines are repeated in the terminal summary."""
import json
import time

import numpy as np
import pytest
from scipy.optimize import brentq

from voltcast import cli, harness, network
from voltcast import placement as pl
from voltcast.estimator import forecast_voltage_stats, llse_update, NOISE_FLOOR
from voltcast.forecast import LoadStatistics
from voltcast.harness import ScenarioConfig
from voltcast.linear_pf import assemble, linearization_report
from voltcast.network import SensorSet
from voltcast.oracle import kvl_residuals, sweep_solve

LINES: list[str] = []


def report(label: str, ok: bool, detail: str, seconds: float) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail} ({seconds:.2f}s)"
    LINES.append(line)
    print(line)


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None and LINES:
        tr.write_sep("-", "acceptance")
        for line in LINES:
            tr.write_line(line)


def chain_loads(f: network.Feeder, scale: float) -> np.ndarray:
    pk = f.peaks()[1:] * scale
    return np.concatenate([pk[:, 0].ravel(), pk[:, 1].ravel()])


# 1 ---------------------------------------------------------------------------

def test_linearization_accuracy():
    t0 = time.perf_counter()
    f = network.chain_feeder(4, peak=0.5)
    # rating: the uniform loading at which the nonlinear minimum voltage hits 0.90 p.u.
    min_v = lambda c: np.abs(sweep_solve(f, chain_loads(f, c)).voltages[:, 0]).min() - 0.90
    rating = brentq(min_v, 0.1, 5.0, xtol=1e-6)
    worst = 0.0
    for frac in np.linspace(0.05, 0.5, 10):
        s = chain_loads(f, frac * rating)
        sol = sweep_solve(f, s)
        assert sol.converged
        worst = max(worst, linearization_report(f, s, sol).max_v_rel_error)
    secs = time.perf_counter() - t0
    ok = worst <= 0.01 and secs < 1.0
    report("1 linearization", ok, f"max |V| rel error {worst:.3%} up to 50% of rating "
           f"(rating x{rating:.3f} peak), limit 1%", secs)
    assert ok


# 2 ---------------------------------------------------------------------------

def _random_instance(rng):
    n_bus = int(rng.integers(3, 11))
    f = network.random_feeder(n_bus, rng)
    k = int(rng.integers(1, min(4, n_bus - 2) + 1))
    picks = rng.choice(np.arange(1, n_bus), k, replace=False)
    model = assemble(f, SensorSet(f, [int(p) for p in picks]))
    n = 6 * f.n_lines
    a = rng.normal(size=(n, n)) * 0.01
    cov = a @ a.T + np.diag(rng.uniform(1e-5, 1e-4, n))
    return model, LoadStatistics(rng.uniform(0, 0.05, n), cov)


def _conditional_mean(model, loads, noise_var, z):
    """Gaussian conditioning on the stacked joint by explicit inversion."""
    a = np.vstack([model.Z_e, model.Z_m])
    joint = a @ loads.covariance @ a.T
    nx = model.Z_e.shape[0]
    joint[nx:, nx:] += noise_var * np.eye(len(z))
    mu = a @ loads.mean
    return mu[:nx] + joint[:nx, nx:] @ np.linalg.inv(joint[nx:, nx:]) @ (z - mu[nx:])


def test_gaussian_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        model, loads = _random_instance(rng)
        noise = float(rng.uniform(0, 1e-6))
        fc = forecast_voltage_stats(model, loads, noise)
        z = rng.multivariate_normal(fc.mu_z, fc.sigma_z)
        want = _conditional_mean(model, loads, noise + NOISE_FLOOR, z)
        worst = max(worst, float(np.abs(llse_update(fc, z) - want).max()))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-8 and secs < 10
    report("2 gaussian exactness", ok, f"max abs deviation {worst:.2e} over 100 instances, limit 1e-8", secs)
    assert ok


# 3 ---------------------------------------------------------------------------

def _t_stat(d: np.ndarray) -> float:
    """|mean| of per-draw products in units of its standard error."""
    return float(abs(d.mean()) / (d.std(ddof=1) / np.sqrt(d.size)))


def test_variance_reduction():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    f = network.random_feeder(9, rng)
    model = assemble(f, SensorSet(f, [4, 8]))
    n = 6 * f.n_lines
    a = rng.normal(size=(n, n)) * 0.01
    loads = LoadStatistics(rng.uniform(0, 0.05, n), a @ a.T + np.diag(rng.uniform(1e-5, 1e-4, n)))
    fc = forecast_voltage_stats(model, loads, 0.0)
    assert np.abs(fc.sigma_xz).max() > 0
    draws = 5000
    s = rng.multivariate_normal(loads.mean, loads.covariance, draws)
    x, z = s @ model.Z_e.T, s @ model.Z_m.T
    x_hat = np.array([llse_update(fc, zi) for zi in z])
    mse_fc = np.mean((x - fc.mu_x) ** 2)
    mse_ll = np.mean((x - x_hat) ** 2)
    gain = 1 - mse_ll / mse_fc
    # residual against the measurement-driven correction: a single cross-covariance
    resid, corr = x - x_hat, x_hat - fc.mu_x
    t_stat = _t_stat(np.sum(resid * corr, axis=1))
    # the same statistic for a 10% mis-scaled gain must be rejected
    bad = fc.mu_x + 0.9 * corr
    t_bad = _t_stat(np.sum((x - bad) * (bad - fc.mu_x), axis=1))
    # entrywise view, reported only: 108 near-normal statistics
    prods = resid[:, :, None] * (z - fc.mu_z)[:, None, :]
    se = prods.std(axis=0, ddof=1) / np.sqrt(draws)
    active = se > 0
    entry_t = np.abs(prods.mean(axis=0)[active] / se[active])
    secs = time.perf_counter() - t0
    ok = mse_ll <= mse_fc and gain >= 0.05 and t_stat <= 3 and t_bad > 3 and secs < 30
    report("3 variance reduction", ok, f"MSE improvement {gain:.1%} (need 5%), residual cross-cov "
           f"{t_stat:.2f} SE (need 3; mis-scaled gain {t_bad:.0f} SE), entries beyond 3 SE "
           f"{int((entry_t > 3).sum())}/{entry_t.size}, {draws} draws", secs)
    assert ok


# 4 ---------------------------------------------------------------------------

def test_degraded_forecast_scenario():
    t0 = time.perf_counter()
    # nine sensors in total: the feeder head plus eight placed greedily
    res = harness.run_scenario(ScenarioConfig(placement_budget=8, metered_fraction=0.1, seed=0))
    fc, ll = res.per_bus["forecast"], res.per_bus["llse"]
    share = float(np.mean(ll <= fc))
    agg = res.aggregate_improvement
    secs = time.perf_counter() - t0
    ok = share >= 0.8 and agg >= 0.4 and secs < 300
    report("4 37-bus degraded forecasts", ok,
           f"{len(res.sensors)} sensors, buses not worse {share:.0%} (need 80%), aggregate "
           f"improvement {agg:.1%} (need 40%), ARMSE forecast {res.aggregate['forecast']:.4g} "
           f"llse {res.aggregate['llse']:.4g}", secs)
    assert ok


# 5 ---------------------------------------------------------------------------

def test_llse_vs_wls():
    t0 = time.perf_counter()
    feeder = harness.load_scenario_feeder(ScenarioConfig())
    ll, wl = [], []
    # same sensor count for both estimators: the feeder head plus eight placed
    for seed in range(10):
        res = harness.run_scenario(ScenarioConfig(placement_budget=8, seed=seed), feeder)
        ll.append(res.aggregate["llse"])
        wl.append(res.aggregate["wls"])
    secs = time.perf_counter() - t0
    ok = np.mean(ll) <= np.mean(wl) and secs < 300
    report("5 llse vs wls", ok, f"mean ARMSE llse {np.mean(ll):.4g} vs wls {np.mean(wl):.4g} "
           f"over 10 seeds (llse better on {sum(a <= b for a, b in zip(ll, wl))})", secs)
    assert ok


# 6 ---------------------------------------------------------------------------

def test_placement_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    monotone = first = 0
    split_err = 0.0
    for _ in range(50):
        n_bus = int(rng.integers(4, 9))
        f = network.random_feeder(n_bus, rng)
        xi = rng.uniform(0, 0.05, (6 * f.n_lines, int(rng.integers(1, 12))))
        prob = pl.PlacementProblem(f, range(1, n_bus), xi, budget=min(3, n_bus - 1))
        res = pl.greedy_place(prob)
        monotone += all(b <= a * (1 + 1e-9) + 1e-18 for a, b in zip(res.trace, res.trace[1:]))
        best, val = pl.exhaustive_place(prob, 1)
        first += res.chosen[0] == best[0] or abs(res.trace[1] - val) <= 1e-9 * max(val, 1e-18)
        zm = assemble(f, SensorSet(f, res.chosen)).Z_m
        for s in xi.T:
            sp = pl.observable_split(zm, s)
            split_err = max(split_err, np.abs(sp.s_o + sp.s_u - s).max(),
                            np.abs(zm @ sp.s_u).max(), abs(sp.s_o @ sp.s_u))
    secs = time.perf_counter() - t0
    ok = monotone == 50 and first == 50 and split_err <= 1e-10 and secs < 60
    report("6 placement", ok, f"nonincreasing traces {monotone}/50, first pick optimal {first}/50, "
           f"max split residual {split_err:.1e} (limit 1e-10)", secs)
    assert ok


# 7 ---------------------------------------------------------------------------

def test_oracle_soundness():
    t0 = time.perf_counter()
    r, x, p, q = 0.01, 0.02, 1.0, 0.5
    f = network.chain_feeder(2, r, x)
    sol = sweep_solve(f, np.array([p, 0, 0, q, 0, 0]))
    b = 1.0 - 2 * (r * p + x * q)
    closed = 0.5 * (b + np.sqrt(b**2 - 4 * (r**2 + x**2) * (p**2 + q**2)))
    two_bus_err = abs(sol.sq_magnitudes[1, 0] - closed)
    kvl = 0.0
    feeders = [network.ieee37()] + [network.random_feeder(12, np.random.default_rng(i)) for i in range(20)]
    for g in feeders:
        pk = g.peaks()[1:]
        s = sweep_solve(g, np.concatenate([pk[:, 0].ravel(), pk[:, 1].ravel()]))
        assert s.converged
        kvl = max(kvl, float(kvl_residuals(g, s).max()))
    secs = time.perf_counter() - t0
    ok = two_bus_err <= 1e-8 and kvl <= 1e-10
    report("7 oracle soundness", ok, f"two-bus |y - closed form| {two_bus_err:.1e} (limit 1e-8), "
           f"max KVL residual {kvl:.1e} on {len(feeders)} feeders (limit 1e-10)", secs)
    assert ok


# 8 ---------------------------------------------------------------------------

def test_run_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "scenario.json"
    cfg.write_text(json.dumps({"timesteps": 8, "placement_budget": 6, "metered_fraction": 0.5}))
    for name, workers in (("a", 1), ("b", 1), ("c", 4)):
        assert cli.main(["--config", str(cfg), "--seed", "3", "run", "--out", str(tmp_path / name),
                         "--workers", str(workers)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / d / n).read_bytes()
               for n in files for d in ("b", "c"))
    secs = time.perf_counter() - t0
    report("8 determinism", same, f"{len(files)} output files byte-identical across 3 runs "
           f"(1 and 4 workers)" if same else "output files differ", secs)
    assert same


# 9 ---------------------------------------------------------------------------

def test_scaling_trend():
    t0 = time.perf_counter()
    rows = harness.benchmark_scaling([37, 370], n_updates=200)
    ratio = rows[1]["mean_update_seconds"] / rows[0]["mean_update_seconds"]
    exponent = np.log(ratio) / np.log(10)
    secs = time.perf_counter() - t0
    ok = ratio < 100
    report("9 scaling", ok, f"update time x{ratio:.1f} for 10x buses (growth exponent "
           f"{exponent:.2f}, subquadratic needs < 2)", secs)
    assert ok
