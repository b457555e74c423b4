"""Cost-scale calibration and fuel-cost order mapping."""

import json

import numpy as np
import pytest

from zonalclear import (
    CostScales,
    FuelCostSpec,
    MarketInstance,
    PlayerOrder,
    Polytope,
    fit_scales,
    load_fixture,
    orders_from_fuel,
)
from zonalclear.calibration import (
    FUEL_TYPES,
    CalibrationSeries,
    error_metrics,
    hessian_blocks,
    load_series,
    load_targets_csv,
    objective_and_gradient,
    scaled_instance,
)
from zonalclear.core import save_instance
from zonalclear.swm import clear_swm


def test_orders_from_fuel_example():
    spec = FuelCostSpec(k=30.0, n=0.2, f=0.5)
    b, c = orders_from_fuel(spec, 10.0)
    assert b == pytest.approx(24.0)
    assert c == pytest.approx(1.2)
    # The ask at the mid-quantity fraction recovers the base cost.
    assert b + c * 5.0 == pytest.approx(30.0)


def test_orders_from_fuel_flat_when_n_zero():
    b, c = orders_from_fuel(FuelCostSpec(k=30.0, n=0.0), 10.0)
    assert b == pytest.approx(30.0)
    assert c == 0.0


def test_fuel_type_table():
    assert FUEL_TYPES["gas"]["n"] == 0.2
    assert FUEL_TYPES["coal"]["n"] == 0.4
    assert FUEL_TYPES["nuclear"] == {"k": 13.8, "n": 0.8}
    assert FUEL_TYPES["wind"] == {"k": 0.5, "n": 0.05}
    assert FUEL_TYPES["solar"] == {"k": 0.5, "n": 0.05}
    assert FUEL_TYPES["hydro_ror"] == {"k": 8.45, "n": 0.1}
    spec = FuelCostSpec.for_type("nuclear")
    assert spec.k == 13.8 and spec.n == 0.8
    spec = FuelCostSpec.for_type("gas", k=25.0)
    assert spec.k == 25.0
    with pytest.raises(ValueError):
        FuelCostSpec.for_type("gas")


def test_fuel_spec_validation():
    with pytest.raises(ValueError):
        FuelCostSpec(k=10.0, n=0.2, f=1.0)
    with pytest.raises(ValueError):
        FuelCostSpec(k=10.0, n=1.5)
    with pytest.raises(ValueError):
        FuelCostSpec(k=-1.0, n=0.2)
    with pytest.raises(ValueError):
        orders_from_fuel(FuelCostSpec(k=10.0, n=0.2), 0.0)


def pinned_marginal_series(demands, m=0.8, a=1.5):
    """Single-zone steps where the cheap player is always at capacity, so the
    marginal player's quantity is constant in the scales."""
    instances = []
    for d in demands:
        inst = MarketInstance(
            zones=("z0",),
            players=(PlayerOrder("base", 0, 0.05, 0.01, 2.0),
                     PlayerOrder("marg", 0, m, a, 20.0)),
            demand=np.array([float(d)]),
            polytope=Polytope(np.array([[1.0], [-1.0]]), np.array([25.0, 0.0])),
        )
        instances.append(inst)
    return instances


def test_perfect_fit_objective_and_gradient_vanish():
    instances = pinned_marginal_series([5.0, 7.0, 9.0])
    targets = np.array([[clear_swm(i).v[0]] for i in instances])
    series = CalibrationSeries(tuple(instances), targets)
    F, grad, skipped = objective_and_gradient(series, CostScales.ones(1))
    assert F == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)
    assert skipped == []
    np.testing.assert_allclose(error_metrics(series, CostScales.ones(1)), 0.0,
                               atol=1e-12)


def test_gradient_matches_finite_differences():
    instances = pinned_marginal_series([5.0, 7.0, 9.0])
    targets = np.array([[clear_swm(i).v[0] + 0.3] for i in instances])
    series = CalibrationSeries(tuple(instances), targets)
    s0 = np.array([1.1, 0.9])

    def F_at(sc, sb):
        F, _, _ = objective_and_gradient(series, CostScales([sc], [sb]))
        return F

    _, grad, _ = objective_and_gradient(series, CostScales([s0[0]], [s0[1]]))
    h = 1e-6
    fd_c = (F_at(s0[0] + h, s0[1]) - F_at(s0[0] - h, s0[1])) / (2 * h)
    fd_b = (F_at(s0[0], s0[1] + h) - F_at(s0[0], s0[1] - h)) / (2 * h)
    assert grad[0, 0] == pytest.approx(fd_c, abs=1e-5)
    assert grad[0, 1] == pytest.approx(fd_b, abs=1e-5)


def test_hessian_block_outer_product():
    # One step, marginal term c x = 2 and intercept b = 3 give the outer
    # product [[4, 6], [6, 9]] scaled by 2/N_T.
    inst = MarketInstance(
        zones=("z0",),
        players=(PlayerOrder("p0", 0, 1.0, 3.0, 10.0),),
        demand=np.array([2.0]),
        polytope=Polytope(np.array([[1.0], [-1.0]]), np.array([10.0, 0.0])),
    )
    series = CalibrationSeries((inst,), np.array([[4.0]]))
    H = hessian_blocks(series, CostScales.ones(1))
    np.testing.assert_allclose(H[0], 2.0 * np.array([[4.0, 6.0], [6.0, 9.0]]),
                               atol=1e-9)


def test_round_trip_recovers_scales():
    true = CostScales([1.3], [0.9])
    instances = pinned_marginal_series(np.linspace(4.0, 11.0, 20))
    targets = np.array([[clear_swm(scaled_instance(i, true)).v[0]]
                        for i in instances])
    series = CalibrationSeries(tuple(instances), targets)
    fit, report = fit_scales(series, method="newton", max_iters=50)
    assert fit.s_c[0] == pytest.approx(1.3, rel=0.05)
    assert fit.s_b[0] == pytest.approx(0.9, rel=0.05)
    assert report["objective"] < 1e-6


def test_zero_iterations_returns_unit_scales():
    instances = pinned_marginal_series([5.0])
    series = CalibrationSeries(tuple(instances), np.array([[9.0]]))
    fit, report = fit_scales(series, max_iters=0)
    np.testing.assert_allclose(fit.s_c, 1.0)
    np.testing.assert_allclose(fit.s_b, 1.0)
    assert report["iterations"] == 0


def test_gd_trace_non_increasing():
    true = CostScales([1.2], [1.1])
    instances = pinned_marginal_series([5.0, 8.0, 10.0])
    targets = np.array([[clear_swm(scaled_instance(i, true)).v[0]]
                        for i in instances])
    series = CalibrationSeries(tuple(instances), targets)
    _, report = fit_scales(series, method="gd", max_iters=30)
    trace = report["trace"]
    assert all(trace[k + 1] <= trace[k] + 1e-12 for k in range(len(trace) - 1))
    assert trace[-1] < trace[0]


def test_validation_errors():
    instances = pinned_marginal_series([5.0])
    with pytest.raises(ValueError):
        CalibrationSeries(tuple(instances), np.array([[1.0], [2.0]]))
    with pytest.raises(ValueError):
        CostScales([0.0], [1.0])
    series = CalibrationSeries(tuple(instances), np.array([[9.0]]))
    with pytest.raises(ValueError):
        fit_scales(series, method="bfgs")
    with pytest.raises(ValueError):
        objective_and_gradient(series, CostScales.ones(1), mechanism="vcg")


def test_load_series_and_targets(tmp_path):
    inst = load_fixture()
    inst_dir = tmp_path / "instances"
    inst_dir.mkdir()
    for t in range(2):
        save_instance(inst, inst_dir / f"step{t}.json")
    targets = tmp_path / "targets.csv"
    lines = ["t,zone,price"]
    for t in range(2):
        for z in range(3):
            lines.append(f"{t},{z},{4.0 + t + 0.1 * z}")
    targets.write_text("\n".join(lines) + "\n")
    series = load_series(inst_dir, targets)
    assert series.n_steps == 2
    assert series.targets.shape == (2, 3)
    assert series.targets[1, 2] == pytest.approx(5.2)

    # A single JSON array file works too.
    array_file = tmp_path / "series.json"
    with open(inst_dir / "step0.json") as fh:
        payload = json.load(fh)
    array_file.write_text(json.dumps([payload, payload]))
    series2 = load_series(array_file, targets)
    assert series2.n_steps == 2

    bad = tmp_path / "bad.csv"
    bad.write_text("t,zone,price\n0,0,4.0\n1,1,5.0\n")
    with pytest.raises(ValueError):
        load_targets_csv(bad)
