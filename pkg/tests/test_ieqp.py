"""Ellipsoidal trust-region CM solver tests."""

import numpy as np
import pytest

from zonalclear import (
    MarketInstance,
    PlayerOrder,
    Polytope,
    load_fixture,
    run_ibcqp,
    run_ieqp_wr,
)
from zonalclear.cm.common import ActiveEstimate, estimate_active_set
from zonalclear.cm.ieqp import build_mcqp


def test_mcqp_blocks_on_fixture():
    inst = load_fixture()
    form = build_mcqp(inst)
    assert form.n_var == 9
    # ask rows, nonnegativity, capacity, network rows
    assert form.A_I.shape == (6 + 6 + 6 + 9, 9)
    assert form.M_e.shape == (1, 9)


def test_mcqp_quadratic_form_identity():
    inst = load_fixture()
    est = estimate_active_set(inst)
    form = build_mcqp(inst, est)
    rng = np.random.default_rng(2)
    for _ in range(20):
        zv = rng.normal(size=form.n_var)
        x = form.arrays.expand_x(inst.n_players, zv)
        v = form.arrays.expand_v(zv)
        y = inst.aggregation_matrix() @ x
        assert form.objective(zv) == pytest.approx(float(v @ y), rel=1e-12, abs=1e-12)


def test_mcqp_smallest_case_structure():
    inst = MarketInstance(
        zones=("z0",),
        players=(PlayerOrder("p0", 0, 1.0, 0.0, 5.0),),
        demand=np.array([2.0]),
        polytope=Polytope(np.array([[1.0], [-1.0]]), np.array([5.0, 0.0])),
    )
    form = build_mcqp(inst, ActiveEstimate(((0,),)))
    np.testing.assert_allclose(form.G, [[0.0, 0.5], [0.5, 0.0]])
    eig = np.linalg.eigvalsh(form.G)
    assert eig[0] == pytest.approx(-0.5) and eig[-1] == pytest.approx(0.5)


def test_fixture_objective():
    inst = load_fixture()
    out = run_ieqp_wr(inst)
    assert out.objective == pytest.approx(77.463, abs=0.05)
    assert out.diagnostics["solve_time"] < 10.0
    assert out.x.sum() == pytest.approx(inst.total_demand, abs=1e-6)


def test_interior_optimum_single_zone():
    # Slack capacities: the CM optimum prices at the marginal intersection.
    inst = MarketInstance(
        zones=("z0",),
        players=(PlayerOrder("p0", 0, 0.5, 0.4, 30.0),
                 PlayerOrder("p1", 0, 0.5, 0.8, 40.0)),
        demand=np.array([4.0]),
        polytope=Polytope(np.array([[1.0], [-1.0]]), np.array([50.0, 0.0])),
    )
    out = run_ieqp_wr(inst)
    ref = run_ibcqp(inst)
    assert out.objective == pytest.approx(ref.objective, rel=1e-4)


def test_raw_objective_tracked_and_polish_never_worse():
    inst = load_fixture()
    out = run_ieqp_wr(inst)
    assert out.objective <= out.diagnostics["raw_objective"] + 1e-9
    no_polish = run_ieqp_wr(inst, polish=False)
    assert no_polish.objective == pytest.approx(
        no_polish.diagnostics["raw_objective"])


def test_equality_rows_grow_monotonically():
    inst = load_fixture()
    out = run_ieqp_wr(inst)
    # At least the balance row; retirement only ever adds rows.
    assert out.diagnostics["equality_rows"] >= 1
    assert out.diagnostics["status"] in ("converged", "vertex", "max-iters",
                                         "degenerate")
