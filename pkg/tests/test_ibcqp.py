"""Zonal stack curves and the iteratively bounded CQP solver."""

import numpy as np
import pytest

from zonalclear import (
    MarketInstance,
    PlayerOrder,
    Polytope,
    SolverError,
    load_fixture,
    run_ibcqp,
)
from zonalclear.cm.common import cm_objective_given_y, estimate_active_set
from zonalclear.cm.ibcqp import (
    build_stack_curve,
    build_sub_cqp,
    recover_x,
    segment_lookup,
)
from zonalclear.kernel import solve_cqp


def two_player_zone():
    return MarketInstance(
        zones=("z0",),
        players=(PlayerOrder("p0", 0, 0.5, 0.4, 3.0),
                 PlayerOrder("p1", 0, 0.5, 0.8, 4.0)),
        demand=np.array([4.0]),
        polytope=Polytope(np.array([[1.0], [-1.0]]), np.array([7.0, 0.0])),
    )


def test_stack_breakpoints_and_middle_segment():
    curve = build_stack_curve(two_player_zone(), 0)
    np.testing.assert_allclose(curve.breakpoints, [0.0, 0.4, 0.8, 1.9, 2.8])
    seg = segment_lookup(curve, 4.0)
    assert seg.v_lo == pytest.approx(0.8) and seg.v_hi == pytest.approx(1.9)
    assert seg.alpha == pytest.approx(0.25)
    assert seg.beta == pytest.approx(0.6)
    assert seg.quantity_at(1.9) == pytest.approx(5.2)
    assert curve.y_max == pytest.approx(7.0)


def test_fixture_zone0_segment_coefficients():
    inst = load_fixture()
    curve = build_stack_curve(inst, 0)
    pairs = [(s.alpha, s.beta) for s in curve.nonvertical]
    assert any(a == pytest.approx(0.25) and b == pytest.approx(2.8)
               for a, b in pairs)


def test_single_player_curve():
    inst = MarketInstance(
        zones=("z0",),
        players=(PlayerOrder("p0", 0, 1.0, 2.0, 5.0),),
        demand=np.array([3.0]),
        polytope=Polytope(np.array([[1.0], [-1.0]]), np.array([5.0, 0.0])),
    )
    curve = build_stack_curve(inst, 0)
    np.testing.assert_allclose(curve.breakpoints, [0.0, 2.0, 7.0])
    nv = curve.nonvertical
    assert len(nv) == 1
    assert nv[0].price_at(0.0) == pytest.approx(2.0)
    assert nv[0].price_at(5.0) == pytest.approx(7.0)
    assert curve.segments[0].vertical and curve.segments[-1].vertical


def test_segment_lookup_conventions():
    curve = build_stack_curve(two_player_zone(), 0)
    # Half-open pieces: a breakpoint quantity belongs to the right segment.
    seg = segment_lookup(curve, 0.8)
    assert seg.v_lo == pytest.approx(0.8)
    # The last piece is closed so full capacity resolves.
    top = segment_lookup(curve, 7.0)
    assert top.y_hi == pytest.approx(7.0)
    with pytest.raises(ValueError):
        segment_lookup(curve, 7.5)
    with pytest.raises(ValueError):
        segment_lookup(curve, -0.5)


def test_stack_monotone_and_continuous():
    inst = load_fixture()
    for z in range(inst.n_zones):
        curve = build_stack_curve(inst, z)
        ys = np.linspace(0.0, curve.nonvertical[-1].y_hi, 400)
        vs = np.array([curve.price_at(y) for y in ys])
        assert np.all(np.diff(vs) >= -1e-9)
        # Continuity across pieces at the grid resolution.
        assert np.max(np.abs(np.diff(vs))) <= 2.0 * (ys[1] - ys[0]) * max(
            s.alpha for s in curve.nonvertical) + 1e-9


def test_segment_objective_identity():
    # On its own piece the quadratic alpha y^2 + (beta - alpha Q_s) y equals
    # the bilinear cost v(y) * y exactly.
    inst = load_fixture()
    rng = np.random.default_rng(3)
    for z in range(inst.n_zones):
        curve = build_stack_curve(inst, z)
        top = curve.nonvertical[-1].y_hi
        for y in rng.uniform(0.0, top, size=40):
            s = segment_lookup(curve, y)
            quad = s.alpha * y * y + (s.beta - s.alpha * s.Q_s) * y
            assert quad == pytest.approx(s.price_at(y) * y, rel=1e-8, abs=1e-12)


def test_recover_x_shared_marginal_price():
    inst = two_player_zone()
    curve = build_stack_curve(inst, 0)
    seg = segment_lookup(curve, 4.0)
    x = recover_x(inst, np.array([4.0]), [seg])
    np.testing.assert_allclose(x, [2.4, 1.6], atol=1e-9)
    assert seg.price_at(4.0) == pytest.approx(1.6)


def test_recover_x_full_plus_marginal():
    inst = two_player_zone()
    curve = build_stack_curve(inst, 0)
    seg = segment_lookup(curve, 6.0)
    assert seg.full == (0,) and seg.marginal == (1,)
    x = recover_x(inst, np.array([6.0]), [seg])
    np.testing.assert_allclose(x, [3.0, 3.0], atol=1e-9)


def test_recover_x_rejects_wrong_segment():
    inst = two_player_zone()
    curve = build_stack_curve(inst, 0)
    seg = segment_lookup(curve, 1.0)
    with pytest.raises(SolverError):
        recover_x(inst, np.array([6.5]), [seg])


def test_sub_cqp_needs_one_segment_per_zone():
    inst = load_fixture()
    curve = build_stack_curve(inst, 0)
    with pytest.raises(ValueError):
        build_sub_cqp(inst, [segment_lookup(curve, 8.0)])


def test_fixture_objective_default_tolerance():
    inst = load_fixture()
    out = run_ibcqp(inst, cqp_tol=1e-4)
    assert out.objective == pytest.approx(77.463, abs=0.01)
    assert out.diagnostics["solve_time"] < 10.0
    assert out.x.sum() == pytest.approx(inst.total_demand, abs=1e-7)


def final_box_qp(inst, out):
    curves = [build_stack_curve(inst, z) for z in range(inst.n_zones)]
    segs = [segment_lookup(curves[z], out.y[z]) for z in range(inst.n_zones)]
    return build_sub_cqp(inst, segs)


def test_loose_tolerance_at_optimal_combination():
    # The sub-CQP over the optimal segment boxes, solved loosely, lands in
    # the reported coarse band.
    inst = load_fixture()
    qp = final_box_qp(inst, run_ibcqp(inst))
    res = solve_cqp(qp, tol=1e-2)
    y = res.x
    obj = float(y @ qp.H @ y) / 2.0 + float(qp.g @ y)
    assert obj == pytest.approx(77.512, abs=0.05)


def test_final_box_solution_is_qp_optimal():
    inst = load_fixture()
    out = run_ibcqp(inst)
    qp = final_box_qp(inst, out)
    res = solve_cqp(qp, tol=1e-8)
    f_star = float(res.x @ qp.H @ res.x) / 2.0 + float(qp.g @ res.x)
    f_out = float(out.y @ qp.H @ out.y) / 2.0 + float(qp.g @ out.y)
    # The reported point is optimal up to the walk's own CQP tolerance.
    assert f_out <= f_star + 1e-4 * max(1.0, abs(f_star))
    # Convex combinations toward the sharp optimum never beat it.
    rng = np.random.default_rng(11)
    for _ in range(10):
        t = rng.uniform(0.0, 1.0)
        y_try = (1 - t) * out.y + t * res.x
        f_try = float(y_try @ qp.H @ y_try) / 2.0 + float(qp.g @ y_try)
        assert f_try >= f_star - 1e-8 * max(1.0, abs(f_star))


def test_stack_evaluation_matches_fixed_y_prices():
    # The fixed-y LP prices equal the stack price floored at the estimate's
    # highest intercept; sampled across the feasible region.
    inst = load_fixture()
    est = estimate_active_set(inst)
    curves = [build_stack_curve(inst, z) for z in range(inst.n_zones)]
    max_a = [max(inst.players[i].a for i in est.zone(z))
             for z in range(inst.n_zones)]
    rng = np.random.default_rng(21)
    checked = 0
    while checked < 30:
        y = rng.uniform(0.5, 11.5, size=3)
        y *= inst.total_demand / y.sum()
        if not inst.polytope.contains(y):
            continue
        if any(y[z] > curves[z].y_max for z in range(3)):
            continue
        obj, x, v = cm_objective_given_y(inst, est, y)
        stack = np.array([max(max_a[z], curves[z].price_at(y[z]))
                          for z in range(3)])
        np.testing.assert_allclose(v, stack, rtol=1e-6, atol=1e-8)
        assert obj == pytest.approx(float(stack @ y), rel=1e-6)
        checked += 1


def test_ibcqp_matches_bbtree_on_fixture():
    from zonalclear import run_bbtree

    inst = load_fixture()
    a = run_ibcqp(inst)
    b = run_bbtree(inst)
    assert a.objective == pytest.approx(b.objective, rel=1e-3)
