"""Domain-model tests: orders, polytopes, prices, feasibility, round trips."""

import json

import numpy as np
import pytest

from zonalclear import (
    MarketInstance,
    PlayerOrder,
    Polytope,
    assemble_polytope,
    check_paradoxical_orders,
    clear_swm,
    instance_from_dict,
    instance_to_dict,
    load_fixture,
    load_instance,
    make_outcome,
    save_instance,
    total_cost,
    validate_instance,
    zonal_price_from_allocation,
)


def loose_polytope(nz, bound=1e3):
    return Polytope(np.vstack([np.eye(nz), -np.eye(nz)]),
                    np.concatenate([np.full(nz, bound), np.zeros(nz)]))


def single_zone_instance(players, d):
    return MarketInstance(
        zones=("z0",),
        players=tuple(players),
        demand=np.array([d], dtype=float),
        polytope=loose_polytope(1),
    )


def test_player_order_validation():
    PlayerOrder("p", 0, 1.0, 0.0, 2.0)
    with pytest.raises(ValueError):
        PlayerOrder("p", 0, 0.0, 0.0, 2.0)
    with pytest.raises(ValueError):
        PlayerOrder("p", 0, 1.0, -0.1, 2.0)
    with pytest.raises(ValueError):
        PlayerOrder("p", 0, 1.0, 0.0, 0.0)


def test_player_marginal_price_increasing():
    p = PlayerOrder("p", 0, 0.5, 2.6, 6.0)
    xs = np.linspace(0, p.Q, 7)
    lam = [p.marginal_price(x) for x in xs]
    assert np.all(np.diff(lam) > 0)
    assert p.max_price == pytest.approx(0.5 * 6.0 + 2.6)


def test_polytope_row_mismatch():
    with pytest.raises(ValueError):
        Polytope(np.eye(2), np.ones(3))


def test_polytope_contains():
    poly = loose_polytope(2, bound=2.0)
    assert poly.contains([1.0, 1.0])
    assert not poly.contains([3.0, 0.0])


def test_fixture_loads_and_validates():
    inst = load_fixture()
    assert inst.n_zones == 3
    assert inst.n_players == 6
    assert np.allclose(inst.demand, [10.0, 6.0, 6.0])
    assert validate_instance(inst) == []


def test_validate_reports_supply_shortfall():
    inst = single_zone_instance(
        [PlayerOrder("p0", 0, 1.0, 0.0, 10.0), PlayerOrder("p1", 0, 1.0, 1.0, 10.0)],
        d=22.0,
    )
    issues = validate_instance(inst)
    assert any("infeasible" in s for s in issues)


def test_validate_reports_network_infeasibility():
    # Supply covers demand but the polytope forbids any balanced y.
    inst = MarketInstance(
        zones=("z0", "z1"),
        players=(PlayerOrder("p0", 0, 1.0, 0.0, 10.0),
                 PlayerOrder("p1", 1, 1.0, 0.0, 10.0)),
        demand=np.array([3.0, 3.0]),
        polytope=Polytope(np.vstack([np.eye(2), -np.eye(2)]),
                          np.array([2.0, 2.0, 0.0, 0.0])),
    )
    issues = validate_instance(inst)
    assert any("infeasible" in s for s in issues)


def test_zonal_price_is_max_active_marginal():
    inst = single_zone_instance(
        [PlayerOrder("p0", 0, 0.5, 3.0, 6.0), PlayerOrder("p1", 0, 0.5, 2.6, 6.0)],
        d=5.0,
    )
    v, empty = zonal_price_from_allocation(inst, np.array([2.0, 3.0]))
    assert v[0] == pytest.approx(4.1)
    assert not empty[0]


def test_zonal_price_empty_zone_flagged():
    inst = single_zone_instance([PlayerOrder("p0", 0, 1.0, 2.0, 4.0)], d=1.0)
    v, empty = zonal_price_from_allocation(inst, np.array([0.0]))
    assert v[0] == 0.0
    assert empty[0]


def test_zonal_price_permutation_invariant():
    rng = np.random.default_rng(3)
    players = [PlayerOrder(f"p{i}", 0, 0.2 + rng.random(), rng.random(), 1 + rng.random())
               for i in range(5)]
    x = rng.random(5)
    inst = single_zone_instance(players, d=float(x.sum()))
    v_ref, _ = zonal_price_from_allocation(inst, x)
    perm = rng.permutation(5)
    inst_p = single_zone_instance([players[i] for i in perm], d=float(x.sum()))
    v_p, _ = zonal_price_from_allocation(inst_p, x[perm])
    assert v_p[0] == pytest.approx(v_ref[0])


def test_total_cost_values():
    assert total_cost([4, 3, 2], [10, 6, 6]) == pytest.approx(70.0)
    assert total_cost(np.zeros(3), [10, 6, 6]) == 0.0
    with pytest.raises(ValueError):
        total_cost([1, 2], [1, 2, 3])


def test_paradoxical_orders_detected_on_forced_prices():
    inst = single_zone_instance(
        [PlayerOrder("p0", 0, 1.0, 0.0, 10.0), PlayerOrder("p1", 0, 1.0, 1.0, 10.0)],
        d=3.0,
    )
    out = clear_swm(inst)
    assert check_paradoxical_orders(inst, out) == []
    forced = make_outcome(inst, out.x, np.array([0.5]), out.objective, check=False)
    bad = check_paradoxical_orders(inst, forced)
    assert bad == [0, 1]


def test_assemble_polytope_single_row():
    poly = assemble_polytope(np.array([[1.0, -1.0, 0.0]]), [-5.0], [5.0],
                             [10.0, 6.0, 6.0])
    assert poly.n_rows == 2 + 6
    # -PTDF y <= -r - PTDF d = 5 - 4 = 1 and PTDF y <= R + PTDF d = 9.
    assert poly.b[0] == pytest.approx(1.0)
    assert poly.b[1] == pytest.approx(9.0)
    np.testing.assert_allclose(poly.M[0], [-1.0, 1.0, 0.0])
    np.testing.assert_allclose(poly.M[1], [1.0, -1.0, 0.0])


def test_assemble_polytope_box_only():
    d = np.array([10.0, 6.0, 6.0])
    poly = assemble_polytope(np.zeros((0, 3)), [], [], d)
    assert poly.n_rows == 6
    assert poly.contains(d)
    assert not poly.contains(1.7 * d)


def test_assemble_polytope_membership_matches_flow_limits():
    rng = np.random.default_rng(7)
    d = np.array([10.0, 6.0, 6.0])
    ptdf = rng.normal(size=(2, 3))
    R = np.array([3.0, 4.0])
    poly = assemble_polytope(ptdf, -R, R, d)
    for _ in range(200):
        y = d * (0.3 + 1.5 * rng.random(3))
        flows = ptdf @ (y - d)
        expected = (np.all(flows >= -R - 1e-12) and np.all(flows <= R + 1e-12)
                    and np.all(y >= 0.4 * d - 1e-12) and np.all(y <= 1.6 * d + 1e-12))
        assert poly.contains(y, tol=1e-12) == expected


def test_assemble_polytope_bad_ram():
    with pytest.raises(ValueError):
        assemble_polytope(np.eye(2), [1.0, 0.0], [0.5, 1.0], [5.0, 5.0])


def test_instance_json_round_trip(tmp_path):
    inst = load_fixture()
    data = instance_to_dict(inst)
    # Schema field names are part of the external contract.
    assert set(data) == {"zones", "demand", "players", "polytope"}
    assert set(data["players"][0]) == {"id", "zone", "m", "a", "Q"}
    back = instance_from_dict(json.loads(json.dumps(data)))
    np.testing.assert_allclose(back.polytope.M, inst.polytope.M)
    np.testing.assert_allclose(back.polytope.b, inst.polytope.b)
    assert back.players == inst.players

    path = tmp_path / "inst.json"
    save_instance(inst, path)
    again = load_instance(path)
    assert again.players == inst.players
    np.testing.assert_allclose(again.demand, inst.demand)


def test_make_outcome_rejects_imbalance():
    inst = single_zone_instance([PlayerOrder("p0", 0, 1.0, 0.0, 10.0)], d=3.0)
    from zonalclear import SolverError

    with pytest.raises(SolverError):
        make_outcome(inst, np.array([2.0]), np.array([2.0]), 0.0)


def test_make_outcome_active_partition():
    inst = single_zone_instance(
        [PlayerOrder("p0", 0, 1.0, 0.0, 2.0), PlayerOrder("p1", 0, 1.0, 1.0, 10.0)],
        d=5.0,
    )
    out = make_outcome(inst, np.array([2.0, 3.0]), np.array([4.0]), 0.0)
    inact, marg, full = out.active[0]
    assert inact == ()
    assert marg == (1,)
    assert full == (0,)
    np.testing.assert_array_equal(out.active_players, [0, 1])
