"""Social-welfare-maximisation clearing tests."""

import numpy as np
import pytest

from zonalclear import (
    MarketInstance,
    PlayerOrder,
    Polytope,
    check_paradoxical_orders,
    clear_swm,
    load_fixture,
    zonal_price_from_allocation,
)
from zonalclear.swm import swm_objective


def single_zone(players, d, bound=1e3):
    return MarketInstance(
        zones=("z0",),
        players=tuple(players),
        demand=np.array([d], dtype=float),
        polytope=Polytope(np.array([[1.0], [-1.0]]), np.array([bound, 0.0])),
    )


def test_two_player_closed_form():
    inst = single_zone(
        [PlayerOrder("p0", 0, 1.0, 0.0, 10.0), PlayerOrder("p1", 0, 1.0, 1.0, 10.0)],
        d=3.0,
    )
    out = clear_swm(inst)
    np.testing.assert_allclose(out.x, [2.0, 1.0], atol=1e-6)
    assert out.v[0] == pytest.approx(2.0, abs=1e-6)
    assert out.total_cost == pytest.approx(6.0, abs=1e-5)
    assert out.objective == pytest.approx(swm_objective(inst, out.x))


def test_fixture_values():
    inst = load_fixture()
    out = clear_swm(inst)
    assert out.objective == pytest.approx(55.8078, abs=5e-4)
    assert out.total_cost == pytest.approx(77.81, abs=5e-3)
    np.testing.assert_allclose(out.y, [8.0, 7.0, 7.0], atol=1e-5)
    np.testing.assert_allclose(out.v, [4.8, 2.83, 2.8], atol=1e-3)
    assert check_paradoxical_orders(inst, out) == []


def test_zero_demand():
    inst = MarketInstance(
        zones=("z0",),
        players=(PlayerOrder("p0", 0, 1.0, 0.0, 5.0),),
        demand=np.array([0.0]),
        polytope=Polytope(np.array([[1.0], [-1.0]]), np.array([0.0, 0.0])),
    )
    out = clear_swm(inst)
    assert out.x[0] == 0.0
    assert out.total_cost == 0.0


def test_objective_unique_under_player_permutation():
    inst = load_fixture()
    ref = clear_swm(inst)
    perm = [3, 0, 5, 1, 4, 2]
    inst_p = MarketInstance(
        zones=inst.zones,
        players=tuple(inst.players[i] for i in perm),
        demand=inst.demand,
        polytope=inst.polytope,
    )
    out = clear_swm(inst_p)
    assert out.objective == pytest.approx(ref.objective, rel=1e-9)
    np.testing.assert_allclose(out.x, ref.x[perm], atol=1e-6)


def test_price_is_max_active_marginal_everywhere():
    inst = load_fixture()
    out = clear_swm(inst)
    v, _ = zonal_price_from_allocation(inst, out.x)
    np.testing.assert_allclose(out.v, v)
    for z in range(inst.n_zones):
        lams = [inst.players[i].marginal_price(out.x[i])
                for i in inst.zone_players(z) if out.x[i] > 1e-9]
        assert out.v[z] == pytest.approx(max(lams))


def test_random_suite_no_paradoxical_orders():
    from zonalclear import generate_instance

    for seed in range(8):
        inst = generate_instance(n_zones=3, players_per_zone=3, seed=seed)
        out = clear_swm(inst)
        assert check_paradoxical_orders(inst, out) == []
