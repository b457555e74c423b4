"""Social-welfare-maximisation clearing.

The SWM allocation minimises the apparent cost 0.5 x.diag(m).x + a.x over the
network, capacity and balance constraints; zonal prices are then the highest
accepted marginal ask per zone, which never produces paradoxically accepted
orders under inflexible demand.
"""

from __future__ import annotations

import time

import numpy as np

from .core import (
    DEFAULT_SETTINGS,
    ClearingOutcome,
    InfeasibleError,
    MarketInstance,
    Settings,
    make_outcome,
    zonal_price_from_allocation,
)
from .kernel import QuadraticProgram, solve_cqp


def swm_objective(inst: MarketInstance, x) -> float:
    x = np.asarray(x, dtype=float)
    return float(0.5 * x @ (inst.m * x) + inst.a @ x)


def clear_swm(inst: MarketInstance, settings: Settings = DEFAULT_SETTINGS) -> ClearingOutcome:
    """Clear one instance under SWM and attach the zonal marginal prices."""
    n = inst.n_players
    d = inst.total_demand
    if d == 0:
        x = np.zeros(n)
        v, _ = zonal_price_from_allocation(inst, x, settings)
        return make_outcome(inst, x, v, 0.0, settings, mechanism="swm", iterations=0)

    E = inst.aggregation_matrix()
    A_ineq = np.vstack([inst.polytope.M @ E, np.eye(n), -np.eye(n)])
    b_ineq = np.concatenate([inst.polytope.b, inst.Q, np.zeros(n)])
    qp = QuadraticProgram(
        H=np.diag(inst.m),
        g=inst.a.copy(),
        A_ineq=A_ineq,
        b_ineq=b_ineq,
        A_eq=np.ones((1, n)),
        b_eq=np.array([d]),
    )
    t0 = time.perf_counter()
    res = solve_cqp(qp, tol=settings.cqp_tol)
    elapsed = time.perf_counter() - t0
    if res.status == "infeasible":
        raise InfeasibleError("SWM clearing: instance constraints are infeasible")

    x = np.clip(res.x, 0.0, inst.Q)
    v, _ = zonal_price_from_allocation(inst, x, settings)
    return make_outcome(
        inst,
        x,
        v,
        swm_objective(inst, x),
        settings,
        mechanism="swm",
        status=res.status,
        iterations=res.iterations,
        kkt_residual=res.kkt_residual,
        solve_time=elapsed,
    )
