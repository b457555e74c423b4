"""Iterative enhanced quasi-LP heuristic (with optional moving-average damping).

Alternates between solving the quasi-LP at a fixed zonal-quantity guess and
refreshing the guess from the resulting allocation. Not guaranteed to
converge; the best actual objective v.Ex seen is always kept.
"""

from __future__ import annotations

import time

import numpy as np

from ..core import (
    DEFAULT_SETTINGS,
    ClearingOutcome,
    InfeasibleError,
    MarketInstance,
    Settings,
    make_outcome,
    zonal_price_from_allocation,
)
from ..kernel import chebyshev_center, solve_lp
from .common import ActiveEstimate, build_mc_qlp, build_mcblp_arrays, estimate_active_set


def run_ieqlp(
    inst: MarketInstance,
    est: ActiveEstimate = None,
    alpha_y: float = 0.3,
    max_iters: int = 100,
    tol: float = 1e-6,
    y0: str = "demand",
    polytope=None,
    settings: Settings = DEFAULT_SETTINGS,
) -> ClearingOutcome:
    """Run the quasi-LP iteration and return the best outcome found.

    alpha_y in [0, 1) is the moving-average weight on the previous quantity
    guess (0 disables damping). y0 selects the initial guess: "demand",
    "chebyshev", or an explicit vector.
    """
    if not 0 <= alpha_y < 1:
        raise ValueError("alpha_y must lie in [0, 1)")
    if est is None:
        est = estimate_active_set(inst, settings)
    poly = polytope if polytope is not None else inst.polytope
    arrays = build_mcblp_arrays(inst, est, poly)

    if isinstance(y0, str):
        if y0 == "demand":
            y_hat = inst.demand.astype(float).copy()
        elif y0 == "chebyshev":
            y_hat, _ = chebyshev_center(
                poly.M, poly.b,
                A_eq=np.ones((1, inst.n_zones)), b_eq=np.array([inst.total_demand]),
            )
        else:
            raise ValueError(f"unknown y0 mode {y0!r}")
    else:
        y_hat = np.asarray(y0, dtype=float).copy()

    t0 = time.perf_counter()
    f_best = np.inf
    best = None
    x_prev = None
    indicator = np.inf
    status = "max-iters"
    it = 0
    for it in range(1, max_iters + 1):
        lp, _ = build_mc_qlp(inst, est, y_hat, arrays=arrays)
        res = solve_lp(lp, tol=settings.lp_tol)
        if res.status != "optimal":
            status = "stalled"
            break
        x_loc = res.x[: len(arrays.x_idx)]
        v = arrays.expand_v(res.x)
        x = arrays.expand_x(inst.n_players, res.x)
        y = arrays.E_act @ x_loc
        f_actual = float(v @ y)
        if f_actual < f_best:
            f_best = f_actual
            best = (x, v, y)
        if x_prev is not None:
            num = float(np.linalg.norm(x_loc - x_prev) ** 2)
            den = float(np.linalg.norm(x_loc))
            indicator = num / den if den > 0 else num
            if indicator < tol:
                status = "converged"
                break
        x_prev = x_loc
        y_hat = alpha_y * y_hat + (1.0 - alpha_y) * y
    elapsed = time.perf_counter() - t0

    if best is None:
        raise InfeasibleError("quasi-LP infeasible at the first iteration")
    x, v_lp, y = best
    v_out, _ = zonal_price_from_allocation(inst, x, settings)
    return make_outcome(
        inst,
        np.clip(x, 0.0, inst.Q),
        v_out,
        f_best,
        settings,
        mechanism="cm-ieqlp",
        status=status,
        iterations=it,
        indicator=indicator,
        lp_prices=v_lp,
        solve_time=elapsed,
        alpha_y=alpha_y,
    )
