"""Interior ellipsoidal QP method for the bilinear CM model.

The CM model with explicit prices is a nonconvex QP: minimise z.G.z over the
joint (x, v) polytope, with G coupling prices to zonal quantities. This
solver walks Dikin ellipsoids: at each interior center it minimises the
objective over the inscribed ellipsoid (an exactly solvable trust-region
problem), moves the center to the minimiser, and converts inequality rows
whose slack has collapsed into equalities. Once the accumulated equalities
pin down a vertex the solve finishes by least squares.
"""

from __future__ import annotations

import time

import numpy as np

from ..core import (
    DEFAULT_SETTINGS,
    ClearingOutcome,
    MarketInstance,
    Settings,
    SolverError,
    make_outcome,
)
from ..kernel import chebyshev_center, dikin_ellipsoid, trust_region_solve
from .common import (
    ActiveEstimate,
    McBlpArrays,
    build_mcblp_arrays,
    cm_objective_given_y,
    estimate_active_set,
)


class McQpForm:
    """Quadratic form and constraint blocks of the CM model over z = (x, v)."""

    def __init__(self, G, A_I, b_I, M_e, b_e, arrays: McBlpArrays):
        self.G = G
        self.A_I = A_I
        self.b_I = b_I
        self.M_e = M_e
        self.b_e = b_e
        self.arrays = arrays

    @property
    def n_var(self) -> int:
        return self.G.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(z @ self.G @ z)


def build_mcqp(
    inst: MarketInstance,
    est: ActiveEstimate = None,
    polytope=None,
    settings: Settings = DEFAULT_SETTINGS,
) -> McQpForm:
    """Assemble min z.G.z s.t. A_I z <= b_I, M_e z = b_e over z = (x_act, v).

    G carries 0.5 on each (x_i, v_z) pair so z.G.z equals sum_z v_z y_z
    exactly. The single equality row is the demand balance.
    """
    if est is None:
        est = estimate_active_set(inst, settings)
    arr = build_mcblp_arrays(inst, est, polytope)
    nx = len(arr.x_idx)
    G = np.zeros((arr.n_var, arr.n_var))
    for z in range(inst.n_zones):
        col = arr.v_col[z]
        if col < 0:
            continue
        for j in range(nx):
            if arr.E_act[z, j]:
                G[j, col] += 0.5 * arr.E_act[z, j]
                G[col, j] += 0.5 * arr.E_act[z, j]
    return McQpForm(G, arr.A_ineq.copy(), arr.b_ineq.copy(), arr.A_eq.copy(),
                    arr.b_eq.copy(), arr)


def _append_if_independent(M_e, b_e, row, rhs):
    cand = np.vstack([M_e, row])
    if np.linalg.matrix_rank(cand) > M_e.shape[0]:
        return cand, np.append(b_e, rhs), True
    return M_e, b_e, False


def run_ieqp_wr(
    inst: MarketInstance,
    est: ActiveEstimate = None,
    delta: float = 1e-7,
    delta_b: float = 1e-6,
    max_iters: int = 500,
    polish: bool = True,
    polytope=None,
    settings: Settings = DEFAULT_SETTINGS,
) -> ClearingOutcome:
    """Dikin-ellipsoid trust-region descent on the bilinear CM model.

    delta is the step-norm stopping threshold, delta_b the slack below which
    an inequality row is converted to an equality and retired. With polish
    the converged quantities are re-priced exactly through the fixed-y LP.
    """
    t0 = time.perf_counter()
    if est is None:
        est = estimate_active_set(inst, settings)
    form = build_mcqp(inst, est, polytope, settings)
    A_I, b_I = form.A_I, form.b_I
    M_e, b_e = form.M_e, form.b_e
    n = form.n_var

    z_c, _ = chebyshev_center(A_I, b_I, A_eq=M_e, b_eq=b_e)
    status = "max-iters"
    tr_status = ""
    step = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        if np.linalg.matrix_rank(M_e) == n:
            z_c, *_ = np.linalg.lstsq(M_e, b_e, rcond=None)
            status = "vertex"
            break
        if A_I.shape[0] == 0:
            raise SolverError("all inequality rows retired before a vertex was pinned")

        try:
            ell = dikin_ellipsoid(z_c, A_I, b_I)
        except ValueError:
            # Reconditioning: the moved center drifted onto a retired face's
            # neighbour; restart from the Chebyshev center of the current system.
            z_c, r_c = chebyshev_center(A_I, b_I, A_eq=M_e, b_eq=b_e)
            if r_c <= 0:
                status = "degenerate"
                break
            ell = dikin_ellipsoid(z_c, A_I, b_I)

        z_new, _, tr_status = trust_region_solve(form.G, M_e, b_e, ell, tol=1e-10)
        step = float(np.linalg.norm(z_new - z_c))
        moved_enough = step > delta * max(1.0, float(np.linalg.norm(z_new)))

        # Retire rows whose slack collapsed; each becomes a hard equality.
        slack = b_I - A_I @ z_new
        tight = slack < delta_b
        if np.any(tight):
            for k in np.flatnonzero(tight):
                M_e, b_e, _ = _append_if_independent(M_e, b_e, A_I[k], b_I[k])
            A_I = A_I[~tight]
            b_I = b_I[~tight]
            # Snap the center onto the enlarged equality set.
            z_new = z_new + np.linalg.lstsq(M_e, b_e - M_e @ z_new, rcond=None)[0]

        z_c = z_new
        if not moved_enough and not np.any(tight):
            status = "converged"
            break
    elapsed = time.perf_counter() - t0

    arr = form.arrays
    x = arr.expand_x(inst.n_players, z_c)
    v = arr.expand_v(z_c)
    x = np.clip(x, 0.0, inst.Q)
    d = inst.total_demand
    if x.sum() > 0 and abs(x.sum() - d) > 1e-9 * max(1.0, d):
        x *= d / x.sum()
    y = inst.aggregation_matrix() @ x
    f = float(v @ y)

    raw_objective = f
    if polish:
        try:
            f_ref, x_ref, v_ref = cm_objective_given_y(inst, est, y, arrays=arr)
            if f_ref <= f + 1e-12 * max(1.0, abs(f)):
                f, x, v = f_ref, np.clip(x_ref, 0.0, inst.Q), v_ref
        except Exception:
            pass

    return make_outcome(
        inst,
        x,
        v,
        f,
        settings,
        mechanism="cm-ieqp-wr",
        status=status,
        iterations=it,
        indicator=step,
        tr_status=tr_status,
        raw_objective=raw_objective,
        equality_rows=int(M_e.shape[0]),
        solve_time=elapsed,
    )
