"""Shared CM machinery: active-set estimation and the bilinear-model LPs.

The cost-minimisation model keeps zonal prices v as explicit variables tied
to allocations by v_z >= m_i x_i + a_i over an assumed active player set.
Everything here works on that constraint system: the quasi-LP for a fixed
zonal-quantity guess, and the fixed-y LP that serves as the exact price
oracle v(y).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import DEFAULT_SETTINGS, InfeasibleError, MarketInstance, Settings
from ..kernel import LinearProgram, solve_lp
from ..swm import clear_swm


@dataclass(frozen=True)
class ActiveEstimate:
    """Per-zone tuples of player indices assumed active in the CM model."""

    zones: tuple  # tuple of tuples of global player indices

    def zone(self, z: int) -> tuple:
        return self.zones[z]

    @property
    def union(self) -> list:
        out = []
        for zs in self.zones:
            out.extend(zs)
        return sorted(out)


def estimate_active_set(
    inst: MarketInstance, settings: Settings = DEFAULT_SETTINGS
) -> ActiveEstimate:
    """Estimate the CM-active players by clearing under SWM.

    The SWM-active set is augmented with every player whose intercept lies
    below the zone's SWM price: a superset estimate never cuts off the CM
    optimum, while the extra v_z >= a_i rows are harmless for zero-quantity
    players.
    """
    out = clear_swm(inst, settings)
    zones = []
    for z in range(inst.n_zones):
        sel = []
        for i in inst.zone_players(z):
            p = inst.players[i]
            if out.x[i] > settings.act_eps * p.Q or p.a < out.v[z]:
                sel.append(i)
        zones.append(tuple(sel))
    return ActiveEstimate(tuple(zones))


@dataclass(frozen=True)
class McBlpArrays:
    """Constraint blocks of the bilinear CM model over variables (x_act, v).

    x_idx maps local x columns to global player indices; v_col maps zones to
    their v column (or -1 for zones with an empty estimated active set, whose
    price is pinned to 0 and removed from the system). E_act aggregates the
    active-player columns per zone.
    """

    x_idx: np.ndarray
    v_col: np.ndarray
    n_var: int
    A_ineq: np.ndarray
    b_ineq: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    E_act: np.ndarray
    v_cap: np.ndarray  # per-zone upper bound max_i (m_i Q_i + a_i), 0 for empty zones

    def expand_x(self, n_players: int, xv: np.ndarray) -> np.ndarray:
        x = np.zeros(n_players)
        x[self.x_idx] = xv[: len(self.x_idx)]
        return x

    def expand_v(self, xv: np.ndarray) -> np.ndarray:
        v = np.zeros(len(self.v_col))
        for z, col in enumerate(self.v_col):
            if col >= 0:
                v[z] = xv[col]
        return v


def build_mcblp_arrays(
    inst: MarketInstance,
    est: ActiveEstimate,
    polytope=None,
    cap_prices: bool = False,
) -> McBlpArrays:
    """Assemble the (x, v) constraint blocks of the bilinear CM model.

    With cap_prices=True, rows v_z <= max_i (m_i Q_i + a_i) are appended;
    they never bind at a CM optimum (the minimal clearing price cannot exceed
    the dearest full-capacity ask) but keep max-v LPs bounded.
    """
    poly = polytope if polytope is not None else inst.polytope
    x_idx = np.array(est.union, dtype=int)
    nx = len(x_idx)
    nz = inst.n_zones
    v_col = np.full(nz, -1, dtype=int)
    col = nx
    for z in range(nz):
        if est.zone(z):
            v_col[z] = col
            col += 1
    n_var = col

    E_act = np.zeros((nz, nx))
    for j, i in enumerate(x_idx):
        E_act[inst.players[i].zone, j] = 1.0

    rows, rhs = [], []
    # v_z >= m_i x_i + a_i for the estimated active players.
    for z in range(nz):
        for i in est.zone(z):
            row = np.zeros(n_var)
            j = int(np.where(x_idx == i)[0][0])
            row[j] = inst.players[i].m
            row[v_col[z]] = -1.0
            rows.append(row)
            rhs.append(-inst.players[i].a)
    # Capacity box on the active x.
    for j in range(nx):
        row = np.zeros(n_var)
        row[j] = -1.0
        rows.append(row)
        rhs.append(0.0)
    for j in range(nx):
        row = np.zeros(n_var)
        row[j] = 1.0
        rows.append(row)
        rhs.append(inst.players[x_idx[j]].Q)
    # Network rows act on y = E_act x.
    net = poly.M @ E_act
    for k in range(poly.n_rows):
        row = np.zeros(n_var)
        row[:nx] = net[k]
        rows.append(row)
        rhs.append(poly.b[k])

    v_cap = np.zeros(nz)
    for z in range(nz):
        if est.zone(z):
            v_cap[z] = max(inst.players[i].max_price for i in est.zone(z))
    if cap_prices:
        for z in range(nz):
            if v_col[z] >= 0:
                row = np.zeros(n_var)
                row[v_col[z]] = 1.0
                rows.append(row)
                rhs.append(v_cap[z])

    A_eq = np.zeros((1, n_var))
    A_eq[0, :nx] = 1.0
    return McBlpArrays(
        x_idx=x_idx,
        v_col=v_col,
        n_var=n_var,
        A_ineq=np.array(rows),
        b_ineq=np.array(rhs),
        A_eq=A_eq,
        b_eq=np.array([inst.total_demand]),
        E_act=E_act,
        v_cap=v_cap,
    )


def build_mc_qlp(
    inst: MarketInstance,
    est: ActiveEstimate,
    y_hat,
    polytope=None,
    arrays: McBlpArrays = None,
):
    """The quasi-LP: minimise sum_z v_z * y_hat_z with y = Ex left unconstrained.

    Dropping the y = Ex link is what lets the iteration move the quantity
    guess. Returns (LinearProgram, McBlpArrays).
    """
    arr = arrays if arrays is not None else build_mcblp_arrays(inst, est, polytope)
    y_hat = np.asarray(y_hat, dtype=float)
    for z in range(inst.n_zones):
        if arr.v_col[z] < 0 and y_hat[z] > 0 and inst.zone_players(z):
            raise InfeasibleError(
                f"zone {inst.zones[z]}: empty active estimate but positive weight"
            )
    c = np.zeros(arr.n_var)
    for z in range(inst.n_zones):
        if arr.v_col[z] >= 0:
            c[arr.v_col[z]] = y_hat[z]
    lp = LinearProgram(c, arr.A_ineq, arr.b_ineq, arr.A_eq, arr.b_eq)
    return lp, arr


def cm_objective_given_y(
    inst: MarketInstance,
    est: ActiveEstimate,
    y_fixed,
    arrays: McBlpArrays = None,
):
    """Exact CM cost at a fixed zonal-quantity vector, via the fixed-y LP.

    Solves min sum_z v_z y_z over (x, v) with E x = y pinned; this is the
    brute-force oracle for the optimal price map v(y). Returns
    (objective, x, v) with x expanded to all players.
    """
    arr = arrays if arrays is not None else build_mcblp_arrays(inst, est)
    y_fixed = np.asarray(y_fixed, dtype=float)
    nx = len(arr.x_idx)
    c = np.zeros(arr.n_var)
    for z in range(inst.n_zones):
        if arr.v_col[z] >= 0:
            c[arr.v_col[z]] = y_fixed[z]
    A_eq = np.vstack([arr.A_eq, np.hstack([arr.E_act, np.zeros((inst.n_zones, arr.n_var - nx))])])
    b_eq = np.concatenate([arr.b_eq, y_fixed])
    res = solve_lp(LinearProgram(c, arr.A_ineq, arr.b_ineq, A_eq, b_eq))
    if res.status == "infeasible":
        raise InfeasibleError("fixed-y LP infeasible: y outside the CM feasible set")
    if res.status != "optimal":
        raise InfeasibleError(f"fixed-y LP failed with status {res.status}")
    x = arr.expand_x(inst.n_players, res.x)
    v = arr.expand_v(res.x)
    return float(res.objective), x, v
