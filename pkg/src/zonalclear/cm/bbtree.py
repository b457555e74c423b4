"""Branch-and-bound over zonal-quantity space for the CM model.

Upper bounds come from the quasi-LP heuristic restricted to the node's
region; lower bounds from LP relaxations of the bilinear cost built on
McCormick-style envelopes of each v_z y_z term. Nodes split through the
node's Chebyshev center along the zone axis with the largest envelope box
area, and the next node is drawn by a randomized selection rule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..core import (
    DEFAULT_SETTINGS,
    ClearingOutcome,
    InfeasibleError,
    MarketInstance,
    Polytope,
    Settings,
    SolverError,
    make_outcome,
)
from ..kernel import LinearProgram, chebyshev_center, solve_lp
from .common import ActiveEstimate, build_mcblp_arrays, estimate_active_set
from .ieqlp import run_ieqlp


@dataclass
class BBNode:
    """One region of zonal-quantity space with its bound data."""

    id: int
    parent: int
    polytope: Polytope
    status: str = "active-leaf"  # active-leaf | branched | pruned
    f_ub: float = np.inf
    f_lb: float = -np.inf
    x_sol: np.ndarray = None
    v_sol: np.ndarray = None
    y_sol: np.ndarray = None
    v_min: np.ndarray = None
    v_max: np.ndarray = None
    y_min: np.ndarray = None
    y_max: np.ndarray = None
    y_c: np.ndarray = None
    r_c: float = np.nan
    s_d: np.ndarray = None
    child_rows: tuple = None


def _zone_caps(inst: MarketInstance) -> np.ndarray:
    return np.array([inst.zone_capacity(z) for z in range(inst.n_zones)])


class _ZoneBoundData:
    """Per-run cache backing the analytic price bounds.

    For each zone with a nonempty estimate this holds the highest ask
    intercept, the estimated supply capacity, the price cap and the minimal
    price stack over the estimated players.
    """

    def __init__(self, inst: MarketInstance, est: ActiveEstimate):
        from dataclasses import replace
        from .ibcqp import build_stack_curve

        self.inst = inst
        self.est = est
        self.max_a = np.zeros(inst.n_zones)
        self.est_cap = np.zeros(inst.n_zones)
        self.v_cap = np.zeros(inst.n_zones)
        self.curves = [None] * inst.n_zones
        if est.union:
            reduced = replace(inst, players=tuple(inst.players[i] for i in est.union))
        for z in range(inst.n_zones):
            sel = est.zone(z)
            if not sel:
                continue
            self.max_a[z] = max(inst.players[i].a for i in sel)
            self.est_cap[z] = sum(inst.players[i].Q for i in sel)
            self.v_cap[z] = max(inst.players[i].max_price for i in sel)
            self.curves[z] = build_stack_curve(reduced, z)


def _y_bounds(polytope: Polytope, interior=None):
    """Per-zone quantity ranges over {M y <= b}, all zones at once.

    With a strictly interior point the region's vertices come from one
    halfspace-intersection call; otherwise (or on a degenerate region) each
    bound is an LP. Raises InfeasibleError on an empty region.
    """
    nz = polytope.M.shape[1]
    if interior is not None:
        slack = polytope.b - polytope.M @ interior
        if np.all(slack > 1e-9 * (1.0 + np.abs(polytope.b))):
            try:
                from scipy.spatial import HalfspaceIntersection

                hs = HalfspaceIntersection(
                    np.hstack([polytope.M, -polytope.b[:, None]]),
                    np.asarray(interior, dtype=float),
                )
                verts = hs.intersections
                if np.all(np.isfinite(verts)) and len(verts):
                    return verts.min(axis=0), verts.max(axis=0)
            except Exception:
                pass
    lo = np.zeros(nz)
    hi = np.zeros(nz)
    for z in range(nz):
        c = np.zeros(nz)
        c[z] = 1.0
        res_lo = solve_lp(LinearProgram(c, polytope.M, polytope.b))
        res_hi = solve_lp(LinearProgram(-c, polytope.M, polytope.b))
        if res_lo.status == "infeasible" or res_hi.status == "infeasible":
            raise InfeasibleError("empty node region")
        if res_lo.status != "optimal" or res_hi.status != "optimal":
            raise InfeasibleError(f"quantity-bound LP failed: {res_lo.status}/{res_hi.status}")
        lo[z], hi[z] = float(res_lo.objective), float(-res_hi.objective)
    return lo, hi


def _y_bounds_tight(inst: MarketInstance, polytope: Polytope, y_c):
    """Quantity ranges over the region cut with balance and zone capacities.

    Any box enclosing the feasible quantities keeps the envelope bound valid;
    this tighter variant (versus the y-only region) shrinks it. Vertices come
    from a halfspace intersection on the balance slice through the node's
    Chebyshev center, with per-bound LPs as the fallback.
    """
    nz = inst.n_zones
    caps = _zone_caps(inst)
    eye = np.eye(nz)
    A = np.vstack([polytope.M, eye, -eye])
    b = np.concatenate([polytope.b, caps, np.zeros(nz)])
    y_c = np.asarray(y_c, dtype=float)
    slack = b - A @ y_c
    if np.all(slack > 1e-9 * (1.0 + np.abs(b))):
        try:
            from scipy.linalg import null_space
            from scipy.spatial import HalfspaceIntersection

            N = null_space(np.ones((1, nz)))
            A_u = A @ N
            hs = HalfspaceIntersection(
                np.hstack([A_u, -slack[:, None]]), np.zeros(nz - 1)
            )
            verts = hs.intersections @ N.T + y_c
            if np.all(np.isfinite(verts)) and len(verts):
                return verts.min(axis=0), verts.max(axis=0)
        except Exception:
            pass
    lo = np.zeros(nz)
    hi = np.zeros(nz)
    eq = (np.ones((1, nz)), np.array([inst.total_demand]))
    for z in range(nz):
        c = np.zeros(nz)
        c[z] = 1.0
        res_lo = solve_lp(LinearProgram(c, A, b, *eq))
        res_hi = solve_lp(LinearProgram(-c, A, b, *eq))
        if res_lo.status == "infeasible" or res_hi.status == "infeasible":
            raise InfeasibleError("empty node region")
        if res_lo.status != "optimal" or res_hi.status != "optimal":
            raise InfeasibleError(
                f"quantity-bound LP failed: {res_lo.status}/{res_hi.status}"
            )
        lo[z], hi[z] = float(res_lo.objective), float(-res_hi.objective)
    return lo, hi


def _v_bounds(data: _ZoneBoundData, zone: int, y_lo: float, y_hi: float = None):
    """Price range of one zone given its feasible quantity range.

    At any optimum of the bilinear model the zonal price equals the
    minimal-price stack floored by the estimated intercepts, a nondecreasing
    map of the quantity; evaluating it at the quantity floor and (when given)
    the quantity ceiling brackets the price. Without a ceiling the cap row
    value is the maximum. A quantity floor above the estimated capacity
    certifies infeasibility.
    """
    from .ibcqp import segment_lookup

    curve = data.curves[zone]
    if curve is None:
        return 0.0, 0.0
    cap = data.est_cap[zone]
    if y_lo > cap * (1.0 + 1e-9):
        raise InfeasibleError(
            f"zone {zone}: quantity floor {y_lo:g} exceeds estimated supply {cap:g}"
        )
    y_probe = min(max(y_lo, 0.0), cap)
    v_lo = max(data.max_a[zone], segment_lookup(curve, y_probe).price_at(y_probe))
    if y_hi is None:
        return float(v_lo), float(data.v_cap[zone])
    y_top = min(max(y_hi, y_probe), cap)
    v_hi = max(data.max_a[zone], segment_lookup(curve, y_top).price_at(y_top))
    return float(v_lo), float(max(v_hi, v_lo))


def lpvy(inst: MarketInstance, est: ActiveEstimate, zone: int, polytope: Polytope,
         data: _ZoneBoundData = None, interior=None):
    """Zonal price and quantity ranges over one node region.

    Quantity bounds use the y-space region alone; price bounds follow
    analytically (highest intercept, nondecreasing minimal-price stack, cap).
    Raises InfeasibleError when the region is empty, marking the node
    prunable.
    """
    if data is None:
        data = _ZoneBoundData(inst, est)
    y_lo, y_hi = _y_bounds(polytope, interior)
    v_lo, v_hi = _v_bounds(data, zone, y_lo[zone])
    return v_lo, v_hi, float(y_lo[zone]), float(y_hi[zone])


def mccormick_lb(inst: MarketInstance, est: ActiveEstimate, polytope: Polytope,
                 bounds, level: int):
    """Envelope LP lower bound on the bilinear cost over a node region.

    level 1 underestimates each v_z y_z by v^min y + y^min v - v^min y^min,
    level 2 by v^max y + y^max v - v^max y^max; both are exact at the
    matching corner of the bound box. Returns (f_lb, per-zone terms).
    """
    if level not in (1, 2):
        raise ValueError("level must be 1 or 2")
    v_min, v_max, y_min, y_max = bounds
    arr = build_mcblp_arrays(inst, est, polytope, cap_prices=True)
    nx = len(arr.x_idx)
    nz = inst.n_zones
    if level == 1:
        cv, cy, const = v_min, y_min, -v_min * y_min
    else:
        cv, cy, const = v_max, y_max, -v_max * y_max

    c = np.zeros(arr.n_var)
    rows, rhs = [arr.A_ineq], [arr.b_ineq]
    for z in range(nz):
        c[:nx] += cv[z] * arr.E_act[z]
        col = arr.v_col[z]
        if col >= 0:
            c[col] += cy[z]
        # The price floor v_z >= v_min is implied by the ask rows once the
        # quantity box holds, so only the quantity box rows are added.
        ry = np.zeros(arr.n_var)
        ry[:nx] = arr.E_act[z]
        rows.append(np.vstack([ry, -ry]))
        rhs.append(np.array([y_max[z] + 1e-9, -(y_min[z] - 1e-9)]))
    res = solve_lp(LinearProgram(c, np.vstack(rows), np.concatenate(rhs),
                                 arr.A_eq, arr.b_eq))
    if res.status == "infeasible":
        raise InfeasibleError("envelope LP: empty node region")
    if res.status != "optimal":
        raise InfeasibleError(f"envelope LP failed with status {res.status}")
    y = arr.E_act @ res.x[:nx]
    v = arr.expand_v(res.x)
    w = cv * y + cy * v + const
    return float(w.sum()), w


def _envelope_lb(inst: MarketInstance, est: ActiveEstimate, polytope: Polytope,
                 bounds):
    """Combined envelope LP lower bound over a node region.

    One auxiliary variable per zone carries the bilinear term v_z y_z,
    bracketed by all four McCormick planes of the bound box at once; this
    dominates the best single corner plane while costing one LP solve.
    """
    v_min, v_max, y_min, y_max = bounds
    arr = build_mcblp_arrays(inst, est, polytope, cap_prices=True)
    nx = len(arr.x_idx)
    nz = inst.n_zones
    n_var = arr.n_var + nz

    def widen(A):
        return np.hstack([A, np.zeros((A.shape[0], nz))])

    c = np.zeros(n_var)
    c[arr.n_var:] = 1.0
    rows, rhs = [widen(arr.A_ineq)], [arr.b_ineq]
    for z in range(nz):
        col = arr.v_col[z]
        wc = arr.n_var + z
        ry = np.zeros(n_var)
        ry[:nx] = arr.E_act[z]
        # Quantity box rows, then under- and over-estimator planes on w_z.
        box = np.vstack([ry, -ry])
        under1 = v_min[z] * ry
        under2 = v_max[z] * ry
        over1 = v_min[z] * ry.copy()
        over2 = v_max[z] * ry.copy()
        if col >= 0:
            under1[col] += y_min[z]
            under2[col] += y_max[z]
            over1[col] += y_max[z]
            over2[col] += y_min[z]
        under1[wc] = -1.0
        under2[wc] = -1.0
        over1[wc] = -1.0
        over2[wc] = -1.0
        rows.append(box)
        rhs.append(np.array([y_max[z] + 1e-9, -(y_min[z] - 1e-9)]))
        rows.append(np.vstack([under1, under2]))
        rhs.append(np.array([v_min[z] * y_min[z], v_max[z] * y_max[z]]))
        rows.append(np.vstack([-over1, -over2]))
        rhs.append(np.array([-v_min[z] * y_max[z], -v_max[z] * y_min[z]]))
        if col >= 0:
            # Price ceiling of the box; valid at any node optimum because the
            # floored stack price is nondecreasing in the zonal quantity.
            rv = np.zeros(n_var)
            rv[col] = 1.0
            rows.append(rv[None, :])
            rhs.append(np.array([v_max[z] + 1e-9]))
    res = solve_lp(LinearProgram(c, np.vstack(rows), np.concatenate(rhs),
                                 widen(arr.A_eq), arr.b_eq))
    if res.status == "infeasible":
        raise InfeasibleError("envelope LP: empty node region")
    if res.status != "optimal":
        raise InfeasibleError(f"envelope LP failed with status {res.status}")
    return float(res.objective)


def cnq(inst: MarketInstance, est: ActiveEstimate, node: BBNode, r_delta: float,
        settings: Settings = DEFAULT_SETTINGS, ub_iters: int = 6,
        data: _ZoneBoundData = None, f_ub_global: float = np.inf) -> BBNode:
    """Populate a node: Chebyshev data, heuristic upper bound, envelope lower
    bound, branching direction and the two child cutting rows.

    Regions with inradius below r_delta are closed by setting the lower bound
    to the upper bound. An infeasible region marks the node pruned.
    """
    nz = inst.n_zones
    try:
        node.y_c, node.r_c = chebyshev_center(
            node.polytope.M, node.polytope.b,
            A_eq=np.ones((1, nz)), b_eq=np.array([inst.total_demand]),
        )
    except InfeasibleError:
        node.status = "pruned"
        return node

    if node.r_c >= r_delta:
        if data is None:
            data = _ZoneBoundData(inst, est)
        try:
            y_lo, y_hi = _y_bounds_tight(inst, node.polytope, node.y_c)
            v_lo = np.zeros(nz)
            v_hi = np.zeros(nz)
            for z in range(nz):
                v_lo[z], v_hi[z] = _v_bounds(data, z, y_lo[z], y_hi[z])
            bounds = (v_lo, v_hi, y_lo, y_hi)
            node.v_min, node.v_max, node.y_min, node.y_max = bounds
            node.f_lb = _envelope_lb(inst, est, node.polytope, bounds)
        except InfeasibleError:
            node.status = "pruned"
            return node
        if node.f_lb > f_ub_global:
            # Already dominated by the incumbent; the heuristic is skipped.
            node.status = "pruned"
            return node

    try:
        out = run_ieqlp(inst, est, polytope=node.polytope, max_iters=ub_iters,
                        y0=node.y_c, settings=settings)
    except InfeasibleError:
        node.status = "pruned"
        return node
    node.f_ub = out.objective
    node.x_sol = out.x
    node.v_sol = np.asarray(out.diagnostics["lp_prices"], dtype=float)
    node.y_sol = out.y

    if node.r_c < r_delta:
        node.f_lb = node.f_ub

    if node.v_min is not None:
        # Cut the zone whose envelope box contributes the largest McCormick
        # area; axis cuts shrink the bound boxes far faster than oblique ones.
        k = int(np.argmax((node.v_max - node.v_min) * (node.y_max - node.y_min)))
        s = np.zeros(nz)
        s[k] = 1.0
    else:
        s = node.y_sol - node.y_c
        nrm = float(np.linalg.norm(s))
        if nrm < 1e-12:
            s = np.zeros(nz)
            s[0] = 1.0
        else:
            s = s / nrm
    node.s_d = s
    cut = float(s @ node.y_c)
    node.child_rows = ((s.copy(), cut), (-s.copy(), -cut))
    return node


def rns_select(nodes: dict, incumbent_id: int, rng: np.random.Generator) -> int:
    """Randomized node selection over the active leaves.

    Category first (0.6 oldest, 0.1 incumbent's node, 0.2 lowest lower bound,
    0.1 uniform), then the node; an incumbent that is no longer an active
    leaf falls back to the oldest leaf.
    """
    leaves = [n for n in nodes.values() if n.status == "active-leaf"]
    if not leaves:
        raise ValueError("no active leaves")
    u = rng.random()
    if u < 0.6:
        return min(leaves, key=lambda n: n.id).id
    if u < 0.7:
        if incumbent_id is not None and nodes[incumbent_id].status == "active-leaf":
            return incumbent_id
        return min(leaves, key=lambda n: n.id).id
    if u < 0.9:
        return min(leaves, key=lambda n: n.f_lb).id
    return leaves[rng.integers(len(leaves))].id


def run_bbtree(
    inst: MarketInstance,
    est: ActiveEstimate = None,
    delta_o: float = 1e-5,
    r_delta: float = None,
    max_nodes: int = 10000,
    seed: int = 0,
    keep_trace: bool = False,
    settings: Settings = DEFAULT_SETTINGS,
) -> ClearingOutcome:
    """Global CM solve by branch and bound; returns the incumbent outcome.

    Terminates when the relative gap 2(UB - LB)/(UB + LB) falls to delta_o
    (absolute gap if the denominator degenerates) or the node budget runs
    out (status "gap-not-closed"). With keep_trace the per-iteration global
    bounds and per-node records land in the outcome diagnostics.
    """
    t0 = time.perf_counter()
    if est is None:
        est = estimate_active_set(inst, settings)
    if r_delta is None:
        r_delta = 1e-4 * float(np.linalg.norm(inst.demand))
    rng = np.random.default_rng(seed)
    data = _ZoneBoundData(inst, est)

    from ..kernel import solve_cqp
    from .ibcqp import build_stack_curve, build_sub_cqp, recover_x, segment_lookup

    curves = [build_stack_curve(inst, z) for z in range(inst.n_zones)]

    def polish(node):
        """Refine a node's heuristic point by one segment-box QP.

        The refined point is feasible for the full problem (possibly outside
        the node region), so it can only lower the node's upper bound; when
        the node was closed the lower bound follows it down, which keeps the
        global lower bound below any achievable cost.
        """
        try:
            y = np.array([
                min(max(node.y_sol[z], 0.0), curves[z].nonvertical[-1].y_hi)
                for z in range(inst.n_zones)
            ])
            segs = [segment_lookup(curves[z], y[z]) for z in range(inst.n_zones)]
            qp = build_sub_cqp(inst, segs)
            res = solve_cqp(qp, tol=1e-8)
            if res.status not in ("optimal", "stalled"):
                return
            y_new = res.x
            obj = float(sum(
                segs[z].alpha * y_new[z] ** 2
                + (segs[z].beta - segs[z].alpha * segs[z].Q_s) * y_new[z]
                for z in range(inst.n_zones)
            ))
            if obj >= node.f_ub - 1e-12:
                return
            x = recover_x(inst, y_new, segs)
            closed = node.f_lb == node.f_ub
            node.f_ub = obj
            node.x_sol = x
            node.v_sol = np.array([segs[z].price_at(y_new[z])
                                   for z in range(inst.n_zones)])
            node.y_sol = y_new
            if closed:
                node.f_lb = obj
        except (InfeasibleError, SolverError, ValueError):
            return

    nodes = {}
    root = cnq(inst, est, BBNode(id=0, parent=-1, polytope=inst.polytope),
               r_delta, settings, data=data)
    if root.status != "pruned":
        polish(root)
    nodes[0] = root
    if root.status == "pruned":
        raise InfeasibleError("root region infeasible: no clearing exists")

    incumbent = root
    f_ub_g = root.f_ub
    f_lb_g = root.f_lb
    trace = []
    node_log = []

    def gap(ub, lb):
        denom = ub + lb
        if denom <= 1e-9 * max(1.0, abs(ub)):
            return abs(ub - lb) / max(1.0, abs(ub))
        return 2.0 * (ub - lb) / denom

    delta_t = gap(f_ub_g, f_lb_g)
    trace.append((f_ub_g, f_lb_g, delta_t))
    next_id = 1
    status = "converged"
    while delta_t > delta_o:
        if next_id >= max_nodes:
            status = "gap-not-closed"
            break
        leaves = [n for n in nodes.values() if n.status == "active-leaf"]
        if not leaves:
            f_lb_g = f_ub_g
            delta_t = 0.0
            trace.append((f_ub_g, f_lb_g, delta_t))
            break

        sel = nodes[rns_select(nodes, incumbent.id, rng)]
        sel.status = "branched"
        for row, rhs in sel.child_rows:
            child_poly = Polytope(
                M=np.vstack([sel.polytope.M, row[None, :]]),
                b=np.append(sel.polytope.b, rhs),
            )
            child = cnq(inst, est, BBNode(id=next_id, parent=sel.id,
                                          polytope=child_poly), r_delta, settings,
                        data=data, f_ub_global=f_ub_g)
            nodes[next_id] = child
            next_id += 1
            if child.status != "pruned" and (
                    child.f_ub < f_ub_g or child.f_lb == child.f_ub):
                polish(child)
            if child.status != "pruned" and child.f_ub < f_ub_g:
                f_ub_g = child.f_ub
                incumbent = child

        for n in nodes.values():
            if n.status == "active-leaf" and n.f_lb > f_ub_g:
                n.status = "pruned"
        active = [n.f_lb for n in nodes.values() if n.status == "active-leaf"]
        f_lb_g = min(active) if active else f_ub_g
        # The global LB never regresses even if a child bound is looser.
        f_lb_g = max(f_lb_g, trace[-1][1])
        delta_t = gap(f_ub_g, f_lb_g)
        trace.append((f_ub_g, f_lb_g, delta_t))
    elapsed = time.perf_counter() - t0

    if keep_trace:
        node_log = [
            {"id": n.id, "parent": n.parent, "f_ub": n.f_ub, "f_lb": n.f_lb,
             "status": n.status}
            for n in sorted(nodes.values(), key=lambda n: n.id)
        ]

    diag = {
        "mechanism": "cm-bbtree",
        "status": status,
        "gap": delta_t,
        "nodes": len(nodes),
        "seed": seed,
        "iterations": len(trace) - 1,
        "solve_time": elapsed,
    }
    if keep_trace:
        diag["trace"] = trace
        diag["node_log"] = node_log
    x = np.clip(incumbent.x_sol, 0.0, inst.Q)
    return make_outcome(inst, x, incumbent.v_sol, f_ub_g, settings, **diag)
