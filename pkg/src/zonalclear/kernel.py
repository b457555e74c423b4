"""Dense LP/CQP kernel plus the geometric subsolvers built on it.

Covers: linear programs (HiGHS backend), strictly convex quadratic programs
(dense primal-dual interior point), Chebyshev centers, Dikin ellipsoids and
the ellipsoidal trust-region subproblem with an equality constraint.

Problem sizes here are small (tens of variables, hundreds of rows), so all
linear algebra is dense.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.linalg import LinAlgWarning
from scipy.optimize import linprog


from .core import InfeasibleError, SolverError


def _lu_factor_quiet(K):
    """LU factorisation without the singular-diagonal warning; callers handle
    the singular case through their own fallbacks."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        return sla.lu_factor(K)


@dataclass
class LinearProgram:
    """min c.x  s.t.  A_ineq x <= b_ineq,  A_eq x = b_eq (variables free)."""

    c: np.ndarray
    A_ineq: np.ndarray = None
    b_ineq: np.ndarray = None
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None


@dataclass
class QuadraticProgram:
    """min 0.5 x.H.x + g.x with the same constraint blocks as LinearProgram."""

    H: np.ndarray
    g: np.ndarray
    A_ineq: np.ndarray = None
    b_ineq: np.ndarray = None
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None


@dataclass
class SolveResult:
    x: np.ndarray
    objective: float
    status: str  # optimal | infeasible | unbounded | stalled
    ineq_dual: np.ndarray = None
    eq_dual: np.ndarray = None
    kkt_residual: float = np.nan
    iterations: int = 0


@dataclass(frozen=True)
class Ellipsoid:
    """{z : ||A_s z - p_s||_2 <= r}; A_s is the transposed Cholesky factor."""

    A_s: np.ndarray
    p_s: np.ndarray
    r: float

    def norm(self, z) -> float:
        return float(np.linalg.norm(self.A_s @ np.asarray(z, dtype=float) - self.p_s))

    def contains(self, z, tol: float = 1e-9) -> bool:
        return self.norm(z) <= self.r * (1.0 + tol)


def _as2d(A, n):
    if A is None:
        return np.zeros((0, n)), np.zeros(0)
    return np.atleast_2d(np.asarray(A, dtype=float)), None


def solve_lp(lp: LinearProgram, tol: float = 1e-8, maxiter: int = 200) -> SolveResult:
    """Solve a dense LP; duals are recovered so KKT residuals can be reported.

    A dense interior-point fast path handles the common well-posed case;
    anything it cannot certify (stall, suspected infeasibility or
    unboundedness) is re-solved with HiGHS for a definitive status.
    """
    c = np.asarray(lp.c, dtype=float)
    n = c.shape[0]
    if lp.A_ineq is not None and np.atleast_2d(lp.A_ineq).shape[1] != n:
        raise ValueError("A_ineq column count does not match objective length")
    if lp.A_eq is not None and np.atleast_2d(lp.A_eq).shape[1] != n:
        raise ValueError("A_eq column count does not match objective length")
    if lp.A_ineq is not None:
        fast = _solve_lp_ipm(lp, tol=min(tol, 1e-9))
        if fast is not None:
            return fast
    return _solve_lp_highs(lp, tol=tol, maxiter=maxiter)


def _solve_lp_ipm(lp: LinearProgram, tol: float = 1e-9, maxiter: int = 60):
    """Mehrotra predictor-corrector on a dense LP; None when not certified.

    Returns a SolveResult only when primal/dual feasibility and
    complementarity all verify below tol; every other situation (divergence,
    stall, infeasible or unbounded input) returns None so the caller can get
    an authoritative answer from HiGHS.
    """
    c = np.asarray(lp.c, dtype=float)
    n = c.shape[0]
    A = np.atleast_2d(np.asarray(lp.A_ineq, dtype=float))
    b = np.atleast_1d(np.asarray(lp.b_ineq, dtype=float))
    if lp.A_eq is not None:
        C = np.atleast_2d(np.asarray(lp.A_eq, dtype=float))
        dvec = np.atleast_1d(np.asarray(lp.b_eq, dtype=float))
    else:
        C = np.zeros((0, n))
        dvec = np.zeros(0)
    m, p = A.shape[0], C.shape[0]

    x = np.zeros(n)
    s = np.maximum(b, 1.0)
    z = np.ones(m)
    y = np.zeros(p)
    scale = 1.0 + float(np.abs(c).max(initial=0.0))
    b_scale = 1.0 + float(np.abs(b).max(initial=0.0))
    d_scale = 1.0 + float(np.abs(dvec).max(initial=0.0))
    reg = 1e-12

    for _ in range(maxiter):
        r_d = c + A.T @ z + (C.T @ y if p else 0.0)
        r_p = A @ x + s - b
        r_e = C @ x - dvec if p else np.zeros(0)
        mu = float(s @ z) / m
        res = max(
            np.abs(r_d).max(initial=0.0) / scale,
            np.abs(r_p).max(initial=0.0) / b_scale,
            np.abs(r_e).max(initial=0.0) / d_scale,
        )
        if res <= tol and mu / scale <= tol:
            obj = float(c @ x)
            kkt = _lp_kkt_residual(lp, x, z, y)
            if kkt <= 1e-7:
                return SolveResult(x, obj, "optimal", z, y, kkt, 0)
            return None
        if not np.isfinite(mu) or mu > 1e12 or res > 1e12:
            return None

        sinv = 1.0 / np.maximum(s, 1e-300)
        W = z * sinv
        K = (A.T * W) @ A
        K[np.diag_indices_from(K)] += reg * (1.0 + np.trace(K) / n)
        KKT = np.zeros((n + p, n + p))
        KKT[:n, :n] = K
        if p:
            KKT[:n, n:] = C.T
            KKT[n:, :n] = C
        try:
            lu = _lu_factor_quiet(KKT)
        except Exception:
            return None

        def newton(rc):
            rhs = np.concatenate([-r_d + A.T @ ((rc - z * r_p) * sinv), -r_e])
            if not np.all(np.isfinite(rhs)):
                raise FloatingPointError("nonfinite Newton rhs")
            sol = sla.lu_solve(lu, rhs)
            if not np.all(np.isfinite(sol)):
                raise FloatingPointError("singular KKT solve")
            dx, dy = sol[:n], sol[n:]
            ds = -r_p - A @ dx
            dz = (-rc - z * ds) * sinv
            return dx, dy, ds, dz

        try:
            dxa, _, dsa, dza = newton(s * z)
            ap = _step_len(s, dsa)
            ad = _step_len(z, dza)
            mu_aff = float((s + ap * dsa) @ (z + ad * dza)) / m
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.1
            dx, dy, ds, dz = newton(s * z + dsa * dza - sigma * mu)
        except FloatingPointError:
            return None
        ap = min(1.0, 0.995 * _step_len(s, ds))
        ad = min(1.0, 0.995 * _step_len(z, dz))
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dz))):
            return None
        x = x + ap * dx
        s = s + ap * ds
        z = z + ad * dz
        y = y + ad * dy
    return None


def _solve_lp_highs(lp: LinearProgram, tol: float = 1e-8, maxiter: int = 200) -> SolveResult:
    c = np.asarray(lp.c, dtype=float)
    n = c.shape[0]
    res = linprog(
        c,
        A_ub=lp.A_ineq,
        b_ub=lp.b_ineq,
        A_eq=lp.A_eq,
        b_eq=lp.b_eq,
        bounds=(None, None),
        method="highs",
        options={"maxiter": max(maxiter * 50, 1000)},
    )
    status = {0: "optimal", 1: "stalled", 2: "infeasible", 3: "unbounded"}.get(
        res.status, "stalled"
    )
    x = res.x if res.x is not None else np.full(n, np.nan)
    ineq_dual = eq_dual = None
    kkt = np.nan
    if status == "optimal":
        # HiGHS marginals are for "min"; dual of A_ub x <= b_ub is <= 0 there.
        ineq_dual = -res.ineqlin.marginals if lp.A_ineq is not None else np.zeros(0)
        eq_dual = -res.eqlin.marginals if lp.A_eq is not None else np.zeros(0)
        kkt = _lp_kkt_residual(lp, x, ineq_dual, eq_dual)
        if kkt > tol * 10:
            status = "stalled"
    return SolveResult(
        x=x,
        objective=float(res.fun) if res.fun is not None else np.nan,
        status=status,
        ineq_dual=ineq_dual,
        eq_dual=eq_dual,
        kkt_residual=kkt,
        iterations=int(getattr(res, "nit", 0) or 0),
    )


def _lp_kkt_residual(lp, x, zi, ze) -> float:
    c = np.asarray(lp.c, dtype=float)
    scale = 1.0 + float(np.abs(c).max(initial=0.0))
    stat = c.copy()
    comp = 0.0
    pfeas = 0.0
    if lp.A_ineq is not None:
        A = np.atleast_2d(lp.A_ineq)
        b = np.atleast_1d(lp.b_ineq)
        stat += A.T @ zi
        slack = b - A @ x
        pfeas = max(pfeas, float(np.max(-slack, initial=0.0)))
        comp = float(np.max(np.abs(zi * slack), initial=0.0))
    if lp.A_eq is not None:
        A = np.atleast_2d(lp.A_eq)
        b = np.atleast_1d(lp.b_eq)
        stat += A.T @ ze
        pfeas = max(pfeas, float(np.max(np.abs(A @ x - b), initial=0.0)))
    rel = 1.0 + float(np.abs(x).max(initial=0.0))
    return max(
        float(np.abs(stat).max(initial=0.0)) / scale, pfeas / rel, comp / (scale * rel)
    )


def solve_cqp(qp: QuadraticProgram, tol: float = 1e-8, maxiter: int = 100) -> SolveResult:
    """Dense primal-dual interior-point solve of a convex QP.

    Mehrotra-style predictor-corrector on the slack/multiplier pair of the
    inequality block, with the Newton step taken through a bordered
    elimination of the equality multipliers. H must be positive semidefinite
    (checked on the equality nullspace via Cholesky).
    """
    H = np.atleast_2d(np.asarray(qp.H, dtype=float))
    g = np.asarray(qp.g, dtype=float)
    n = g.shape[0]
    A, _ = _as2d(qp.A_ineq, n)
    b = np.asarray(qp.b_ineq, dtype=float) if qp.b_ineq is not None else np.zeros(0)
    C, _ = _as2d(qp.A_eq, n)
    dvec = np.asarray(qp.b_eq, dtype=float) if qp.b_eq is not None else np.zeros(0)
    m, p = A.shape[0], C.shape[0]

    if not np.allclose(H, H.T, atol=1e-10 * (1.0 + np.abs(H).max())):
        raise ValueError("H must be symmetric")
    _check_reduced_psd(H, C)

    if m == 0:
        return _solve_eqp(H, g, C, dvec)

    feas = solve_lp(
        LinearProgram(np.zeros(n), A, b, C if p else None, dvec if p else None)
    )
    if feas.status == "infeasible":
        return SolveResult(np.full(n, np.nan), np.nan, "infeasible")

    # Starting point: feasibility-LP point pulled slightly interior if possible.
    x = feas.x if feas.status == "optimal" else np.zeros(n)
    s = np.maximum(b - A @ x, 1.0)
    z = np.ones(m)
    scale = 1.0 + max(np.abs(g).max(initial=0.0), np.abs(H).max(initial=0.0))

    best = None
    for it in range(1, maxiter + 1):
        r_p = A @ x + s - b
        r_e = C @ x - dvec if p else np.zeros(0)
        mu = float(s @ z) / m

        # Eq-dual recovered by least squares; only needed for the residual.
        if p:
            ye, *_ = np.linalg.lstsq(C.T, -(H @ x + g + A.T @ z), rcond=None)
            r_d = H @ x + g + A.T @ z + C.T @ ye
        else:
            ye = np.zeros(0)
            r_d = H @ x + g + A.T @ z

        res_norm = max(
            np.abs(r_d).max(initial=0.0) / scale,
            np.abs(r_p).max(initial=0.0) / (1.0 + np.abs(b).max(initial=0.0)),
            np.abs(r_e).max(initial=0.0) / (1.0 + np.abs(dvec).max(initial=0.0)),
        )
        gap = mu / scale
        if best is None or max(res_norm, gap) < best[0]:
            best = (max(res_norm, gap), x.copy(), z.copy(), ye)
        if res_norm <= tol and gap <= tol:
            obj = 0.5 * x @ H @ x + g @ x
            return SolveResult(x, float(obj), "optimal", z, ye, max(res_norm, gap), it)

        W = z / np.maximum(s, 1e-300)
        K = H + (A.T * W) @ A
        KKT = np.zeros((n + p, n + p))
        KKT[:n, :n] = K
        if p:
            KKT[:n, n:] = C.T
            KKT[n:, :n] = C
        try:
            lu = _lu_factor_quiet(KKT)
        except Exception as exc:  # singular KKT
            raise SolverError(f"singular QP KKT system: {exc}") from exc

        def newton(rc):
            rhs = np.concatenate(
                [-(H @ x + g + A.T @ z) + A.T @ ((rc - z * r_p) / np.maximum(s, 1e-300)), -r_e]
            )
            sol = sla.lu_solve(lu, rhs)
            dx = sol[:n]
            dy = sol[n:]
            ds = -r_p - A @ dx
            dz = (-rc - z * ds) / np.maximum(s, 1e-300)
            return dx, dy, ds, dz

        # Predictor
        rc_aff = s * z
        dxa, _, dsa, dza = newton(rc_aff)
        alpha_p = _step_len(s, dsa)
        alpha_d = _step_len(z, dza)
        mu_aff = float((s + alpha_p * dsa) @ (z + alpha_d * dza)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.1

        # Corrector
        rc = s * z + dsa * dza - sigma * mu
        dx, dy, ds, dz = newton(rc)
        alpha_p = min(1.0, 0.995 * _step_len(s, ds))
        alpha_d = min(1.0, 0.995 * _step_len(z, dz))
        x = x + alpha_p * dx
        s = s + alpha_p * ds
        z = z + alpha_d * dz

    res_norm, xb, zb, yb = best
    obj = 0.5 * xb @ H @ xb + g @ xb
    return SolveResult(xb, float(obj), "stalled", zb, yb, res_norm, maxiter)


def _step_len(v, dv) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _check_reduced_psd(H, C):
    """Cholesky of H restricted to the equality nullspace; raises if indefinite."""
    n = H.shape[0]
    if C.shape[0]:
        Z = sla.null_space(C)
        if Z.shape[1] == 0:
            return
        Hr = Z.T @ H @ Z
    else:
        Hr = H
    shift = 1e-10 * (1.0 + abs(np.trace(Hr)) / max(Hr.shape[0], 1))
    try:
        np.linalg.cholesky(Hr + shift * np.eye(Hr.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise SolverError("H is not positive semidefinite on the feasible affine hull") from exc


def _solve_eqp(H, g, C, d):
    """Equality-only QP via one bordered solve."""
    n = H.shape[0]
    p = C.shape[0]
    if p == 0:
        x = np.linalg.solve(H, -g)
        return SolveResult(x, float(0.5 * x @ H @ x + g @ x), "optimal", np.zeros(0), np.zeros(0), 0.0, 1)
    sol = bordered_kkt_solve(H, C, np.concatenate([-g, d]))
    x, y = sol[:n], sol[n:]
    return SolveResult(x, float(0.5 * x @ H @ x + g @ x), "optimal", np.zeros(0), y, 0.0, 1)


def chebyshev_center(M, b, A_eq=None, b_eq=None):
    """Largest inscribed ball center of {M y <= b} (optionally on an affine slice).

    Row weights are the Euclidean row norms of M, so the returned radius is a
    true geometric inradius. Returns (y_c, r_c).
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    b = np.asarray(b, dtype=float)
    nrows, n = M.shape
    w = np.linalg.norm(M, axis=1)
    # Variables (y, r): maximise r.
    A_ineq = np.hstack([M, w[:, None]])
    A_ineq = np.vstack([A_ineq, np.concatenate([np.zeros(n), [-1.0]])])
    b_ineq = np.concatenate([b, [0.0]])
    Ae = be = None
    if A_eq is not None:
        Ae = np.hstack([np.atleast_2d(np.asarray(A_eq, dtype=float)), np.zeros((np.atleast_2d(A_eq).shape[0], 1))])
        be = np.asarray(b_eq, dtype=float)
    c = np.zeros(n + 1)
    c[-1] = -1.0
    res = solve_lp(LinearProgram(c, A_ineq, b_ineq, Ae, be))
    if res.status == "infeasible":
        raise InfeasibleError("empty polytope: no Chebyshev center")
    if res.status not in ("optimal",):
        raise SolverError(f"Chebyshev LP failed with status {res.status}")
    return res.x[:n], float(res.x[n])


def dikin_ellipsoid(z_c, M_I, b_I) -> Ellipsoid:
    """Unit log-barrier-Hessian ellipsoid at an interior point.

    The ellipsoid {z : (z - z_c)^T H (z - z_c) <= 1} with
    H = M^T diag(1/slack)^2 M is contained in {M z <= b}; it is returned in
    factored form A_s = L^T with H = L L^T.
    """
    z_c = np.asarray(z_c, dtype=float)
    M_I = np.atleast_2d(np.asarray(M_I, dtype=float))
    b_I = np.asarray(b_I, dtype=float)
    slack = b_I - M_I @ z_c
    if np.any(slack <= 0):
        k = int(np.argmin(slack))
        raise ValueError(f"center not strictly interior: slack {slack[k]:.3e} on row {k}")
    gvec = 1.0 / slack
    H = (M_I * gvec[:, None] ** 2).T @ M_I
    n = H.shape[0]
    reg = 0.0
    for _ in range(3):
        try:
            L = np.linalg.cholesky(H + reg * np.eye(n))
            break
        except np.linalg.LinAlgError:
            reg = max(reg * 100, 1e-12 * np.trace(H) / n)
    else:
        raise SolverError("barrier Hessian numerically singular")
    A_s = L.T
    return Ellipsoid(A_s=A_s, p_s=A_s @ z_c, r=1.0)


def bordered_kkt_solve(G_block, M_e, rhs) -> np.ndarray:
    """Solve the saddle-point system [[G, M_e^T], [M_e, 0]] w = rhs densely."""
    G = np.atleast_2d(np.asarray(G_block, dtype=float))
    M = np.atleast_2d(np.asarray(M_e, dtype=float)) if M_e is not None else np.zeros((0, G.shape[0]))
    rhs = np.asarray(rhs, dtype=float)
    n, p = G.shape[0], M.shape[0]
    K = np.zeros((n + p, n + p))
    K[:n, :n] = G
    if p:
        K[:n, n:] = M.T
        K[n:, :n] = M
    try:
        lu = _lu_factor_quiet(K)
        sol = sla.lu_solve(lu, rhs)
        sol += sla.lu_solve(lu, rhs - K @ sol)  # one refinement step
    except Exception as exc:
        raise SolverError(f"singular bordered system (cond ~ {np.linalg.cond(K):.3e})") from exc
    resid = np.linalg.norm(K @ sol - rhs)
    if not np.isfinite(resid) or resid > 1e-10 * (1.0 + np.linalg.norm(rhs)):
        raise SolverError(
            f"bordered system residual {resid:.3e} (cond ~ {np.linalg.cond(K):.3e})"
        )
    return sol


def trust_region_solve(G_hat, M_e, b_e, ell: Ellipsoid, tol: float = 1e-8,
                       try_interior: bool = False):
    """Minimise z.G_hat.z over an ellipsoid intersected with M_e z = b_e.

    The boundary multiplier mu >= 0 solves the secular equation
    f(mu) = 1/||A_s z(mu) - p_s||^2 - 1/r^2 = 0 with z(mu) from the bordered
    stationarity system; safeguarded Newton with a bisection fallback.
    Returns (z, mu, status).
    """
    G_hat = np.atleast_2d(np.asarray(G_hat, dtype=float))
    n = G_hat.shape[0]
    if M_e is None or np.size(M_e) == 0:
        M = np.zeros((0, n))
        be = np.zeros(0)
    else:
        M = np.atleast_2d(np.asarray(M_e, dtype=float))
        be = np.atleast_1d(np.asarray(b_e, dtype=float))
    A_s, p_s, r = ell.A_s, ell.p_s, ell.r

    if M.shape[0]:
        if np.linalg.matrix_rank(M) < M.shape[0]:
            raise ValueError("equality rows are rank deficient")
        z_part, res, *_ = np.linalg.lstsq(M, be, rcond=None)
        if np.linalg.norm(M @ z_part - be) > 1e-8 * (1.0 + np.linalg.norm(be)):
            raise InfeasibleError("inconsistent equality system")
        Z = sla.null_space(M)
    else:
        z_part = np.zeros(n)
        Z = np.eye(n)
    k = Z.shape[1]
    if k == 0:
        if ell.norm(z_part) > r * (1 + 1e-8):
            raise InfeasibleError("affine set does not meet the ellipsoid")
        return z_part, 0.0, "optimal"

    B = A_s @ Z
    q = p_s - A_s @ z_part
    S = B.T @ B
    Hred = Z.T @ G_hat @ Z
    Hred = 0.5 * (Hred + Hred.T)
    gred = Z.T @ (G_hat @ z_part)

    # Closest approach of the affine set to the ellipsoid center.
    u_far = np.linalg.solve(S, B.T @ q)
    dmin = float(np.linalg.norm(B @ u_far - q))
    if dmin > r * (1.0 + 1e-6) + tol:
        raise InfeasibleError("affine set does not meet the ellipsoid")

    def u_of(mu):
        return np.linalg.solve(Hred + mu * S, -gred + mu * (B.T @ q))

    def phi(mu):
        return float(np.linalg.norm(B @ u_of(mu) - q))

    # Smallest mu making Hred + mu*S positive definite, with the critical
    # generalized eigenvector for the hard case.
    eigs, vecs = sla.eigh(-Hred, S)
    mu_crit = float(max(0.0, eigs.max()))

    # Interior candidate: valid only when the reduced Hessian is PSD at mu = 0.
    if mu_crit == 0.0 or (try_interior and mu_crit < tol):
        u0, *_ = np.linalg.lstsq(Hred, -gred, rcond=None)
        if (np.linalg.norm(Hred @ u0 + gred) <= 1e-9 * (1.0 + np.linalg.norm(gred))
                and np.linalg.norm(B @ u0 - q) <= r * (1.0 + 1e-12)):
            z = z_part + Z @ u0
            return z, 0.0, "optimal"

    eps0 = max(mu_crit * 1e-12, 1e-14)
    mu_lo = mu_crit + eps0
    status = "optimal"
    try:
        hard = phi(mu_lo) <= r
    except np.linalg.LinAlgError:
        hard = True
        mu_lo = mu_crit + max(1e-10, mu_crit * 1e-8)
    if hard:
        # Hard case: the multiplier is pinned at the critical eigenvalue and
        # the boundary is reached along the critical eigenvector.
        K = Hred + mu_crit * S
        u_ls, *_ = np.linalg.lstsq(K, -gred + mu_crit * (B.T @ q), rcond=None)
        w = vecs[:, int(np.argmax(eigs))]
        a = float(w @ S @ w)
        bq = float(w @ (S @ u_ls - B.T @ q))
        cc = float(np.linalg.norm(B @ u_ls - q) ** 2) - r * r
        disc = max(bq * bq - a * cc, 0.0)
        tau = (-bq + np.sqrt(disc)) / a if a > 0 else 0.0
        z = z_part + Z @ (u_ls + tau * w)
        return z, mu_crit + 1e-10, "optimal-degraded"

    mu_hi = max(1.0, 2.0 * mu_lo)
    for _ in range(200):
        if phi(mu_hi) <= r:
            break
        mu_hi *= 4.0
    else:
        return z_part + Z @ u_of(mu_hi), mu_hi, "stalled"

    mu = 0.5 * (mu_lo + mu_hi)
    for _ in range(100):
        u = u_of(mu)
        w = B @ u - q
        nrm = float(np.linalg.norm(w))
        if abs(nrm - r) <= tol * max(r, 1.0):
            break
        if nrm > r:
            mu_lo = mu
        else:
            mu_hi = mu
        # Newton step on f(mu) = 1/phi^2 - 1/r^2.
        du = np.linalg.solve(Hred + mu * S, B.T @ q - S @ u)
        dphi = float(w @ (B @ du)) / max(nrm, 1e-300)
        fval = 1.0 / nrm**2 - 1.0 / r**2
        fprime = -2.0 * dphi / nrm**3
        if fprime != 0.0 and np.isfinite(fprime):
            mu_new = mu - fval / fprime
        else:
            mu_new = np.nan
        if not np.isfinite(mu_new) or not (mu_lo < mu_new < mu_hi):
            mu_new = 0.5 * (mu_lo + mu_hi)
        mu = mu_new
    else:
        status = "stalled"
        u = u_of(mu)

    z = z_part + Z @ u
    return z, float(mu), status
