"""Domain model for zonal market instances and clearing outcomes.

Holds the order/instance/polytope types shared by every clearing mechanism,
plus price extraction, feasibility checking, cost evaluation and the
PTDF-to-polytope assembly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np


class InfeasibleError(RuntimeError):
    """Raised when a problem or instance has an empty feasible set."""


class SolverError(RuntimeError):
    """Raised when a numerical solve fails for reasons other than infeasibility."""


@dataclass(frozen=True)
class Settings:
    """Numerical tolerances used throughout the solvers.

    feas_tol / price_tol are relative; act_eps scales with each player's
    capacity when testing "x_i > 0".
    """

    feas_tol: float = 1e-8
    price_tol: float = 1e-8
    act_eps: float = 1e-9
    lp_tol: float = 1e-8
    cqp_tol: float = 1e-8


DEFAULT_SETTINGS = Settings()


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PlayerOrder:
    """A producer's linear marginal-price order: lambda(x) = m*x + a on [0, Q]."""

    id: str
    zone: int
    m: float
    a: float
    Q: float

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError(f"player {self.id}: nonpositive slope m={self.m}")
        if self.a < 0:
            raise ValueError(f"player {self.id}: negative intercept a={self.a}")
        if not self.Q > 0:
            raise ValueError(f"player {self.id}: nonpositive capacity Q={self.Q}")

    def marginal_price(self, x: float) -> float:
        return self.m * x + self.a

    @property
    def max_price(self) -> float:
        """Marginal price asked at full capacity."""
        return self.m * self.Q + self.a


@dataclass(frozen=True)
class Polytope:
    """Linear inequality region {y : M y <= b} over zonal quantities."""

    M: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "M", _frozen(np.atleast_2d(self.M)))
        object.__setattr__(self, "b", _frozen(np.atleast_1d(self.b)))
        if self.M.shape[0] != self.b.shape[0]:
            raise ValueError(
                f"row mismatch: M has {self.M.shape[0]} rows, b has {self.b.shape[0]}"
            )

    @property
    def n_rows(self) -> int:
        return self.M.shape[0]

    def contains(self, y, tol: float = 1e-8) -> bool:
        y = np.asarray(y, dtype=float)
        return bool(np.all(self.M @ y <= self.b + tol * (1.0 + np.abs(self.b))))


@dataclass(frozen=True)
class MarketInstance:
    """A single-hour zonal auction: orders, inflexible zonal demand, network polytope.

    The polytope is stored in demand-adjusted form, i.e. its right-hand side
    already absorbs the zonal demand shift, so it constrains zonal production
    y directly.
    """

    zones: tuple
    players: tuple
    demand: np.ndarray
    polytope: Polytope

    def __post_init__(self):
        object.__setattr__(self, "zones", tuple(self.zones))
        object.__setattr__(self, "players", tuple(self.players))
        object.__setattr__(self, "demand", _frozen(self.demand))
        nz = len(self.zones)
        if self.demand.shape != (nz,):
            raise ValueError("demand length must match zone count")
        if np.any(self.demand < 0):
            raise ValueError("negative zonal demand")
        for p in self.players:
            if not 0 <= p.zone < nz:
                raise ValueError(f"player {p.id}: zone index {p.zone} out of range")
        if self.polytope.M.shape[1] != nz:
            raise ValueError("polytope column count must match zone count")

    @property
    def n_zones(self) -> int:
        return len(self.zones)

    @property
    def n_players(self) -> int:
        return len(self.players)

    @property
    def total_demand(self) -> float:
        return float(self.demand.sum())

    @property
    def m(self) -> np.ndarray:
        return np.array([p.m for p in self.players])

    @property
    def a(self) -> np.ndarray:
        return np.array([p.a for p in self.players])

    @property
    def Q(self) -> np.ndarray:
        return np.array([p.Q for p in self.players])

    @property
    def player_zone(self) -> np.ndarray:
        return np.array([p.zone for p in self.players], dtype=int)

    def aggregation_matrix(self) -> np.ndarray:
        """E in {0,1}^(n_zones x n_players) summing player quantities per zone."""
        E = np.zeros((self.n_zones, self.n_players))
        for i, p in enumerate(self.players):
            E[p.zone, i] = 1.0
        return E

    def zone_players(self, z: int) -> list:
        return [i for i, p in enumerate(self.players) if p.zone == z]

    def zone_capacity(self, z: int) -> float:
        return float(sum(p.Q for p in self.players if p.zone == z))


@dataclass(frozen=True)
class ClearingOutcome:
    """Result of clearing one instance under some mechanism.

    total_cost is always sum_z v_z * y_z for the stored prices; objective is
    whatever the mechanism minimised (the SWM quadratic, or the CM cost).
    The active partition maps each zone to (inactive, marginal, full) player
    index tuples.
    """

    x: np.ndarray
    y: np.ndarray
    v: np.ndarray
    total_cost: float
    active: tuple
    objective: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(self.x))
        object.__setattr__(self, "y", _frozen(self.y))
        object.__setattr__(self, "v", _frozen(self.v))

    @property
    def active_players(self) -> np.ndarray:
        """Global indices of players with positive allocation."""
        out = []
        for _, marginal, full in self.active:
            out.extend(marginal)
            out.extend(full)
        return np.array(sorted(out), dtype=int)


def active_partition(inst: MarketInstance, x, settings: Settings = DEFAULT_SETTINGS):
    """Split each zone's players into (inactive, marginal, at-capacity) sets."""
    x = np.asarray(x, dtype=float)
    parts = []
    for z in range(inst.n_zones):
        inact, marg, full = [], [], []
        for i in inst.zone_players(z):
            p = inst.players[i]
            if x[i] <= settings.act_eps * p.Q:
                inact.append(i)
            elif x[i] >= p.Q * (1.0 - settings.act_eps):
                full.append(i)
            else:
                marg.append(i)
        parts.append((tuple(inact), tuple(marg), tuple(full)))
    return tuple(parts)


def zonal_price_from_allocation(
    inst: MarketInstance, x, settings: Settings = DEFAULT_SETTINGS
):
    """Zonal prices as the highest marginal price among active players.

    Returns (v, empty) where empty flags zones with no active player; those
    zones get price 0 rather than an undefined max over an empty set.
    """
    x = np.asarray(x, dtype=float)
    v = np.zeros(inst.n_zones)
    empty = np.ones(inst.n_zones, dtype=bool)
    for i, p in enumerate(inst.players):
        if x[i] > settings.act_eps * p.Q:
            lam = p.marginal_price(x[i])
            if empty[p.zone] or lam > v[p.zone]:
                v[p.zone] = lam
            empty[p.zone] = False
    return v, empty


def total_cost(v, y) -> float:
    """Procurement cost sum_z v_z * y_z."""
    v = np.asarray(v, dtype=float)
    y = np.asarray(y, dtype=float)
    if v.shape != y.shape:
        raise ValueError(f"length mismatch: v has shape {v.shape}, y has {y.shape}")
    return float(v @ y)


def check_paradoxical_orders(
    inst: MarketInstance, outcome: ClearingOutcome, settings: Settings = DEFAULT_SETTINGS
) -> list:
    """Players cleared with positive quantity above their zone's price.

    An empty list certifies the outcome has no paradoxically accepted orders.
    """
    bad = []
    for i, p in enumerate(inst.players):
        if outcome.x[i] > settings.act_eps * p.Q:
            lam = p.marginal_price(outcome.x[i])
            if lam > outcome.v[p.zone] + settings.price_tol * (1.0 + abs(outcome.v[p.zone])):
                bad.append(i)
    return bad


def assemble_polytope(ptdf, ram_lb, ram_ub, demand, box=(0.4, 1.6)) -> Polytope:
    """Build the demand-adjusted network polytope from PTDF rows and RAMs.

    Line flows are constrained by r <= PTDF (y - d) <= R; folding in the
    demand gives the stacked rows [-PTDF; +PTDF] y <= [-r - PTDF d; R + PTDF d].
    Per-zone box rows lo*d_z <= y_z <= hi*d_z are appended to guarantee
    boundedness.
    """
    demand = np.asarray(demand, dtype=float)
    nz = demand.shape[0]
    ptdf = np.asarray(ptdf, dtype=float).reshape(-1, nz)
    ram_lb = np.atleast_1d(np.asarray(ram_lb, dtype=float))
    ram_ub = np.atleast_1d(np.asarray(ram_ub, dtype=float))
    if np.any(ram_lb > ram_ub):
        k = int(np.argmax(ram_lb - ram_ub))
        raise ValueError(f"ram_lb > ram_ub at line {k}")
    lo, hi = box
    shift = ptdf @ demand
    eye = np.eye(nz)
    M = np.vstack([-ptdf, ptdf, eye, -eye])
    b = np.concatenate([-ram_lb - shift, ram_ub + shift, hi * demand, -lo * demand])
    return Polytope(M, b)


def _feasibility_lp(inst: MarketInstance):
    """LP feasibility certificate for the instance's x-space constraint set."""
    from .kernel import LinearProgram, solve_lp

    n = inst.n_players
    E = inst.aggregation_matrix()
    A_ineq = np.vstack([inst.polytope.M @ E, np.eye(n), -np.eye(n)])
    b_ineq = np.concatenate([inst.polytope.b, inst.Q, np.zeros(n)])
    lp = LinearProgram(
        c=np.zeros(n),
        A_ineq=A_ineq,
        b_ineq=b_ineq,
        A_eq=np.ones((1, n)),
        b_eq=np.array([inst.total_demand]),
    )
    return solve_lp(lp)


def validate_instance(inst: MarketInstance) -> list:
    """Collect violations; an empty list means the instance is usable.

    Hard type invariants are enforced at construction, so this focuses on
    cross-field checks and the feasibility LP.
    """
    issues = []
    d = inst.total_demand
    if not d > 0:
        issues.append("total demand must be positive")
    for z in range(inst.n_zones):
        if not inst.zone_players(z):
            issues.append(f"zone {inst.zones[z]} has no players")
    if float(inst.Q.sum()) < d:
        issues.append(
            f"infeasible: supply {inst.Q.sum():g} < demand {d:g}"
        )
    if not issues:
        res = _feasibility_lp(inst)
        if res.status != "optimal":
            issues.append(f"infeasible: feasibility LP returned {res.status}")
    return issues


def make_outcome(
    inst: MarketInstance,
    x,
    v,
    objective: float,
    settings: Settings = DEFAULT_SETTINGS,
    check: bool = True,
    **diagnostics,
) -> ClearingOutcome:
    """Assemble an outcome from an allocation and prices, verifying invariants."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    E = inst.aggregation_matrix()
    y = E @ x
    d = inst.total_demand
    if check:
        tol = settings.feas_tol
        if np.any(x < -tol * np.maximum(1.0, inst.Q)) or np.any(
            x > inst.Q + tol * np.maximum(1.0, inst.Q)
        ):
            raise SolverError("allocation violates capacity bounds")
        if abs(x.sum() - d) > tol * max(1.0, d):
            raise SolverError(
                f"supply/demand imbalance: sum x = {x.sum():.12g}, d = {d:.12g}"
            )
        resid = inst.polytope.M @ y - inst.polytope.b
        if np.any(resid > tol * (1.0 + np.abs(inst.polytope.b))):
            raise SolverError(
                f"network constraint violated by {float(resid.max()):.3e}"
            )
    return ClearingOutcome(
        x=x,
        y=y,
        v=v,
        total_cost=total_cost(v, y),
        active=active_partition(inst, x, settings),
        objective=float(objective),
        diagnostics=diagnostics,
    )


# --- JSON round trip -------------------------------------------------------

def instance_to_dict(inst: MarketInstance) -> dict:
    return {
        "zones": list(inst.zones),
        "demand": [float(v) for v in inst.demand],
        "players": [
            {"id": p.id, "zone": p.zone, "m": p.m, "a": p.a, "Q": p.Q}
            for p in inst.players
        ],
        "polytope": {
            "M": inst.polytope.M.tolist(),
            "b": inst.polytope.b.tolist(),
        },
    }


def instance_from_dict(data: dict) -> MarketInstance:
    players = tuple(
        PlayerOrder(
            id=str(p["id"]), zone=int(p["zone"]), m=float(p["m"]),
            a=float(p["a"]), Q=float(p["Q"]),
        )
        for p in data["players"]
    )
    return MarketInstance(
        zones=tuple(data["zones"]),
        players=players,
        demand=np.array(data["demand"], dtype=float),
        polytope=Polytope(np.array(data["polytope"]["M"]), np.array(data["polytope"]["b"])),
    )


def save_instance(inst: MarketInstance, path) -> None:
    with open(path, "w") as fh:
        json.dump(instance_to_dict(inst), fh, indent=2)


def load_instance(path) -> MarketInstance:
    with open(path) as fh:
        return instance_from_dict(json.load(fh))


def load_fixture(name: str = "synth3z6p") -> MarketInstance:
    """Load a bundled instance (the 3-zone/6-player benchmark by default)."""
    text = resources.files("zonalclear.fixtures").joinpath(f"{name}.json").read_text()
    return instance_from_dict(json.loads(text))
