"""Zonal day-ahead electricity auction clearing under flow-based constraints.

Provides social-welfare-maximising clearing, four cost-minimisation
algorithms (a quasi-LP heuristic, an ellipsoidal trust-region method, global
branch-and-bound and analytic stack curves with re-boxed convex QPs),
cost-scale calibration against price series, and a synthetic benchmark
harness.
"""

from .core import (
    ClearingOutcome,
    InfeasibleError,
    MarketInstance,
    PlayerOrder,
    Polytope,
    Settings,
    SolverError,
    assemble_polytope,
    check_paradoxical_orders,
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
from .swm import clear_swm
from .cm import (
    estimate_active_set,
    run_bbtree,
    run_ibcqp,
    run_ieqlp,
    run_ieqp_wr,
)
from .calibration import CostScales, FuelCostSpec, fit_scales, orders_from_fuel
from .harness import generate_instance, profit_sweep, run_benchmark

__version__ = "1.0.0"

__all__ = [
    "ClearingOutcome",
    "InfeasibleError",
    "MarketInstance",
    "PlayerOrder",
    "Polytope",
    "Settings",
    "SolverError",
    "assemble_polytope",
    "check_paradoxical_orders",
    "instance_from_dict",
    "instance_to_dict",
    "load_fixture",
    "load_instance",
    "make_outcome",
    "save_instance",
    "total_cost",
    "validate_instance",
    "zonal_price_from_allocation",
    "clear_swm",
    "estimate_active_set",
    "run_bbtree",
    "run_ibcqp",
    "run_ieqlp",
    "run_ieqp_wr",
    "CostScales",
    "FuelCostSpec",
    "fit_scales",
    "orders_from_fuel",
    "generate_instance",
    "profit_sweep",
    "run_benchmark",
]
