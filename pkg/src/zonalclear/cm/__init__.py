"""Cost-minimisation clearing algorithms."""

from .common import ActiveEstimate, cm_objective_given_y, estimate_active_set
from .ieqlp import run_ieqlp
from .ieqp import build_mcqp, run_ieqp_wr
from .bbtree import run_bbtree
from .ibcqp import build_stack_curve, run_ibcqp

__all__ = [
    "ActiveEstimate",
    "estimate_active_set",
    "cm_objective_given_y",
    "run_ieqlp",
    "build_mcqp",
    "run_ieqp_wr",
    "run_bbtree",
    "build_stack_curve",
    "run_ibcqp",
]
