"""Policy optimization under intrinsic state-adversarial perturbations.

Exact tabular solvers, policy parameterizations, inner adversary solvers,
SPO / ARPO / BARPO trainers, and landscape analysis of a two-state example.
"""

__version__ = "0.1.0"

from .errors import BudgetError, DimensionError, IsaError, ParseError, SolveError, ValidationError
from .mdp_core import (DiscreteAdversary, TabularIsaMdp, brute_force_strongest, solve_value,
                       strongest_adversary_exact, toy_mdp, visitation)
from .policy import Direct2, EmbeddedSoftmax, ObsPerturbation, TabularSoftmax
from .trainers import TrainerConfig, TrainTrace, train

__all__ = [
    "BudgetError", "DimensionError", "IsaError", "ParseError", "SolveError", "ValidationError",
    "DiscreteAdversary", "TabularIsaMdp", "brute_force_strongest", "solve_value",
    "strongest_adversary_exact", "toy_mdp", "visitation",
    "Direct2", "EmbeddedSoftmax", "ObsPerturbation", "TabularSoftmax",
    "TrainerConfig", "TrainTrace", "train",
]
