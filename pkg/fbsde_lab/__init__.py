"""Numerical laboratory for coupled forward-backward SDEs with scalar forward state."""

from .conditions import (ConditionReport, LinearCoefficients, SamplePlan, check_key_condition,
                         check_sufficient_1, check_sufficient_2, check_sufficient_3, kbar0,
                         lambda3, lambda4, lipschitz_schedule)
from .core import (CoefficientSet, DerivativePoint, DerivativeSet, Dimensions, GridFunction,
                   PathBundle, ProblemSpec, i0_norm, lipschitz_estimate, theta_norm,
                   validate_problem)
from .errors import FBSDEError
from .global_solver import (GlobalSolution, forward_assemble, initial_value_map, solve,
                            wellposedness_certificate)
from .oracles import analytic_eval, brute_force_reference, get_problem, list_problems
from .small_time import DiscretizationParams, SegmentSolution, backward_sweep, estimate_delta0, solve_one_step

__version__ = "0.1.0"
