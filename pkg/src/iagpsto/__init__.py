"""GP-prior trajectory optimization with restarted accelerated descent and stochastic escapes."""
from ._kernels import BACKEND, HAS_NUMBA
from .trajgp import (ConditioningSpec, GPModel, LtvSdeModel, NumericalError, ParameterError, build_prior,
                     condition, gp_cost, interpolate_states)
from .world import CollisionParams, RobotModel, SdfGrid, World
from .objective import Objective, classify
from .agd_core import AgdConfig, agd_run, lreagd
from .asto import AstoConfig, asto_run
from .planner import ALGORITHMS, PlannerConfig, agpsto_plan, iomp_plan, run_algorithm
from .scenario import Scenario, ScenarioError, load, load_suite

__version__ = "0.1.0"
