"""Robust tube control with tightened exponential barrier functions."""
from .barrier import (EcbfGains, LieStack, ObstacleBarrier, PairBarrier, TightenedConstraint,
                      lie_stack_obstacle, lie_stack_pair, phi_standard, phi_tight_obstacle,
                      phi_tight_pair)
from .config import load_scenario, preset, preset_names, save_scenario
from .errors import (ConfigurationError, InfeasibleTighteningError, NoSolutionError,
                     NumericError, SetupError, SynthesisError, TubeCbfError, TubeInfeasibleError)
from .model import AgentState, DisturbanceSignal, DriftSpec, drift_eval, rk4_step
from .planner import OcpConfig, Plan, SolverOptions, build_ocp, solve_ocp
from .simulator import ScenarioConfig, TrajectoryLog, metrics, run, synthesize_tubes
from .topology import FormationSpec, Graph, stability_error
from .tube import Ellipsoid, TubeParams, sprocedure_tube, support, synthesize_tube

__version__ = "0.1.0"
