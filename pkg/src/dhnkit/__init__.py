"""dhnkit: district heating network modeling, simulation, and layout design."""

from .assembly import (ModelBuilder, ReducedModel, StateSpaceModel,
                       append_buildings, assemble, reduce_feeding,
                       thermal_coeffs, user_block)
from .calibration import CalibrationResult, apply_h, calibrate_h
from .errors import (CandidateLimitError, DesignError, DhnError,
                     FlowSolveError, SimulationError, TopologyError)
from .hydraulics import (BranchSpec, MassFlowSolution, branch_dp,
                         ideal_flow_split, segment_dp, solve_flow_split)
from .optimizer import (CandidateNode, DesignResult, DesignTree, PipeRun,
                        ProblemGraph, SiteSpec, TreeCost, branch_and_bound,
                        build_problem_graph, count_candidates,
                        generate_candidates, length_baseline,
                        lower_bound_costs, optimize, steady_state_cost)
from .simulation import (PidConfig, Scenario, SimResult, discretize_bilinear,
                         nrmse, simulate, simulate_closed_loop)
from .topology import (BuildingParams, FluidProps, NetworkTopology, NodeSets,
                       PipeParams, SplitNode, UserNode, Violation,
                       loss_coefficient, node_sets, state_dimension, validate)

__version__ = "0.1.0"
