"""Instantaneous boundary control of a two-phase melting problem.

The package is organized around the per-time-step pipeline:

``mesh``      structured 1D/2D meshes with tagged boundaries,
``fem``       sparse P1 operators (state operator, control operator, masses),
``semilag``   characteristic feet and upwinded field interpolation,
``state``     the complementarity state solver and its regularized oracle,
``control``   the penalized/regularized instantaneous control problem,
``driver``    benchmark definitions, time loop, CSV output and config files.
"""

from .mesh import (
    BoundaryTag,
    StructuredMesh,
    build_interval_mesh,
    build_rectangle_mesh,
    locate_point,
)
from .fem import StateOperators, assemble_operators, boundary_mass, h1_norm_sq
from .semilag import AdvectedPair, VelocityField, advect, characteristic_feet
from .state import (
    StateSolution,
    check_maximum_principle,
    solve_state,
    solve_state_enumerate,
    solve_state_regularized,
)
from .control import (
    ControlProblemData,
    KktState,
    PathSchedule,
    evaluate_J,
    evaluate_J_gamma,
    evaluate_J_terms,
    kkt_residual,
    reduced_gradient,
    solve_penalized_step,
)
from .driver import (
    SimulationConfig,
    SimulationResult,
    TimeStepRecord,
    example1_fields,
    example2_fields,
    load_config,
    run_simulation,
    write_records,
)
from .errors import ConfigError, SolverError

__version__ = "0.1.0"
