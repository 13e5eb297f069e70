"""Constrained landmark matching: kernel geodesics, constrained shooting and augmented Lagrangian."""

from .constraints import (ConstraintSet, FixedRows, SlidingConstraint, StitchedConstraint,
                          VolumeConstraint, project_momentum, sliding_between, solve_lambda,
                          stitched_between, volume_constraint)
from .errors import (BlowUpError, DegenerateGeometryError, InvalidInputError, SchemaError,
                     ShapeOCError, SingularConstraintError, UnsupportedDimensionError)
from .geodesics import (Trajectory, backward_sweep, flow_controlled, integrate_geodesic,
                        kinetic_energy, reduced_hamiltonian)
from .kernels import KernelSpec, Metric, assemble_kq, eval_kernel
from .optim import (SolverOptions, SolveReport, al_gradient, brute_force_oracle,
                    minimize_augmented_lagrangian, minimize_shooting, shooting_objective_grad)
from .shapes import LandmarkState, MatchProblem, polygon_volume

__version__ = "0.1.0"
