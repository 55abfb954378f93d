"""Incremental dissipativity analysis of discrete-time nonlinear systems.

Grid the differential form of a system over a box of operating points,
then search for one quadratic storage matrix that satisfies the
incremental (Q,S,R), l2-gain or passivity LMI at every grid point.
"""

from .embedding import (BoxRegion, GriddedEmbedding, SchedulingMap, embed_differential_form,
                        embed_region, generate_grid)
from .lmi import (Infeasible, LmiProblem, SolverFailure, StorageCertificate, SupplyQSR,
                  Unbounded, assemble_incremental_qsr, assemble_li2_schur, assemble_passivity,
                  check_incremental_qsr, check_passivity, compute_li2_gain, solve_feasibility)
from .sysmodel import (ContinuousTimeSystem, ContractViolation, DifferentialMatrices,
                       DiscreteTimeSystem, EvaluationError, LtiController, evaluate,
                       feedback_interconnect, jacobians, rk4_discretize)

__version__ = "0.1.0"
