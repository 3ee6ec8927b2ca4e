"""Deep BSDE filtering for continuous-discrete state estimation.

Modules:

* :mod:`.model` problem definitions and the BSDE driver
* :mod:`.sim` seeded path and observation simulation
* :mod:`.net` dense networks, reverse mode and Adam
* :mod:`.deepbsde` rollouts, training and the filter density
* :mod:`.reference` Kalman and bootstrap particle filters
* :mod:`.grid` quadrature grids
* :mod:`.evaluation` error quantities and convergence tables
* :mod:`.cli` command-line entry point
"""

from .errors import (
    ConfigError,
    DecodeError,
    DegenerateError,
    DivergenceError,
    DomainError,
    EllipticityError,
    FilterError,
    MissingArtifactError,
    ShapeError,
)
from .model import FilterProblem, make_bistable_problem, make_ou_problem, make_problem
from .sim import TimeGrid, TrajectoryBatch, simulate_observations
from .grid import QuadratureGrid

__version__ = "0.1.0"
