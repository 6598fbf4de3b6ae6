"""Numerics for the variational structure of N-body problems with
homogeneous potentials: action minimization between configurations,
parabolic collision/ejection arcs, Lax-Oleinik iteration on radial and
cone charts, and the critical Hamilton-Jacobi equation on the unit
sphere of the mass metric.
"""

__version__ = "0.1.0"

from .action import ActionOptions, minimize_fixed_time, minimize_free_time  # noqa: F401
from .central import catalog, find_central  # noqa: F401
from .ejection import is_minimizing, make_ejection  # noqa: F401
from .errors import (  # noqa: F401
    ChartRangeError,
    CollisionError,
    ConvergenceError,
    NBodyKamError,
)
from .scenarios import Scenario, run_scenario  # noqa: F401
from .space import MassSystem  # noqa: F401
from .spherehj import solve_hjh  # noqa: F401
from .weakkam import busemann, iterate_weak_kam  # noqa: F401
