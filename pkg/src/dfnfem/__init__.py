"""Finite-element Doyle-Fuller-Newman lithium-ion cell model with discrete adjoint gradients."""

__version__ = "0.1.0"

from .errors import DFNError  # noqa: E402
from .mesh import MacroMesh, MicroMesh, build_macro_mesh, build_micro_mesh  # noqa: E402
from .params import ParameterSet, benchmark_parameters, commercial_parameters  # noqa: E402
from .solver import CellModel, DriveProtocol, NewtonOptions, SolutionTape, initialize_state, run_forward  # noqa: E402
from .adjoint import backward_sweep, voltage_gradient  # noqa: E402
from .ident import IdentificationProblem, identify  # noqa: E402

__all__ = [
    "__version__", "DFNError", "MacroMesh", "MicroMesh", "build_macro_mesh", "build_micro_mesh",
    "ParameterSet", "benchmark_parameters", "commercial_parameters", "CellModel", "DriveProtocol",
    "NewtonOptions", "SolutionTape", "initialize_state", "run_forward", "backward_sweep",
    "voltage_gradient", "IdentificationProblem", "identify",
]
