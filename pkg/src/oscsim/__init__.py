"""Finite element simulation of bulk-heterojunction organic solar cells.

Macroscale model with a lumped donor-acceptor interface, a resolved-slab
microscale reference model, steady and transient drivers, and device
observables (J-V curves, Voc, Jsc).
"""
__version__ = "0.1.0"

from .macro import MacroModel, newton_solve
from .mesh import Mesh, build_line_mesh, build_rod_mesh, load_mesh
from .micro import MicroModel
from .params import DeviceParams, table1, table2

__all__ = ["DeviceParams", "MacroModel", "Mesh", "MicroModel", "build_line_mesh",
           "build_rod_mesh", "load_mesh", "newton_solve", "table1", "table2", "__version__"]
