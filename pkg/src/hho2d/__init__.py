"""Hybrid high-order discretization of small-strain elasticity on 2D polytopal meshes.

Cell and face polynomial unknowns of degree k >= 1, element-local symmetric
gradient and displacement reconstructions, face-based stabilization, static
condensation of cell unknowns, and a Newton solver for nonlinear stress-strain
laws.  See README.md for usage.
"""

from hho2d.mesh import Mesh, Element, Face, load_mesh, save_mesh, generate_mesh, regularity_report

__all__ = [
    "Mesh",
    "Element",
    "Face",
    "load_mesh",
    "save_mesh",
    "generate_mesh",
    "regularity_report",
]

__version__ = "0.1.0"
