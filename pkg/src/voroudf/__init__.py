"""Mesh reconstruction from unsigned distance fields via Voronoi seed optimization."""

__version__ = "0.1.0"

from .config import ReconConfig  # noqa: E402
from .mesh import TriangleMesh, read_mesh, write_mesh  # noqa: E402
from .udf import (BoxShell, Disk, GridField, MeshField, PlanePatch, Sphere, Union,  # noqa: E402
                  project_to_surface)

__all__ = ["ReconConfig", "TriangleMesh", "read_mesh", "write_mesh", "BoxShell", "Disk", "GridField",
           "MeshField", "PlanePatch", "Sphere", "Union", "project_to_surface", "__version__"]
