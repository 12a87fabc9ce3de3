"""P1 finite-element stiffness assembly for the Poisson problem.

Dirichlet boundary conditions are imposed by eliminating boundary nodes
from the system, which keeps the reduced matrix symmetric positive
definite.  Only the matrix matters downstream (solver right-hand sides
are synthetic), so no load vector is assembled.
"""

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.linalg

from .meshgen import TriMesh
from .sparse import CsrMatrix


class EmptySystemError(ValueError):
    """Raised when Dirichlet elimination leaves no degrees of freedom."""


class SizeLimitError(ValueError):
    """Raised when a dense check is requested for a matrix that is too large."""


@dataclass
class LinearSystem:
    """Stiffness matrix on interior DoFs plus the mesh-node to DoF map.

    ``dof_map[node]`` is the DoF index of an interior mesh node and -1 for
    boundary nodes.  A is symmetric with strictly positive diagonal.
    """

    A: CsrMatrix
    dof_map: np.ndarray

    def free_nodes(self) -> np.ndarray:
        """Mesh-node indices carrying DoFs, in DoF order."""
        return np.nonzero(self.dof_map >= 0)[0]


def element_stiffness(pts: np.ndarray) -> np.ndarray:
    """3x3 P1 stiffness of one triangle with vertex coordinates (3, 2)."""
    x, y = pts[:, 0], pts[:, 1]
    b = np.array([y[1] - y[2], y[2] - y[0], y[0] - y[1]])
    c = np.array([x[2] - x[1], x[0] - x[2], x[1] - x[0]])
    area2 = x[0] * b[0] + x[1] * b[1] + x[2] * b[2]
    return (np.outer(b, b) + np.outer(c, c)) / (2.0 * area2)


def assemble_full_stiffness(mesh: TriMesh) -> CsrMatrix:
    """Stiffness on all mesh nodes, before boundary elimination.

    Row sums vanish because constants lie in the kernel of the Laplacian.
    """
    p = mesh.coords[mesh.triangles]
    x, y = p[:, :, 0], p[:, :, 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area2 = (x[:, 0] * b[:, 0] + x[:, 1] * b[:, 1] + x[:, 2] * b[:, 2])[:, None, None]
    ke = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (2 * area2)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    return CsrMatrix.from_coo(rows, cols, ke.ravel(), (mesh.n_nodes, mesh.n_nodes))


def assemble_poisson(mesh: TriMesh) -> LinearSystem:
    """Interior-DoF stiffness matrix with Dirichlet rows/columns removed."""
    full = assemble_full_stiffness(mesh)
    dof_map = np.full(mesh.n_nodes, -1, dtype=np.int64)
    interior = mesh.interior_nodes()
    if interior.shape[0] == 0:
        raise EmptySystemError("mesh has no interior nodes")
    dof_map[interior] = np.arange(interior.shape[0])
    reduced = full.to_scipy()[interior][:, interior].tocsr()
    a = CsrMatrix.from_scipy(reduced)
    if np.any(a.values[_diagonal_positions(a)] <= 0):
        raise ValueError("non-positive diagonal after elimination")
    return LinearSystem(A=a, dof_map=dof_map)


def _diagonal_positions(a: CsrMatrix) -> np.ndarray:
    idx = np.arange(a.n_rows)
    return a.find_entries(idx, idx)


def spd_check(a: CsrMatrix, size_limit: int = 2500) -> bool:
    """Dense symmetry plus positive-spectrum check for small matrices."""
    if a.n_rows != a.n_cols:
        raise ValueError("matrix is not square")
    if a.n_rows > size_limit:
        raise SizeLimitError(f"dense check limited to n <= {size_limit}")
    dense = a.toarray()
    if not np.array_equal(dense, dense.T):
        sym_err = np.abs(dense - dense.T).max()
        if sym_err > 1e-14 * max(1.0, np.abs(dense).max()):
            return False
    return bool(np.all(scipy.linalg.eigvalsh(dense) > 0))


def write_matrix_market(path, a: CsrMatrix) -> None:
    """Coordinate-format text export for debugging."""
    scipy.io.mmwrite(str(path), a.to_scipy())
