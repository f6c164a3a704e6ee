"""Structured P1 triangulation of the unit square and weighted FEM assembly.

The mesh is the fixed uniform grid with N nodes per side, every cell split
along the same diagonal.  Stiffness and mass matrices are assembled for an
arbitrary scalar coefficient given by nodal values; the coefficient is
evaluated at triangle centroids (one-point rule), which keeps the assembly
exactly linear in the coefficient.
"""

import json

import numpy as np
from scipy.sparse import coo_matrix


class InvalidMeshError(ValueError):
    """Raised when a mesh cannot be constructed from the given parameters."""


class NodalField:
    """Scalar coefficient given by one value per mesh node."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 1:
            raise ValueError("nodal field values must be a 1-d array")

    def __len__(self):
        return self.values.size


class Mesh:
    """Structured triangulation of the unit square with Dirichlet bookkeeping.

    Attributes
    ----------
    N : int
        Nodes per side.
    nodes : ndarray, shape (N*N, 2)
        Node coordinates, row-major in y (node index = iy*N + ix).
    triangles : ndarray, shape (2*(N-1)**2, 3)
        Counterclockwise node-index triples.
    interior_index : dict
        Maps a node index to its free-DOF index; boundary nodes absent.
    free_nodes : ndarray
        Node indices of the free DOFs in free-DOF order.
    h : float
        Mesh width (longest edge, the cell diagonal).
    """

    def __init__(self, N, nodes, triangles, interior_index, h):
        self.N = N
        self.nodes = nodes
        self.triangles = triangles
        self.interior_index = interior_index
        self.free_nodes = np.array(sorted(interior_index, key=interior_index.get),
                                   dtype=int)
        self.h = h

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_free(self):
        return self.free_nodes.size


def build_unit_square_mesh(N):
    """Build the structured triangulation with ``N`` nodes per side.

    Each of the (N-1)^2 grid squares is split into two right triangles along
    its lower-left to upper-right diagonal.  Returns a :class:`Mesh` with
    (N-2)^2 free DOFs and h = sqrt(2)/(N-1).
    """
    if int(N) != N or N < 3:
        raise InvalidMeshError("need at least 3 nodes per side, got %r" % (N,))
    N = int(N)
    step = 1.0 / (N - 1)
    iy, ix = np.mgrid[0:N, 0:N]
    nodes = np.column_stack([ix.ravel() * step, iy.ravel() * step])

    cells_y, cells_x = np.mgrid[0:N - 1, 0:N - 1]
    ll = (cells_y * N + cells_x).ravel()
    lr = ll + 1
    ul = ll + N
    ur = ul + 1
    lower = np.column_stack([ll, lr, ur])
    upper = np.column_stack([ll, ur, ul])
    triangles = np.empty((2 * ll.size, 3), dtype=int)
    triangles[0::2] = lower
    triangles[1::2] = upper

    interior_index = {}
    for node in range(N * N):
        x, y = nodes[node]
        if 0.0 < x < 1.0 and 0.0 < y < 1.0:
            interior_index[node] = len(interior_index)

    return Mesh(N, nodes, triangles, interior_index, h=np.sqrt(2.0) * step)


def _coeff_values(mesh, coeff):
    values = np.asarray(getattr(coeff, "values", coeff), dtype=float)
    if values.shape != (mesh.n_nodes,):
        raise ValueError("coefficient has %d values, mesh has %d nodes"
                         % (values.size, mesh.n_nodes))
    return values


def _triangle_geometry(mesh):
    coords = mesh.nodes[mesh.triangles]          # (T, 3, 2)
    e1 = coords[:, 1] - coords[:, 0]
    e2 = coords[:, 2] - coords[:, 0]
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    return coords, area


def _scatter(mesh, element, constrain):
    """Scatter (T, 3, 3) element matrices into a CSR matrix."""
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    full = coo_matrix((element.ravel(), (rows, cols)),
                      shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    if not constrain:
        return full
    free = mesh.free_nodes
    return full[free][:, free].tocsr()


def assemble_stiffness(mesh, coeff, constrain=True):
    """Assemble the weighted P1 stiffness matrix.

    Parameters
    ----------
    mesh : Mesh
    coeff : NodalField or array
        Nodal coefficient values; evaluated at triangle centroids.
    constrain : bool
        If True (default) return the matrix restricted to free DOFs,
        otherwise the full node-by-node matrix.
    """
    values = _coeff_values(mesh, coeff)
    coords, area = _triangle_geometry(mesh)
    centroid = values[mesh.triangles].mean(axis=1)

    # gradients of the barycentric coordinates: grad lambda_a = perp(opposite
    # edge) / (2 area), with the sign fixed by the CCW orientation
    opp = coords[:, [2, 0, 1]] - coords[:, [1, 2, 0]]   # edge opposite vertex a
    grads = np.stack([-opp[:, :, 1], opp[:, :, 0]], axis=2)
    grads /= (2.0 * area)[:, None, None]
    element = np.einsum("tad,tbd->tab", grads, grads)
    element *= (centroid * area)[:, None, None]
    return _scatter(mesh, element, constrain)


_MASS_REF = np.array([[2.0, 1.0, 1.0],
                      [1.0, 2.0, 1.0],
                      [1.0, 1.0, 2.0]]) / 12.0


def assemble_mass(mesh, coeff, constrain=True):
    """Assemble the weighted P1 mass matrix (coefficient at centroids)."""
    values = _coeff_values(mesh, coeff)
    _, area = _triangle_geometry(mesh)
    centroid = values[mesh.triangles].mean(axis=1)
    element = _MASS_REF[None, :, :] * (centroid * area)[:, None, None]
    return _scatter(mesh, element, constrain)


def mesh_to_json(mesh, path=None):
    """Serialize a mesh to the documented JSON layout (string or file)."""
    doc = {
        "N": int(mesh.N),
        "nodes": [[float(x), float(y)] for x, y in mesh.nodes],
        "triangles": [[int(a), int(b), int(c)] for a, b, c in mesh.triangles],
    }
    text = json.dumps(doc)
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text


def mesh_from_json(source):
    """Rebuild a mesh from JSON text, a parsed dict, or a file path."""
    if isinstance(source, dict):
        doc = source
    else:
        text = source
        if "\n" not in str(source) and str(source).endswith(".json"):
            with open(source) as f:
                text = f.read()
        doc = json.loads(text)
    mesh = build_unit_square_mesh(doc["N"])
    nodes = np.asarray(doc["nodes"], dtype=float)
    triangles = np.asarray(doc["triangles"], dtype=int)
    if nodes.shape != mesh.nodes.shape or triangles.shape != mesh.triangles.shape:
        raise InvalidMeshError("JSON mesh does not match the structured family")
    if not (np.allclose(nodes, mesh.nodes) and np.array_equal(triangles, mesh.triangles)):
        raise InvalidMeshError("JSON mesh does not match the structured family")
    return mesh


def export_matrix_coordinate(matrix, path):
    """Write a sparse matrix as 'row col value' triples, 0-based indices."""
    coo = coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as f:
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            f.write("%d %d %.17g\n" % (r, c, v))


def import_matrix_coordinate(path, shape):
    """Read a 'row col value' triple file back into a CSR matrix."""
    rows, cols, vals = [], [], []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            r, c, v = line.split()
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(v))
    return coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
