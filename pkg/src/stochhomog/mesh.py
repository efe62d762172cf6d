"""Structured right-triangle meshes of axis-aligned rectangles."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

GEOM_TOL = 1e-12


class BoundaryTag(IntEnum):
    INTERIOR = 0
    LEFT = 1
    RIGHT = 2
    BOTTOM = 3
    TOP = 4
    CORNER = 5


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangulation with node/element tables.

    ``nx``/``ny`` are the grid-square counts along each axis; they are only
    meaningful for meshes from :func:`build_structured_mesh` (0 otherwise) and
    enable O(1) point location.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_tag: np.ndarray
    h: float
    domain: tuple
    nx: int = 0
    ny: int = 0

    def __post_init__(self):
        for arr in (self.nodes, self.triangles, self.boundary_tag):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def structured(self) -> bool:
        return self.nx > 0 and self.ny > 0

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.domain
        return (x1 - x0) * (y1 - y0)

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_tag != BoundaryTag.INTERIOR)

    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_tag == BoundaryTag.INTERIOR)

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)


def _grid_count(length, n):
    cells = length * n
    k = int(round(cells))
    if k < 1 or abs(cells - k) > 1e-9 * max(1.0, cells):
        raise ValueError(f"side length {length} times n={n} is not a positive integer")
    return k


def build_structured_mesh(domain, n: int) -> TriMesh:
    """Uniform grid with ``n`` squares per unit length, each cut along the
    lower-left to upper-right diagonal. Nodes are numbered row by row."""
    if not isinstance(n, (int, np.integer)) or n <= 0:
        raise ValueError(f"subdivisions must be a positive integer, got {n!r}")
    x0, y0, x1, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate rectangle {domain}")
    nx = _grid_count(x1 - x0, n)
    ny = _grid_count(y1 - y0, n)
    xs = x0 + (x1 - x0) * np.arange(nx + 1) / nx
    ys = y0 + (y1 - y0) * np.arange(ny + 1) / ny
    xs[-1], ys[-1] = x1, y1
    gx, gy = np.meshgrid(xs, ys)
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    v00 = (j * (nx + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    # square (i, j) owns triangles 2*(j*nx+i) and 2*(j*nx+i)+1
    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    tris[0::2] = lower
    tris[1::2] = upper

    ii, jj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    ii, jj = ii.ravel(), jj.ravel()
    tag = np.full(nodes.shape[0], BoundaryTag.INTERIOR, dtype=np.int8)
    tag[ii == 0] = BoundaryTag.LEFT
    tag[ii == nx] = BoundaryTag.RIGHT
    tag[jj == 0] = BoundaryTag.BOTTOM
    tag[jj == ny] = BoundaryTag.TOP
    tag[((ii == 0) | (ii == nx)) & ((jj == 0) | (jj == ny))] = BoundaryTag.CORNER
    return TriMesh(nodes, tris, tag, 1.0 / n, (x0, y0, x1, y1), nx, ny)


def check_grid_alignment(mesh: TriMesh, lines) -> None:
    """Raise if any coordinate in ``lines`` is not a mesh line of ``mesh``."""
    x0, y0, x1, y1 = mesh.domain
    for c in lines:
        for lo, hi, k in ((x0, x1, mesh.nx), (y0, y1, mesh.ny)):
            t = (c - lo) / (hi - lo) * k
            if abs(t - round(t)) > 1e-9:
                raise ValueError(f"coordinate {c} does not lie on a mesh line (n={round(1 / mesh.h)})")


@dataclass(frozen=True, eq=False)
class PeriodicMap:
    master_of: dict
    reduced_index: np.ndarray
    n_reduced: int

    def lumped_weights(self, mesh: TriMesh) -> np.ndarray:
        """Lumped P1 mass on the reduced (torus) node set."""
        w = np.zeros(mesh.n_nodes)
        a = np.abs(mesh.signed_areas()) / 3.0
        np.add.at(w, mesh.triangles.ravel(), np.repeat(a, 3))
        return np.bincount(self.reduced_index, weights=w, minlength=self.n_reduced)


@functools.lru_cache(maxsize=64)
def periodic_pairing(mesh: TriMesh) -> PeriodicMap:
    """Identify right/top nodes with their left/bottom partners (corners -> one node)."""
    if not mesh.structured:
        raise ValueError("periodic pairing needs a structured mesh")
    nx, ny = mesh.nx, mesh.ny
    x0, y0, x1, y1 = mesh.domain
    idx = np.arange(mesh.n_nodes)
    ii = idx % (nx + 1)
    jj = idx // (nx + 1)
    mi = ii % nx
    mj = jj % ny
    master = mj * (nx + 1) + mi
    shift = mesh.nodes - mesh.nodes[master]
    expect = np.column_stack([np.where(ii == nx, x1 - x0, 0.0), np.where(jj == ny, y1 - y0, 0.0)])
    if np.abs(shift - expect).max() > GEOM_TOL * max(1.0, x1 - x0, y1 - y0):
        raise ValueError("boundary nodes are misaligned; cannot pair periodically")
    reduced = mj * nx + mi
    reduced.setflags(write=False)
    slaves = np.flatnonzero(master != idx)
    return PeriodicMap({int(s): int(master[s]) for s in slaves}, reduced, nx * ny)


def locate_points(mesh: TriMesh, pts):
    """Vectorised point location; returns (triangle indices, barycentrics (n, 3))."""
    if not mesh.structured:
        raise ValueError("point location needs a structured mesh")
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    x0, y0, x1, y1 = mesh.domain
    tol = GEOM_TOL * max(1.0, x1 - x0, y1 - y0)
    out = ((pts[:, 0] < x0 - tol) | (pts[:, 0] > x1 + tol)
           | (pts[:, 1] < y0 - tol) | (pts[:, 1] > y1 + tol))
    if np.any(out):
        raise ValueError(f"point {pts[np.argmax(out)]} lies outside the mesh domain")
    u = (pts[:, 0] - x0) / (x1 - x0) * mesh.nx
    v = (pts[:, 1] - y0) / (y1 - y0) * mesh.ny
    i = np.clip(np.floor(u).astype(np.int64), 0, mesh.nx - 1)
    j = np.clip(np.floor(v).astype(np.int64), 0, mesh.ny - 1)
    s = np.clip(u - i, 0.0, 1.0)
    t = np.clip(v - j, 0.0, 1.0)
    lower = s >= t
    tri = 2 * (j * mesh.nx + i) + np.where(lower, 0, 1)
    # lower (v00, v10, v11): p = v00 + s e1 + t e2 -> (1-s, s-t, t)
    # upper (v00, v11, v01): -> (1-t, s, t-s)
    bary = np.where(lower[:, None],
                    np.column_stack([1.0 - s, s - t, t]),
                    np.column_stack([1.0 - t, s, t - s]))
    return tri, bary


def locate_point(mesh: TriMesh, p):
    tri, bary = locate_points(mesh, np.asarray(p, dtype=np.float64)[None, :])
    return int(tri[0]), bary[0]


def evaluate_points(mesh: TriMesh, nodal_values, pts) -> np.ndarray:
    nodal_values = np.asarray(nodal_values, dtype=np.float64)
    if nodal_values.shape != (mesh.n_nodes,):
        raise ValueError("nodal_values length must equal the node count")
    tri, bary = locate_points(mesh, pts)
    return np.einsum("ij,ij->i", nodal_values[mesh.triangles[tri]], bary)


def evaluate_field(mesh: TriMesh, nodal_values, p) -> float:
    """Piecewise-linear interpolation of nodal data at one point."""
    return float(evaluate_points(mesh, nodal_values, np.asarray(p, dtype=np.float64)[None, :])[0])


def write_vtk(path, mesh: TriMesh, point_data=None, title="stochhomog field"):
    """Legacy ASCII VTK unstructured grid (triangles, cell type 5)."""
    point_data = point_data or {}
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_nodes} double"]
    lines += [f"{float(x)!r} {float(y)!r} 0.0" for x, y in mesh.nodes]
    nt = mesh.n_triangles
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_nodes}")
        for name, vals in point_data.items():
            vals = np.asarray(vals, dtype=np.float64)
            if vals.shape != (mesh.n_nodes,):
                raise ValueError(f"point data {name!r} has wrong length")
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [repr(float(v)) for v in vals]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk(path):
    """Parse a file written by :func:`write_vtk`; returns (nodes, triangles, point_data)."""
    with open(path) as fh:
        tokens = fh.read().split("\n")
    it = iter(tokens[4:])
    nodes, tris, data = None, None, {}
    for line in it:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "POINTS":
            n = int(parts[1])
            nodes = np.array([[float(v) for v in next(it).split()[:2]] for _ in range(n)])
        elif parts[0] == "CELLS":
            n = int(parts[1])
            tris = np.array([[int(v) for v in next(it).split()[1:]] for _ in range(n)])
        elif parts[0] == "SCALARS":
            next(it)
            data[parts[1]] = np.array([float(next(it)) for _ in range(len(nodes))])
    return nodes, tris, data
