"""P1 finite elements on triangles: assembly, boundary conditions, norms."""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass

import numpy as np

from .linalg import SolverError, SparseMatrix, cg_solve
from .mesh import PeriodicMap, TriMesh, evaluate_points, write_vtk

# barycentric points and weights (weights sum to one; multiply by |T|)
_QUAD = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    # interior points: a phase interface on mesh lines never splits a triangle's samples
    2: (np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]), np.full(3, 1 / 3)),
}
# 7-point degree-5 rule, used for cross-mesh error integrals
_r15 = np.sqrt(15.0)
_a1, _b1 = (6 - _r15) / 21, (9 + 2 * _r15) / 21
_a2, _b2 = (6 + _r15) / 21, (9 - 2 * _r15) / 21
_w1, _w2 = (155 - _r15) / 1200, (155 + _r15) / 1200
_QUAD[5] = (
    np.array([[1 / 3, 1 / 3, 1 / 3],
              [_a1, _a1, _b1], [_a1, _b1, _a1], [_b1, _a1, _a1],
              [_a2, _a2, _b2], [_a2, _b2, _a2], [_b2, _a2, _a2]]),
    np.array([9 / 40, _w1, _w1, _w1, _w2, _w2, _w2]),
)


def quadrature(order: int):
    try:
        return _QUAD[order]
    except KeyError:
        raise ValueError(f"unsupported quadrature order {order}; choose from {sorted(_QUAD)}") from None


@dataclass(frozen=True, eq=False)
class SolutionField:
    mesh: TriMesh
    nodal_values: np.ndarray
    role: str = "unspecified"

    def __post_init__(self):
        vals = np.asarray(self.nodal_values, dtype=np.float64)
        if vals.shape != (self.mesh.n_nodes,):
            raise ValueError("nodal_values length must equal the mesh node count")
        object.__setattr__(self, "nodal_values", vals)

    def at(self, pts) -> np.ndarray:
        return evaluate_points(self.mesh, self.nodal_values, pts)

    def write_vtk(self, path, name="u"):
        write_vtk(path, self.mesh, {name: self.nodal_values}, title=f"role={self.role}")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "value"])
            for (x, y), v in zip(self.mesh.nodes, self.nodal_values):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


@dataclass(frozen=True, eq=False)
class AssembledSystem:
    stiffness: SparseMatrix
    load: np.ndarray
    dof_map: np.ndarray  # dirichlet: free node ids; periodic: node -> reduced dof
    kind: str
    n_nodes: int
    quadrature_order: int = 2

    def expand(self, x) -> np.ndarray:
        """Scatter a dof vector back to all mesh nodes."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "dirichlet":
            full = np.zeros(self.n_nodes)
            full[self.dof_map] = x
            return full
        if self.kind == "periodic":
            return x[self.dof_map]
        return x.copy()


@functools.lru_cache(maxsize=64)
def p1_geometry(mesh: TriMesh):
    """Per-triangle areas (|T|) and basis gradients, shape (T, 3, 2)."""
    p = mesh.nodes[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    if np.any(det <= 0):
        raise ValueError("mesh has non-positively oriented triangles")
    inv = 1.0 / det
    # rows of the inverse Jacobian give gradients of lambda_1, lambda_2
    g1 = np.column_stack([d2[:, 1], -d2[:, 0]]) * inv[:, None]
    g2 = np.column_stack([-d1[:, 1], d1[:, 0]]) * inv[:, None]
    grads = np.stack([-g1 - g2, g1, g2], axis=1)
    area = 0.5 * det
    area.setflags(write=False)
    grads.setflags(write=False)
    return area, grads


@functools.lru_cache(maxsize=64)
def _pattern(mesh: TriMesh, pmap: PeriodicMap | None = None):
    """CSR pattern of the element scatter, optionally folded through a periodic map.

    Returns (slot of each element entry, row_offsets, col_indices, size).
    """
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_nodes
    if pmap is not None:
        red = pmap.reduced_index
        rows, cols, n = red[rows], red[cols], pmap.n_reduced
    key = rows * n + cols
    uniq, slots = np.unique(key, return_inverse=True)
    r_u, c_u = uniq // n, uniq % n
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(r_u, minlength=n), out=offsets[1:])
    return slots.ravel(), offsets, c_u, n


def element_stiffness(mesh: TriMesh, acoef) -> np.ndarray:
    """Element matrices |T| G A G^T, shape (T, 3, 3)."""
    area, grads = p1_geometry(mesh)
    return area[:, None, None] * (grads @ acoef @ grads.transpose(0, 2, 1))


@functools.lru_cache(maxsize=64)
def quadrature_points(mesh: TriMesh, order: int):
    bary, w = quadrature(order)
    p = mesh.nodes[mesh.triangles]  # (T, 3, 2)
    pts = np.einsum("qk,tkd->tqd", bary, p)
    pts.setflags(write=False)
    return pts, bary, w


def _coefficient_values(coeff, pts):
    """Evaluate a tensor coefficient at points (..., 2) -> (..., 2, 2)."""
    shape = pts.shape[:-1]
    if callable(coeff):
        vals = np.asarray(coeff(pts.reshape(-1, 2)), dtype=np.float64)
        if vals.shape == (np.prod(shape, dtype=int),):
            vals = vals[:, None, None] * np.eye(2)
        vals = vals.reshape(shape + (2, 2))
    else:
        c = np.asarray(coeff, dtype=np.float64)
        if c.ndim == 0:
            c = c * np.eye(2)
        vals = np.broadcast_to(c, shape + (2, 2))
    return vals


def element_coefficients(mesh: TriMesh, coeff, quadrature_order: int = 2,
                         check_symmetry: bool = True) -> np.ndarray:
    """Quadrature average of the coefficient over each triangle, shape (T, 2, 2).

    P1 gradients are constant per element, so every bilinear form used here
    only needs this weighted mean.
    """
    pts, _, w = quadrature_points(mesh, quadrature_order)
    vals = _coefficient_values(coeff, pts)
    if check_symmetry:
        asym = np.abs(vals[..., 0, 1] - vals[..., 1, 0])
        scale = max(float(np.abs(vals).max()), 1.0)
        if asym.size and asym.max() > 1e-10 * scale:
            raise ValueError("coefficient is not symmetric at a quadrature point")
    return np.tensordot(w, vals, axes=(0, 1))


def stiffness_from_element_coefficients(mesh: TriMesh, acoef,
                                        pmap: PeriodicMap | None = None) -> SparseMatrix:
    """Assemble from per-triangle coefficients; with ``pmap`` the periodic
    identification is applied during the scatter."""
    slots, offsets, cols, n = _pattern(mesh, pmap)
    vals = np.bincount(slots, weights=element_stiffness(mesh, acoef).ravel(), minlength=cols.size)
    return SparseMatrix(n, n, offsets, cols, vals)


def assemble_stiffness(mesh: TriMesh, coeff, quadrature_order: int = 2) -> SparseMatrix:
    """K_ij = sum_T |T| sum_q w_q (A(x_q) grad phi_j) . grad phi_i."""
    return stiffness_from_element_coefficients(
        mesh, element_coefficients(mesh, coeff, quadrature_order))


def assemble_load(mesh: TriMesh, f, quadrature_order: int = 2) -> np.ndarray:
    """F_i = sum_T |T| sum_q w_q f(x_q) phi_i(x_q)."""
    area, _ = p1_geometry(mesh)
    pts, bary, w = quadrature_points(mesh, quadrature_order)
    if callable(f):
        fv = np.asarray(f(pts.reshape(-1, 2)), dtype=np.float64).reshape(pts.shape[:2])
    else:
        fv = np.full(pts.shape[:2], float(f))
    fe = area[:, None] * ((fv * w) @ bary)
    return np.bincount(mesh.triangles.ravel(), weights=fe.ravel(), minlength=mesh.n_nodes)


def assemble_flux_load(mesh: TriMesh, acoef, grads_field) -> np.ndarray:
    """b_j = -sum_T |T| (A_T g_T) . grad phi_j for per-triangle vectors g_T.

    ``acoef`` are per-triangle coefficient means (see element_coefficients).
    """
    area, grads = p1_geometry(mesh)
    flux = (acoef @ grads_field[:, :, None])[:, :, 0]
    be = -area[:, None] * (grads @ flux[:, :, None])[:, :, 0]
    return np.bincount(mesh.triangles.ravel(), weights=be.ravel(), minlength=mesh.n_nodes)


def assemble_cell_rhs(mesh: TriMesh, coeff, direction: int, quadrature_order: int = 2) -> np.ndarray:
    """Right-hand side -(A e_i, grad v) of the cell problem for direction i (0 or 1)."""
    if direction not in (0, 1):
        raise ValueError("direction must be 0 (e1) or 1 (e2)")
    acoef = element_coefficients(mesh, coeff, quadrature_order)
    e = np.zeros((mesh.n_triangles, 2))
    e[:, direction] = 1.0
    return assemble_flux_load(mesh, acoef, e)


def apply_dirichlet_zero(k: SparseMatrix, f, mesh: TriMesh) -> AssembledSystem:
    """Eliminate all boundary nodes (homogeneous Dirichlet data)."""
    free = mesh.interior_nodes()
    return AssembledSystem(k.submatrix(free), np.asarray(f, dtype=np.float64)[free], free,
                           "dirichlet", mesh.n_nodes)


def apply_periodic(k: SparseMatrix, f, pmap: PeriodicMap) -> AssembledSystem:
    """Fold slave rows/columns onto their masters."""
    red = pmap.reduced_index
    kr = k.remap(red, pmap.n_reduced)
    fr = np.bincount(red, weights=np.asarray(f, dtype=np.float64), minlength=pmap.n_reduced)
    return AssembledSystem(kr, fr, red, "periodic", len(red))


def field_gradients(mesh: TriMesh, values) -> np.ndarray:
    """Constant per-triangle gradients of a P1 field, shape (T, 2)."""
    _, grads = p1_geometry(mesh)
    return (np.asarray(values)[mesh.triangles][:, None, :] @ grads)[:, 0, :]


def _vals(field_or_values, mesh=None):
    if isinstance(field_or_values, SolutionField):
        return field_or_values.mesh, field_or_values.nodal_values
    return mesh, np.asarray(field_or_values, dtype=np.float64)


def h1_seminorm(field: SolutionField) -> float:
    mesh, v = _vals(field)
    area, _ = p1_geometry(mesh)
    g = field_gradients(mesh, v)
    return float(np.sqrt(np.sum(area * np.sum(g * g, axis=1))))


def l2_norm(field: SolutionField) -> float:
    """Exact L2 norm of the P1 interpolant (element mass matrix)."""
    mesh, v = _vals(field)
    area, _ = p1_geometry(mesh)
    u = v[mesh.triangles]
    # int_T u^2 = |T|/12 (sum u_i^2 + (sum u_i)^2)
    return float(np.sqrt(np.sum(area / 12.0 * (np.sum(u * u, axis=1) + np.sum(u, axis=1) ** 2))))


def h1_norm(field: SolutionField) -> float:
    return float(np.hypot(l2_norm(field), h1_seminorm(field)))


def energy(k: SparseMatrix, x) -> float:
    return 0.5 * float(np.dot(x, k @ x))


def l2_error_cross_mesh(field_a: SolutionField, field_b: SolutionField,
                        quadrature_order: int = 5) -> float:
    """||a - b||_L2 with quadrature on the finer mesh; the coarser field is
    interpolated at the fine quadrature points."""
    if not np.allclose(field_a.mesh.domain, field_b.mesh.domain, rtol=0, atol=1e-12):
        raise ValueError("fields live on different domains")
    fine, coarse = field_a, field_b
    if field_b.mesh.n_triangles > field_a.mesh.n_triangles:
        fine, coarse = field_b, field_a
    mesh = fine.mesh
    area, _ = p1_geometry(mesh)
    pts, bary, w = quadrature_points(mesh, quadrature_order)
    vf = np.einsum("qk,tk->tq", bary, fine.nodal_values[mesh.triangles])
    if coarse.mesh is mesh:
        vc = np.einsum("qk,tk->tq", bary, coarse.nodal_values[mesh.triangles])
    else:
        vc = coarse.at(pts.reshape(-1, 2)).reshape(vf.shape)
    d = vf - vc
    return float(np.sqrt(np.sum(area[:, None] * w[None, :] * d * d)))


def solve_dirichlet(mesh: TriMesh, acoef, load, tol: float = 1e-10, role: str = "u",
                    stiffness: SparseMatrix | None = None):
    """Solve (A grad u, grad v) = F with u = 0 on the boundary.

    Returns (field, report, system). Pass a pre-assembled full ``stiffness`` to
    skip assembly.
    """
    k = stiffness if stiffness is not None else stiffness_from_element_coefficients(mesh, acoef)
    system = apply_dirichlet_zero(k, load, mesh)
    return solve_system(system, mesh, tol, role)


def solve_system(system: AssembledSystem, mesh: TriMesh, tol: float = 1e-10, role: str = "u",
                 load=None):
    """CG on an assembled Dirichlet system; ``load`` (full length) replaces the stored one."""
    b = system.load if load is None else np.asarray(load, dtype=np.float64)[system.dof_map]
    x, rep = cg_solve(system.stiffness, b, tol=tol)
    if not rep.converged:
        raise SolverError(f"{role}: CG did not converge in {rep.iterations} iterations "
                          f"(residual {rep.final_residual_norm:.3e})", rep)
    return SolutionField(mesh, system.expand(x), role), rep, system


def error_norms_exact(field: SolutionField, u_exact, grad_exact, quadrature_order: int = 5):
    """(L2 error, H1-seminorm error) against an exact solution given as callables
    on (n, 2) points; grad_exact returns (n, 2)."""
    mesh = field.mesh
    area, _ = p1_geometry(mesh)
    pts, bary, w = quadrature_points(mesh, quadrature_order)
    flat = pts.reshape(-1, 2)
    uh = bary @ field.nodal_values[mesh.triangles].T  # (q, T)
    d = uh.T - np.asarray(u_exact(flat)).reshape(pts.shape[:2])
    gh = field_gradients(mesh, field.nodal_values)
    dg = gh[:, None, :] - np.asarray(grad_exact(flat)).reshape(pts.shape)
    l2 = np.sqrt(np.sum(area[:, None] * w * d * d))
    h1 = np.sqrt(np.sum(area[:, None] * w * np.sum(dg * dg, axis=2)))
    return float(l2), float(h1)
