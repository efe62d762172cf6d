"""Periodic cell problems and equivalent (effective) tensors."""

from __future__ import annotations

import csv
import functools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .linalg import LinearSolveReport, SolverError, cg_solve_meanzero
from .mesh import TriMesh, periodic_pairing


class ConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class CellSolution:
    mesh: TriMesh
    direction: int
    values: np.ndarray       # reduced (periodic) dofs, weighted mean zero
    nodal_values: np.ndarray  # expanded to every mesh node
    report: LinearSolveReport

    def gradients(self) -> np.ndarray:
        return fem.field_gradients(self.mesh, self.nodal_values)


@dataclass(frozen=True)
class EquivalentTensor:
    m: np.ndarray
    role: str = "block_equivalent"
    block: tuple | None = None
    sample_index: int | None = None
    cg_iterations: int = 0

    def eigenvalues(self):
        return sym2_eigenvalues(self.m)


def sym2_eigenvalues(m):
    """Closed-form eigenvalues (ascending) of a symmetric 2x2 matrix."""
    a, b, d = m[0, 0], 0.5 * (m[0, 1] + m[1, 0]), m[1, 1]
    mid = 0.5 * (a + d)
    rad = math.hypot(0.5 * (a - d), b)
    return mid - rad, mid + rad


@dataclass(frozen=True, eq=False)
class CellProblem:
    """Assembled periodic operator of one cell, reusable for both directions."""

    mesh: TriMesh
    acoef: np.ndarray  # per-triangle quadrature-averaged coefficient
    system: fem.AssembledSystem
    weights: np.ndarray
    area: np.ndarray
    grads: np.ndarray

    @classmethod
    def build(cls, coeff, mesh: TriMesh, quadrature_order: int = 2) -> "CellProblem":
        pmap = periodic_pairing(mesh)
        acoef = fem.element_coefficients(mesh, coeff, quadrature_order)
        k = fem.stiffness_from_element_coefficients(mesh, acoef, pmap)
        system = fem.AssembledSystem(k, np.zeros(pmap.n_reduced), pmap.reduced_index,
                                     "periodic", mesh.n_nodes, quadrature_order)
        area, grads = fem.p1_geometry(mesh)
        return cls(mesh, acoef, system, _lumped_weights(mesh, pmap), area, grads)

    def solve(self, direction: int, tol: float = 1e-10, max_iter=None, x0=None,
              preconditioner="jacobi") -> CellSolution:
        e = np.zeros((self.mesh.n_triangles, 2))
        e[:, direction] = 1.0
        b = fem.assemble_flux_load(self.mesh, self.acoef, e)
        br = np.bincount(self.system.dof_map, weights=b, minlength=self.system.stiffness.n_rows)
        x, rep = cg_solve_meanzero(self.system.stiffness, br, self.weights, tol=tol,
                                   max_iter=max_iter, x0=x0, preconditioner=preconditioner)
        if not rep.converged:
            raise SolverError(f"cell problem (direction e{direction + 1}) did not converge: "
                              f"{rep.iterations} iterations, residual {rep.final_residual_norm:.3e}",
                              rep)
        return CellSolution(self.mesh, direction, x, self.system.expand(x), rep)

    def equivalent(self, cells, role="block_equivalent", block=None, sample_index=None):
        return equivalent_matrix(cells, self, role=role, block=block, sample_index=sample_index)


@functools.lru_cache(maxsize=64)
def _lumped_weights(mesh, pmap):
    return pmap.lumped_weights(mesh)


def solve_cell_problem(coeff, mesh: TriMesh, direction: int, tol: float = 1e-10,
                       quadrature_order: int = 2) -> CellSolution:
    """Periodic corrector N_{e_i} with zero weighted mean."""
    return CellProblem.build(coeff, mesh, quadrature_order).solve(direction, tol)


def equivalent_matrix(cells, coeff_or_problem, role="block_equivalent", block=None,
                      sample_index=None, quadrature_order: int = 2) -> EquivalentTensor:
    """a_ij = (1/|Q|) int (e_i + grad N_i)^T A (e_j + grad N_j), with the
    coefficient averaged by the same quadrature as the assembly."""
    c1, c2 = cells
    if c1.mesh is not c2.mesh:
        raise ValueError("cell solutions must share one mesh")
    mesh = c1.mesh
    if isinstance(coeff_or_problem, CellProblem):
        acoef, area = coeff_or_problem.acoef, coeff_or_problem.area
    else:
        acoef = fem.element_coefficients(mesh, coeff_or_problem, quadrature_order)
        area, _ = fem.p1_geometry(mesh)
    flux_grad = np.stack([c1.gradients(), c2.gradients()], axis=1)  # (T, i, d)
    flux_grad[:, 0, 0] += 1.0
    flux_grad[:, 1, 1] += 1.0
    af = flux_grad @ acoef  # (T, i, e)
    m = np.tensordot(area[:, None, None] * af, flux_grad, axes=([0, 2], [0, 2])) / mesh.area
    scale = max(float(np.abs(m).max()), 1e-300)
    if abs(m[0, 1] - m[1, 0]) > 1e-8 * scale:
        raise ConsistencyError(f"equivalent matrix is not symmetric: {m}")
    m = 0.5 * (m + m.T)
    iters = c1.report.iterations + c2.report.iterations
    return EquivalentTensor(m, role, block, sample_index, iters)


def cell_equivalent_tensor(coeff, mesh: TriMesh, role="block_equivalent", block=None,
                           sample_index=None, tol: float = 1e-10,
                           preconditioner="jacobi") -> EquivalentTensor:
    problem = CellProblem.build(coeff, mesh)
    cells = (problem.solve(0, tol, preconditioner=preconditioner),
             problem.solve(1, tol, preconditioner=preconditioner))
    return equivalent_matrix(cells, problem, role=role, block=block, sample_index=sample_index)


def periodization_matrix(coeff, n_cells: int, mesh: TriMesh, sample_index=None,
                         tol: float = 1e-10) -> EquivalentTensor:
    """A*_N: one periodic cell problem on the whole N x N supercell."""
    x0, y0, x1, y1 = mesh.domain
    if abs(x1 - x0 - n_cells) > 1e-12 or abs(y1 - y0 - n_cells) > 1e-12:
        raise ValueError(f"mesh domain {mesh.domain} is not an {n_cells}-cell square")
    return cell_equivalent_tensor(coeff, mesh, role=f"periodization({n_cells})",
                                  sample_index=sample_index, tol=tol)


@dataclass(frozen=True)
class EmpiricalStats:
    mean: np.ndarray
    variance: np.ndarray
    sample_count: int

    @property
    def std(self):
        return np.sqrt(self.variance)


def empirical_stats(tensors) -> EmpiricalStats:
    """Entrywise mean and unbiased variance (Welford's single pass)."""
    n = 0
    mean = np.zeros((2, 2))
    m2 = np.zeros((2, 2))
    for t in tensors:
        x = t.m if isinstance(t, EquivalentTensor) else np.asarray(t, dtype=np.float64)
        n += 1
        d = x - mean
        mean = mean + d / n
        m2 = m2 + d * (x - mean)
    if n < 2:
        raise ValueError("empirical variance needs at least two tensors")
    return EmpiricalStats(mean, np.maximum(m2 / (n - 1), 0.0), n)


@dataclass(frozen=True)
class PerturbationDecomposition:
    mean_matrix: np.ndarray
    delta: float
    a1_blocks: dict
    z1: dict
    degenerate: bool = False
    block_area: float = 1.0
    lambda1: np.ndarray = field(default=None)
    phi1: float = 1.0

    def reconstruct(self, k) -> np.ndarray:
        return self.mean_matrix + self.delta * self.a1_blocks[k]

    def scaled_blocks(self, scale: float) -> dict:
        """Block tensors mean + scale * delta * A1."""
        return {k: self.mean_matrix + scale * self.delta * a for k, a in self.a1_blocks.items()}


def kl_decompose(block_tensors: dict, stats: EmpiricalStats, block_area: float = 1.0,
                 tol_var: float = 0.0) -> PerturbationDecomposition:
    """Split one sample's block tensors into mean + delta * A1.

    Each block tensor is spatially constant, so its covariance operator has a
    single nonzero eigenpair: lambda1 = |block| Var, phi1 = |block|^(-1/2).
    delta is the largest entrywise standard deviation.
    """
    var = np.asarray(stats.variance, dtype=np.float64)
    if not np.all(np.isfinite(var)):
        raise ValueError("variances must be finite")
    delta = float(np.sqrt(var.max()))
    mats = {k: (t.m if isinstance(t, EquivalentTensor) else np.asarray(t, float))
            for k, t in block_tensors.items()}
    if delta <= tol_var:
        warnings.warn("deterministic equivalent tensors: delta = 0, A1 set to zero",
                      RuntimeWarning, stacklevel=2)
        zero = {k: np.zeros((2, 2)) for k in mats}
        return PerturbationDecomposition(stats.mean.copy(), 0.0, zero, {k: 0.0 for k in mats},
                                         True, block_area, block_area * var, block_area ** -0.5)
    a1 = {k: (m - stats.mean) / delta for k, m in mats.items()}
    s11 = math.sqrt(var[0, 0]) if var[0, 0] > 0 else math.inf
    z1 = {k: float((m[0, 0] - stats.mean[0, 0]) / s11) for k, m in mats.items()}
    return PerturbationDecomposition(stats.mean.copy(), delta, a1, z1, False, block_area,
                                     block_area * var, block_area ** -0.5)


def covariance_two_phase(a1: float, a2: float, region_s: str, region_t: str) -> float:
    """Covariance of a_ij(s), a_ij(t) for the two-phase law a_ij = a_phase (1 + w),
    w ~ U[0, 1]: Var(w) = 1/12 times the product of the two phase constants."""
    coef = {"D1": a1, "D2": a2}
    try:
        return coef[region_s] * coef[region_t] / 12.0
    except KeyError:
        raise ValueError("regions must be 'D1' or 'D2'") from None


def write_tensor_csv(path, tensors):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "block_k1", "block_k2", "a11", "a12", "a21", "a22",
                    "cg_iterations"])
        for t in tensors:
            k1, k2 = t.block if t.block is not None else ("", "")
            s = "" if t.sample_index is None else t.sample_index
            w.writerow([s, k1, k2] + [repr(float(v)) for v in t.m.ravel()] + [t.cg_iterations])
