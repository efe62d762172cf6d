"""Stage two and end-to-end runs.

Covers the two-stage homogenized solve, the Monte Carlo reference built from
per-sample piecewise-constant problems, higher perturbation modes, the
fine-mesh direct oracle, error metrics and the convergence studies.

Sample loops fan out over processes when ``workers > 1``. Every sample draws
from its own derived random stream and results are reduced in sample order,
so outputs do not depend on the worker count.
"""

from __future__ import annotations

import csv
import functools
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem
from .homogenize import (CellProblem, EquivalentTensor, EmpiricalStats,
                         PerturbationDecomposition, cell_equivalent_tensor, empirical_stats, kl_decompose,
                         periodization_matrix)
from .linalg import FactorizedPreconditioner, SolverError
from .mesh import TriMesh, build_structured_mesh, check_grid_alignment
from .microstructure import (TEST_CASES, CoefficientField, MicrostructureSpec,
                             SampleRealization, cell_block)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration; ``key`` names the offending field."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


def _subdivisions(h: float, name: str) -> int:
    if not h > 0:
        raise ConfigError(f"{name} must be positive, got {h}", name)
    n = 1.0 / h
    k = int(round(n))
    if k < 1 or abs(n - k) > 1e-9 * n:
        raise ConfigError(f"{name}={h!r} is not 1/n for an integer n", name)
    return k


def _increasing(values, name, cast=float):
    vals = tuple(cast(v) for v in values)
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise ConfigError(f"{name} must be strictly increasing, got {vals}", name)
    return vals


@dataclass(frozen=True)
class RunConfig:
    """Full description of one experiment; mesh sizes are 1/n with integer n."""

    test_case: str = "A_I"
    epsilon: float = 0.125
    M: int = 1
    L: int = 100
    N: int = 1
    h: float | None = None  # cell mesh; 1/60 for A_I, 1/120 otherwise
    h0: float = 0.01
    h1: float = 1 / 104
    r: int = 1
    f: float = 10.0
    distribution: str = "truncated_normal"
    truncation: float = 1.5
    master_seed: int = 0
    sigma: float = 1.0
    diagonal_only: bool = True  # False: literal law with off-diagonal amp * Z
    custom_value: float = 3.0
    fixed_geometry: bool = False
    cg_tol: float = 1e-10
    M_list: tuple = (1, 2, 4)
    L_list: tuple = (4, 16, 64, 256)
    scale_list: tuple = (0.125, 0.25, 0.5, 1.0)
    replicates: int = 20
    periodization_replicates: int = 3
    n_fine: int = 256
    workers: int = 1

    def __post_init__(self):
        if self.test_case not in TEST_CASES:
            raise ConfigError(f"test_case must be one of {TEST_CASES}, got {self.test_case!r}", "test_case")
        if not 0 < self.epsilon <= 1:
            raise ConfigError(f"epsilon must lie in (0, 1], got {self.epsilon}", "epsilon")
        for name in ("M", "L", "N", "replicates", "periodization_replicates", "n_fine", "workers"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}", name)
            object.__setattr__(self, name, int(v))
        if self.h is None:
            object.__setattr__(self, "h", 1 / 60 if self.test_case == "A_I" else 1 / 120)
        _subdivisions(self.h, "h")
        _subdivisions(self.h0, "h0")
        n1 = _subdivisions(self.h1, "h1")
        nb = 1.0 / (self.M * self.epsilon)
        if abs(nb - round(nb)) > 1e-9 * nb:
            raise ConfigError(f"M*epsilon = {self.M * self.epsilon!r} does not divide 1", "epsilon")
        per_block = n1 * self.M * self.epsilon
        if abs(per_block - round(per_block)) > 1e-9 * max(1.0, per_block):
            raise ConfigError(f"h1={self.h1!r} is not commensurate with blocks of size "
                              f"{self.M * self.epsilon!r}", "h1")
        if self.r != 1:
            raise ConfigError("only linear elements (r=1) are implemented", "r")
        if self.distribution not in ("uniform", "truncated_normal"):
            raise ConfigError(f"distribution must be uniform or truncated_normal, "
                              f"got {self.distribution!r}", "distribution")
        if not self.truncation > 0:
            raise ConfigError("truncation must be positive", "truncation")
        if not self.cg_tol > 0:
            raise ConfigError("cg_tol must be positive", "cg_tol")
        object.__setattr__(self, "M_list", _increasing(self.M_list, "M_list", int))
        object.__setattr__(self, "L_list", _increasing(self.L_list, "L_list", int))
        scales = tuple(sorted(float(s) for s in self.scale_list))
        if any(not 0 <= s <= 1 for s in scales) or len(set(scales)) != len(scales):
            raise ConfigError("scale_list entries must be distinct values in [0, 1]", "scale_list")
        object.__setattr__(self, "scale_list", scales)
        if any(m < 1 for m in self.M_list) or any(n < 1 for n in self.L_list):
            raise ConfigError("M_list and L_list entries must be positive", "M_list")

    @property
    def n_cell(self) -> int:
        return _subdivisions(self.h, "h")

    @property
    def n0(self) -> int:
        return _subdivisions(self.h0, "h0")

    @property
    def n1(self) -> int:
        return _subdivisions(self.h1, "h1")

    @property
    def blocks_per_side(self) -> int:
        return int(round(1.0 / (self.M * self.epsilon)))

    @property
    def block_size(self) -> float:
        return 1.0 / self.blocks_per_side

    @property
    def cells_per_side(self) -> int:
        return self.blocks_per_side * self.M

    def microstructure(self) -> MicrostructureSpec:
        return MicrostructureSpec(self.test_case, self.distribution, self.truncation,
                                  diagonal_only=bool(self.diagonal_only),
                                  custom_value=self.custom_value)

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


# ---------------------------------------------------------------- sampling

@functools.lru_cache(maxsize=16)
def cell_mesh(size: int, n: int) -> TriMesh:
    return build_structured_mesh((0.0, 0.0, float(size), float(size)), n)


@functools.lru_cache(maxsize=16)
def _shared_geometry(spec: MicrostructureSpec, seed: int, fixed: bool):
    return spec.shared_geometry(seed, force=fixed)


@functools.lru_cache(maxsize=16)
def _cell_preconditioner(config: RunConfig, M: int):
    """Factorized Z = 0 operator when every cell shares one geometry.

    Per-sample cell operators are then small perturbations of it and CG
    converges in a few iterations; otherwise fall back to Jacobi.
    """
    spec = config.microstructure()
    if spec.test_case == "custom" or (spec.random_geometry and not config.fixed_geometry):
        return "jacobi"
    geom = _shared_geometry(spec, config.master_seed, config.fixed_geometry)
    cells = cell_block((0, 0), M)
    real = SampleRealization(-1, config.master_seed, {k: 0.0 for k in cells},
                             {k: geom for k in cells})
    problem = CellProblem.build(CoefficientField(spec, real, config.epsilon), cell_mesh(M, config.n_cell))
    return FactorizedPreconditioner(problem.system.stiffness, shift=problem.weights)


def realize(config: RunConfig, sample_index: int, cells) -> SampleRealization:
    spec = config.microstructure()
    shared = _shared_geometry(spec, config.master_seed, config.fixed_geometry)
    return SampleRealization.generate(spec, config.master_seed, sample_index, cells, shared)


def block_tensor(config: RunConfig, realization: SampleRealization, block, M=None) -> EquivalentTensor:
    """Equivalent tensor of block ``block`` (cells block*M .. block*M+M-1)."""
    M = config.M if M is None else M
    k1, k2 = block
    coeff = CoefficientField(config.microstructure(), realization, config.epsilon,
                             offset=(k1 * M, k2 * M))
    try:
        return cell_equivalent_tensor(coeff, cell_mesh(M, config.n_cell), block=(k1, k2),
                                      sample_index=realization.sample_index, tol=config.cg_tol,
                                      preconditioner=_cell_preconditioner(config, M))
    except SolverError as exc:
        raise SolverError(f"sample {realization.sample_index}, block {block}: {exc}",
                          exc.report) from exc


def sample_block_tensor(config: RunConfig, sample_index: int, M=None) -> EquivalentTensor:
    """Tensor of the first block Q_M for one sample (what the two-stage method averages)."""
    M = config.M if M is None else M
    real = realize(config, sample_index, cell_block((0, 0), M))
    return block_tensor(config, real, (0, 0), M)


def sample_all_blocks(config: RunConfig, sample_index: int) -> dict:
    """Tensors of every block of the domain for one sample."""
    real = realize(config, sample_index, cell_block((0, 0), config.cells_per_side))
    nb = config.blocks_per_side
    return {(i, j): block_tensor(config, real, (i, j)) for j in range(nb) for i in range(nb)}


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=chunk))


def sample_tensors(config: RunConfig, samples=None, M=None) -> list:
    samples = range(config.L) if samples is None else samples
    return _map(functools.partial(sample_block_tensor, config, M=M), samples, config.workers)


# ---------------------------------------------------------------- stage two

def _block_coefficients(mesh: TriMesh, blocks: dict, block_size=None) -> np.ndarray:
    """Per-triangle copy of a block-constant tensor field."""
    keys = list(blocks)
    nb1 = max(k[0] for k in keys) + 1
    nb2 = max(k[1] for k in keys) + 1
    if nb1 != nb2 or len(keys) != nb1 * nb2:
        raise ConfigError(f"blocks must cover a square grid, got {len(keys)} keys")
    bs = 1.0 / nb1 if block_size is None else float(block_size)
    x0, y0, x1, y1 = mesh.domain
    try:
        check_grid_alignment(mesh, [x0 + i * bs for i in range(nb1 + 1)])
    except ValueError as exc:
        raise ConfigError(f"mesh elements straddle block boundaries: {exc}") from None
    table = np.zeros((nb1, nb2, 2, 2))
    for (i, j), t in blocks.items():
        table[i, j] = t.m if isinstance(t, EquivalentTensor) else np.asarray(t, dtype=np.float64)
    c = mesh.centroids()
    i = np.clip(np.floor((c[:, 0] - x0) / bs).astype(np.int64), 0, nb1 - 1)
    j = np.clip(np.floor((c[:, 1] - y0) / bs).astype(np.int64), 0, nb2 - 1)
    return table[i, j]


@functools.lru_cache(maxsize=16)
def _unit_load(mesh: TriMesh, f: float) -> np.ndarray:
    load = fem.assemble_load(mesh, f)
    load.setflags(write=False)
    return load


def solve_equivalent_sample(block_tensors: dict, mesh: TriMesh, f=10.0, block_size=None,
                            tol: float = 1e-10, role: str = "u_hat") -> fem.SolutionField:
    """Dirichlet solve with the block-piecewise-constant coefficient."""
    acoef = _block_coefficients(mesh, block_tensors, block_size)
    field_, _, _ = fem.solve_dirichlet(mesh, acoef, _unit_load(mesh, float(f)), tol, role)
    return field_


def solve_constant(matrix, mesh: TriMesh, f=10.0, tol: float = 1e-10, role: str = "u0"):
    acoef = np.broadcast_to(np.asarray(matrix, dtype=np.float64), (mesh.n_triangles, 2, 2))
    field_, _, _ = fem.solve_dirichlet(mesh, acoef, _unit_load(mesh, float(f)), tol, role)
    return field_


def algorithm1_two_stage(config: RunConfig, tensors=None):
    """Two-stage method: sample mean of block tensors, then one constant solve.

    Returns (u0 on the h0 mesh, empirical stats, perturbation decomposition).
    """
    if tensors is None:
        tensors = sample_tensors(config)
    if len(tensors) < 2:
        raise ConfigError("the two-stage method needs L >= 2 samples")
    stats = empirical_stats(tensors)
    decomp = kl_decompose({t.sample_index: t for t in tensors}, stats,
                          block_area=(config.M * config.epsilon) ** 2)
    u0 = solve_constant(stats.mean, cell_mesh(1, config.n0), config.f, config.cg_tol, "u0")
    return u0, stats, decomp


def reference_sample(config: RunConfig, sample_index: int):
    """One sample of the reference: (nodal values on the h1 mesh, block tensors)."""
    blocks = sample_all_blocks(config, sample_index)
    u = solve_equivalent_sample(blocks, cell_mesh(1, config.n1), config.f, config.block_size,
                                config.cg_tol, role=f"u_hat(sample={sample_index})")
    return u.nodal_values, blocks


def algorithm2_reference(config: RunConfig, samples=None):
    """Monte Carlo reference: average of per-sample equivalent solves.

    Returns (mean field, list of per-sample fields).
    """
    samples = list(range(config.L) if samples is None else samples)
    mesh = cell_mesh(1, config.n1)
    runs = _map(functools.partial(reference_sample, config), samples, config.workers)
    per_sample = [fem.SolutionField(mesh, vals, f"u_hat(sample={s})")
                  for s, (vals, _) in zip(samples, runs)]
    acc = np.zeros(mesh.n_nodes)
    for u in per_sample:
        acc += u.nodal_values
    return fem.SolutionField(mesh, acc / len(per_sample), "u_hat_mean"), per_sample


# ---------------------------------------------------------------- higher modes

class ModeSolver:
    """Dirichlet operator of the mean tensor, assembled once and reused by every mode."""

    def __init__(self, mean_matrix, mesh: TriMesh, tol: float = 1e-10):
        self.mesh = mesh
        self.mean_matrix = np.asarray(mean_matrix, dtype=np.float64)
        self.tol = tol
        acoef = np.broadcast_to(self.mean_matrix, (mesh.n_triangles, 2, 2))
        k = fem.stiffness_from_element_coefficients(mesh, acoef)
        self.system = fem.apply_dirichlet_zero(k, np.zeros(mesh.n_nodes), mesh)

    def solve(self, load, role: str) -> fem.SolutionField:
        return fem.solve_system(self.system, self.mesh, self.tol, role, load=load)[0]

    def mode0(self, f=10.0) -> fem.SolutionField:
        return self.solve(_unit_load(self.mesh, float(f)), "mode0")


def mmc_mode_n(n: int, prev_mode: fem.SolutionField, decomposition: PerturbationDecomposition,
               mesh: TriMesh, solver: ModeSolver | None = None, block_size=None) -> fem.SolutionField:
    """u_n from -div(E grad u_n) = div(A1 grad u_{n-1}) with zero boundary values.

    ``decomposition.a1_blocks`` must be keyed by block index (one sample).
    """
    if n < 1:
        raise ValueError("mode index must be >= 1")
    if prev_mode.mesh is not mesh:
        raise ValueError("previous mode lives on a different mesh")
    if solver is None:
        solver = ModeSolver(decomposition.mean_matrix, mesh)
    elif solver.mesh is not mesh:
        raise ValueError("mode solver was built on a different mesh")
    a1 = _block_coefficients(mesh, decomposition.a1_blocks, block_size)
    g = fem.field_gradients(mesh, prev_mode.nodal_values)
    return solver.solve(fem.assemble_flux_load(mesh, a1, g), f"mode{n}")


# ---------------------------------------------------------------- oracles and metrics

def direct_fine_solve(config: RunConfig, sample: SampleRealization, n_fine=None) -> fem.SolutionField:
    """Solve the oscillating problem directly with A(x / eps) sampled at quadrature points."""
    n_fine = config.n_fine if n_fine is None else int(n_fine)
    eps = config.epsilon
    if n_fine < 4 / eps - 1e-9:
        raise ConfigError(f"n_fine={n_fine} does not resolve eps={eps}: need at least "
                          f"{math.ceil(4 / eps)}, {math.ceil(16 / eps)} recommended")
    coeff = CoefficientField(config.microstructure(), sample, eps)
    mesh = cell_mesh(1, n_fine)
    acoef = fem.element_coefficients(mesh, lambda pts: coeff.tensor(pts / eps))
    field_, _, _ = fem.solve_dirichlet(mesh, acoef, _unit_load(mesh, float(config.f)),
                                       config.cg_tol, f"u_eps(sample={sample.sample_index})")
    return field_


def direct_sample(config: RunConfig, sample_index: int, n_fine=None) -> fem.SolutionField:
    real = realize(config, sample_index, cell_block((0, 0), config.cells_per_side))
    return direct_fine_solve(config, real, n_fine)


def relative_error(u: fem.SolutionField, ref: fem.SolutionField) -> float:
    """||u - ref||_L2 / ||ref||_L2, integrated on the finer of the two meshes."""
    nr = fem.l2_norm(ref)
    if nr == 0.0:
        raise ValueError("reference field has zero L2 norm")
    return fem.l2_error_cross_mesh(u, ref) / nr


# ---------------------------------------------------------------- studies

def fit_loglog(x, y):
    """Least-squares line through (log x, log y); (nan, nan, True) if any y <= 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.any(~np.isfinite(y)) or np.any(y <= 0) or np.any(x <= 0):
        return math.nan, math.nan, True
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(intercept), False


@dataclass(frozen=True, eq=False)
class StudyResult:
    name: str
    x_label: str
    y_label: str
    abscissa: np.ndarray
    observable: np.ndarray
    slope: float
    intercept: float
    degenerate: bool = False
    columns: dict = field(default_factory=dict)  # extra per-point series

    def __post_init__(self):
        x = np.asarray(self.abscissa, dtype=np.float64)
        if np.any(np.diff(x) <= 0):
            raise ValueError("abscissa must be strictly increasing")
        if not self.degenerate and not (math.isfinite(self.slope) and math.isfinite(self.intercept)):
            raise ValueError("non-degenerate study needs a finite fit")
        object.__setattr__(self, "abscissa", x)
        object.__setattr__(self, "observable", np.asarray(self.observable, dtype=np.float64))

    def rows(self):
        names = [self.x_label, self.y_label] + list(self.columns)
        data = [self.abscissa, self.observable] + [np.asarray(v) for v in self.columns.values()]
        return names, [list(r) for r in zip(*data)]

    def write_csv(self, path):
        names, rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in rows:
                w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2 ** 53 else repr(v)


def _fit_result(name, x_label, y_label, x, y, columns, fit_mask=None):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = np.ones(len(x), bool) if fit_mask is None else fit_mask
    slope, intercept, degenerate = fit_loglog(x[mask], y[mask])
    return StudyResult(name, x_label, y_label, x, y, slope, intercept, degenerate, columns)


def variance_decay_study(config: RunConfig, M_list=None) -> StudyResult:
    """Var of the first-block a11 against the block size M; slope = -zeta."""
    M_list = config.M_list if M_list is None else _increasing(M_list, "M_list", int)
    if len(M_list) < 2:
        raise ConfigError("variance decay needs at least two M values")
    if config.L < 2:
        raise ConfigError("variance decay needs L >= 2")
    var, delta, mean = [], [], []
    for M in M_list:
        stats = empirical_stats(sample_tensors(config, M=M))
        var.append(stats.variance[0, 0])
        delta.append(math.sqrt(stats.variance.max()))
        mean.append(stats.mean[0, 0])
    return _fit_result("variance_decay", "M", "var_a11", M_list, var,
                       {"delta": delta, "mean_a11": mean})


def sample_decompositions(config: RunConfig, samples=None):
    """Per-sample block decompositions sharing one mean and delta.

    Returns (stats over all blocks of all samples, {sample: decomposition}).
    """
    samples = list(range(config.L) if samples is None else samples)
    blocks = _map(functools.partial(sample_all_blocks, config), samples, config.workers)
    stats = empirical_stats([t for b in blocks for t in b.values()])
    area = config.block_size ** 2
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        decomps = {s: kl_decompose(b, stats, area) for s, b in zip(samples, blocks)}
    return stats, decomps


def delta_scaling_study(config: RunConfig, scale_list=None, decompositions=None) -> StudyResult:
    """E ||u_hat(s) - u0||_H1^2 for block tensors mean + s * delta * A1."""
    scales = config.scale_list if scale_list is None else tuple(sorted(float(s) for s in scale_list))
    if any(not 0 <= s <= 1 for s in scales):
        raise ConfigError("scales must lie in [0, 1]")
    if decompositions is None:
        _, decompositions = sample_decompositions(config)
    first = next(iter(decompositions.values()))
    if first.degenerate:
        raise ConfigError("degenerate decomposition (delta = 0): nothing to scale")
    mesh = cell_mesh(1, config.n1)
    u0 = ModeSolver(first.mean_matrix, mesh, config.cg_tol).mode0(config.f)
    err2 = []
    for s in scales:
        acc = 0.0
        for d in decompositions.values():
            u = solve_equivalent_sample(d.scaled_blocks(s), mesh, config.f, config.block_size,
                                        config.cg_tol)
            diff = fem.SolutionField(mesh, u.nodal_values - u0.nodal_values)
            acc += fem.h1_norm(diff) ** 2
        err2.append(acc / len(decompositions))
    scales = np.asarray(scales)
    return _fit_result("delta_scaling", "scale", "mean_h1_error_sq", scales, err2,
                       {"delta": np.full(len(scales), first.delta)}, fit_mask=scales > 0)


def supercell_realization(config: RunConfig, samples) -> SampleRealization:
    """Tile the first cells of N^2 samples into one N x N realization (sample s -> cell
    (s mod N, s div N) of the list), pairing periodization with sample averaging."""
    samples = list(samples)
    n = math.isqrt(len(samples))
    if n * n != len(samples):
        raise ConfigError(f"pairing needs a square number of samples, got {len(samples)}")
    z, geom = {}, {}
    for pos, s in enumerate(samples):
        real = realize(config, s, [(0, 0)])
        k = (pos % n, pos // n)
        z[k] = real.z[(0, 0)]
        geom[k] = real.geometry[(0, 0)]
    return SampleRealization(-1, config.master_seed, z, geom)


def periodization_tensor(config: RunConfig, samples) -> EquivalentTensor:
    real = supercell_realization(config, samples)
    n = math.isqrt(len(real.z))
    coeff = CoefficientField(config.microstructure(), real, config.epsilon)
    return periodization_matrix(coeff, n, cell_mesh(n, config.n_cell), tol=config.cg_tol)


def sample_count_study(config: RunConfig, L_list=None, replicates=None,
                       periodization: bool = False) -> StudyResult:
    """Var over replicates of the nested-subset means mu_L; slope ~ -1.

    With ``periodization`` every square L = N^2 is also compared with A*_N of the
    paired supercell, for the first ``config.periodization_replicates`` replicates.
    """
    L_list = config.L_list if L_list is None else _increasing(L_list, "L_list", int)
    R = config.replicates if replicates is None else int(replicates)
    if R < 2:
        raise ConfigError("sample count study needs at least two replicates")
    if periodization and config.M != 1:
        raise ConfigError("periodization pairing is defined for M = 1")
    lmax = L_list[-1]
    tensors = sample_tensors(config, samples=range(R * lmax))
    a = np.array([t.m for t in tensors]).reshape(R, lmax, 2, 2)
    csum = np.cumsum(a, axis=1)
    mu = np.stack([csum[:, n - 1] / n for n in L_list], axis=1)  # (R, len(L), 2, 2)
    mu11 = mu[:, :, 0, 0]
    var = mu11.var(axis=0, ddof=1)
    cols = {"mu11_mean": mu11.mean(axis=0), "mu11_rep0": mu11[0],
            "sem_mu11": np.sqrt(var / R)}
    if periodization:
        pr = min(R, config.periodization_replicates)
        a_star, err, err_sem = [], [], []
        for j, n in enumerate(L_list):
            if math.isqrt(n) ** 2 != n:
                a_star.append(math.nan)
                err.append(math.nan)
                err_sem.append(math.nan)
                continue
            vals, errs = [], []
            for r in range(pr):
                t = periodization_tensor(config, range(r * lmax, r * lmax + n))
                vals.append(t.m[0, 0])
                errs.append(abs(mu11[r, j] - t.m[0, 0]) / t.m[0, 0])
            a_star.append(float(np.mean(vals)))
            err.append(float(np.mean(errs)))
            err_sem.append(float(np.std(errs, ddof=1) / math.sqrt(pr)) if pr > 1 else math.nan)
        cols.update({"N": [math.isqrt(n) for n in L_list], "a11_N": a_star,
                     "error": err, "error_sem": err_sem})
    return _fit_result("sample_count", "L", "var_mu11", L_list, var, cols)


def epsilon_study_recipe(eps_list=(0.25, 0.125, 0.0625), M_list=(2, 3, 4)):
    """(eps, M) pairs of the eps -> 0 recipe with M growing as eps shrinks.

    Pairs whose blocks do not tile the unit square are dropped with a warning.
    """
    pairs = []
    for eps in eps_list:
        for M in M_list:
            nb = 1.0 / (M * eps)
            if abs(nb - round(nb)) < 1e-9:
                pairs.append((eps, M))
            else:
                warnings.warn(f"eps={eps}, M={M}: blocks do not tile the domain; skipped",
                              RuntimeWarning, stacklevel=2)
    return pairs


__all__ = [
    "ConfigError", "RunConfig", "StudyResult", "ModeSolver", "EmpiricalStats",
    "algorithm1_two_stage", "algorithm2_reference", "solve_equivalent_sample", "solve_constant",
    "mmc_mode_n", "direct_fine_solve", "direct_sample", "relative_error",
    "variance_decay_study", "delta_scaling_study", "sample_count_study",
    "sample_block_tensor", "sample_all_blocks", "sample_tensors", "sample_decompositions",
    "periodization_tensor", "supercell_realization", "realize", "fit_loglog",
    "epsilon_study_recipe", "reference_sample", "cell_mesh",
]
