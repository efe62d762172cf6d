import math
import warnings

import numpy as np
import pytest

from oracles import poisson_unit_square_peak
from stochhomog import fem
from stochhomog.homogenize import PerturbationDecomposition
from stochhomog.pipeline import (ConfigError, ModeSolver, RunConfig, StudyResult, algorithm1_two_stage,
                                 algorithm2_reference, cell_mesh, delta_scaling_study, direct_fine_solve,
                                 direct_sample, epsilon_study_recipe, fit_loglog, mmc_mode_n, realize,
                                 relative_error, sample_all_blocks, sample_count_study,
                                 sample_decompositions, sample_tensors, solve_constant,
                                 solve_equivalent_sample, supercell_realization, variance_decay_study)

COARSE = dict(h=1 / 24)


def _checker(v1, v2, nb=2):
    return {(i, j): (v1 if (i + j) % 2 == 0 else v2) * np.eye(2) for j in range(nb) for i in range(nb)}


# ---------------------------------------------------------------- configuration

def test_default_config():
    c = RunConfig()
    assert c.epsilon == 0.125 and c.M == 1 and c.h == pytest.approx(1 / 60)
    assert (c.n_cell, c.n0, c.n1) == (60, 100, 104)
    assert c.blocks_per_side == 8 and c.block_size == 0.125
    assert RunConfig(test_case="B").h == pytest.approx(1 / 120)
    assert RunConfig(M=2).blocks_per_side == 4


@pytest.mark.parametrize("changes,key", [
    (dict(epsilon=1 / 7), "h1"),  # 1/7 tiles the square but not the h1 grid
    (dict(M=3), "epsilon"),
    (dict(h1=0.01), "h1"),
    (dict(h=0.3), "h"),
    (dict(r=2), "r"),
    (dict(test_case="D"), "test_case"),
    (dict(distribution="gamma"), "distribution"),
    (dict(L=0), "L"),
    (dict(scale_list=(0.5, 2.0)), "scale_list"),
    (dict(L_list=(4, 4, 16)), "L_list"),
    (dict(M_list=(2, 1)), "M_list"),
])
def test_config_rejections(changes, key):
    with pytest.raises(ConfigError) as info:
        RunConfig(**changes)
    assert info.value.key == key


def test_config_with_revalidates():
    c = RunConfig(**COARSE)
    assert c.with_(L=7).L == 7
    with pytest.raises(ConfigError):
        c.with_(epsilon=0.3)


# ---------------------------------------------------------------- stage two solves

def test_constant_solve_peak():
    u = solve_constant(3 * np.eye(2), cell_mesh(1, 100), 10.0)
    assert u.nodal_values.max() == pytest.approx(10 / 3 * poisson_unit_square_peak(), abs=2e-3)
    assert u.nodal_values.max() == pytest.approx(0.2456, abs=2e-3)


def test_equal_blocks_match_constant_solve_bitwise():
    mesh = cell_mesh(1, 32)
    blocks = {(i, j): 2.5 * np.eye(2) for j in range(4) for i in range(4)}
    a = solve_equivalent_sample(blocks, mesh, 10.0)
    b = solve_constant(2.5 * np.eye(2), mesh, 10.0)
    assert np.array_equal(a.nodal_values, b.nodal_values)


def test_straddling_mesh_rejected():
    with pytest.raises(ConfigError, match="straddle"):
        solve_equivalent_sample(_checker(1.0, 4.0, 3), cell_mesh(1, 32))


def test_sample_solution_below_alpha_solution():
    cfg = RunConfig(**COARSE)
    blocks = sample_all_blocks(cfg, 0)
    mesh = cell_mesh(1, cfg.n1)
    u = solve_equivalent_sample(blocks, mesh, cfg.f, cfg.block_size)
    alpha = min(np.linalg.eigvalsh(t.m)[0] for t in blocks.values())
    u_alpha = solve_constant(alpha * np.eye(2), mesh, cfg.f)
    assert np.all(u.nodal_values >= -1e-12)
    assert np.all(u.nodal_values <= u_alpha.nodal_values + 1e-12)


def test_checkerboard_refinement():
    blocks = _checker(1.0, 4.0)
    fine = solve_equivalent_sample(blocks, cell_mesh(1, 256))
    errs = [relative_error(solve_equivalent_sample(blocks, cell_mesh(1, n)), fine) for n in (16, 32)]
    assert errs[0] < 3e-2
    assert math.log2(errs[0] / errs[1]) > 1.5  # about h^2, slightly less near the cross point


def test_galerkin_identity_and_energy():
    mesh = cell_mesh(1, 24)
    u = solve_equivalent_sample(_checker(1.0, 4.0), mesh)
    acoef = np.where((mesh.centroids()[:, 0] < 0.5) == (mesh.centroids()[:, 1] < 0.5), 1.0, 4.0)
    k = fem.stiffness_from_element_coefficients(mesh, acoef[:, None, None] * np.eye(2))
    x = u.nodal_values
    load = fem.assemble_load(mesh, 10.0)
    kx = float(x @ (k @ x))
    assert kx > 0 and fem.energy(k, x) >= 0
    assert float(x @ load) == pytest.approx(kx, rel=1e-8)


# ---------------------------------------------------------------- algorithms 1 and 2

def test_fixed_geometry_test_b_has_zero_variance():
    cfg = RunConfig(test_case="B", fixed_geometry=True, L=3, h0=1 / 104, **COARSE)
    with pytest.warns(RuntimeWarning, match="delta = 0"):
        u0, stats, dec = algorithm1_two_stage(cfg)
    assert np.all(stats.variance == 0) and dec.degenerate
    one = sample_tensors(cfg, samples=[0])[0]
    blocks = {(i, j): one for j in range(8) for i in range(8)}
    single = solve_equivalent_sample(blocks, cell_mesh(1, cfg.n0), cfg.f)
    assert np.array_equal(u0.nodal_values, single.nodal_values)


def test_algorithm1_needs_two_samples():
    with pytest.raises(ConfigError):
        algorithm1_two_stage(RunConfig(L=1, **COARSE))


def test_deterministic_reference():
    cfg = RunConfig(test_case="custom", custom_value=2.0, L=1, h=1 / 8)
    mean, per = algorithm2_reference(cfg)
    expected = solve_constant(2 * np.eye(2), cell_mesh(1, cfg.n1), cfg.f)
    assert np.allclose(mean.nodal_values, expected.nodal_values, rtol=1e-12, atol=1e-14)
    mean3, per3 = algorithm2_reference(cfg.with_(L=3))
    assert all(np.array_equal(p.nodal_values, per3[0].nodal_values) for p in per3)
    assert np.allclose(mean3.nodal_values, per3[0].nodal_values, rtol=1e-14, atol=1e-16)


def test_tensors_reproducible_and_seeded():
    cfg = RunConfig(L=3, **COARSE)
    a = [t.m for t in sample_tensors(cfg)]
    b = [t.m for t in sample_tensors(cfg)]
    c = [t.m for t in sample_tensors(cfg.with_(master_seed=1))]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])
    # a sample's tensor does not depend on which other samples are evaluated
    assert np.array_equal(sample_tensors(cfg, samples=[2])[0].m, a[2])


def test_worker_count_does_not_change_results():
    cfg = RunConfig(L=4, **COARSE)
    serial = [t.m for t in sample_tensors(cfg)]
    parallel = [t.m for t in sample_tensors(cfg.with_(workers=2))]
    assert all(np.array_equal(x, y) for x, y in zip(serial, parallel))


def test_first_block_matches_all_blocks_entry():
    cfg = RunConfig(**COARSE)
    assert np.array_equal(sample_tensors(cfg, samples=[5])[0].m, sample_all_blocks(cfg, 5)[(0, 0)].m)


def test_nested_means_stabilize():
    cfg = RunConfig(**COARSE)
    a11 = np.array([t.m[0, 0] for t in sample_tensors(cfg, samples=range(256))])
    mu = np.cumsum(a11) / np.arange(1, 257)
    for L in (64, 128):
        assert abs(mu[2 * L - 1] - mu[L - 1]) < abs(mu[1] - mu[0])


# ---------------------------------------------------------------- higher modes

def _toy_decomposition(delta):
    a1 = {k: (1.0 if (k[0] + k[1]) % 2 == 0 else -1.0) * np.diag([1.0, 0.5]) for k in _checker(0, 0)}
    return PerturbationDecomposition(2 * np.eye(2), delta, a1, {k: 0.0 for k in a1})


def test_zero_perturbation_gives_zero_modes():
    mesh = cell_mesh(1, 16)
    dec = PerturbationDecomposition(2 * np.eye(2), 0.0, {k: np.zeros((2, 2)) for k in _checker(0, 0)}, {})
    solver = ModeSolver(dec.mean_matrix, mesh)
    u = solver.mode0()
    for n in (1, 2, 3):
        u = mmc_mode_n(n, u, dec, mesh, solver)
        assert np.all(u.nodal_values == 0.0)


def test_first_mode_improves_expansion():
    mesh = cell_mesh(1, 32)
    dec = _toy_decomposition(0.1)
    solver = ModeSolver(dec.mean_matrix, mesh)
    system = solver.system
    u0 = solver.mode0(10.0)
    u1 = mmc_mode_n(1, u0, dec, mesh, solver)
    u2 = mmc_mode_n(2, u1, dec, mesh, solver)
    assert solver.system is system
    exact = solve_equivalent_sample({k: dec.reconstruct(k) for k in dec.a1_blocks}, mesh)

    def err(v):
        return fem.h1_norm(fem.SolutionField(mesh, exact.nodal_values - v))

    e0 = err(u0.nodal_values)
    e1 = err(u0.nodal_values + 0.1 * u1.nodal_values)
    e2 = err(u0.nodal_values + 0.1 * u1.nodal_values + 0.01 * u2.nodal_values)
    assert e1 < e0 and e2 < e1
    assert e1 < 0.2 * e0


def test_mode_solver_mesh_checks():
    dec = _toy_decomposition(0.1)
    m1, m2 = cell_mesh(1, 16), cell_mesh(1, 32)
    u = ModeSolver(dec.mean_matrix, m1).mode0()
    with pytest.raises(ValueError):
        mmc_mode_n(1, u, dec, m2)
    with pytest.raises(ValueError):
        mmc_mode_n(0, u, dec, m1)


# ---------------------------------------------------------------- direct solves and metrics

def test_direct_solve_constant_matches_coarse():
    cfg = RunConfig(test_case="custom", custom_value=3.0, **COARSE)
    real = realize(cfg, 0, [(i, j) for j in range(8) for i in range(8)])
    fine = direct_fine_solve(cfg, real, n_fine=128)
    coarse = solve_constant(3 * np.eye(2), cell_mesh(1, 32), cfg.f)
    err32 = relative_error(coarse, fine)
    err16 = relative_error(solve_constant(3 * np.eye(2), cell_mesh(1, 16), cfg.f), fine)
    assert err32 < 5e-3 and err16 / err32 > 3


def test_direct_solve_resolution_guard():
    cfg = RunConfig(**COARSE)
    with pytest.raises(ConfigError, match="does not resolve"):
        direct_sample(cfg, 0, n_fine=16)


def test_direct_solve_self_convergence():
    cfg = RunConfig(test_case="B", epsilon=0.5, **COARSE)
    u = {n: direct_sample(cfg, 0, n_fine=n) for n in (32, 64, 128)}
    d1 = relative_error(u[32], u[64])
    d2 = relative_error(u[64], u[128])
    assert d2 < d1 < 0.3  # sharp phase boundaries limit the rate


def test_relative_error_scaling():
    mesh = cell_mesh(1, 8)
    ref = fem.SolutionField(mesh, np.sin(mesh.nodes[:, 0] * 3) + 1)
    assert relative_error(ref, ref) == 0.0
    assert relative_error(fem.SolutionField(mesh, 1.1 * ref.nodal_values), ref) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ValueError):
        relative_error(ref, fem.SolutionField(mesh, np.zeros(mesh.n_nodes)))


# ---------------------------------------------------------------- studies

def test_fit_loglog():
    s, i, deg = fit_loglog([1, 2, 4], [3, 12, 48])
    assert s == pytest.approx(2.0) and i == pytest.approx(math.log(3)) and not deg
    assert fit_loglog([1, 2], [0.0, 1.0])[2]


def test_deterministic_variance_study_is_degenerate():
    cfg = RunConfig(test_case="custom", L=3, h=1 / 8, M_list=(1, 2))
    res = variance_decay_study(cfg)
    assert res.degenerate and np.all(res.observable == 0)
    assert np.allclose(res.columns["mean_a11"], 3.0)


def test_variance_study_shape(tmp_path):
    res = variance_decay_study(RunConfig(L=20, **COARSE), M_list=(1, 2))
    assert list(res.abscissa) == [1, 2] and res.observable[1] < res.observable[0]
    res.write_csv(tmp_path / "v.csv")
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "M,var_a11,delta,mean_a11" and len(lines) == 3


def test_delta_study_zero_scale():
    cfg = RunConfig(L=3, **COARSE)
    _, decs = sample_decompositions(cfg)
    res = delta_scaling_study(cfg, (0.0, 0.5, 1.0), decs)
    assert res.observable[0] == 0.0
    assert res.observable[1] < res.observable[2]
    assert math.isfinite(res.slope)


def test_sample_count_study_columns():
    cfg = RunConfig(**COARSE)
    res = sample_count_study(cfg, (1, 4), replicates=3, periodization=True)
    assert set(res.columns) >= {"mu11_mean", "sem_mu11", "N", "a11_N", "error"}
    assert list(res.columns["N"]) == [1, 2]
    # N = 1: the periodized tensor of one cell is that sample's tensor
    t0 = sample_tensors(cfg, samples=[0])[0].m[0, 0]
    assert res.columns["mu11_rep0"][0] == t0
    assert res.columns["error"][0] < 1e-9


def test_supercell_pairing_layout():
    cfg = RunConfig(**COARSE)
    real = supercell_realization(cfg, [10, 11, 12, 13])
    assert real.z[(1, 0)] == realize(cfg, 11, [(0, 0)]).z[(0, 0)]
    assert real.z[(0, 1)] == realize(cfg, 12, [(0, 0)]).z[(0, 0)]
    with pytest.raises(ConfigError):
        supercell_realization(cfg, [0, 1, 2])


def test_study_result_validation():
    with pytest.raises(ValueError):
        StudyResult("x", "a", "b", [2, 1], [1, 1], 0.0, 0.0)


def test_epsilon_recipe():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        pairs = epsilon_study_recipe((0.25, 0.125), (2, 3, 4))
    assert pairs == [(0.25, 2), (0.25, 4), (0.125, 2), (0.125, 4)]
    assert len(w) == 2
