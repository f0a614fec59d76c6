import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavityscat.geometry import named_geometry
from cavityscat.harness import (INNER_LOOP, OUTER_LOOP_OFFAXIS, LoopData, LoopSource,
                                PlaneWave, ScatteringData)
from cavityscat.solver import (BoundaryData, CavityProblem, Formulation, MeshConfig,
                               ModeBudgetError, SolveConfig, _batch_limit, _mode_groups,
                               assemble_operators, condition_estimate, mirror_operators,
                               mode_loop, mode_sequence, solve_mode, system_matrix,
                               truncation_modes)

COARSE = MeshConfig(eps_geom=1e-2, max_panel_length=1.0)


@pytest.fixture(scope="module")
def problem():
    return CavityProblem(named_geometry("example1"), 1.0, COARSE)


@pytest.fixture(scope="module")
def ops(problem):
    return assemble_operators(problem, [1, -1, 2])


@pytest.fixture(scope="module")
def loop_data(problem):
    return LoopData(problem, LoopSource(OUTER_LOOP_OFFAXIS), LoopSource(INNER_LOOP))


@pytest.fixture(scope="module")
def wave_data(problem):
    return ScatteringData(problem, PlaneWave())


def test_config_rejects_unsupported_wavenumbers():
    for k in (0.0, -1.0, 1.0 - 0.1j):
        with pytest.raises(ValueError):
            SolveConfig(k)
    assert SolveConfig(2.0, "reduced").formulation is Formulation.REDUCED
    with pytest.raises(ValueError):
        Formulation.parse("galerkin")


def test_block_shapes(problem, ops):
    b = ops[1].blocks
    ng, nb, nc = problem.gamma.n_nodes, problem.buffer.n_nodes, problem.c1.n_nodes
    assert b["N_g_g"].shape == (2 * ng, 2 * ng)
    assert b["N_c1_g"].shape == (2 * nc, 2 * ng)
    assert b["U_c1_g"].shape == (nc, 2 * ng)
    assert b["N_g_b"].shape == (2 * ng, 2 * nb)
    assert b["GS_g_c1H"].shape == (2 * ng, nc)
    n = system_matrix(ops[1], "coupled").shape[0]
    assert n == 2 * (ng + 2 * nc + nb) == problem.n_unknowns


def test_lowfreq_and_reduced_matrices_agree(ops):
    for m in (1, 2):
        A = system_matrix(ops[m], "lowfreq")
        B = system_matrix(ops[m], "reduced")
        assert np.abs(A - B).max() <= 1e-9 * np.linalg.norm(A)


def test_coupled_diagonal_blocks_carry_identity(problem, ops):
    A = system_matrix(ops[1], "coupled")
    ng, nc = 2 * problem.gamma.n_nodes, 2 * problem.c1.n_nodes
    c1_rows = slice(ng, ng + nc)
    assert np.allclose(A[c1_rows, c1_rows], np.eye(nc))
    assert np.allclose(np.diag(A)[-2 * problem.buffer.n_nodes:], -0.5)


def test_formulations_agree_and_residuals_small(problem, ops, wave_data):
    data = wave_data(1)
    sols = {f: solve_mode(ops[1], data, SolveConfig(1.0, f)) for f in Formulation}
    ref = sols[Formulation.LOWFREQ]
    for f, s in sols.items():
        assert s.residual <= 1e-12
        for name in ("M", "M_c1", "M_b", "ikJ"):
            a, b = getattr(s, name), getattr(ref, name)
            assert np.linalg.norm(a - b) <= 1e-8 * np.linalg.norm(b), (f, name)


def test_recovered_densities_satisfy_system_rows(ops, loop_data):
    data = loop_data(1)
    s = solve_mode(ops[1], data, SolveConfig(1.0, "lowfreq"))
    x = np.concatenate([s.M, s.M_c1, s.ikJ / 1j, s.M_b])
    A = system_matrix(ops[1], "coupled")
    rhs = np.concatenate([data.h_gamma, data.f, data.g, data.h_buffer])
    assert np.linalg.norm(A @ x - rhs) <= 1e-10 * np.linalg.norm(rhs)


def test_zero_data_gives_zero_solution(problem, ops):
    s = solve_mode(ops[1], BoundaryData.zeros(problem), SolveConfig(1.0))
    assert not np.any(s.M) and not np.any(s.M_b) and not np.any(s.ikJ)


def test_mirrored_operators_match_assembly(ops):
    mo = mirror_operators(ops[1])
    assert mo.m == -1
    for key, A in ops[-1].blocks.items():
        assert np.abs(mo.blocks[key] - A).max() <= 1e-12 * np.abs(A).max()


def test_reflection_symmetric_data_gives_mirrored_solution(problem, ops, wave_data):
    """Data invariant under theta -> -theta solves to densities related by the same flip."""
    d = wave_data(1)
    flip = lambda v: np.concatenate([v[:v.size // 2], -v[v.size // 2:]])
    mirrored = BoundaryData(flip(d.f), flip(d.g), d.q.copy(), flip(d.h_gamma), flip(d.h_buffer))
    cfg = SolveConfig(1.0)
    plus = solve_mode(ops[1], d, cfg)
    minus = solve_mode(ops[-1], mirrored, cfg)
    assert np.linalg.norm(plus.M) > 0
    assert np.linalg.norm(flip(plus.M) - minus.M) <= 1e-12 * np.linalg.norm(plus.M)


def test_symmetry_shortcut_matches_explicit_solve(problem, wave_data):
    cfg = SolveConfig(1.0)
    kw = dict(modes=[1, -1])
    a = mode_loop(problem, cfg, wave_data, **kw)
    b = mode_loop(problem, cfg, wave_data, use_symmetry=True, **kw)
    for m in (1, -1):
        assert np.linalg.norm(a.modes[m].M - b.modes[m].M) <= 1e-12 * np.linalg.norm(a.modes[m].M)


def test_condition_estimate_matches_svd():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((60, 60)) + np.diag(np.linspace(1, 50, 60))
    assert np.isclose(condition_estimate(A, iters=200), np.linalg.cond(A), rtol=1e-3)


def test_mode_sequence_order():
    gen = mode_sequence()
    assert [next(gen) for _ in range(7)] == [0, 1, -1, 2, -2, 3, -3]


def test_truncation_rule():
    norms = {0: 1.0, 1: 0.5, -1: 0.5, 2: 1e-3, -2: 1e-3, 3: 1e-11, -3: 1e-12, 4: 1e-13, -4: 0.0}
    assert truncation_modes(norms, 1e-9) == [0, 1, -1, 2, -2]
    # a single small order followed by a large one does not truncate
    assert truncation_modes({0: 1.0, 1: 1e-12, -1: 0.0, 2: 0.3, -2: 0.3}, 1e-9) is None


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-12, 12), min_size=1, max_size=25, unique=True),
       st.integers(1, 5), st.integers(2, 10))
def test_mode_groups_partition(modes, per_group, cap):
    groups = _mode_groups(modes, per_group, cap)
    flat = [m for g in groups for m in g]
    assert sorted(flat) == sorted(modes)
    for g in groups:
        assert len({abs(m) for m in g}) <= per_group
        assert len(g) <= max(cap, 2)
        for m in g:
            assert -m not in modes or -m in g


def test_batch_limit_scales_with_budget(problem):
    assert _batch_limit(problem, 1.0) == 1
    assert _batch_limit(problem, 1e12) > _batch_limit(problem, 1e9)


def test_mode_budget_error(problem, loop_data):
    with pytest.raises(ModeBudgetError):
        mode_loop(problem, SolveConfig(1.0), loop_data, eps_modes=1e-30, max_order=1)


def test_single_mode_source_uses_one_mode(problem):
    data = LoopData(problem, LoopSource((0.0, 0.0, 3.3)), LoopSource(INNER_LOOP))
    sol = mode_loop(problem, SolveConfig(1.0), data, active_modes=data.active_modes())
    assert sol.n_modes == 1 and list(sol.modes) == [1]


def test_junction_refinement_keeps_entries_bounded():
    geom = named_geometry("example1", refine_junction=True)
    peaks = []
    for level in range(7):
        eps = 0.25 * 2.0**-level
        p = CavityProblem(geom, 1.0, MeshConfig(eps_geom=eps, max_panel_length=0.5))
        A = system_matrix(assemble_operators(p, 1, ["lowfreq"]), "lowfreq")
        peaks.append(np.abs(A).max())
    assert max(peaks) <= 2 * peaks[0]


def test_lowfreq_conditioning_flat_as_k_vanishes():
    conds = {}
    for k in (1.0, 1e-4, 1e-10):
        p = CavityProblem(named_geometry("example1"), k, COARSE, mesh_k=1.0)
        ops = assemble_operators(p, 1)
        conds[k] = {f: np.linalg.cond(system_matrix(ops, f)) for f in Formulation}
    low = [c[Formulation.LOWFREQ] for c in conds.values()]
    assert max(low) <= 10 * min(low)
    for f in (Formulation.REDUCED, Formulation.COUPLED):
        assert conds[1e-10][f] >= 1e3 * conds[1.0][f]


def test_no_resonance_dips():
    """Smallest singular value stays well above zero across a band of wavenumbers."""
    mins, meds = [], []
    for k in np.arange(1.0, 20.5, 1.0):
        p = CavityProblem(named_geometry("example1"), k, MeshConfig(eps_geom=1e-3,
                                                                    max_panel_length=1.0))
        ops = assemble_operators(p, [0, 1], ["lowfreq"])
        for m in (0, 1):
            s = np.linalg.svd(system_matrix(ops[m], "lowfreq"), compute_uv=False)
            mins.append(s.min())
            meds.append(np.median(s))
    assert min(mins) >= 1e-4 * np.median(meds)
