import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavityscat.fields import (EvaluationError, FitError, compute_phi_M, compute_rho_M,
                               edge_values, evaluate, surface_derivative)
from cavityscat.geometry import (GeneratingCurve, LineSegment, SurfaceLabel, named_geometry,
                                 panelize)
from cavityscat.harness import PlaneWave, ScatteringData, interior_points, run_loop_test
from cavityscat.operators import surface_divergence
from cavityscat.solver import CavityProblem, MeshConfig, SolveConfig, mode_loop

from oracles import torus_curve, torus_density, unit_segment_curve

COARSE = MeshConfig(eps_geom=1e-2, max_panel_length=1.0)


@pytest.fixture(scope="module")
def disk():
    return panelize(unit_segment_curve(), 1.0, 1e-3, max_panel_length=0.25)


@pytest.fixture(scope="module")
def loop_run():
    rep, sol = run_loop_test("example1", 1.0, mode_scope="offaxis", mesh=COARSE, with_H=True)
    return rep, sol


@pytest.fixture(scope="module")
def wave():
    """Plane-wave solution at k = 1 on a coarse mesh (all modes to 1e-9)."""
    k = 1.0
    prob = CavityProblem(named_geometry("example1"), k, COARSE)
    inc = PlaneWave()
    sol = mode_loop(prob, SolveConfig(k), ScatteringData(prob, inc), eps_modes=1e-9)
    return sol, inc


def test_rho_of_azimuthal_density_at_m0_vanishes(disk):
    M = np.concatenate([np.zeros(disk.n_nodes), np.sin(3 * disk.s) + 1j])
    assert np.abs(compute_rho_M(disk, 0, M)).max() == 0


def test_surface_divergence_on_flat_disk(disk):
    """On the disk r = s: div M = f' + f / s for M = (f, 0), m = 0."""
    s = disk.r
    f = np.sin(2 * s) + s * s
    M = np.concatenate([f, np.zeros_like(f)])
    exact = 2 * np.cos(2 * s) + 2 * s + f / s
    assert np.abs(compute_rho_M(disk, 0, M) - exact).max() <= 1e-10 * np.abs(exact).max()
    k = 0.7
    assert np.allclose(compute_rho_M(disk, 0, M, k), exact / (1j * k), rtol=1e-10)


def test_surface_divergence_on_cone():
    """Cone r = s sin(a): div (f t) = f' + f sin(a) / r; e_theta part adds i m g / r."""
    a = 0.6
    seg = LineSegment((0.0, -1.0), (np.sin(a), -1.0 + np.cos(a)))
    mesh = panelize(GeneratingCurve(SurfaceLabel.GAMMA, [seg], refine=[(False, False)]), 1.0,
                    1e-3, max_panel_length=0.2)
    s = mesh.r / np.sin(a)
    f, g = np.cos(s), s * s
    m = 2
    exact = -np.sin(s) + f * np.sin(a) / mesh.r + 1j * m * g / mesh.r
    got = surface_divergence(mesh, m) @ np.concatenate([f, g])
    assert np.abs(got - exact).max() <= 1e-10 * np.abs(exact).max()


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=10, max_size=10))
def test_spectral_derivative_exact_for_polynomials(coef):
    mesh = panelize(unit_segment_curve(), 1.0, 1e-2, max_panel_length=0.3)
    p = np.polynomial.Polynomial(coef)
    got = surface_derivative(mesh, p(mesh.r))
    exact = p.deriv()(mesh.r)
    assert np.abs(got - exact).max() <= 1e-12 * max(1.0, np.abs(exact).max(), np.abs(coef).max())


def test_edge_values_extrapolate_to_rim():
    mesh = panelize(named_geometry("example1").buffer, 1.0, 1e-3)
    poly = lambda r: 1 + r - 0.3 * r**3
    M = np.concatenate([poly(mesh.r), np.zeros(mesh.n_nodes)])
    vals = edge_values(mesh, M)
    edges = mesh.edges()
    assert len(edges) == 2
    # the density is along the generating curve, so M . b = +-M1 at either end
    for e, v in zip(edges, vals):
        assert np.isclose(abs(v), poly(e.r), rtol=1e-12)


def test_phi_fit_reproduces_polynomial_samples():
    coef = np.array([0.3 + 0.1j, 2.0, -1.5j, 4.0])
    f = lambda k: np.polynomial.polynomial.polyval(k, coef)
    ks = [1e-3, 2e-3, 4e-3, 8e-3, 1e-2]
    fit = compute_phi_M(f, ks)
    assert fit.residual <= 1e-8
    assert abs(fit(1e-2) - f(1e-2)) <= 1e-8 * abs(f(1e-2))
    assert abs(fit(0.0) - fit.coefficients[0]) == 0
    assert abs(fit.coefficients[0] - coef[0]) <= 1e-8
    with pytest.raises(FitError):
        compute_phi_M(f, ks[:2])
    with pytest.raises(FitError):
        compute_phi_M(lambda k: np.sin(1 / k), ks)


def test_loop_field_errors(loop_run):
    rep, _ = loop_run
    assert rep.E_error <= 1e-10
    assert rep.H_error <= 1e-9


def test_charge_form_of_H_matches_direct_form(loop_run):
    _, sol = loop_run
    r, th, z = interior_points(sol.problem.geometry, 5)
    direct = evaluate(sol, r, th, z, which=("H",)).H
    charge = evaluate(sol, r, th, z, which=("H",), h_form="lemma").H
    assert np.linalg.norm(direct - charge) <= 1e-7 * np.linalg.norm(direct)


def test_current_divergence_identity_on_hemisphere(wave):
    """div J / ik of the recovered current equals the charge density n . curl S M gives."""
    sol, _ = wave
    c1 = sol.problem.c1
    k = sol.k
    spectral = np.concatenate([surface_divergence(c1, m) @ s.J(k) / (1j * k)
                               for m, s in sol.modes.items()])
    recovered = np.concatenate([s.rho_J for s in sol.modes.values()])
    assert np.linalg.norm(spectral - recovered) <= 1e-7 * np.linalg.norm(recovered)


def test_maxwell_consistency_by_finite_differences(wave):
    sol, _ = wave
    k = sol.k
    h = 1e-3
    for x0 in ([0.3, 0.2, -0.5], [0.9, -0.7, 0.8], [1.5, 1.0, 2.6]):
        x0 = np.array(x0)
        dom = "interior" if np.linalg.norm(x0) < 2 else "exterior"
        pts = [x0]
        for ax in range(3):
            for d in (-2, -1, 1, 2):
                e = np.zeros(3)
                e[ax] = d * h
                pts.append(x0 + e)
        X = np.array(pts).T
        r, th = np.hypot(X[0], X[1]), np.arctan2(X[1], X[0])
        s = evaluate(sol, r, th, X[2], dom, ("E", "H"))
        E, H = s.cartesian("E"), s.cartesian("H")
        st = np.array([1, -8, 8, -1]) / (12 * h)
        dE = np.stack([E[:, 1 + 4 * ax:5 + 4 * ax] @ st for ax in range(3)], axis=1)  # dE_i/dx_j
        curl = np.array([dE[2, 1] - dE[1, 2], dE[0, 2] - dE[2, 0], dE[1, 0] - dE[0, 1]])
        assert np.linalg.norm(curl - 1j * k * H[:, 0]) <= 1e-6 * np.linalg.norm(H[:, 0])


def test_exterior_field_satisfies_ground_plane_condition(wave):
    sol, _ = wave
    r = np.linspace(2.3, 5.0, 8)
    s = evaluate(sol, r, 0.4, np.zeros_like(r), "exterior")
    assert np.abs(s.E[:2]).max() <= 1e-9 * np.abs(s.E).max()


def _extrapolate(mesh, idx, sol, dom, sign, which="E"):
    """Tangential field components at offsets ``sign * delta * n``, extrapolated to delta = 0."""
    deltas = np.array([8e-3, 4e-3, 2e-3, 1e-3])
    vals = []
    for d in deltas:
        r = mesh.r[idx] + sign * d * mesh.normal[idx, 0]
        z = mesh.z[idx] + sign * d * mesh.normal[idx, 1]
        v = getattr(evaluate(sol, r, 0.0, z, dom, (which,)), which)
        nr, nz = mesh.normal[idx, 0], mesh.normal[idx, 1]
        vals.append(np.stack([nz * v[0] - nr * v[2], v[1]]))   # tangential parts up to sign
    return np.linalg.solve(np.vander(deltas), np.array(vals).reshape(deltas.size, -1))[-1]


def _smooth_nodes(mesh, count=6, clearance=0.1):
    """Node indices at least ``clearance`` from every segment junction off the axis."""
    ends = np.array([p for seg in mesh.curve.segments for p in seg.endpoints() if p[0] > 0])
    d = np.hypot(mesh.r[:, None] - ends[:, 0], mesh.z[:, None] - ends[:, 1]).min(axis=1)
    ok = np.flatnonzero(d > clearance)
    return ok[np.linspace(0, ok.size - 1, count).astype(int)]


def test_pec_condition_on_cavity_and_buffer(wave):
    sol, inc = wave
    prob = sol.problem
    for mesh in (prob.gamma, prob.buffer):
        idx = _smooth_nodes(mesh)
        tang = _extrapolate(mesh, idx, sol, "interior", -1.0)   # normals point into the metal
        x = np.stack([mesh.r[idx], 0 * idx, mesh.z[idx]])
        E_inc = inc.fields_3d(sol.k, x)[0]
        nr, nz = mesh.normal[idx, 0], mesh.normal[idx, 1]
        inc_t = np.concatenate([nz * E_inc[0] - nr * E_inc[2], E_inc[1]])
        scale = np.abs(E_inc).max()
        assert np.abs(tang + inc_t).max() <= 1e-7 * scale


def test_interface_continuity_across_hemisphere(wave):
    sol, _ = wave
    c1 = sol.problem.c1
    idx = _smooth_nodes(c1)
    for which in ("E", "H"):
        inside = _extrapolate(c1, idx, sol, "interior", -1.0, which)
        outside = _extrapolate(c1, idx, sol, "exterior", 1.0, which)
        assert np.abs(inside - outside).max() <= 1e-6 * np.abs(outside).max()


def test_scattered_field_decays_like_inverse_distance(wave):
    sol, _ = wave
    rho = np.array([10.0, 20.0, 40.0])
    direction = np.array([np.sin(0.7), np.cos(0.7)])  # (r, z) on a ray above the plane
    s = evaluate(sol, rho * direction[0], 0.3, rho * direction[1], "exterior")
    scaled = rho * np.linalg.norm(s.E, axis=0)
    assert scaled.max() / scaled.min() - 1 <= 0.05


def test_fields_are_periodic_in_theta(wave):
    sol, _ = wave
    a = evaluate(sol, [0.5], [0.4], [-0.5]).E
    b = evaluate(sol, [0.5], [0.4 + 2 * np.pi], [-0.5]).E
    assert np.allclose(a, b, rtol=1e-13)


def test_points_too_close_are_refused(wave):
    sol, _ = wave
    g = sol.problem.gamma
    with pytest.raises(EvaluationError):
        evaluate(sol, [g.r[20] + 1e-4], [0.0], [g.z[20]], min_distance=1e-3)


def test_loop_field_at_ten_interior_points(loop_run):
    rep, _ = run_loop_test("example1", 1.0, mesh=COARSE, n_points=10)
    assert rep.E_error <= 1e-10


def test_divergence_integrates_to_zero_on_closed_surface():
    mesh = panelize(torus_curve(), 1.0, 1.0, max_panel_length=0.25)
    M = np.concatenate(torus_density(mesh.s))
    rho = compute_rho_M(mesh, 0, M)
    assert abs(np.sum(rho * mesh.r * mesh.weights)) <= 1e-12 * np.sum(np.abs(rho) * mesh.weights)


def test_edge_value_of_magnetic_current_scales_with_k():
    def edge_value(k):
        prob = CavityProblem(named_geometry("example1"), k, COARSE, mesh_k=1.0)
        sol = mode_loop(prob, SolveConfig(k), ScatteringData(prob, PlaneWave()), modes=[1])
        return np.abs(edge_values(prob.gamma, sol.modes[1].M)).max()
    big, small = edge_value(1e-3), edge_value(1e-4)
    assert big > 0
    assert small <= 10 * 0.1 * big
