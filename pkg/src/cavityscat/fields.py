"""Field evaluation from solved densities.

Interior (cavity plus half-ball) fields::

    E = ik S^H_C1 J - grad S^H_C1 (div J / ik) + curl S^H_C1 M_C1
        + curl S_B M_B + curl S_G M
    H = curl S^H_C1 J + (1/ik) curl curl (S^H_C1 M_C1 + S_B M_B + S_G M)

The exterior (outside the hemisphere) omits the Gamma terms.  ``ik J`` and
``div J / ik`` come straight from the recovery step, so E never divides by
``k``.  H is available directly or through the charge decomposition of the
curl-curl terms, where ``div M / ik`` and the edge value ``M . b / ik`` of
the magnetic currents appear.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .operators import (Request, Targets, assemble, edge_extrapolation,
                        edge_gradient_matrix, edge_potential, surface_divergence)
from .quadrature import diff_matrix, gauss_legendre
from .solver import CHARGE, ELECTRIC, MAGNETIC, ScatterSolution

logger = logging.getLogger(__name__)


class EvaluationError(ValueError):
    """Field requested too close to a surface."""


@dataclass
class FieldSample:
    """Fields at points ``(r, theta, z)`` in cylindrical components (3, N)."""

    r: np.ndarray
    theta: np.ndarray
    z: np.ndarray
    E: np.ndarray | None = None
    H: np.ndarray | None = None
    per_mode: dict = field(default_factory=dict)

    def cartesian(self, which="E"):
        v = getattr(self, which)
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.stack([c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]])


def _check_distance(problem, r, z, min_distance):
    if min_distance <= 0:
        return
    for mesh in (problem.gamma, problem.buffer, problem.c1):
        d = np.hypot(r[:, None] - mesh.r[None, :], z[:, None] - mesh.z[None, :]).min(axis=1)
        if np.any(d < min_distance):
            raise EvaluationError(
                f"point within {min_distance:g} of surface {mesh.label.value}")


def modal_fields(solution: ScatterSolution, m, r, z, domain="interior", which=("E",),
                 h_form="direct", phi_m=None):
    """Mode-``m`` cylindrical field coefficients at points ``(r, z)``.

    Returns a dict with arrays of shape (3, N) for each requested field.
    """
    prob = solution.problem
    k = prob.k
    ik = 1j * k
    ms = solution.modes[m]
    tgt = Targets.from_points(r, z)
    interior = domain == "interior"
    want_H = "H" in which
    out = {}
    reqs = [Request("S", image=ELECTRIC), Request("grad_scalar", image=CHARGE),
            Request("curl", image=MAGNETIC)]
    if want_H:
        reqs += [Request("curl", image=ELECTRIC), Request("curlcurl", image=MAGNETIC)]
    c1 = assemble(prob.c1, tgt, k, m, reqs)
    E = c1[0] @ ms.ikJ - c1[1] @ ms.rho_J + c1[2] @ ms.M_c1
    sources = [(prob.buffer, ms.M_b)]
    if interior:
        sources.append((prob.gamma, ms.M))
    H = None
    if want_H:
        H = c1[3] @ ms.J(k)
        if h_form == "direct":
            H = H + (c1[4] @ ms.M_c1) / ik
        else:
            H = H + _lemma_h(prob.c1, tgt, k, m, ms.M_c1, MAGNETIC, phi_m)
    for mesh, dens in sources:
        reqs = [Request("curl")]
        if want_H and h_form == "direct":
            reqs.append(Request("curlcurl"))
        mats = assemble(mesh, tgt, k, m, reqs)
        E = E + mats[0] @ dens
        if want_H:
            if h_form == "direct":
                H = H + (mats[1] @ dens) / ik
            else:
                H = H + _lemma_h(mesh, tgt, k, m, dens, 0.0, phi_m)
    out["E"] = E.reshape(3, -1)
    if want_H:
        out["H"] = H.reshape(3, -1)
    return out


def _lemma_h(mesh, tgt, k, m, M, image, phi_m):
    """``(1/ik) curl curl S M`` as ``-ik S M + grad S rho_M - grad S_l phi_M``.

    ``phi_m`` optionally maps a surface label to the edge value
    ``M . b / ik`` (e.g. from :func:`compute_phi_M`) replacing the nodal one.
    """
    ik = 1j * k
    S, G = assemble(mesh, tgt, k, m, [Request("S", image=image),
                                      Request("grad_scalar", image=image)])
    out = -ik * (S @ M) + G @ compute_rho_M(mesh, m, M, k)
    if phi_m is not None and mesh.label in phi_m:
        for edge, _ in edge_extrapolation(mesh):
            grad = edge_potential(edge, tgt, k, m)
            if image:
                mirrored = type(edge)(edge.r, -edge.z,
                                      (edge.binormal[0], -edge.binormal[1]), edge.at_end)
                grad = grad + image * edge_potential(mirrored, tgt, k, m)
            out = out - grad * phi_m[mesh.label]
    else:
        out = out - (edge_gradient_matrix(mesh, tgt, k, m, image=image) @ M) / ik
    return out


def evaluate(solution: ScatterSolution, r, theta, z, domain="interior", which=("E",),
             min_distance=0.0, h_form="direct", keep_modes=False):
    """Total fields at points ``(r, theta, z)`` summed over the solved modes."""
    r = np.atleast_1d(np.asarray(r, float))
    z = np.atleast_1d(np.asarray(z, float))
    theta = np.broadcast_to(np.asarray(theta, float), r.shape)
    _check_distance(solution.problem, r, z, min_distance)
    sample = FieldSample(r, theta, z)
    for name in which:
        setattr(sample, name, np.zeros((3, r.size), complex))
    for m in solution.modes:
        vals = modal_fields(solution, m, r, z, domain, which, h_form)
        phase = np.exp(1j * m * theta)
        for name in which:
            getattr(sample, name)[...] += vals[name] * phase
        if keep_modes:
            sample.per_mode[m] = vals
    return sample


def eval_E(solution, r, theta, z, domain="interior", **kw):
    return evaluate(solution, r, theta, z, domain, ("E",), **kw)


def eval_H(solution, r, theta, z, domain="interior", **kw):
    return evaluate(solution, r, theta, z, domain, ("H",), **kw)


# ---------------------------------------------------------------------------
# auxiliary densities
# ---------------------------------------------------------------------------

def compute_rho_M(mesh, m, M, k=None):
    """Surface divergence of a modal tangential density, divided by ``ik`` if ``k`` given."""
    div = surface_divergence(mesh, m) @ M
    return div if k is None else div / (1j * k)


def surface_derivative(mesh, values):
    """Per-panel spectral d/ds (arclength) of nodal values."""
    g = gauss_legendre(mesh.order)
    D = diff_matrix(g.nodes)
    v = np.asarray(values).reshape(mesh.n_panels, mesh.order)
    half = 0.5 * (mesh.interval[:, 1] - mesh.interval[:, 0])
    dv = (v @ D.T) / half[:, None]
    return dv.ravel() / mesh.speed


def edge_values(mesh, M):
    """``M . b`` at every free edge of ``mesh``."""
    return np.array([row @ M for _, row in edge_extrapolation(mesh)])


@dataclass
class PhiFit:
    """Polynomial fit of ``M . b / ik`` at an edge against ``k``."""

    coefficients: np.ndarray   # increasing powers of k
    residual: float
    samples: dict

    def __call__(self, k):
        return np.polynomial.polynomial.polyval(k, self.coefficients)


class FitError(RuntimeError):
    pass


def compute_phi_M(solve_at, ks, order=3, tol=1e-6):
    """Fit ``phi_M(k) = M . b / ik`` from solves at several small wavenumbers.

    Parameters
    ----------
    solve_at : callable
        ``k -> complex`` returning ``M . b / ik`` at the edge of interest.
    ks : sequence of float
        At least ``order + 1`` distinct wavenumbers.
    """
    ks = np.asarray(sorted(ks), float)
    if ks.size < order + 1:
        raise FitError(f"need at least {order + 1} wavenumbers for an order-{order} fit")
    vals = np.array([solve_at(k) for k in ks])
    coef = np.polynomial.polynomial.polyfit(ks, vals, order)
    fit = np.polynomial.polynomial.polyval(ks, coef)
    scale = np.max(np.abs(vals)) or 1.0
    res = float(np.max(np.abs(fit - vals)) / scale)
    if res > tol and ks.size > order + 1:
        raise FitError(f"phi_M fit residual {res:.2e} above {tol:.0e}; use more or smaller k")
    return PhiFit(coef, res, dict(zip(ks.tolist(), vals.tolist())))
