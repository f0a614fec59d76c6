"""Azimuthal Fourier modes of the Helmholtz Green's function.

For a target ``(r, z)`` and source ring ``(r', z')`` the three modal kernels
are

    G_m     = 1/(2 pi) int_0^{2 pi} g(R) exp(-i m phi)        dphi
    G_m^cos = 1/(2 pi) int_0^{2 pi} g(R) cos(m phi) cos(phi) dphi
    G_m^sin = 1/(2 pi) int_0^{2 pi} g(R) sin(m phi) sin(phi) dphi

with ``g(R) = exp(ikR) / (4 pi R)`` and
``R^2 = r^2 + r'^2 - 2 r r' cos(phi) + (z - z')^2``.  Partial derivatives in
``r, z, r', z'`` (order <= 2) are taken analytically under the integral.

The integrals are even in ``phi`` and are computed on ``[0, pi]`` with a
composite Gauss rule in ``u`` where ``phi = a sinh(u)``; ``a`` is the
imaginary distance of the branch point of ``R`` from the real axis, so the
rule refines automatically as the two rings approach each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .quadrature import gauss_legendre

_VARS = {"r": 0, "z": 1, "r'": 2, "z'": 3, "rp": 2, "zp": 3}

#: derivative sets used by the layer-potential assembly
ORDER0 = ("",)
ORDER1 = ("", "r", "z")
ORDER2 = ("", "r", "z", "rr", "rz", "zz")

_GL = gauss_legendre(16)
_TRAP_MIN_A = 0.6      # branch-point distance above which the trapezoid rule is used
_TRAP_DIGITS = 40.0    # target exp(-40) truncation of the trapezoid rule
_PHASE_PER_PANEL = 12.0  # phase change resolved by one 16-point Gauss panel
_MAX_U_PANEL = 1.25      # Gauss panel width cap in the sinh variable
_GX = np.ascontiguousarray(0.5 * (_GL.nodes + 1.0))
_GW = np.ascontiguousarray(0.5 * _GL.weights)


class SingularEvaluationError(ValueError):
    """Kernel requested at coincident source and target."""


def parse_derivs(derivs):
    """Translate names like ``"rz"`` or ``"r'z'"`` to index pairs (-1 = none)."""
    out = []
    for name in derivs:
        idx = []
        s = name.replace("rp", "r'").replace("zp", "z'")
        i = 0
        while i < len(s):
            if i + 1 < len(s) and s[i + 1] == "'":
                idx.append(_VARS[s[i:i + 2]])
                i += 2
            else:
                idx.append(_VARS[s[i]])
                i += 1
        if len(idx) > 2:
            raise ValueError(f"derivative order > 2 not supported: {name!r}")
        idx += [-1] * (2 - len(idx))
        out.append(idx)
    return np.array(out, dtype=np.int64).reshape(-1, 2)


@numba.njit(cache=True)
def _add_point(phi, wt, dr, dz, d2, r, rp, rr, ik, modes, dset, qd, cmv, smv, out):
    """Accumulate one quadrature node ``phi`` with weight ``wt`` into ``out``."""
    nm = modes.shape[0]
    sh = np.sin(0.5 * phi)
    omc = 2.0 * sh * sh
    cphi = 1.0 - omc
    sphi = np.sin(phi)
    R = np.sqrt(d2 + 2.0 * rr * omc)
    iR = 1.0 / R
    g = np.exp(ik * R) * (0.25 / np.pi) * iR
    t1 = ik - iR
    gq = g * t1 * 0.5 * iR
    gqq = g * 0.25 * iR * iR * (t1 * t1 + iR * iR - t1 * iR)
    qd[0] = 2.0 * (dr + rp * omc)
    qd[1] = 2.0 * dz
    qd[2] = 2.0 * (-dr + r * omc)
    qd[3] = -2.0 * dz
    for im in range(nm):
        mphi = modes[im] * phi
        cmv[im] = np.cos(mphi)
        smv[im] = np.sin(mphi) * sphi
    for idd in range(dset.shape[0]):
        i0 = dset[idd, 0]
        i1 = dset[idd, 1]
        if i0 < 0:
            val = g
        elif i1 < 0:
            val = gq * qd[i0]
        else:
            lo = min(i0, i1)
            hi = max(i0, i1)
            qab = 0.0
            if lo == hi:
                qab = 2.0
            elif lo == 0 and hi == 2:
                qab = -2.0 * cphi
            elif lo == 1 and hi == 3:
                qab = -2.0
            val = gqq * qd[i0] * qd[i1] + gq * qab
        val = val * wt
        for im in range(nm):
            vc = val * cmv[im]
            out[im, idd, 0] += vc
            out[im, idd, 1] += vc * cphi
            out[im, idd, 2] += val * smv[im]


@numba.njit(cache=True)
def _one_pair(r, z, rp, zp, k, modes, dset, gx, gw, out):
    dz = z - zp
    dr = r - rp
    d2 = dr * dr + dz * dz
    rr = r * rp
    nm = modes.shape[0]
    nd = dset.shape[0]
    for im in range(nm):
        for idd in range(nd):
            for c in range(3):
                out[im, idd, c] = np.nan if d2 == 0.0 else 0.0
    if d2 == 0.0:
        return
    mmax = 0.0
    for im in range(nm):
        mmax = max(mmax, abs(modes[im]))
    ik = 1j * k
    qd = np.zeros(4)
    cmv = np.zeros(nm)
    smv = np.zeros(nm)
    a = np.inf
    if rr > 0.0:
        ratio = d2 / (2.0 * rr)
        a = np.log1p(ratio + np.sqrt(ratio * (ratio + 2.0)))
    if a >= _TRAP_MIN_A:
        # periodic trapezoid rule: error ~ exp(-N a') times the growth of
        # exp(i m phi) and exp(ikR) in the strip |Im phi| < a'
        ap = min(0.8 * a, 3.0)
        grow = abs(k) * 2.0 * np.sqrt(rr) * np.cosh(0.5 * ap) + abs(k.imag) * np.sqrt(d2)
        n = int(np.ceil((_TRAP_DIGITS + grow) / ap + mmax + 1.0))
        nhalf = max((n + 1) // 2, 4)
        for j in range(nhalf + 1):
            wt = 1.0 / nhalf if 0 < j < nhalf else 0.5 / nhalf
            _add_point(np.pi * j / nhalf, wt, dr, dz, d2, r, rp, rr, ik, modes, dset, qd,
                       cmv, smv, out)
        return
    # phi = a sinh(u) on [0, asinh(pi / a)]: Gauss panels of bounded width in u,
    # narrowed where the oscillation of exp(i m phi) and exp(ikR) demands it
    omega = mmax + 2.0 + abs(k) * min(r, rp)
    upper = np.arcsinh(np.pi / a)
    u = 0.0
    while u < upper:
        h = min(_MAX_U_PANEL, upper - u)
        h = min(h, max(_PHASE_PER_PANEL / (omega * a * np.cosh(u + h)), 1e-3))
        for iq in range(gx.shape[0]):
            uq = u + gx[iq] * h
            wt = h * gw[iq] * a * np.cosh(uq) / np.pi
            _add_point(a * np.sinh(uq), wt, dr, dz, d2, r, rp, rr, ik, modes, dset, qd,
                       cmv, smv, out)
        u += h


@numba.njit(cache=True)
def _pairs_kernel(tr, tz, sr, sz, k, modes, dset, gx, gw, out):
    for p in range(tr.shape[0]):
        _one_pair(tr[p], tz[p], sr[p], sz[p], k, modes, dset, gx, gw, out[p])


@numba.njit(cache=True)
def _grid_kernel(tr, tz, sr, sz, k, modes, dset, gx, gw, skip, out):
    for i in range(tr.shape[0]):
        for j in range(sr.shape[0]):
            if skip[i, j]:
                continue
            _one_pair(tr[i], tz[i], sr[j], sz[j], k, modes, dset, gx, gw, out[i, j])


def _prep(k, modes, derivs):
    modes = np.atleast_1d(np.asarray(modes, dtype=np.float64))
    dset = parse_derivs(derivs)
    return complex(k), modes, dset


def modal_kernel_pairs(tr, tz, sr, sz, k, modes, derivs=ORDER0):
    """Kernel tables for matched target/source arrays.

    Returns
    -------
    ndarray, shape (P, n_modes, n_derivs, 3)
        Last axis holds ``(G_m, G_m^cos, G_m^sin)``.  Coincident pairs give NaN.
    """
    k, modes, dset = _prep(k, modes, derivs)
    tr, tz, sr, sz = (np.ascontiguousarray(np.broadcast_to(np.asarray(v, float),
                                                           np.broadcast(tr, tz, sr, sz).shape)).ravel()
                      for v in (tr, tz, sr, sz))
    out = np.zeros((tr.size, modes.size, dset.shape[0], 3), dtype=np.complex128)
    if tr.size:
        _pairs_kernel(tr, tz, sr, sz, k, modes, dset, _GX, _GW, out)
    return out


def modal_kernel_grid(tr, tz, sr, sz, k, modes, derivs=ORDER0, skip=None):
    """Kernel tables for every target/source combination.

    ``skip[i, j]`` marks pairs left at zero (handled by special quadrature).

    Returns
    -------
    ndarray, shape (n_targets, n_sources, n_modes, n_derivs, 3)
    """
    k, modes, dset = _prep(k, modes, derivs)
    tr = np.ascontiguousarray(tr, dtype=float).ravel()
    tz = np.ascontiguousarray(tz, dtype=float).ravel()
    sr = np.ascontiguousarray(sr, dtype=float).ravel()
    sz = np.ascontiguousarray(sz, dtype=float).ravel()
    if skip is None:
        skip = np.zeros((tr.size, sr.size), dtype=np.bool_)
    out = np.zeros((tr.size, sr.size, modes.size, dset.shape[0], 3),
                   dtype=np.complex128)
    if tr.size and sr.size:
        _grid_kernel(tr, tz, sr, sz, k, modes, dset, _GX, _GW,
                     np.ascontiguousarray(skip, dtype=np.bool_), out)
    return out


@dataclass
class ModalKernelValue:
    """Modal kernels at one target/source pair.

    ``table[name]`` holds the ``(G_m, G_m^cos, G_m^sin)`` triple for the
    derivative named ``name`` ("" for the undifferentiated kernel).
    """

    gm: complex
    gm_cos: complex
    gm_sin: complex
    table: dict = field(default_factory=dict)


def eval_modal_kernel(r, z, rp, zp, k, m, derivs=ORDER0):
    """Evaluate ``G_m, G_m^cos, G_m^sin`` and requested derivatives.

    Parameters
    ----------
    r, z : float
        Target cylindrical coordinates.
    rp, zp : float
        Source ring coordinates.
    k : complex
        Wavenumber (``k = 0`` gives the static kernel).
    m : int
        Azimuthal mode.
    derivs : sequence of str
        Derivative names built from ``r, z, r', z'`` (order <= 2), e.g.
        ``("", "r", "zz", "rr'")``.

    Raises
    ------
    SingularEvaluationError
        If the target coincides with the source ring; self interactions
        go through the singular panel rules instead.
    """
    if r == rp and z == zp:
        raise SingularEvaluationError(
            "coincident target and source; use the self-interaction quadrature")
    derivs = tuple(derivs)
    if "" not in derivs:
        derivs = ("",) + derivs
    tab = modal_kernel_pairs(r, z, rp, zp, k, [m], derivs)[0, 0]
    table = {name: tab[i] for i, name in enumerate(derivs)}
    g0 = table[""]
    return ModalKernelValue(g0[0], g0[1], g0[2], table)
