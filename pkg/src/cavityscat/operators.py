"""Dense modal layer-potential matrices.

For a tangential density ``J = J1 t + J2 e_theta`` carried by azimuthal mode
``m`` on a source mesh, the single layer ``S J`` at a target is the mode-``m``
vector with cylindrical components

    c_r     = 2 pi int r' [G^cos t_r' J1 - i G^sin J2] ds'
    c_theta = 2 pi int r' [i G^sin t_r' J1 + G^cos J2] ds'
    c_z     = 2 pi int r' G t_z' J1 ds'

Derived operators (curl, grad-div, curl-curl, tangential and normal traces,
scalar single layer and its gradient) are formed from the target derivatives
of these integrals.

Quadrature:

* far pairs use the source panel's Gauss-Legendre nodes,
* targets on a source panel use the log-singular rule,
* targets within ``near_factor`` panel lengths of a source panel use the
  graded composite rule centred at the closest point on the panel.

Special rules evaluate the kernel at auxiliary points and fold the result
back onto the panel nodes by Lagrange interpolation, so every operator is a
plain matrix acting on nodal density values.

Matrix layout: vector outputs are ordered ``[component][target]`` and
tangential densities ``[component][node]`` with components ``(t, e_theta)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import IMAGE_SIGN, PanelMesh
from .kernels import modal_kernel_grid, modal_kernel_pairs
from .quadrature import (gauss_legendre, lagrange_matrix, near_panel_rule,
                         singular_panel_rule, diff_matrix)

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
NEAR_FACTOR = 2.0
_DERIVS = {0: ("",), 1: ("", "r", "z"), 2: ("", "r", "z", "rr", "rz", "zz")}
_MAX_BLOCK = 3_000_000  # kernel table entries per target chunk
_AUX_CHUNK = 20_000
AXIS_TOL = 1e-8    # targets closer to the axis use the r -> 0 limit
AXIS_STEP = 1e-3   # extrapolation step for that limit


class AssemblyError(RuntimeError):
    """Invalid operator request."""


class LowFrequencyError(AssemblyError):
    """Operator with a 1/k factor requested at k = 0."""


@dataclass
class Targets:
    """Evaluation points, optionally the nodes of a mesh (with frames)."""

    r: np.ndarray
    z: np.ndarray
    normal: np.ndarray | None = None
    tangent: np.ndarray | None = None
    mesh: PanelMesh | None = None

    @classmethod
    def from_mesh(cls, mesh):
        return cls(mesh.r, mesh.z, mesh.normal, mesh.tangent, mesh)

    @classmethod
    def from_points(cls, r, z, normal=None, tangent=None):
        r = np.atleast_1d(np.asarray(r, float))
        z = np.atleast_1d(np.asarray(z, float))
        return cls(r, z, None if normal is None else np.asarray(normal, float),
                   None if tangent is None else np.asarray(tangent, float))

    @property
    def size(self):
        return self.r.size


@dataclass(frozen=True)
class Request:
    """One operator to assemble.

    Parameters
    ----------
    kind : {"S", "curl", "graddiv", "curlcurl", "scalar", "grad_scalar"}
    trace : {None, "T", "U"}
        ``"T"`` takes ``n x`` in the ``(t, e_theta)`` basis, ``"U"`` takes
        ``n .``; both use the target normals.
    image : float
        Sign of the mirrored-source contribution (0 for none).
    """

    kind: str
    trace: str | None = None
    image: float = 0.0

    @property
    def order(self):
        return {"S": 0, "scalar": 0, "curl": 1, "grad_scalar": 1,
                "graddiv": 2, "curlcurl": 2}[self.kind]

    @property
    def vector(self):
        return self.kind in ("S", "curl", "graddiv", "curlcurl")


# ---------------------------------------------------------------------------
# special-quadrature bookkeeping
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _self_rules(order):
    """Log rules for each node of a reference panel plus interpolation matrices."""
    g = gauss_legendre(order)
    rules = []
    for x0 in g.nodes:
        x, w = singular_panel_rule(x0, -1.0, 1.0)
        rules.append((x, w, lagrange_matrix(g.nodes, x)))
    return rules


def _panel_samples(mesh, nsamp=17):
    """Sample parameters and points along each panel (P, nsamp)."""
    frac = np.linspace(0.0, 1.0, nsamp)
    s = mesh.interval[:, :1] + (mesh.interval[:, 1:] - mesh.interval[:, :1]) * frac
    r = np.empty_like(s)
    z = np.empty_like(s)
    for iseg, seg in enumerate(mesh.curve.segments):
        sel = mesh.seg == iseg
        if sel.any():
            r[sel], z[sel] = seg.point(s[sel])
    return s, r, z


def _closest_points(mesh, panels, tr, tz, s_samp, r_samp, z_samp, iters=60):
    """Closest parameter on each listed panel to each listed target (golden search)."""
    d2 = (r_samp[panels] - tr[:, None]) ** 2 + (z_samp[panels] - tz[:, None]) ** 2
    j = np.argmin(d2, axis=1)
    ns = s_samp.shape[1]
    lo = s_samp[panels, np.clip(j - 1, 0, ns - 1)]
    hi = s_samp[panels, np.clip(j + 1, 0, ns - 1)]
    seg_ids = mesh.seg[panels]
    segs = mesh.curve.segments

    def dist2(s):
        out = np.empty_like(s)
        for iseg in np.unique(seg_ids):
            sel = seg_ids == iseg
            r, z = segs[iseg].point(s[sel])
            out[sel] = (r - tr[sel]) ** 2 + (z - tz[sel]) ** 2
        return out

    gr = 0.5 * (np.sqrt(5.0) - 1.0)
    a, b = lo.copy(), hi.copy()
    c = b - gr * (b - a)
    d = a + gr * (b - a)
    fc, fd = dist2(c), dist2(d)
    for _ in range(iters):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new = np.where(left, b - gr * (b - a), a + gr * (b - a))
        fnew = dist2(new)
        c, d = np.where(left, new, d), np.where(left, c, new)
        fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
    s_best = 0.5 * (a + b)
    # endpoints of the bracket may be closer (closest point at a panel end)
    cand = np.stack([s_best, lo, hi], axis=1)
    dd = np.stack([dist2(cand[:, i]) for i in range(3)], axis=1)
    k = np.argmin(dd, axis=1)
    return cand[np.arange(cand.shape[0]), k], np.sqrt(dd[np.arange(cand.shape[0]), k])


@dataclass
class _SpecialPlan:
    """Auxiliary points for every (target, panel) pair needing special quadrature."""

    target: np.ndarray   # (npairs,)
    panel: np.ndarray    # (npairs,)
    start: np.ndarray    # (npairs + 1,) offsets into the flat aux arrays
    r: np.ndarray
    z: np.ndarray
    tr: np.ndarray       # source tangent at aux points
    tz: np.ndarray
    fac: np.ndarray      # 2 pi r' |g'| w at aux points
    interp: np.ndarray   # (naux, order) Lagrange rows


def _special_plan(src: PanelMesh, tgt: Targets, near_factor: float) -> _SpecialPlan:
    order = src.order
    g = gauss_legendre(order)
    s_samp, r_samp, z_samp = _panel_samples(src)
    # distance from every target to every panel (sampled)
    pairs_t, pairs_p = [], []
    nt = tgt.size
    step = max(1, 2_000_000 // max(1, s_samp.size))
    for i0 in range(0, nt, step):
        sl = slice(i0, min(nt, i0 + step))
        d2 = ((r_samp[None] - tgt.r[sl, None, None]) ** 2
              + (z_samp[None] - tgt.z[sl, None, None]) ** 2).min(axis=2)
        close = d2 < (near_factor * src.panel_length[None, :]) ** 2
        ti, pi = np.nonzero(close)
        pairs_t.append(ti + i0)
        pairs_p.append(pi)
    ti = np.concatenate(pairs_t) if pairs_t else np.zeros(0, int)
    pi = np.concatenate(pairs_p) if pairs_p else np.zeros(0, int)
    self_mask = np.zeros(ti.size, bool)
    if tgt.mesh is src:
        own = src.panel_of_node
        self_mask = own[ti] == pi
        missing = np.setdiff1d(np.arange(nt), ti[self_mask])
        if missing.size:
            ti = np.concatenate([ti, missing])
            pi = np.concatenate([pi, own[missing]])
            self_mask = np.concatenate([self_mask, np.ones(missing.size, bool)])
    order_idx = np.lexsort((pi, ti))
    ti, pi, self_mask = ti[order_idx], pi[order_idx], self_mask[order_idx]

    near = ~self_mask
    s_star = np.zeros(ti.size)
    dist = np.zeros(ti.size)
    if near.any():
        s_star[near], dist[near] = _closest_points(src, pi[near], tgt.r[ti[near]],
                                                   tgt.z[ti[near]], s_samp, r_samp, z_samp)
    selfrules = _self_rules(order)
    xs, ws, Ls, counts = [], [], [], []
    a_all, b_all = src.interval[pi, 0], src.interval[pi, 1]
    for q in range(ti.size):
        a, b = a_all[q], b_all[q]
        half = 0.5 * (b - a)
        if self_mask[q]:
            x, w, L = selfrules[ti[q] - pi[q] * order]
        else:
            x0 = (s_star[q] - a) / half - 1.0
            sp = src.curve.segments[src.seg[pi[q]]].speed(np.array([s_star[q]]))[0]
            delta = max(dist[q] / (sp * half), 1e-15)
            x, w = near_panel_rule(x0, 0.5 * delta, -1.0, 1.0)
            L = None
        xs.append(a + half * (x + 1.0))
        ws.append(half * w)
        Ls.append(L if L is not None else x)
        counts.append(x.size)
    start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    if ti.size == 0:
        empty = np.zeros(0)
        return _SpecialPlan(ti, pi, start, empty, empty, empty, empty, empty,
                            np.zeros((0, order)))
    s_aux = np.concatenate(xs)
    w_aux = np.concatenate(ws)
    seg_of = np.repeat(src.seg[pi], counts)
    r = np.empty_like(s_aux)
    z = np.empty_like(s_aux)
    dr = np.empty_like(s_aux)
    dz = np.empty_like(s_aux)
    for iseg, seg in enumerate(src.curve.segments):
        sel = seg_of == iseg
        if sel.any():
            r[sel], z[sel] = seg.point(s_aux[sel])
            dr[sel], dz[sel] = seg.deriv(s_aux[sel])
    speed = np.hypot(dr, dz)
    fac = TWO_PI * r * speed * w_aux
    # On very small panels a graded aux node can round onto its target; its
    # weight is below roundoff, so it is dropped instead of evaluated.
    trow = np.repeat(ti, counts)
    clash = np.hypot(r - tgt.r[trow], z - tgt.z[trow]) <= 1e-14 * np.maximum(1.0, r)
    fac[clash] = 0.0
    r[clash] += 1.0
    interp = np.empty((s_aux.size, order))
    for q in range(ti.size):
        sl = slice(start[q], start[q + 1])
        if self_mask[q]:
            interp[sl] = Ls[q]
        else:
            interp[sl] = lagrange_matrix(g.nodes, Ls[q])
    return _SpecialPlan(ti, pi, start, r, z, dr / speed, dz / speed, fac, interp)


# ---------------------------------------------------------------------------
# kernel tables
# ---------------------------------------------------------------------------

def kernel_quantities(kern, fac, tr, tz):
    """Six weighted kernel combinations from ``(..., nd, 3)`` kernel triples.

    Order: ``G, G t_z', G^cos, G^cos t_r', G^sin, G^sin t_r'``.
    """
    f = fac[..., None]
    g, gc, gs = kern[..., 0] * f, kern[..., 1] * f, kern[..., 2] * f
    trr = tr[..., None]
    return np.stack([g, g * tz[..., None], gc, gc * trr, gs, gs * trr], axis=-1)


def _tables(src, tgt_sl, tgt, plan, sel_pairs, k, kmodes, order):
    """Kernel quantity tables ``(nt_chunk, Ns, n_modes, nd, 6)`` for a target chunk."""
    derivs = _DERIVS[order]
    r_t, z_t = tgt.r[tgt_sl], tgt.z[tgt_sl]
    nt = r_t.size
    skip = np.zeros((nt, src.n_nodes), bool)
    q_idx = np.nonzero(sel_pairs)[0]
    if q_idx.size:
        rows = plan.target[q_idx] - tgt_sl.start
        cols = (plan.panel[q_idx, None] * src.order + np.arange(src.order)[None, :])
        skip[np.repeat(rows, src.order), cols.ravel()] = True
    kern = modal_kernel_grid(r_t, z_t, src.r, src.z, k, kmodes, derivs, skip=skip)
    fac = TWO_PI * src.r * src.weights
    tab = kernel_quantities(kern, fac[None, :, None], src.tangent[None, :, 0, None],
                            src.tangent[None, :, 1, None])
    if q_idx.size == 0:
        return tab
    # aux-point contributions, grouped in chunks of pairs
    i0 = 0
    while i0 < q_idx.size:
        i1 = i0
        while i1 < q_idx.size and plan.start[q_idx[i1] + 1] - plan.start[q_idx[i0]] < _AUX_CHUNK:
            i1 += 1
        i1 = max(i1, i0 + 1)
        qs = q_idx[i0:i1]
        lo, hi = plan.start[qs[0]], plan.start[qs[-1] + 1]
        counts = plan.start[qs + 1] - plan.start[qs]
        trow = np.repeat(plan.target[qs], counts)
        kern_aux = modal_kernel_pairs(tgt.r[trow], tgt.z[trow], plan.r[lo:hi], plan.z[lo:hi],
                                      k, kmodes, derivs)
        vals = kernel_quantities(kern_aux, plan.fac[lo:hi, None], plan.tr[lo:hi, None],
                                 plan.tz[lo:hi, None])
        contrib = vals[..., None] * plan.interp[lo:hi, None, None, None, :]
        summed = np.add.reduceat(contrib, plan.start[qs] - lo, axis=0)
        for n, q in enumerate(qs):
            row = plan.target[q] - tgt_sl.start
            cols = slice(plan.panel[q] * src.order, (plan.panel[q] + 1) * src.order)
            tab[row, cols] = np.moveaxis(summed[n], -1, 0)
        i0 = i1
    return tab


# ---------------------------------------------------------------------------
# differential operators on tables
# ---------------------------------------------------------------------------

def _vector_parts(tab):
    """Potential components ``V[d]`` with shape (nt, 3, Ns, 2) per derivative."""
    out = []
    for d in range(tab.shape[2]):
        q = tab[:, :, d, :]
        nt, ns = q.shape[:2]
        V = np.zeros((nt, 3, ns, 2), complex)
        V[:, 0, :, 0] = q[..., 3]
        V[:, 0, :, 1] = -1j * q[..., 4]
        V[:, 1, :, 0] = 1j * q[..., 5]
        V[:, 1, :, 1] = q[..., 2]
        V[:, 2, :, 0] = q[..., 1]
        out.append(V)
    return out


def _curl(V, Vr, Vz, m, r):
    ir = (1.0 / r)[:, None, None]
    out = np.empty_like(V)
    out[:, 0] = 1j * m * ir * V[:, 2] - Vz[:, 1]
    out[:, 1] = Vz[:, 0] - Vr[:, 2]
    out[:, 2] = ir * V[:, 1] + Vr[:, 1] - 1j * m * ir * V[:, 0]
    return out


def _graddiv(V, Vr, Vz, Vrr, Vrz, Vzz, m, r):
    ir = (1.0 / r)[:, None, None]
    out = np.empty_like(V)
    out[:, 0] = (-ir**2 * V[:, 0] + ir * Vr[:, 0] + Vrr[:, 0]
                 - 1j * m * ir**2 * V[:, 1] + 1j * m * ir * Vr[:, 1] + Vrz[:, 2])
    div = ir * V[:, 0] + Vr[:, 0] + 1j * m * ir * V[:, 1] + Vz[:, 2]
    out[:, 1] = 1j * m * ir * div
    out[:, 2] = ir * Vz[:, 0] + Vrz[:, 0] + 1j * m * ir * Vz[:, 1] + Vzz[:, 2]
    return out


def _scalar_grad(g, gr, gz, m, r):
    return np.stack([gr, 1j * m / r[:, None] * g, gz], axis=1)


def tangential_trace(vec, normal, tangent):
    """``n x v`` in the ``(t, e_theta)`` basis; ``vec`` has shape (nt, 3, ...)."""
    nr, nz = normal[:, 0], normal[:, 1]
    tr, tz = tangent[:, 0], tangent[:, 1]
    ex = (slice(None),) + (None,) * (vec.ndim - 2)
    t_comp = vec[:, 1] * (tz * nr - tr * nz)[ex]
    th_comp = nz[ex] * vec[:, 0] - nr[ex] * vec[:, 2]
    return np.stack([t_comp, th_comp], axis=1)


def normal_trace(vec, normal):
    ex = (slice(None),) + (None,) * (vec.ndim - 2)
    return normal[:, 0][ex] * vec[:, 0] + normal[:, 1][ex] * vec[:, 2]


def apply_request(req, tabs, m, k, r_t, normal, tangent):
    """Rows of one request for a target chunk."""
    if req.vector:
        V = _vector_parts(tabs)
        if req.kind == "S":
            out = V[0]
        elif req.kind == "curl":
            out = _curl(V[0], V[1], V[2], m, r_t)
        else:
            out = _graddiv(*V, m, r_t)
            if req.kind == "curlcurl":
                out = out + k * k * V[0]
    else:
        g = tabs[..., 0]
        if req.kind == "scalar":
            out = g[:, :, 0]
        else:
            out = _scalar_grad(g[:, :, 0], g[:, :, 1], g[:, :, 2], m, r_t)
    if req.trace == "T":
        if req.kind == "scalar":
            raise AssemblyError("tangential trace of a scalar")
        out = tangential_trace(out, normal, tangent)
    elif req.trace == "U":
        if req.kind == "scalar":
            raise AssemblyError("normal trace of a scalar")
        out = normal_trace(out, normal)
    return out


def _mode_table(tab, idx, negative):
    """Select one mode from multi-mode tables; ``-m`` flips the ``G^sin`` entries."""
    t = tab[:, :, idx]
    if negative:
        t = t.copy()
        t[..., 4:] *= -1.0
    return t


def _subset(tgt: Targets, idx, r=None):
    pick = lambda a: None if a is None else a[idx]
    return Targets(tgt.r[idx] if r is None else r, tgt.z[idx], pick(tgt.normal),
                   pick(tgt.tangent))


def assemble(src: PanelMesh, tgt: Targets, k, m, requests, near_factor=NEAR_FACTOR):
    """Assemble several operators from one source mesh to one target set.

    ``m`` is a mode or a sequence of modes; kernels are evaluated once per
    ``|m|`` since ``G_{-m} = G_m``, ``G^cos_{-m} = G^cos_m`` and
    ``G^sin_{-m} = -G^sin_m``.

    Targets on the axis (``r < AXIS_TOL``) get the limit ``r -> 0``: the
    radial and azimuthal components of a mode-``m`` field survive there only
    for ``|m| = 1`` and the axial (or scalar) one only for ``m = 0``.  Those
    components are even in ``r``, so values at ``h`` and ``2h`` are
    extrapolated in ``r^2``; traces are taken after the limit.

    Returns
    -------
    list of ndarray
        One matrix per request (see module docstring for layouts); for a
        sequence of modes, a dict mapping each mode to such a list.
    """
    axis = tgt.r < AXIS_TOL
    if not axis.any():
        return _assemble(src, tgt, k, m, requests, near_factor)
    single = np.ndim(m) == 0
    modes = [int(m)] if single else [int(x) for x in m]
    off = np.flatnonzero(~axis)
    on = np.flatnonzero(axis)
    rest = _assemble(src, _subset(tgt, off), k, modes, requests, near_factor) if off.size else None
    on_tgt = _subset(tgt, on, np.zeros(on.size))
    plain = [Request(req.kind, None, req.image) for req in requests]
    near, far = (_assemble(src, _subset(tgt, on, np.full(on.size, f * AXIS_STEP)), k, modes,
                           plain, near_factor) for f in (1.0, 2.0))
    res = {}
    for x in modes:
        mats = []
        for j, req in enumerate(requests):
            lim = (4.0 * near[x][j] - far[x][j]) / 3.0
            c = lim.shape[0] // on.size
            lim = lim.reshape(c, on.size, -1)
            if c == 3:
                lim[:2] *= abs(x) == 1
                lim[2] *= x == 0
            else:
                lim *= x == 0
            lim = lim.reshape(c * on.size, -1)
            if req.trace is not None:
                lim = trace_matrix(lim, on_tgt, req.trace)
            c = lim.shape[0] // on.size
            out = np.empty((c * tgt.size, lim.shape[1]), complex)
            out.reshape(c, tgt.size, -1)[:, on] = lim.reshape(c, on.size, -1)
            if rest is not None:
                out.reshape(c, tgt.size, -1)[:, off] = rest[x][j].reshape(c, off.size, -1)
            mats.append(out)
        res[x] = mats
    return res[modes[0]] if single else res


def _assemble(src, tgt, k, m, requests, near_factor):
    single = np.ndim(m) == 0
    modes = [int(m)] if single else [int(x) for x in m]
    kmodes = np.array(sorted({abs(x) for x in modes}), float)
    pick = {x: (int(np.searchsorted(kmodes, abs(x))), x < 0) for x in modes}
    requests = list(requests)
    order = max(req.order for req in requests)
    need_image = any(req.image for req in requests)
    nd = len(_DERIVS[order])
    if any(req.trace is not None for req in requests) and tgt.normal is None:
        raise AssemblyError("trace requested at targets without normals")
    src_list = [src]
    if need_image:
        src_list.append(src.reflected())
    plans = [_special_plan(s, tgt, near_factor) for s in src_list]
    results = {x: [[] for _ in requests] for x in modes}
    chunk = max(1, _MAX_BLOCK // (src.n_nodes * nd * 6 * kmodes.size))
    for i0 in range(0, tgt.size, chunk):
        sl = slice(i0, min(tgt.size, i0 + chunk))
        tabs = []
        for s, plan in zip(src_list, plans):
            sel = (plan.target >= sl.start) & (plan.target < sl.stop)
            tabs.append(_tables(s, sl, tgt, plan, sel, k, kmodes, order))
        normal = None if tgt.normal is None else tgt.normal[sl]
        tangent = None if tgt.tangent is None else tgt.tangent[sl]
        for x in modes:
            mtabs = [_mode_table(t, *pick[x]) for t in tabs]
            for req, res in zip(requests, results[x]):
                nreq = len(_DERIVS[req.order])
                tab = mtabs[0][:, :, :nreq]
                if req.image:
                    tab = tab + req.image * mtabs[1][:, :, :nreq]
                res.append(apply_request(req, tab, x, k, tgt.r[sl], normal, tangent))
    out = {x: _finish(requests, results[x]) for x in modes}
    return out[modes[0]] if single else out


def _finish(requests, results):
    out = []
    for req, res in zip(requests, results):
        arr = np.concatenate(res, axis=0)
        if arr.ndim == 4:      # (nt, c, ns, 2)
            nt, c, ns, _ = arr.shape
            out.append(arr.transpose(1, 0, 3, 2).reshape(c * nt, 2 * ns))
        elif arr.ndim == 3 and req.vector:   # normal trace (nt, ns, 2)
            nt, ns, _ = arr.shape
            out.append(arr.transpose(0, 2, 1).reshape(nt, 2 * ns))
        elif arr.ndim == 3:    # scalar gradient / its tangential trace (nt, c, ns)
            nt, c, ns = arr.shape
            out.append(arr.transpose(1, 0, 2).reshape(c * nt, ns))
        else:
            out.append(arr)
    return out


# ---------------------------------------------------------------------------
# surface differential operators and edge terms
# ---------------------------------------------------------------------------

def arclength_derivative(mesh: PanelMesh):
    """Block-diagonal matrix of d/ds (arclength) by per-panel spectral differentiation."""
    g = gauss_legendre(mesh.order)
    D = diff_matrix(g.nodes)
    n = mesh.n_nodes
    out = np.zeros((n, n))
    for p in range(mesh.n_panels):
        sl = mesh.panel_nodes(p)
        half = 0.5 * (mesh.interval[p, 1] - mesh.interval[p, 0])
        out[sl, sl] = D / (half * mesh.speed[sl, None])
    return out


def surface_divergence(mesh: PanelMesh, m):
    """Modal surface divergence ``(1/r) d(r J1)/ds + (i m / r) J2`` as an (N, 2N) matrix."""
    Ds = arclength_derivative(mesh)
    ir = 1.0 / mesh.r
    A = ir[:, None] * Ds * mesh.r[None, :]
    return np.hstack([A.astype(complex), np.diag(1j * m * ir)])


def edge_extrapolation(mesh: PanelMesh):
    """Rows extracting ``J . b`` at each free edge of ``mesh``.

    Returns a list of ``(EdgeCircle, row)`` with ``row`` of length ``2N``.
    """
    g = gauss_legendre(mesh.order)
    out = []
    for edge in mesh.edges():
        p = mesh.n_panels - 1 if edge.at_end else 0
        L = lagrange_matrix(g.nodes, np.array([1.0 if edge.at_end else -1.0]))[0]
        # b = +-t at the edge, so J . b = +-J1 there
        row = np.zeros(2 * mesh.n_nodes, complex)
        row[mesh.panel_nodes(p)] = (1.0 if edge.at_end else -1.0) * L
        out.append((edge, row))
    return out


def edge_potential(edge, tgt: Targets, k, m, gradient=True):
    """Line potential ``int_l g sigma dl`` of a modal edge density (per unit sigma).

    Returns shape (nt,) or the gradient (3 * nt,) in ``[component][target]`` order.
    """
    kern = modal_kernel_pairs(tgt.r, tgt.z, edge.r, edge.z, k, [m], _DERIVS[1])[:, 0, :, 0]
    val = TWO_PI * edge.r * kern
    if not gradient:
        return val[:, 0]
    grad = np.stack([val[:, 1], 1j * m / tgt.r * val[:, 0], val[:, 2]], axis=0)
    return grad.reshape(-1)


def edge_gradient_matrix(mesh: PanelMesh, tgt: Targets, k, m, image=0.0):
    """Matrix ``J -> grad S_l (J . b)`` summed over the free edges of ``mesh``.

    With ``image`` = s, the mirrored surface's edge adds ``s`` times the same
    term (its edge circle coincides for edges on ``z = 0``).
    """
    rows = 3 * tgt.size
    out = np.zeros((rows, 2 * mesh.n_nodes), complex)
    for edge, ext in edge_extrapolation(mesh):
        grad = edge_potential(edge, tgt, k, m)
        out += np.outer(grad, ext)
        if image:
            mirrored = type(edge)(edge.r, -edge.z, (edge.binormal[0], -edge.binormal[1]),
                                  edge.at_end)
            out += image * np.outer(edge_potential(mirrored, tgt, k, m), ext)
    return out


def lemma_curlcurl(mesh: PanelMesh, tgt: Targets, k, m, image=0.0, near_factor=NEAR_FACTOR):
    """``(1/ik) curl curl S J`` through the charge decomposition.

    ``-ik S J + grad S (div J / ik) - grad S_l (J . b / ik)``, with the mirrored
    current (sign ``image``) included when requested.  Only first derivatives
    of the kernel appear.
    """
    if k == 0:
        raise LowFrequencyError("the charge decomposition divides by k")
    S, G = assemble(mesh, tgt, k, m, [Request("S", image=image),
                                      Request("grad_scalar", image=image)],
                    near_factor=near_factor)
    div = surface_divergence(mesh, m)
    ik = 1j * k
    edge = edge_gradient_matrix(mesh, tgt, k, m, image=image)
    return -ik * S + (G @ div) / ik - edge / ik


# ---------------------------------------------------------------------------
# trace helpers on assembled vector operators
# ---------------------------------------------------------------------------

def trace_matrix(vec_matrix, tgt: Targets, kind="T"):
    """Apply ``n x`` (kind ``"T"``) or ``n .`` (``"U"``) to a ``(3 nt, cols)`` matrix."""
    nt = tgt.size
    v = vec_matrix.reshape(3, nt, -1).transpose(1, 0, 2)
    if kind == "T":
        out = tangential_trace(v, tgt.normal, tgt.tangent)
        return out.transpose(1, 0, 2).reshape(2 * nt, -1)
    return normal_trace(v, tgt.normal)


def tangential_components(vec, tgt: Targets):
    """Project cylindrical vectors ``(3, nt)`` onto ``(t, e_theta)``, stacked."""
    vec = np.asarray(vec).reshape(3, -1)
    t = tgt.tangent
    return np.concatenate([t[:, 0] * vec[0] + t[:, 1] * vec[2], vec[1]])


def mirror_sign(kind):
    return IMAGE_SIGN[kind]
