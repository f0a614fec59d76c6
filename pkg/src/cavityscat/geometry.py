"""Generating curves of axisymmetric surfaces, panel meshes and reflections.

A surface of revolution is described by its generating curve in the
``(r, z)`` half-plane.  Curves are lists of smooth segments with analytic
parameter maps on ``s in [0, 1]``.  Meshes place 10 Gauss-Legendre nodes on
every panel and refine panels dyadically towards corners.

Orientation: every curve carries a sign so that the unit normal
``orientation * (dz/ds, -dr/ds) / |g'|`` points out of the interior region
(the cavity plus the half-ball under the hemisphere).
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .quadrature import PANEL_ORDER, adaptive_integrate, gauss_legendre

logger = logging.getLogger(__name__)

#: radius of the hemisphere C1 and of the edge circle where it meets z = 0
HEMISPHERE_RADIUS = 2.0


class GeometryError(ValueError):
    """Invalid generating curve."""


class SurfaceLabel(enum.Enum):
    GAMMA = "Gamma"
    BUFFER = "Buffer"
    C1 = "C1"
    C2 = "C2"
    EDGE = "Edge"


# ---------------------------------------------------------------------------
# segments
# ---------------------------------------------------------------------------

class Segment:
    """Smooth arc ``s -> (r(s), z(s))`` for ``s in [0, 1]``."""

    def point(self, s):
        raise NotImplementedError

    def deriv(self, s):
        raise NotImplementedError

    def speed(self, s):
        dr, dz = self.deriv(s)
        return np.hypot(dr, dz)

    def arclength(self, s0=0.0, s1=1.0):
        if s1 == s0:
            return 0.0
        return float(adaptive_integrate(self.speed, s0, s1, tol=1e-14))

    @property
    def length(self):
        if not hasattr(self, "_length"):
            self._length = self.arclength()
        return self._length

    def param_at_length(self, ell):
        """Parameter at which the arclength from ``s = 0`` equals ``ell``."""
        return ell / self.length

    def endpoints(self):
        p = self.point(np.array([0.0, 1.0]))
        return (p[0][0], p[1][0]), (p[0][1], p[1][1])

    def reflected(self):
        return ReflectedSegment(self)


class LineSegment(Segment):
    def __init__(self, p0, p1):
        self.p0 = np.asarray(p0, float)
        self.p1 = np.asarray(p1, float)

    def point(self, s):
        s = np.asarray(s, float)
        return (self.p0[0] + s * (self.p1[0] - self.p0[0]),
                self.p0[1] + s * (self.p1[1] - self.p0[1]))

    def deriv(self, s):
        s = np.asarray(s, float)
        d = self.p1 - self.p0
        return np.full_like(s, d[0]), np.full_like(s, d[1])

    @property
    def length(self):
        return float(np.hypot(*(self.p1 - self.p0)))


class ArcSegment(Segment):
    """Circular arc ``center + radius * (cos a, sin a)``, ``a`` from ``a0`` to ``a1``."""

    def __init__(self, center, radius, a0, a1):
        self.center = np.asarray(center, float)
        self.radius = float(radius)
        self.a0 = float(a0)
        self.a1 = float(a1)

    def point(self, s):
        a = self.a0 + np.asarray(s, float) * (self.a1 - self.a0)
        return self.center[0] + self.radius * np.cos(a), self.center[1] + self.radius * np.sin(a)

    def deriv(self, s):
        a = self.a0 + np.asarray(s, float) * (self.a1 - self.a0)
        da = self.a1 - self.a0
        return -self.radius * da * np.sin(a), self.radius * da * np.cos(a)

    @property
    def length(self):
        return abs(self.radius * (self.a1 - self.a0))


class ParametricSegment(Segment):
    """User-supplied ``point(s)`` and ``deriv(s)`` callables."""

    def __init__(self, point, deriv):
        self._point = point
        self._deriv = deriv

    def point(self, s):
        return self._point(np.asarray(s, float))

    def deriv(self, s):
        return self._deriv(np.asarray(s, float))

    def param_at_length(self, ell):
        if ell <= 0.0:
            return 0.0
        if ell >= self.length:
            return 1.0
        return scipy.optimize.brentq(lambda s: self.arclength(0.0, s) - ell, 0.0, 1.0,
                                     xtol=1e-15)


class ReflectedSegment(Segment):
    """Mirror image of a segment in the plane ``z = 0``."""

    def __init__(self, base):
        self.base = base

    def point(self, s):
        r, z = self.base.point(s)
        return r, -z

    def deriv(self, s):
        dr, dz = self.base.deriv(s)
        return dr, -dz

    @property
    def length(self):
        return self.base.length

    def param_at_length(self, ell):
        return self.base.param_at_length(ell)


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------

@dataclass
class GeneratingCurve:
    """Piecewise smooth generating curve.

    Attributes
    ----------
    label : SurfaceLabel
    segments : list of Segment
        Joined end to start.
    orientation : {+1, -1}
        Sign turning ``(dz/ds, -dr/ds)`` into the exterior normal.
    refine : list of (bool, bool)
        Whether to grade panels towards the start / end of each segment.
    """

    label: SurfaceLabel
    segments: list
    orientation: int = 1
    refine: list = field(default_factory=list)

    def __post_init__(self):
        if not self.refine:
            self.refine = default_refinement(self.segments)

    @property
    def corners(self):
        return [seg.endpoints()[0] for seg in self.segments[1:]]

    @property
    def length(self):
        return sum(seg.length for seg in self.segments)

    def reflected(self, label=SurfaceLabel.C2):
        """Curve mirrored in ``z = 0`` (orientation kept, refinement kept)."""
        return GeneratingCurve(label, [s.reflected() for s in self.segments],
                               self.orientation, list(self.refine))


def _unit_tangent(seg, s):
    dr, dz = seg.deriv(np.array([s]))
    t = np.array([dr[0], dz[0]])
    return t / np.linalg.norm(t)


def default_refinement(segments, axis_tol=1e-12, angle_tol=1e-10):
    """Grade towards corners and towards non-flat axis points.

    A segment end on the axis needs no refinement when the curve crosses the
    axis perpendicularly (the surface is smooth there); a cone tip does.
    Junctions where consecutive tangents agree are smooth and left alone.
    Free ends away from the axis (open surface edges) are refined.
    """
    flags = []
    n = len(segments)
    for i, seg in enumerate(segments):
        (r0, _), (r1, _) = seg.endpoints()
        flags_i = []
        for end, rr in ((0, r0), (1, r1)):
            s = float(end)
            t = _unit_tangent(seg, s)
            nb = i - 1 if end == 0 else i + 1
            if abs(rr) < axis_tol:
                flags_i.append(bool(abs(t[1]) > angle_tol))
            elif 0 <= nb < n:
                tn = _unit_tangent(segments[nb], 1.0 - s)
                flags_i.append(bool(abs(t[0] * tn[1] - t[1] * tn[0]) > angle_tol or t @ tn < 0))
            else:
                flags_i.append(True)
        flags.append(tuple(flags_i))
    return flags


def validate_curve(curve, radius=HEMISPHERE_RADIUS, tol=1e-12):
    """Check positivity of r, continuity, fit under the hemisphere and overlaps."""
    segs = curve.segments
    boxes = []
    for i, seg in enumerate(segs):
        s = np.linspace(0.0, 1.0, 257)
        r, z = seg.point(s)
        if np.min(r) < -tol:
            raise GeometryError(f"segment {i} has r < 0")
        if curve.label is SurfaceLabel.GAMMA and np.max(np.hypot(r, z)) > radius + tol:
            raise GeometryError("cavity does not fit under the hemisphere of radius 2")
        if i > 0:
            prev_end = segs[i - 1].endpoints()[1]
            if np.hypot(prev_end[0] - r[0], prev_end[1] - z[0]) > 1e-12:
                raise GeometryError(f"segments {i - 1} and {i} do not join")
        boxes.append((r.min(), r.max(), z.min(), z.max()))
    for i in range(len(boxes)):
        for j in range(i + 2, len(boxes)):
            a, b = boxes[i], boxes[j]
            if (max(a[0], b[0]) <= min(a[1], b[1]) + tol
                    and max(a[2], b[2]) <= min(a[3], b[3]) + tol):
                raise GeometryError(f"bounding boxes of segments {i} and {j} overlap")


@dataclass
class GeometrySpec:
    """Description of a cavity generating curve.

    ``kind`` is one of ``"rect"`` (params ``depth``, ``radius``),
    ``"flower"``, ``"polygon"`` (params ``vertices``) or ``"segments"``
    (params ``segments``: list of :class:`Segment`).
    """

    kind: str
    params: dict = field(default_factory=dict)


def flower_segment():
    """Smooth cavity with a six-fold ripple; meets the axis at a cone tip."""

    def point(s):
        a = 1.0 - 0.1 * np.sin(6 * np.pi * s)
        return a * np.sin(0.5 * np.pi * s), -a * np.cos(0.5 * np.pi * s)

    def deriv(s):
        a = 1.0 - 0.1 * np.sin(6 * np.pi * s)
        da = -0.6 * np.pi * np.cos(6 * np.pi * s)
        c, sn = np.cos(0.5 * np.pi * s), np.sin(0.5 * np.pi * s)
        return da * sn + 0.5 * np.pi * a * c, -da * c + 0.5 * np.pi * a * sn

    return ParametricSegment(point, deriv)


EXAMPLE3_VERTICES = [(0.0, -0.5), (0.5, -0.5), (0.5, -0.7), (0.25, -0.7),
                     (0.25, -1.0), (1.0, -1.0), (1.0, 0.0)]


def build_curve(spec: GeometrySpec) -> GeneratingCurve:
    """Cavity generating curve (surface Gamma) from a :class:`GeometrySpec`.

    The curve runs from the axis to the rim, where it meets ``z = 0``.
    """
    kind = spec.kind
    p = spec.params
    if kind == "rect":
        depth = float(p.get("depth", 1.0))
        radius = float(p.get("radius", 1.0))
        segs = [LineSegment((0.0, -depth), (radius, -depth)),
                LineSegment((radius, -depth), (radius, 0.0))]
    elif kind == "flower":
        segs = [flower_segment()]
    elif kind == "polygon":
        v = [tuple(map(float, q)) for q in p.get("vertices", EXAMPLE3_VERTICES)]
        if len(v) < 2:
            raise GeometryError("polygon needs at least two vertices")
        segs = [LineSegment(a, b) for a, b in zip(v[:-1], v[1:])]
    elif kind == "segments":
        segs = list(p["segments"])
    else:
        raise GeometryError(f"unknown geometry kind {kind!r}")
    curve = GeneratingCurve(SurfaceLabel.GAMMA, segs, orientation=1)
    validate_curve(curve)
    start, end = segs[0].endpoints()[0], segs[-1].endpoints()[1]
    if abs(start[0]) > 1e-12:
        raise GeometryError("cavity curve must start on the axis")
    if abs(end[1]) > 1e-12 or not 0.0 < end[0] < HEMISPHERE_RADIUS:
        raise GeometryError("cavity curve must end on z = 0 inside the edge circle")
    return curve


def hemisphere_curve(radius=HEMISPHERE_RADIUS, refine_junction=False) -> GeneratingCurve:
    """Quarter circle from the axis ``(0, R)`` to the edge ``(R, 0)``.

    The densities on C1 stay smooth up to the edge circle, so grading there
    is off unless ``refine_junction`` is set.
    """
    seg = ArcSegment((0.0, 0.0), radius, 0.5 * np.pi, 0.0)
    # (dz, -dr) points to the origin on this arc, so flip it outward
    return GeneratingCurve(SurfaceLabel.C1, [seg], orientation=-1,
                           refine=[(False, bool(refine_junction))])


def buffer_curve(rim_radius, radius=HEMISPHERE_RADIUS, refine_junction=False) -> GeneratingCurve:
    """Annulus in ``z = 0`` between the cavity rim and the edge circle."""
    seg = LineSegment((rim_radius, 0.0), (radius, 0.0))
    return GeneratingCurve(SurfaceLabel.BUFFER, [seg], orientation=1,
                           refine=[(True, bool(refine_junction))])


@dataclass
class EdgeCircle:
    """Circle where a surface ends, with outward bi-normal ``b`` in (r, z)."""

    r: float
    z: float
    binormal: tuple
    at_end: bool = True


@dataclass
class CavityGeometry:
    gamma: GeneratingCurve
    buffer: GeneratingCurve
    c1: GeneratingCurve
    name: str = "custom"

    @property
    def rim_radius(self):
        return self.gamma.segments[-1].endpoints()[1][0]


def make_geometry(spec: GeometrySpec, name="custom", refine_junction=False) -> CavityGeometry:
    gamma = build_curve(spec)
    rim = gamma.segments[-1].endpoints()[1][0]
    return CavityGeometry(gamma, buffer_curve(rim, refine_junction=refine_junction),
                          hemisphere_curve(refine_junction=refine_junction), name)


NAMED_GEOMETRIES = {
    "example1": GeometrySpec("rect", {"depth": 1.0, "radius": 1.0}),
    "example2": GeometrySpec("flower"),
    "example3": GeometrySpec("polygon", {"vertices": EXAMPLE3_VERTICES}),
}


def named_geometry(name: str, refine_junction=False) -> CavityGeometry:
    try:
        spec = NAMED_GEOMETRIES[name]
    except KeyError:
        raise GeometryError(f"unknown geometry {name!r}; choose from {sorted(NAMED_GEOMETRIES)}")
    return make_geometry(spec, name, refine_junction)


# ---------------------------------------------------------------------------
# panel meshes
# ---------------------------------------------------------------------------

@dataclass
class PanelMesh:
    """Gauss-Legendre panel discretization of a generating curve.

    Node ``j`` of panel ``p`` has flat index ``p * order + j``.

    Attributes
    ----------
    seg : (P,) int
        Segment index of each panel.
    interval : (P, 2) float
        Parameter interval of each panel in its segment.
    level : (P,) int
        Dyadic refinement level (0 for base panels).
    panel_length : (P,) float
        Arclength of each panel.
    s : (N,) float
        Node parameters.
    r, z : (N,) float
        Node coordinates.
    tangent, normal : (N, 2) float
        Unit tangent ``(t_r, t_z)`` and exterior normal ``(n_r, n_z)``.
    weights : (N,) float
        Arclength quadrature weights (without the ``2 pi r`` factor).
    """

    curve: GeneratingCurve
    seg: np.ndarray
    interval: np.ndarray
    level: np.ndarray
    panel_length: np.ndarray
    s: np.ndarray
    r: np.ndarray
    z: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    weights: np.ndarray
    speed: np.ndarray
    order: int = PANEL_ORDER

    @property
    def label(self):
        return self.curve.label

    @property
    def n_panels(self):
        return self.seg.size

    @property
    def n_nodes(self):
        return self.r.size

    @property
    def panel_of_node(self):
        return np.repeat(np.arange(self.n_panels), self.order)

    def panel_nodes(self, p):
        return slice(p * self.order, (p + 1) * self.order)

    def panel_endpoints(self, p):
        seg = self.curve.segments[self.seg[p]]
        r, z = seg.point(self.interval[p])
        return np.stack([r, z], axis=1)

    def reflected(self, label=SurfaceLabel.C2):
        """Mirror image in ``z = 0`` sharing panel structure."""
        t = self.tangent * np.array([1.0, -1.0])
        nrm = self.normal * np.array([1.0, -1.0])
        return PanelMesh(self.curve.reflected(label), self.seg, self.interval, self.level,
                         self.panel_length, self.s, self.r, -self.z, t, nrm, self.weights,
                         self.speed, self.order)

    def edges(self):
        """Free edges (ends off the axis) with outward bi-normals."""
        out = []
        segs = self.curve.segments
        start, end = segs[0].endpoints()[0], segs[-1].endpoints()[1]
        if np.hypot(start[0] - end[0], start[1] - end[1]) < 1e-12:
            return out
        for seg, s, sign in ((segs[0], 0.0, -1.0), (segs[-1], 1.0, 1.0)):
            r, z = seg.point(np.array([s]))
            if r[0] > 1e-12:
                t = _unit_tangent(seg, s)
                out.append(EdgeCircle(float(r[0]), float(z[0]), tuple(sign * t), s == 1.0))
        return out


def base_panel_count(length, k, ppw=12, order=PANEL_ORDER, max_panel_length=None):
    """Number of uniform panels giving ``ppw`` points per wavelength.

    Wavenumbers below 1 use the ``k = 1`` sizing.
    """
    kk = max(abs(k), 1.0)
    h = order * 2 * np.pi / (ppw * kk)
    if max_panel_length is not None:
        h = min(h, max_panel_length)
    return max(1, int(np.ceil(length / h - 1e-12)))


def _uniform_cuts(seg, npan):
    L = seg.length
    cuts = [seg.param_at_length(L * i / npan) for i in range(npan + 1)]
    cuts[0], cuts[-1] = 0.0, 1.0
    return cuts


def _resolves_shape(seg, cuts, rule, tol=1e-13):
    """Whether the panel rule integrates the arclength of every base panel to ``tol``."""
    if isinstance(seg, (LineSegment, ArcSegment)):
        return True
    for a, b in zip(cuts[:-1], cuts[1:]):
        half = 0.5 * (b - a)
        approx = half * np.dot(rule.weights, seg.speed(a + half * (rule.nodes + 1.0)))
        if abs(approx - seg.arclength(a, b)) > tol * seg.length:
            return False
    return True


def _refine_intervals(seg, a, b, at_start, at_end, eps_geom):
    """Split ``[a, b]`` dyadically towards its flagged ends."""
    pieces = [(a, b, 0)]
    for flag, left in ((at_start, True), (at_end, False)):
        if not flag:
            continue
        idx = 0 if left else len(pieces) - 1
        lo, hi, lev = pieces.pop(idx)
        inner = []
        while seg.arclength(lo, hi) > eps_geom:
            mid = 0.5 * (lo + hi)
            lev += 1
            if left:
                inner.append((mid, hi, lev))
                hi = mid
            else:
                inner.append((lo, mid, lev))
                lo = mid
        inner.append((lo, hi, lev))
        if left:
            pieces = inner[::-1] + pieces
        else:
            pieces = pieces + inner
    return pieces


def panelize(curve: GeneratingCurve, k, eps_geom=1e-12, ppw=12,
             max_panel_length=None, refine=None, order=PANEL_ORDER,
             shape_tol=1e-13) -> PanelMesh:
    """Panel mesh with uniform base panels and dyadic end refinement.

    Parameters
    ----------
    curve : GeneratingCurve
    k : float or complex
        Wavenumber used for the points-per-wavelength sizing.
    eps_geom : float
        Arclength below which refinement stops.
    ppw : int
        Minimum points per wavelength on base panels.
    max_panel_length : float, optional
        Upper bound on base panel arclength.
    refine : list of (bool, bool), optional
        Overrides ``curve.refine``.
    shape_tol : float or None
        Base panels are added until the panel rule integrates every base
        panel's arclength to this relative accuracy; ``None`` skips the check
        (for convergence studies that fix the panel count).
    """
    if eps_geom <= 0:
        raise GeometryError("eps_geom must be positive")
    flags = refine if refine is not None else curve.refine
    rule = gauss_legendre(order)
    panels = []
    for iseg, seg in enumerate(curve.segments):
        L = seg.length
        npan = base_panel_count(L, k, ppw, order, max_panel_length)
        cuts = _uniform_cuts(seg, npan)
        while shape_tol is not None and not _resolves_shape(seg, cuts, rule, shape_tol):
            npan += max(1, npan // 4)
            cuts = _uniform_cuts(seg, npan)
        for i in range(npan):
            at_start = flags[iseg][0] and i == 0
            at_end = flags[iseg][1] and i == npan - 1
            for lo, hi, lev in _refine_intervals(seg, cuts[i], cuts[i + 1],
                                                 at_start, at_end, eps_geom):
                panels.append((iseg, lo, hi, lev))
    seg_ids = np.array([p[0] for p in panels])
    interval = np.array([[p[1], p[2]] for p in panels])
    level = np.array([p[3] for p in panels])
    half = 0.5 * (interval[:, 1] - interval[:, 0])
    s = (interval[:, :1] + half[:, None] * (rule.nodes[None, :] + 1.0))
    r = np.empty_like(s)
    z = np.empty_like(s)
    dr = np.empty_like(s)
    dz = np.empty_like(s)
    for iseg, seg in enumerate(curve.segments):
        sel = seg_ids == iseg
        r[sel], z[sel] = seg.point(s[sel])
        dr[sel], dz[sel] = seg.deriv(s[sel])
    speed = np.hypot(dr, dz)
    w = speed * half[:, None] * rule.weights[None, :]
    t = np.stack([dr / speed, dz / speed], axis=-1).reshape(-1, 2)
    nrm = curve.orientation * np.stack([t[:, 1], -t[:, 0]], axis=-1)
    mesh = PanelMesh(curve, seg_ids, interval, level, w.sum(axis=1), s.ravel(), r.ravel(),
                     z.ravel(), t, nrm, w.ravel(), speed.ravel(), order)
    logger.debug("panelized %s: %d panels, %d nodes", curve.label.value,
                 mesh.n_panels, mesh.n_nodes)
    return mesh


# ---------------------------------------------------------------------------
# reflections
# ---------------------------------------------------------------------------

def reflect(point):
    """Mirror a point in ``z = 0``; accepts ``(r, z)`` or ``(x, y, z)``."""
    p = np.array(point, dtype=float)
    p[..., -1] *= -1.0
    return p


#: sign applied to the (t, e_theta) components of an image current
IMAGE_SIGN = {"electric": -1.0, "magnetic": 1.0, "charge": -1.0}


def reflect_current(current, kind):
    """Image of a Cartesian current vector under reflection in ``z = 0``.

    Electric currents map ``(j1, j2, j3) -> (-j1, -j2, j3)``, magnetic
    currents ``(m1, m2, m3) -> (m1, m2, -m3)``.  In the reflected frame
    ``(t', e_theta)`` the surface components are multiplied by
    ``IMAGE_SIGN[kind]``.
    """
    c = np.array(current, dtype=complex if np.iscomplexobj(current) else float)
    if kind == "electric":
        c[..., :2] *= -1.0
    elif kind == "magnetic":
        c[..., 2] *= -1.0
    else:
        raise ValueError(f"unknown current kind {kind!r}")
    return c
