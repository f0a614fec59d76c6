"""Panel quadrature rules.

Three engines live here:

* Gauss-Legendre panel rules (the Nystrom nodes on every panel),
* a generalized Gaussian rule for integrands ``phi(s) + log|s - s0| psi(s)``
  used for self-interactions on a panel,
* adaptive Gauss-Legendre integration, plus the closeness-graded composite
  rules used for nearly singular panel interactions.

The log rule is tabulated once (``data/log_rule.npz``) by
:func:`build_log_rule` and validated against analytic moments; see
:func:`regenerate_log_rule`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.optimize

logger = logging.getLogger(__name__)

PANEL_ORDER = 10
NEAR_ORDER = 12
LOG_RULE_TERMS = 16
LOG_RULE_FILE = "log_rule.npz"


class QuadratureError(RuntimeError):
    """Raised on contract violations of a quadrature routine."""


class NonConvergenceError(QuadratureError):
    """Adaptive integration hit its depth limit.

    Attributes
    ----------
    estimate : complex or ndarray
        Best available value of the integral.
    error : float
        Estimated absolute error of ``estimate``.
    """

    def __init__(self, message, estimate, error):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


@dataclass(frozen=True)
class PanelRule:
    """Quadrature rule on the reference interval [-1, 1]."""

    nodes: np.ndarray
    weights: np.ndarray

    def mapped(self, a, b):
        """Nodes and weights affinely mapped onto ``[a, b]``."""
        half = 0.5 * (b - a)
        return a + half * (self.nodes + 1.0), half * self.weights

    def integrate(self, f, a=-1.0, b=1.0):
        x, w = self.mapped(a, b)
        return np.tensordot(w, f(x), axes=(0, 0))


@lru_cache(maxsize=None)
def gauss_legendre(n: int = PANEL_ORDER) -> PanelRule:
    """``n``-point Gauss-Legendre rule on [-1, 1]."""
    if n < 1:
        raise QuadratureError(f"need at least one node, got {n}")
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return PanelRule(x, w)


# ---------------------------------------------------------------------------
# interpolation on panel nodes
# ---------------------------------------------------------------------------

def _bary_weights(x):
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / np.prod(diff, axis=1)


def lagrange_matrix(x_nodes, x_eval):
    """Matrix ``L`` with ``L[i, j] = l_j(x_eval[i])`` (barycentric form)."""
    x_nodes = np.asarray(x_nodes, dtype=float)
    x_eval = np.atleast_1d(np.asarray(x_eval, dtype=float))
    bw = _bary_weights(x_nodes)
    diff = x_eval[:, None] - x_nodes[None, :]
    exact = diff == 0.0
    diff[exact] = 1.0
    terms = bw[None, :] / diff
    out = terms / terms.sum(axis=1, keepdims=True)
    rows = exact.any(axis=1)
    if rows.any():
        out[rows] = exact[rows].astype(float)
    return out


def diff_matrix(x_nodes):
    """Spectral differentiation matrix on ``x_nodes``."""
    x = np.asarray(x_nodes, dtype=float)
    bw = _bary_weights(x)
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    D = (bw[None, :] / bw[:, None]) / diff
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))
    return D


# ---------------------------------------------------------------------------
# log-singular rules
# ---------------------------------------------------------------------------

def _candidate_rule(levels=80, n=20):
    """Dyadically graded composite rule on [0, 1], exact enough for log u."""
    g = gauss_legendre(n)
    xs, ws = [], []
    for j in range(levels):
        x, w = g.mapped(2.0 ** -(j + 1), 2.0 ** -j)
        xs.append(x)
        ws.append(w)
    x, w = g.mapped(0.0, 2.0 ** -levels)
    xs.append(x)
    ws.append(w)
    x = np.concatenate(xs)
    w = np.concatenate(ws)
    order = np.argsort(x)
    return x[order], w[order]


def _log_basis(u, terms):
    """Legendre-in-(2u-1) polynomials and the same times log u."""
    p = np.polynomial.legendre.legvander(2.0 * u - 1.0, terms - 1).T
    return np.vstack([p, p * np.log(u)[None, :]])


def build_log_rule(terms: int = LOG_RULE_TERMS):
    """Build a one-sided rule on [0, 1] for ``phi(u) + log(u) psi(u)``.

    Nodes are picked from a dyadically graded oversampled rule by
    non-negative least squares on the ``2 * terms`` basis moments, which
    yields a sparse rule with positive weights.

    Returns
    -------
    nodes, weights : ndarray
        At most ``2 * terms`` nodes in (0, 1) and their weights.
    """
    xc, wc = _candidate_rule()
    A = _log_basis(xc, terms)
    moments = A @ wc
    y, _ = scipy.optimize.nnls(A * wc[None, :], moments, maxiter=100000)
    sel = y > 0.0
    return xc[sel], (y * wc)[sel]


def _log_rule_path() -> Path:
    return Path(str(resources.files("cavityscat") / "data" / LOG_RULE_FILE))


def log_rule_error(nodes, weights, terms: int = LOG_RULE_TERMS) -> float:
    """Max abs error of the rule on the basis moments (reference: dense rule)."""
    xc, wc = _candidate_rule(levels=100, n=24)
    exact = _log_basis(xc, terms) @ wc
    return float(np.max(np.abs(_log_basis(nodes, terms) @ weights - exact)))


def regenerate_log_rule(terms: int = LOG_RULE_TERMS, path=None) -> float:
    """Rebuild the tabulated log rule, validate it, and write it to disk."""
    nodes, weights = build_log_rule(terms)
    err = log_rule_error(nodes, weights, terms)
    if err > 1e-13:
        raise QuadratureError(f"log rule validation failed: error {err:.2e}")
    path = Path(path) if path is not None else _log_rule_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, nodes=nodes, weights=weights, terms=terms, error=err)
    load_log_rule.cache_clear()
    logger.info("wrote %s (%d nodes, moment error %.2e)", path, nodes.size, err)
    return err


@lru_cache(maxsize=None)
def load_log_rule():
    """Tabulated one-sided log rule on [0, 1] (built on first use if absent)."""
    path = _log_rule_path()
    try:
        data = np.load(path)
        return data["nodes"].copy(), data["weights"].copy()
    except (FileNotFoundError, OSError):
        logger.warning("log rule table missing; building it in memory")
        return build_log_rule()


def singular_panel_rule(t0, a=-1.0, b=1.0):
    """Auxiliary rule on ``[a, b]`` for a log singularity at ``t0``.

    Each side of ``t0`` of length ``L`` is split as ``[0, L/4]`` (log rule)
    plus ``[L/4, L/2]`` and ``[L/2, L]`` (Gauss-Legendre).
    """
    if not a <= t0 <= b:
        raise QuadratureError(f"target {t0} outside interval [{a}, {b}]")
    ln, lw = load_log_rule()
    g = gauss_legendre(NEAR_ORDER)
    xs, ws = [], []
    for sign, length in ((-1.0, t0 - a), (1.0, b - t0)):
        if length <= 0.0:
            continue
        q = 0.25 * length
        xs.append(t0 + sign * q * ln)
        ws.append(q * lw)
        for lo, hi in ((0.25, 0.5), (0.5, 1.0)):
            x, w = g.mapped(lo * length, hi * length)
            xs.append(t0 + sign * x)
            ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


def integrate_log_singular(f_smooth, f_logcoef, s_target, interval):
    """Integrate ``f_smooth(s) + log|s - s_target| f_logcoef(s)`` over ``interval``.

    Either callable may be ``None`` (treated as zero).
    """
    a, b = interval
    x, w = singular_panel_rule(s_target, a, b)
    total = 0.0
    if f_smooth is not None:
        total = total + w @ np.asarray(f_smooth(x))
    if f_logcoef is not None:
        total = total + w @ (np.log(np.abs(x - s_target)) * np.asarray(f_logcoef(x)))
    return total


# ---------------------------------------------------------------------------
# nearly singular panel rules
# ---------------------------------------------------------------------------

def graded_breakpoints(s0, delta, a, b, max_pieces=60):
    """Breakpoints on ``[a, b]`` geometrically graded around ``s0``.

    Pieces adjacent to ``s0`` have length ``delta`` and double outward.
    """
    s0 = min(max(s0, a), b)
    delta = max(delta, (b - a) * 2.0 ** -50)
    pts = [s0]
    h = delta
    x = s0
    while x < b and len(pts) < max_pieces:
        x = min(s0 + h, b)
        pts.append(x)
        h *= 2.0
    x = s0
    h = delta
    left = []
    while x > a and len(left) < max_pieces:
        x = max(s0 - h, a)
        left.append(x)
        h *= 2.0
    pts = np.array(left[::-1] + pts)
    return np.unique(pts)


def near_panel_rule(s0, delta, a, b, n=NEAR_ORDER, min_pieces=2):
    """Composite Gauss rule on ``[a, b]`` for a near singularity at ``s0``.

    ``delta`` is the (parameter-space) distance from the real axis to the
    singularity.  Returns nodes and weights in the parameter of ``[a, b]``.
    """
    bp = graded_breakpoints(s0, delta, a, b)
    if bp.size - 1 < min_pieces:
        bp = np.linspace(a, b, min_pieces + 1)
    g = gauss_legendre(n)
    lo = bp[:-1, None]
    half = 0.5 * (bp[1:, None] - lo)
    x = lo + half * (g.nodes[None, :] + 1.0)
    w = half * g.weights[None, :]
    return x.ravel(), w.ravel()


# ---------------------------------------------------------------------------
# adaptive integration
# ---------------------------------------------------------------------------

def adaptive_integrate(f, a, b, tol=1e-12, abs_floor=1e-15, n=10, max_depth=50,
                       max_intervals=100000):
    """Adaptive Gauss-Legendre integration of ``f`` over ``[a, b]``.

    Each subinterval compares an ``n``-point and a ``2n``-point estimate and
    is bisected until the difference passes
    ``max(tol * |I|, abs_floor) * (length / (b - a))``.  ``f`` may return
    arrays (vectorised over its first axis); errors use the max norm.

    Raises
    ------
    NonConvergenceError
        If ``max_depth`` is exceeded; carries the best estimate.
    """
    lo_rule = gauss_legendre(n)
    hi_rule = gauss_legendre(2 * n)

    def estimates(x0, x1):
        xl, wl = lo_rule.mapped(x0, x1)
        xh, wh = hi_rule.mapped(x0, x1)
        vals = np.asarray(f(np.concatenate([xl, xh])))
        lo = np.tensordot(wl, vals[:n], axes=(0, 0))
        hi = np.tensordot(wh, vals[n:], axes=(0, 0))
        return hi, float(np.max(np.abs(hi - lo)))

    whole, err = estimates(a, b)
    scale = max(float(np.max(np.abs(whole))), 0.0)
    stack = [(a, b, whole, err, 0)]
    total = 0.0
    total_err = 0.0
    failed = False
    count = 0
    length = abs(b - a) if b != a else 1.0
    while stack:
        x0, x1, val, e, depth = stack.pop()
        count += 1
        target = max(tol * scale, abs_floor) * abs(x1 - x0) / length
        if e <= target or depth >= max_depth or count > max_intervals:
            if e > target:
                failed = True
            total = total + val
            total_err += e
            continue
        mid = 0.5 * (x0 + x1)
        left, el = estimates(x0, mid)
        right, er = estimates(mid, x1)
        scale = max(scale, float(np.max(np.abs(left + right))))
        stack.append((x0, mid, left, el, depth + 1))
        stack.append((mid, x1, right, er, depth + 1))
    if failed:
        raise NonConvergenceError(
            f"adaptive quadrature did not converge on [{a}, {b}]", total, total_err)
    return total
