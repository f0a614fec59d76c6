"""Per-mode integral-equation systems for the open cavity and their solution.

Unknowns live on three surfaces: the cavity wall Gamma (magnetic current
``M``), the hemisphere C1 (magnetic current ``M_C1`` and electric current
``J``) and the buffer annulus B (magnetic current ``M_B``).  With the traces

    N_XY = n x curl S_Y   (target X, source Y)
    K_XY = n x (1/ik) curl curl S_Y

and data ``f, g`` (tangential jumps across C1) and ``h`` (tangential
electric field on B and Gamma), the coupled system reads

    M_C1 - N_{C1,G} M                                     = f
    J    - K_{C1,G} M                                     = g
    -M_B/2 + N_{B,G} M                                    = h_B
    -M/2 + N_{G,G} M + N^H_{G,C1} M_C1 - K^H_{G,C1} J + N_{G,B} M_B = h_G

where ``^H`` marks the source surface together with its mirror image in
``z = 0``.  Eliminating the first three rows gives an equation for ``M``
alone.  The low-frequency form rewrites ``K^H_{G,C1} J`` through the charge
``div J / ik = n . curl S_G M + q`` so that no operator carries ``1/k``.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geometry import CavityGeometry, IMAGE_SIGN, PanelMesh, panelize
from .operators import LowFrequencyError, Request, Targets, assemble

logger = logging.getLogger(__name__)

MAGNETIC = IMAGE_SIGN["magnetic"]
ELECTRIC = IMAGE_SIGN["electric"]
CHARGE = IMAGE_SIGN["charge"]


class Formulation(enum.Enum):
    COUPLED = "coupled"
    REDUCED = "reduced"
    LOWFREQ = "lowfreq"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"coupled": cls.COUPLED, "reducedm": cls.REDUCED, "reduced": cls.REDUCED,
                   "lowfreqstable": cls.LOWFREQ, "lowfreq": cls.LOWFREQ}
        try:
            return aliases[str(value).lower().replace("-", "").replace("_", "")]
        except KeyError:
            raise ValueError(f"unknown formulation {value!r}") from None


class SolverError(RuntimeError):
    """Linear solve failed (singular system or residual contract violated)."""


class ModeBudgetError(SolverError):
    """Mode truncation did not converge within the allowed number of modes."""


@dataclass
class MeshConfig:
    """Discretization parameters.

    ``max_panel_length`` caps base panels on every surface (the
    points-per-wavelength rule alone is too coarse at ``k ~ 1``).
    """

    eps_geom: float = 1e-9
    ppw: int = 12
    max_panel_length: float = 0.5
    gamma_panel_length: float | None = None
    near_factor: float = 2.0
    shape_tol: float | None = 1e-13


@dataclass
class SolveConfig:
    k: complex
    formulation: Formulation = Formulation.LOWFREQ
    refine_steps: int = 1
    residual_tol: float = 1e-12

    def __post_init__(self):
        self.formulation = Formulation.parse(self.formulation)
        k = complex(self.k)
        if k == 0:
            raise ValueError("k = 0 is not supported: the representation needs k != 0")
        if k.real <= 0 or k.imag < 0:
            raise ValueError("need Re(k) > 0 and Im(k) >= 0")


class CavityProblem:
    """Meshes for Gamma, B and C1 at a given wavenumber."""

    def __init__(self, geometry: CavityGeometry, k, mesh: MeshConfig | None = None,
                 mesh_k=None):
        self.geometry = geometry
        self.k = complex(k)
        self.mesh_config = mesh or MeshConfig()
        mc = self.mesh_config
        kk = abs(self.k) if mesh_k is None else mesh_k
        gpl = mc.gamma_panel_length or mc.max_panel_length
        self.gamma = panelize(geometry.gamma, kk, mc.eps_geom, mc.ppw, gpl,
                              shape_tol=mc.shape_tol)
        self.buffer = panelize(geometry.buffer, kk, mc.eps_geom, mc.ppw, mc.max_panel_length,
                               shape_tol=mc.shape_tol)
        self.c1 = panelize(geometry.c1, kk, mc.eps_geom, mc.ppw, mc.max_panel_length,
                           shape_tol=mc.shape_tol)
        self.targets = {name: Targets.from_mesh(getattr(self, name))
                        for name in ("gamma", "buffer", "c1")}

    @property
    def n_points(self):
        return self.gamma.n_nodes + self.buffer.n_nodes + self.c1.n_nodes

    @property
    def n_unknowns(self):
        return 2 * (self.gamma.n_nodes + self.buffer.n_nodes + 2 * self.c1.n_nodes)

    def describe(self):
        return {"gamma_nodes": self.gamma.n_nodes, "buffer_nodes": self.buffer.n_nodes,
                "c1_nodes": self.c1.n_nodes, "n_unknowns": self.n_unknowns}


@dataclass
class BoundaryData:
    """Per-mode data in ``(t, e_theta)`` components stacked per surface.

    ``f, g``: tangential E and H jumps (exterior minus interior) on C1;
    ``q``: normal E jump on C1 (equals ``div g / ik``);
    ``h_gamma, h_buffer``: tangential interior E on Gamma and B.
    """

    f: np.ndarray
    g: np.ndarray
    q: np.ndarray
    h_gamma: np.ndarray
    h_buffer: np.ndarray

    def norm(self):
        return float(np.sqrt(sum(np.vdot(v, v).real for v in
                                 (self.f, self.g, self.q, self.h_gamma, self.h_buffer))))

    @classmethod
    def zeros(cls, problem):
        nc, ng, nb = problem.c1.n_nodes, problem.gamma.n_nodes, problem.buffer.n_nodes
        return cls(np.zeros(2 * nc, complex), np.zeros(2 * nc, complex),
                   np.zeros(nc, complex), np.zeros(2 * ng, complex), np.zeros(2 * nb, complex))


@dataclass
class ModeOperators:
    """Operator blocks of one mode (keys documented in :func:`assemble_operators`)."""

    m: int
    k: complex
    blocks: dict
    seconds: float = 0.0


def assemble_operators(problem: CavityProblem, m, formulations=None, near_factor=None):
    """Assemble every operator block needed by the requested formulations.

    Keys: ``N_c1_g, N_b_g, N_g_g, N_g_c1H, N_g_b`` (tangential curl traces),
    ``CC_c1_g`` (``n x curl curl S_G`` on C1), ``U_c1_g`` (``n . curl S_G``
    on C1), ``CC_g_c1H`` (``n x curl curl S^H_C1`` on Gamma), ``S_g_c1H``
    (``n x S^H_C1``) and ``GS_g_c1H`` (``n x grad S^H_C1`` for charges).

    ``m`` may be a sequence of modes (typically ``(j, -j)``), which share
    kernel evaluations; a dict of :class:`ModeOperators` is then returned.
    """
    single = np.ndim(m) == 0
    modes = [int(m)] if single else [int(x) for x in m]
    formulations = {Formulation.parse(f) for f in (formulations or list(Formulation))}
    nf = near_factor or problem.mesh_config.near_factor
    k = problem.k
    t0 = time.perf_counter()
    T = problem.targets
    b = {x: {} for x in modes}

    def put(names, src, tgt, reqs):
        res = assemble(src, tgt, k, modes, reqs, nf)
        for x in modes:
            b[x].update(zip(names, res[x]))

    put(["N_c1_g", "CC_c1_g", "U_c1_g"], problem.gamma, T["c1"],
        [Request("curl", "T"), Request("curlcurl", "T"), Request("curl", "U")])
    put(["N_b_g"], problem.gamma, T["buffer"], [Request("curl", "T")])
    put(["N_g_g"], problem.gamma, T["gamma"], [Request("curl", "T")])
    put(["N_g_b"], problem.buffer, T["gamma"], [Request("curl", "T")])
    reqs = [Request("curl", "T", MAGNETIC)]
    names = ["N_g_c1H"]
    if formulations & {Formulation.COUPLED, Formulation.REDUCED}:
        reqs.append(Request("curlcurl", "T", ELECTRIC))
        names.append("CC_g_c1H")
    if Formulation.LOWFREQ in formulations:
        reqs += [Request("S", "T", ELECTRIC), Request("grad_scalar", "T", CHARGE)]
        names += ["S_g_c1H", "GS_g_c1H"]
    put(names, problem.c1, T["gamma"], reqs)
    dt = (time.perf_counter() - t0) / len(modes)
    logger.info("modes %s: assembled in %.2fs per mode", modes, dt)
    out = {x: ModeOperators(x, k, b[x], dt) for x in modes}
    return out[modes[0]] if single else out


# block -> (rows are tangential, columns are tangential, sign) under m -> -m
_MIRROR = {
    "N_c1_g": (True, True, 1.0), "N_b_g": (True, True, 1.0), "N_g_g": (True, True, 1.0),
    "N_g_b": (True, True, 1.0), "N_g_c1H": (True, True, 1.0),
    "CC_c1_g": (True, True, -1.0), "CC_g_c1H": (True, True, -1.0),
    "S_g_c1H": (True, True, -1.0), "U_c1_g": (False, True, -1.0),
    "GS_g_c1H": (True, False, -1.0),
}


def _theta_flip(n, tangential):
    if not tangential:
        return np.ones(n)
    return np.concatenate([np.ones(n // 2), -np.ones(n // 2)])


def mirror_operators(ops: ModeOperators) -> ModeOperators:
    """Operators of mode ``-m`` from those of ``m``.

    Reflecting ``theta -> -theta`` flips the ``e_theta`` components, so every
    block at ``-m`` is a sign pattern applied to the block at ``m``.
    """
    blocks = {}
    for key, A in ops.blocks.items():
        rows, cols, sign = _MIRROR[key]
        blocks[key] = sign * (_theta_flip(A.shape[0], rows)[:, None] * A
                              * _theta_flip(A.shape[1], cols)[None, :])
    return ModeOperators(-ops.m, ops.k, blocks, 0.0)


def system_matrix(ops: ModeOperators, formulation):
    """Dense system matrix of the chosen formulation."""
    formulation = Formulation.parse(formulation)
    b = ops.blocks
    ik = 1j * ops.k
    ng = b["N_g_g"].shape[0]
    I_g = np.eye(ng)
    pair = b["N_g_c1H"] @ b["N_c1_g"] + 2.0 * b["N_g_b"] @ b["N_b_g"] + b["N_g_g"] - 0.5 * I_g
    if formulation is Formulation.REDUCED:
        if ops.k == 0:
            raise LowFrequencyError("reduced equation divides by k")
        return pair - (b["CC_g_c1H"] / ik) @ (b["CC_c1_g"] / ik)
    if formulation is Formulation.LOWFREQ:
        return pair + b["S_g_c1H"] @ b["CC_c1_g"] - b["GS_g_c1H"] @ b["U_c1_g"]
    # coupled block system, unknowns [M, M_C1, J, M_B]
    nc = b["N_c1_g"].shape[0]
    nb = b["N_b_g"].shape[0]
    n = ng + 2 * nc + nb
    A = np.zeros((n, n), complex)
    sg, sc, sj, sb = (slice(0, ng), slice(ng, ng + nc), slice(ng + nc, ng + 2 * nc),
                      slice(ng + 2 * nc, n))
    A[sc, sg] = -b["N_c1_g"]
    A[sc, sc] = np.eye(nc)
    A[sj, sg] = -b["CC_c1_g"] / ik
    A[sj, sj] = np.eye(nc)
    A[sb, sg] = b["N_b_g"]
    A[sb, sb] = -0.5 * np.eye(nb)
    A[sg, sg] = b["N_g_g"] - 0.5 * I_g
    A[sg, sc] = b["N_g_c1H"]
    A[sg, sj] = -b["CC_g_c1H"] / ik
    A[sg, sb] = b["N_g_b"]
    return A


def system_rhs(ops: ModeOperators, formulation, data: BoundaryData):
    formulation = Formulation.parse(formulation)
    b = ops.blocks
    ik = 1j * ops.k
    base = data.h_gamma - b["N_g_c1H"] @ data.f + 2.0 * b["N_g_b"] @ data.h_buffer
    if formulation is Formulation.REDUCED:
        return base + (b["CC_g_c1H"] / ik) @ data.g
    if formulation is Formulation.LOWFREQ:
        return base - ik * (b["S_g_c1H"] @ data.g) + b["GS_g_c1H"] @ data.q
    return np.concatenate([data.h_gamma, data.f, data.g, data.h_buffer])


@dataclass
class ModeSolution:
    """Densities of one mode.

    ``ikJ`` and ``rho_J`` (``div J / ik``) are recovered without dividing by
    ``k``; ``J`` itself is ``ikJ / ik``.
    """

    m: int
    M: np.ndarray
    M_c1: np.ndarray
    M_b: np.ndarray
    ikJ: np.ndarray
    rho_J: np.ndarray
    residual: float
    condition: float | None = None
    t_matgen: float = 0.0
    t_solve: float = 0.0

    def J(self, k):
        return self.ikJ / (1j * k)


def _solve_dense(A, rhs, refine_steps, tol):
    lu = scipy.linalg.lu_factor(A, check_finite=False)
    x = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    bn = np.linalg.norm(rhs) or 1.0
    res = np.linalg.norm(A @ x - rhs) / bn
    for _ in range(refine_steps):
        if res <= tol:
            break
        x = x + scipy.linalg.lu_solve(lu, rhs - A @ x, check_finite=False)
        res = np.linalg.norm(A @ x - rhs) / bn
    return x, res, lu


def condition_estimate(A, lu=None, iters=30, seed=0):
    """Estimate ``||A|| ||A^-1||`` (2-norm) by power iteration on A and A^-1."""
    rng = np.random.default_rng(seed)
    n = A.shape[0]
    lu = lu or scipy.linalg.lu_factor(A, check_finite=False)

    def power(apply, apply_h):
        v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        v /= np.linalg.norm(v)
        s = 0.0
        for _ in range(iters):
            w = apply_h(apply(v))
            s = np.sqrt(np.linalg.norm(w))
            v = w / np.linalg.norm(w)
        return s

    big = power(lambda v: A @ v, lambda v: A.conj().T @ v)
    inv = power(lambda v: scipy.linalg.lu_solve(lu, v, check_finite=False),
                lambda v: scipy.linalg.lu_solve(lu, v, trans=2, check_finite=False))
    return big * inv


def recover(ops: ModeOperators, data: BoundaryData, M):
    """Densities on C1 and B from ``M`` by the first three system rows."""
    b = ops.blocks
    ik = 1j * ops.k
    M_c1 = data.f + b["N_c1_g"] @ M
    ikJ = ik * data.g + b["CC_c1_g"] @ M
    rho_J = data.q + b["U_c1_g"] @ M
    M_b = 2.0 * (b["N_b_g"] @ M - data.h_buffer)
    return M_c1, ikJ, rho_J, M_b


def solve_mode(ops: ModeOperators, data: BoundaryData, config: SolveConfig,
               estimate_condition=False) -> ModeSolution:
    """Solve one mode and recover all densities."""
    t0 = time.perf_counter()
    A = system_matrix(ops, config.formulation)
    rhs = system_rhs(ops, config.formulation, data)
    x, res, lu = _solve_dense(A, rhs, config.refine_steps, config.residual_tol)
    if not np.all(np.isfinite(x)):
        raise SolverError(f"mode {ops.m}: solve produced non-finite values "
                          f"(condition ~ {condition_estimate(A, lu):.2e})")
    cond = condition_estimate(A, lu) if estimate_condition else None
    ng = ops.blocks["N_g_g"].shape[0]
    M = x[:ng]
    M_c1, ikJ, rho_J, M_b = recover(ops, data, M)
    if config.formulation is Formulation.COUPLED:
        nc = ops.blocks["N_c1_g"].shape[0]
        M_c1 = x[ng:ng + nc]
        ikJ = 1j * ops.k * x[ng + nc:ng + 2 * nc]
        M_b = x[ng + 2 * nc:]
    dt = time.perf_counter() - t0
    if res > config.residual_tol:
        logger.warning("mode %d: relative residual %.2e above %.0e", ops.m, res,
                       config.residual_tol)
    return ModeSolution(ops.m, M, M_c1, M_b, ikJ, rho_J, res, cond, ops.seconds, dt)


@dataclass
class ScatterSolution:
    """Solved densities for all modes plus run metadata."""

    problem: CavityProblem
    config: SolveConfig
    modes: dict = field(default_factory=dict)
    n_modes: int = 0

    @property
    def k(self):
        return self.problem.k

    @property
    def t_matgen(self):
        return sum(s.t_matgen for s in self.modes.values())

    @property
    def t_solve(self):
        return sum(s.t_solve for s in self.modes.values())


def mode_sequence():
    """0, 1, -1, 2, -2, ..."""
    yield 0
    m = 1
    while True:
        yield m
        yield -m
        m += 1


def truncation_modes(norms_by_mode, eps):
    """Modes kept by the two-consecutive-orders rule.

    ``norms_by_mode`` maps m to the data norm.  Orders ``|m|`` are scanned
    upward; the scan stops after two consecutive orders whose largest
    relative norm is below ``eps``, and those two orders are dropped.
    Returns the kept modes (or ``None`` if the rule has not triggered).
    """
    total = np.sqrt(sum(v * v for v in norms_by_mode.values())) or 1.0
    top = max(abs(m) for m in norms_by_mode)
    small = 0
    for order in range(top + 1):
        vals = [norms_by_mode.get(s * order, 0.0) for s in ((1,) if order == 0 else (1, -1))]
        if max(vals) / total < eps:
            small += 1
            if small == 2:
                keep = order - 2
                return sorted((m for m in norms_by_mode if abs(m) <= keep),
                              key=lambda m: (abs(m), -m))
        else:
            small = 0
    return None


def _mode_groups(modes, orders_per_group=1, max_modes=None):
    """Batch modes so that each batch shares one kernel evaluation pass.

    Each mode is paired with its negative; ``orders_per_group`` consecutive
    orders ``|m|`` go into one batch, capped at ``max_modes`` modes.
    """
    by_order = {}
    for m in modes:
        by_order.setdefault(abs(m), []).append(m)
    cap = max_modes or 2 * orders_per_group
    groups, cur, n_orders = [], [], 0
    for order in sorted(by_order):
        ms = by_order[order]
        if cur and (n_orders == orders_per_group or len(cur) + len(ms) > cap):
            groups.append(cur)
            cur, n_orders = [], 0
        cur += ms
        n_orders += 1
    if cur:
        groups.append(cur)
    return groups


def _batch_limit(problem, budget_bytes):
    """Modes per batch allowed by a memory budget (dense blocks, system and LU)."""
    n = 2 * problem.gamma.n_nodes
    per_mode = 16 * (4 * n * n + 2 * n * (problem.n_unknowns - n))
    return max(1, int(budget_bytes // per_mode))


def resolve_modes(data_for_mode, eps_modes=1e-9, max_order=200, active_modes=None):
    """Modes needed to resolve the data to ``eps_modes`` (see :func:`truncation_modes`).

    Returns
    -------
    modes : list of int
        Kept modes carrying nonzero data, in :func:`mode_sequence` order.
    data : dict
        ``m -> BoundaryData`` for every mode inspected.
    norms : dict
        ``m -> data norm`` for every mode inspected.
    """
    norms, data = {}, {}
    for order in range(max_order + 1):
        for m in ((0,) if order == 0 else (order, -order)):
            if active_modes is not None and m not in active_modes:
                norms[m] = 0.0
                continue
            data[m] = data_for_mode(m)
            norms[m] = data[m].norm()
        kept = truncation_modes(norms, eps_modes)
        if kept is not None:
            return [m for m in kept if norms[m] > 0.0], data, norms
    raise ModeBudgetError(f"data not resolved to {eps_modes} within |m| <= {max_order}; "
                          f"last norms {[norms.get(s * max_order) for s in (1, -1)]}")


def mode_loop(problem: CavityProblem, config: SolveConfig, data_for_mode, modes=None,
              eps_modes=1e-9, max_order=200, active_modes=None, orders_per_group=4,
              memory_budget=1.5e9, use_symmetry=False):
    """Solve modes until the data is resolved to ``eps_modes``.

    Parameters
    ----------
    data_for_mode : callable
        ``m -> BoundaryData``.
    modes : iterable of int, optional
        Fixed mode list (skips truncation).
    active_modes : iterable of int, optional
        Modes that can carry data at all (e.g. a single-mode source); others
        are skipped without solving.
    orders_per_group, memory_budget : int, float
        Batching of modes that share kernel evaluations during assembly;
        the budget (bytes) bounds the dense matrices held at once.
    use_symmetry : bool
        Build the operators of ``-m`` from those of ``m`` by
        :func:`mirror_operators` instead of assembling them.
    """
    sol = ScatterSolution(problem, config)
    if modes is None:
        modes, data, _ = resolve_modes(data_for_mode, eps_modes, max_order, active_modes)
    else:
        modes = list(modes)
        data = {m: data_for_mode(m) for m in modes}
    for group in _mode_groups(modes, orders_per_group, _batch_limit(problem, memory_budget)):
        if use_symmetry:
            base = sorted({abs(m) for m in group})
            ops = assemble_operators(problem, base, [config.formulation])
            ops.update({-m: mirror_operators(ops[m]) for m in base if m})
        else:
            ops = assemble_operators(problem, group, [config.formulation])
        for m in group:
            sol.modes[m] = solve_mode(ops[m], data[m], config)
        del ops
    sol.n_modes = len(modes) if modes else 0
    return sol
