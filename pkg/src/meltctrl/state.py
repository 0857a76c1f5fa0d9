"""Per-step state solvers for the temperature / solid-fraction pair.

The semi-discrete state system couples the coercive operator A with a
nodewise complementarity between temperature y and solid fraction xi:

    A y = W xi + B u + load(y_bar - xi_bar),   y >= 0, xi >= 0, y_i*xi_i = 0,

with W the lumped mass.  Production path: primal-dual active set on the
equivalent obstacle problem (finite termination on these SPD systems),
with projected SOR as a fallback.  Two independent oracles are provided:
exhaustive active-set enumeration for small meshes, and the regularized
fixed-point solver built on the clamped-ramp approximation of the
temperature/solid-fraction graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError
from .fem import StateOperators, assemble_operators
from .mesh import build_interval_mesh
from .semilag import AdvectedPair

_SIGN_TOL = 1e-12


@dataclass(frozen=True)
class SolverStats:
    iterations: int
    residual: float
    method: str


@dataclass(frozen=True)
class StateSolution:
    """Temperature, solid fraction and complementarity diagnostics."""

    y: np.ndarray
    xi: np.ndarray
    complementarity_residual: float
    stats: SolverStats

    def __post_init__(self):
        self.y.setflags(write=False)
        self.xi.setflags(write=False)


@dataclass(frozen=True)
class MaxPrincipleReport:
    passed: bool
    worst_y: float
    worst_y_node: int
    worst_xi_low: float
    worst_xi_low_node: int
    worst_xi_high: float
    worst_xi_high_node: int
    tol: float


def heaviside_reg(x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamped-ramp regularization of the phase graph.

    1 for x <= 0, 1 - x/epsilon on [0, epsilon], 0 for x >= epsilon.
    """
    return np.clip(1.0 - np.asarray(x, dtype=float) / epsilon, 0.0, 1.0)


def _validate_admissible(ops: StateOperators, u: np.ndarray,
                         advected: AdvectedPair):
    tol = _SIGN_TOL
    if u.shape != (ops.n_controls,):
        raise ValueError(f"control vector has shape {u.shape}, expected "
                         f"({ops.n_controls},)")
    if np.any(u < -tol * max(1.0, float(np.max(np.abs(u), initial=0.0)))):
        raise ValueError("admissibility violated: control u has negative "
                         "entries on Gamma_C")
    ybar, xibar = advected.y_bar, advected.xi_bar
    if np.any(ybar < -tol * max(1.0, float(np.max(np.abs(ybar))))):
        raise ValueError("admissibility violated: advected temperature "
                         "y_bar has negative entries")
    if np.any(xibar < -tol) or np.any(xibar > 1.0 + tol):
        raise ValueError("admissibility violated: advected solid fraction "
                         "xi_bar leaves [0, 1]")


def _rhs_vector(ops: StateOperators, u: np.ndarray,
                advected: AdvectedPair) -> np.ndarray:
    return ops.B @ u + ops.advected_load(advected.y_bar, advected.xi_bar)


def _finish_solution(ops: StateOperators, advected: AdvectedPair,
                     y_free: np.ndarray, mult_free: np.ndarray,
                     stats: SolverStats) -> StateSolution:
    free = ops.free_mask
    n = ops.n_nodes
    y = np.zeros(n)
    y[free] = np.maximum(y_free, 0.0)
    xi = np.zeros(n)
    xi[free] = np.maximum(mult_free, 0.0) / ops.lumped_mass[free]
    # Dirichlet nodes are pinned at the melting temperature; the local
    # zero-diffusion enthalpy balance there gives xi = xi_bar - y_bar.
    gd = ops.dirichlet_mask
    xi[gd] = np.clip(advected.xi_bar[gd] - advected.y_bar[gd], 0.0, 1.0)
    comp = float(np.sum(ops.lumped_mass * xi * y))
    return StateSolution(y=y, xi=xi, complementarity_residual=comp,
                         stats=stats)


def _lcp_residual(a_ff, b_f, y_f):
    w = a_ff @ y_f - b_f
    return float(np.max(np.abs(np.minimum(y_f, w)), initial=0.0)), w


def solve_state(ops: StateOperators, u: np.ndarray, advected: AdvectedPair,
                tol_comp: float = 1e-10, max_iter: int = 100) -> StateSolution:
    """Solve the complementarity state system for one time step.

    Primal-dual active set on the free-node obstacle problem
    min_{q>=0} 1/2 q^T A q - q^T b; the multiplier, scaled by the
    lumped mass, is the nodal solid fraction.
    """
    u = np.asarray(u, dtype=float)
    _validate_admissible(ops, u, advected)
    free = ops.free_mask
    a_ff = ops.A[free][:, free].tocsc()
    b_f = _rhs_vector(ops, u, advected)[free]
    n_f = b_f.size
    scale = max(1.0, float(np.max(np.abs(b_f), initial=0.0)))
    history = []

    y = np.maximum(spla.splu(a_ff).solve(b_f), 0.0)
    active = y <= 0.0
    res0, w = _lcp_residual(a_ff, b_f, y)
    last_active = None
    for it in range(max_iter):
        res, w = _lcp_residual(a_ff, b_f, y)
        history.append(res)
        if res <= tol_comp * scale:
            stats = SolverStats(it, res, "active-set newton")
            return _finish_solution(ops, advected, y, w, stats)
        active = (w - y) > 0.0
        if last_active is not None and np.array_equal(active, last_active):
            break  # cycling without progress; fall back below
        last_active = active.copy()
        inact = ~active
        y = np.zeros(n_f)
        if np.any(inact):
            sub = a_ff[inact][:, inact].tocsc()
            y[inact] = spla.splu(sub).solve(b_f[inact])

    y, res, sweeps = _projected_sor(a_ff, b_f, y, tol_comp * scale,
                                    max_sweeps=200 * n_f)
    history.append(res)
    if res > tol_comp * scale:
        raise SolverError(
            f"state solver did not converge (residual {res:.3e}, "
            f"tolerance {tol_comp * scale:.3e})", history=history)
    _, w = _lcp_residual(a_ff, b_f, y)
    stats = SolverStats(max_iter + sweeps, res, "projected sor fallback")
    return _finish_solution(ops, advected, y, w, stats)


def _projected_sor(a_ff: sp.csc_matrix, b: np.ndarray, y0: np.ndarray,
                   tol: float, max_sweeps: int, omega: float = 1.5):
    """Projected SOR sweeps for the free-node obstacle problem."""
    a_csr = a_ff.tocsr()
    indptr, indices, data = a_csr.indptr, a_csr.indices, a_csr.data
    diag = a_csr.diagonal()
    y = np.maximum(y0.copy(), 0.0)
    n = b.size
    res = np.inf
    for sweep in range(max_sweeps):
        for i in range(n):
            row = slice(indptr[i], indptr[i + 1])
            ai = data[row] @ y[indices[row]]
            y[i] = max(0.0, y[i] - omega * (ai - b[i]) / diag[i])
        res, _ = _lcp_residual(a_csr, b, y)
        if res <= tol:
            return y, res, sweep + 1
    return y, res, max_sweeps


def solve_state_enumerate(ops: StateOperators, u: np.ndarray,
                          advected: AdvectedPair) -> StateSolution:
    """Exhaustive active-set oracle for meshes with few free nodes.

    Tries all 2^N sign patterns with dense linear algebra and keeps the
    one satisfying every KKT sign condition.  Independent of the
    production solver's code path.
    """
    u = np.asarray(u, dtype=float)
    _validate_admissible(ops, u, advected)
    free = ops.free_mask
    a_dense = ops.A[free][:, free].toarray()
    b_f = _rhs_vector(ops, u, advected)[free]
    n_f = b_f.size
    if n_f > 16:
        raise ValueError(f"enumeration oracle limited to 16 free nodes, "
                         f"got {n_f}")
    tol = 1e-10 * max(1.0, float(np.max(np.abs(b_f), initial=0.0)))
    best = None
    for mask in range(2 ** n_f):
        active = np.array([(mask >> k) & 1 for k in range(n_f)], dtype=bool)
        inact = ~active
        y = np.zeros(n_f)
        if np.any(inact):
            try:
                y[inact] = np.linalg.solve(a_dense[np.ix_(inact, inact)],
                                           b_f[inact])
            except np.linalg.LinAlgError:
                continue
        mult = a_dense @ y - b_f
        if np.all(y >= -tol) and np.all(mult >= -tol) \
                and np.all(np.abs(mult[inact]) <= tol):
            best = (y, mult)
            break
    if best is None:
        raise SolverError("enumeration oracle found no sign-consistent "
                          "active set")
    y, mult = best
    stats = SolverStats(0, float(np.max(np.abs(np.minimum(y, mult)))),
                        "active-set enumeration")
    return _finish_solution(ops, advected, y, mult, stats)


def solve_state_regularized(ops: StateOperators, u: np.ndarray,
                            advected: AdvectedPair, epsilon: float,
                            damping: float = 0.5, tol: float = 1e-10,
                            max_iter: int = 500) -> StateSolution:
    """Solve the ramp-regularized state system A y = W H_eps(y) + b.

    Starts with the damped Picard iteration
    y <- (1-w) y + w A^{-1}(W H_eps(y) + b); that map is expansive for
    small epsilon (its local gain grows like 1/epsilon), so when the
    relative change stalls the solver finishes with semismooth Newton
    on the same piecewise-linear equation, whose Jacobian
    A + (1/eps) W 1_band stays positive definite.
    """
    if not epsilon > 0:
        raise ValueError(f"regularization width must be positive, "
                         f"got {epsilon}")
    u = np.asarray(u, dtype=float)
    _validate_admissible(ops, u, advected)
    free = ops.free_mask
    rhs0 = _rhs_vector(ops, u, advected)
    w_free = np.where(free, ops.lumped_mass, 0.0)
    history = []

    def fp_residual(t_y, y):
        return float(np.max(np.abs(t_y - y))
                     / max(1.0, float(np.max(np.abs(t_y)))))

    def finish(y, it, method):
        xi = heaviside_reg(y, epsilon)
        comp = float(np.sum(ops.lumped_mass * xi * np.maximum(y, 0.0)))
        return StateSolution(y=y, xi=xi, complementarity_residual=comp,
                             stats=SolverStats(it, history[-1], method))

    y = np.zeros(ops.n_nodes)
    omega = damping
    best_res = np.inf
    stall = 0
    picard_budget = min(max_iter, 200)
    it = 0
    for it in range(1, picard_budget + 1):
        t_y = ops.solve_A(rhs0 + w_free * heaviside_reg(y, epsilon))
        res = fp_residual(t_y, y)
        history.append(res)
        if res <= tol:
            return finish(y, it, "damped fixed point")
        y = (1.0 - omega) * y + omega * t_y
        if res < best_res * (1.0 - 1e-3):
            best_res = res
            stall = 0
        else:
            stall += 1
            if stall >= 20:
                omega = max(omega / 2.0, 1e-2)
                stall = 0
                if omega == 1e-2:
                    break   # expansive regime: hand over to Newton

    a_csr = ops.A.tocsr()
    for it2 in range(1, max_iter + 1):
        h_val = heaviside_reg(y, epsilon)
        g = a_csr @ y - w_free * h_val - rhs0
        g[~free] = y[~free]
        t_res = float(np.max(np.abs(g)) / max(1.0, float(np.max(np.abs(y)))))
        # report in fixed-point metric for a comparable history
        t_y = ops.solve_A(rhs0 + w_free * h_val)
        res = fp_residual(t_y, y)
        history.append(min(res, t_res))
        if res <= tol or t_res <= tol * 1e-2:
            return finish(y, it + it2, "fixed point + semismooth newton")
        band = free & (y > 0.0) & (y < epsilon)
        jac = a_csr + sp.diags(np.where(band, w_free / epsilon, 0.0))
        step = spla.splu(jac.tocsc()).solve(-g)
        # backtracking keeps the piecewise-linear residual decreasing
        g_norm = float(np.linalg.norm(g))
        alpha = 1.0
        for _ in range(30):
            y_try = y + alpha * step
            g_try = a_csr @ y_try - w_free * heaviside_reg(y_try, epsilon) \
                - rhs0
            g_try[~free] = y_try[~free]
            if float(np.linalg.norm(g_try)) <= (1 - 1e-4 * alpha) * g_norm:
                break
            alpha *= 0.5
        y = y + alpha * step
    raise SolverError(
        f"regularized solver stagnated after {it + max_iter} iterations "
        f"(last relative change {history[-1]:.3e})", history=history)


def check_maximum_principle(sol: StateSolution,
                            tol: float = 1e-12) -> MaxPrincipleReport:
    """Report the worst violations of y >= 0 and 0 <= xi <= 1."""
    y, xi = sol.y, sol.xi
    tol_y = tol * max(1.0, float(np.max(np.abs(y), initial=0.0)))
    tol_xi = tol * max(1.0, float(np.max(np.abs(xi), initial=0.0)))
    iy = int(np.argmin(y)) if y.size else 0
    ixlo = int(np.argmin(xi)) if xi.size else 0
    ixhi = int(np.argmax(xi)) if xi.size else 0
    passed = (y[iy] >= -tol_y and xi[ixlo] >= -tol_xi
              and xi[ixhi] <= 1.0 + tol_xi)
    return MaxPrincipleReport(
        passed=bool(passed),
        worst_y=float(y[iy]), worst_y_node=iy,
        worst_xi_low=float(xi[ixlo]), worst_xi_low_node=ixlo,
        worst_xi_high=float(xi[ixhi]), worst_xi_high_node=ixhi,
        tol=tol,
    )


def random_admissible_instance(rng: np.random.Generator,
                               max_free_nodes: int = 10):
    """Random small mesh plus admissible data for oracle cross-checks."""
    tag_pairs = [("control", "dirichlet"), ("control", "neumann"),
                 ("neumann", "control"), ("dirichlet", "control")]
    tags = tag_pairs[rng.integers(len(tag_pairs))]
    n_dirichlet = sum(t == "dirichlet" for t in tags)
    n_cells = int(rng.integers(2, max_free_nodes + n_dirichlet))
    x_max = float(rng.uniform(0.5, 4.0))
    mesh = build_interval_mesh(x_max, n_cells, tags)
    kappa = float(rng.uniform(0.5, 2.0))
    tau = float(10.0 ** rng.uniform(-3, -0.7))
    ops = assemble_operators(mesh, kappa, tau)

    y_prev = rng.uniform(0.0, 1.5, mesh.n_nodes)
    y_prev[ops.dirichlet_mask] = 0.0
    xi_prev = rng.uniform(0.0, 1.0, mesh.n_nodes)
    u = rng.uniform(0.0, 2.0, ops.n_controls)
    advected = AdvectedPair(y_bar=y_prev, xi_bar=xi_prev,
                            clamped_fraction=0.0)
    return ops, u, advected
