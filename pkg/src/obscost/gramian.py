"""Observability Gramians of linear ODE systems b' + A(t) b = 0 observed through B(t).

The Gramian G solves the differential Lyapunov equation

    Lyap(A, B):   G'(t) - G(t) A(t) - A*(t) G(t) = B*(t) B(t),   G(0) = 0,

and the observability cost over [0, T] is 1 / lambda_min(G(T)).  The
representation

    G(T) = int_0^T R(t,T)* B*(t) B(t) R(t,T) dt,
    dR/dt = -A(t) R(t,T),  R(T,T) = Id,

is kept as an independent cross-check path: the two routes must agree to
1e-7 relative on every pipeline problem.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import simpson

from .errors import DimensionError, NotObservableError
from .matlib import hermitian_eigen, matrix_rank
from .odeint import MatrixPath, TimeGrid, rk4_integrate

# relative lambda_min threshold below which a Gramian counts as singular
OBSERVABILITY_RTOL = 1e-12


@dataclass(frozen=True)
class LyapunovProblem:
    """Coefficients of Lyap(A, B): callbacks t -> matrix on [0, T]."""

    a: Callable[[float], np.ndarray]
    b: Callable[[float], np.ndarray]
    T: float
    n_state: int
    n_obs: int

    def check_shapes(self):
        a0 = np.asarray(self.a(0.0))
        b0 = np.asarray(self.b(0.0))
        if a0.shape != (self.n_state, self.n_state):
            raise DimensionError(f"A(t) must be {self.n_state}x{self.n_state}, got {a0.shape}")
        if b0.shape != (self.n_obs, self.n_state):
            raise DimensionError(f"B(t) must be {self.n_obs}x{self.n_state}, got {b0.shape}")


@dataclass
class GramianResult:
    g_path: MatrixPath
    lambda_min_T: float
    eigvec_min: np.ndarray
    cost: float  # inf when not observable

    @property
    def g_final(self) -> np.ndarray:
        return self.g_path.final

    @property
    def observable(self) -> bool:
        return np.isfinite(self.cost)


def _observability_threshold(g_final: np.ndarray) -> float:
    return OBSERVABILITY_RTOL * max(1.0, float(np.linalg.norm(g_final)))


def solve_lyapunov(problem: LyapunovProblem, grid: TimeGrid) -> GramianResult:
    """Integrate Lyap(A, B) by RK4 from G(0) = 0 and diagnose G(T)."""
    problem.check_shapes()
    n = problem.n_state

    def rhs(t, g):
        a = np.asarray(problem.a(t))
        bb = np.asarray(problem.b(t))
        return g @ a + a.conj().T @ g + bb.conj().T @ bb

    g0 = np.zeros((n, n), dtype=complex)
    path = rk4_integrate(rhs, g0, grid, store=True)
    g_final = 0.5 * (path[-1] + path[-1].conj().T)
    lam, vecs = hermitian_eigen(g_final)
    lam_min = float(lam[0])
    threshold = _observability_threshold(g_final)
    cost = 1.0 / lam_min if lam_min > threshold else float("inf")
    return GramianResult(
        g_path=MatrixPath(grid, path),
        lambda_min_T=lam_min,
        eigvec_min=vecs[:, 0],
        cost=cost,
    )


def resolvent(a: Callable[[float], np.ndarray], grid: TimeGrid, n: int) -> MatrixPath:
    """Solve dR/dt = -A(t) R(t,T), R(T,T) = Id, sampled on the grid.

    Integrated backwards from t = T; for constant A this is exp(A (T - t)).
    """
    T = grid.T

    def rhs(tau, r):
        # tau = T - t runs forward; dR/dtau = +A(T - tau) R
        return np.asarray(a(T - tau)) @ r

    back = rk4_integrate(rhs, np.eye(n, dtype=complex), grid, store=True)
    return MatrixPath(grid, back[::-1].copy())


def gramian_via_resolvent(problem: LyapunovProblem, grid: TimeGrid) -> np.ndarray:
    """Terminal Gramian through the resolvent representation (Simpson quadrature)."""
    problem.check_shapes()
    r_path = resolvent(problem.a, grid, problem.n_state)
    nodes = grid.nodes
    integrand = np.empty((len(nodes), problem.n_state, problem.n_state), dtype=complex)
    for i, t in enumerate(nodes):
        r = r_path.at_node(i)
        bb = np.asarray(problem.b(float(t)))
        integrand[i] = r.conj().T @ bb.conj().T @ bb @ r
    g = simpson(integrand, x=nodes, axis=0)
    return 0.5 * (g + g.conj().T)


def lyapunov_residual(problem: LyapunovProblem, result: GramianResult) -> float:
    """Max midpoint defect of the Lyapunov ODE, normalized by 1 + ||G||.

    Central differences between consecutive stored nodes against the
    right-hand side at the midpoint.
    """
    path = result.g_path.values
    grid = result.g_path.grid
    h = grid.dt
    worst = 0.0
    for i in range(grid.steps):
        t_mid = (i + 0.5) * h
        g_mid = 0.5 * (path[i] + path[i + 1])
        a = np.asarray(problem.a(t_mid))
        bb = np.asarray(problem.b(t_mid))
        lhs = (path[i + 1] - path[i]) / h
        rhs = g_mid @ a + a.conj().T @ g_mid + bb.conj().T @ bb
        defect = float(np.linalg.norm(lhs - rhs)) / (1.0 + float(np.linalg.norm(g_mid)))
        worst = max(worst, defect)
    return worst


def ode_cost(problem: LyapunovProblem, grid: TimeGrid) -> float:
    """Observability cost 1 / lambda_min(G(T)); raises when not observable."""
    res = solve_lyapunov(problem, grid)
    if not res.observable:
        raise NotObservableError(res.lambda_min_T, _observability_threshold(res.g_final))
    return res.cost


def constant_problem(a: np.ndarray, b: np.ndarray, T: float) -> LyapunovProblem:
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if b.ndim == 1:
        b = b.reshape(1, -1)
    return LyapunovProblem(a=lambda t: a, b=lambda t: b, T=T, n_state=a.shape[0], n_obs=b.shape[0])


def kalman_rank(a: np.ndarray, b: np.ndarray) -> tuple[int, bool]:
    """Kalman observability test for constant (A, B).

    Rank of the stacked matrix [B; BA; ...; B A^(N-1)]; observable iff the
    rank equals the state dimension.
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if b.ndim == 1:
        b = b.reshape(1, -1)
    n = a.shape[0]
    if a.shape != (n, n) or b.shape[1] != n:
        raise DimensionError(f"incompatible Kalman shapes {a.shape}, {b.shape}")
    blocks = []
    cur = b.copy()
    for _ in range(n):
        blocks.append(cur)
        cur = cur @ a
    stack = np.vstack(blocks)
    rank = matrix_rank(stack, rel_tol=1e-10)
    return rank, rank == n


def batch_solve_lyapunov(a_vals: np.ndarray, b_vals: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Vectorized terminal Gramians for a batch of Lyapunov problems.

    a_vals, b_vals: coefficient samples of shape (2*steps + 1, batch, n, n)
    and (2*steps + 1, batch, n_obs, n) on the half-step refinement of `grid`
    (RK4 stage times are exactly the half-step nodes).  Returns G(T) of shape
    (batch, n, n).
    """
    two_m = a_vals.shape[0] - 1
    if two_m != 2 * grid.steps:
        raise DimensionError("coefficient samples must live on the half-step refinement")
    batch = a_vals.shape[1]
    n = a_vals.shape[-1]
    h = grid.dt

    def rhs(idx, g):
        a = a_vals[idx]
        bb = b_vals[idx]
        at = np.conj(np.swapaxes(a, -1, -2))
        bt = np.conj(np.swapaxes(bb, -1, -2))
        return g @ a + at @ g + bt @ bb

    g = np.zeros((batch, n, n), dtype=complex)
    for i in range(grid.steps):
        base = 2 * i
        k1 = rhs(base, g)
        k2 = rhs(base + 1, g + 0.5 * h * k1)
        k3 = rhs(base + 1, g + 0.5 * h * k2)
        k4 = rhs(base + 2, g + h * k3)
        g = g + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return 0.5 * (g + np.conj(np.swapaxes(g, -1, -2)))
