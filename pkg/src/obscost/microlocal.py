"""Hamiltonian flows, bicharacteristic amplitudes, and microlocalized Gramian costs.

For a scalar real principal symbol H the phase-space flow is generated by
v_H = (grad_xi H, -grad_x H); coefficients A, B are evaluated along the flow
and fed to the differential Lyapunov solver.  The high-frequency limit of the
observability cost of data localized at (x0, xi0, b0) is the Rayleigh
quotient of the terminal Gramian at the normalized transported amplitude.

Flows are integrated on a half-step refinement of the requested grid so the
Lyapunov/amplitude RK4 stages hit stored flow samples exactly (no
interpolation enters the 4th-order error budget).  The Jacobian determinant
of the flow map is tracked through the variational equation; it must stay
within 1e-6 of 1 (the Hamiltonian field is divergence free).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import symbols as sym
from .errors import BoxExitError, CutoffCrossingError, DimensionError, NotObservableError
from .gramian import GramianResult, LyapunovProblem, solve_lyapunov
from .odeint import TimeGrid, rk4_integrate
from .symbols import Expr, SymbolField

XI_FLOOR_DEFAULT = 0.5


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __init__(self, x, xi):
        object.__setattr__(self, "x", np.asarray(x, dtype=float).reshape(-1))
        object.__setattr__(self, "xi", np.asarray(xi, dtype=float).reshape(-1))
        if self.x.shape != self.xi.shape:
            raise DimensionError("x and xi must have the same dimension")

    @property
    def d(self) -> int:
        return self.x.size


@dataclass(frozen=True)
class PhaseBox:
    """Axis-aligned trust region in phase space (None bounds are unbounded)."""

    x_min: np.ndarray | None = None
    x_max: np.ndarray | None = None
    xi_min: np.ndarray | None = None
    xi_max: np.ndarray | None = None

    def contains(self, x: np.ndarray, xi: np.ndarray) -> bool:
        for lo, hi, v in ((self.x_min, self.x_max, x), (self.xi_min, self.xi_max, xi)):
            if lo is not None and np.any(v < np.asarray(lo) - 1e-12):
                return False
            if hi is not None and np.any(v > np.asarray(hi) + 1e-12):
                return False
        return True


@dataclass
class PhaseTrajectory:
    """Sampled Hamiltonian flow on the half-step refinement of a TimeGrid."""

    grid: TimeGrid
    xs: np.ndarray  # (2*steps + 1, d)
    xis: np.ndarray  # (2*steps + 1, d)
    jac_det: np.ndarray | None  # (steps + 1,) at coarse nodes, or None

    @property
    def d(self) -> int:
        return self.xs.shape[1]

    @property
    def half_dt(self) -> float:
        return 0.5 * self.grid.dt

    def index_of_time(self, t: float) -> int:
        idx = int(round(t / self.half_dt))
        if not (0 <= idx < self.xs.shape[0]):
            raise ValueError(f"time {t} outside trajectory range")
        return idx

    def coarse_points(self) -> tuple[np.ndarray, np.ndarray]:
        return self.xs[::2], self.xis[::2]

    @property
    def final(self) -> PhasePoint:
        return PhasePoint(self.xs[-1], self.xis[-1])


@dataclass(frozen=True)
class MicrolocalProblem:
    """Scalar-principal dispersive problem localized at one phase-space seed."""

    h: Expr
    a: SymbolField
    b: SymbolField
    T: float
    seed: PhasePoint
    b0: np.ndarray
    xi_floor: float = XI_FLOOR_DEFAULT
    box: PhaseBox | None = None

    def __post_init__(self):
        b0 = np.asarray(self.b0, dtype=complex).reshape(-1)
        if np.linalg.norm(b0) == 0.0:
            raise ValueError("b0 must be nonzero")
        object.__setattr__(self, "b0", b0)
        if self.xi_floor > 0.0 and np.linalg.norm(self.seed.xi) < self.xi_floor:
            raise CutoffCrossingError(0.0, float(np.linalg.norm(self.seed.xi)), self.xi_floor)

    @property
    def d(self) -> int:
        return self.seed.d

    @property
    def n_state(self) -> int:
        return self.a.cols


def _gradient_callables(h: Expr, d: int):
    gxi = [sym.compile_expr(h.diff(f"xi{k + 1}"), d) for k in range(d)]
    gx = [sym.compile_expr(h.diff(f"x{k + 1}"), d) for k in range(d)]
    return gx, gxi


def _hessian_callables(h: Expr, d: int):
    """Jacobian of v_H = (grad_xi H, -grad_x H): rows of second derivatives."""
    names = [f"x{k + 1}" for k in range(d)] + [f"xi{k + 1}" for k in range(d)]
    rows = []
    for k in range(d):  # d(v_x)_k = d grad_xi_k H
        base = h.diff(f"xi{k + 1}")
        rows.append([sym.compile_expr(base.diff(n), d) for n in names])
    for k in range(d):  # d(v_xi)_k = -d grad_x_k H
        base = h.diff(f"x{k + 1}")
        rows.append([sym.compile_expr(sym.neg(base.diff(n)), d) for n in names])
    return rows


def hamiltonian_flow(
    h: Expr,
    seed: PhasePoint,
    grid: TimeGrid,
    box: PhaseBox | None = None,
    xi_floor: float | None = None,
    track_jacobian: bool = True,
) -> PhaseTrajectory:
    """Integrate (X, Xi)' = (grad_xi H, -grad_x H) from the seed.

    The variational equation dY = Dv_H Y is integrated alongside when
    `track_jacobian` is set; det Y at the coarse nodes is the Liouville
    diagnostic.  Raises BoxExitError / CutoffCrossingError with the offending
    time when the trajectory leaves its trust region.
    """
    d = seed.d
    gx, gxi = _gradient_callables(h, d)
    hess = _hessian_callables(h, d) if track_jacobian else None
    two_d = 2 * d
    n_fine = 2 * grid.steps
    h_step = 0.5 * grid.dt

    xs = np.empty((n_fine + 1, d))
    xis = np.empty((n_fine + 1, d))
    xs[0] = seed.x
    xis[0] = seed.xi
    y = np.eye(two_d) if track_jacobian else None
    jac = np.empty(grid.steps + 1) if track_jacobian else None
    if track_jacobian:
        jac[0] = 1.0

    def velocity(x, xi):
        vx = np.array([g(x, xi) for g in gxi])
        vxi = np.array([-g(x, xi) for g in gx])
        return vx, vxi

    def var_matrix(x, xi):
        return np.array([[fn(x, xi) for fn in row] for row in hess])

    state_x = seed.x.copy()
    state_xi = seed.xi.copy()
    for i in range(n_fine):
        t = i * h_step

        def rhs(state):
            x = state[:d]
            xi = state[d:two_d]
            vx, vxi = velocity(x, xi)
            out = np.concatenate([vx, vxi])
            if track_jacobian:
                ymat = state[two_d:].reshape(two_d, two_d)
                dy = var_matrix(x, xi) @ ymat
                out = np.concatenate([out, dy.reshape(-1)])
            return out

        if track_jacobian:
            state = np.concatenate([state_x, state_xi, y.reshape(-1)])
        else:
            state = np.concatenate([state_x, state_xi])
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * h_step * k1)
        k3 = rhs(state + 0.5 * h_step * k2)
        k4 = rhs(state + h_step * k3)
        state = state + (h_step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        state_x = state[:d]
        state_xi = state[d:two_d]
        if track_jacobian:
            y = state[two_d:].reshape(two_d, two_d)
        if not np.all(np.isfinite(state)):
            raise BoxExitError(t + h_step, (state_x, state_xi), "flow blew up")
        xs[i + 1] = state_x
        xis[i + 1] = state_xi
        if box is not None and not box.contains(state_x, state_xi):
            raise BoxExitError(t + h_step, (state_x.copy(), state_xi.copy()))
        if xi_floor is not None and xi_floor > 0.0:
            norm = float(np.linalg.norm(state_xi))
            if norm < xi_floor:
                raise CutoffCrossingError(t + h_step, norm, xi_floor)
        if track_jacobian and (i + 1) % 2 == 0:
            jac[(i + 1) // 2] = float(np.linalg.det(y))

    return PhaseTrajectory(grid=grid, xs=xs, xis=xis, jac_det=jac)


def liouville_residual(traj: PhaseTrajectory) -> float:
    """max_t |det DPhi(t) - 1| over the coarse nodes."""
    if traj.jac_det is None:
        raise ValueError("trajectory was integrated without the variational equation")
    return float(np.max(np.abs(traj.jac_det - 1.0)))


def hamiltonian_drift(h: Expr, traj: PhaseTrajectory) -> float:
    """max_t |H(flow(t)) - H(seed)| / (1 + |H(seed)|); H is conserved."""
    fn = sym.compile_expr(h, traj.d)
    vals = fn(traj.xs.T, traj.xis.T)
    vals = np.atleast_1d(vals)
    return float(np.max(np.abs(vals - vals[0])) / (1.0 + abs(float(vals[0]))))


class PathCoefficients:
    """Matrix field sampled on a trajectory, exposed as callables of time.

    RK4 stage times on the coarse grid are exactly the fine trajectory nodes,
    so the lookup is an integer rounding, never an interpolation.
    """

    def __init__(self, field_a: SymbolField, traj: PhaseTrajectory, div_floor=None):
        fn = field_a.compile(div_floor=div_floor)
        vals = fn(traj.xs.T, traj.xis.T)
        if vals.ndim == 2:  # constant field
            vals = np.broadcast_to(vals[:, :, None], vals.shape + (traj.xs.shape[0],))
        self.values = np.ascontiguousarray(np.moveaxis(vals, -1, 0))
        self.half_dt = traj.half_dt

    def __call__(self, t: float) -> np.ndarray:
        return self.values[int(round(t / self.half_dt))]

    def at_coarse_nodes(self) -> np.ndarray:
        return self.values[::2]


def microlocal_gramian(
    problem: MicrolocalProblem, grid: TimeGrid, traj: PhaseTrajectory | None = None
) -> GramianResult:
    """Gramian of Lyap(A, B) with coefficients evaluated along the H-flow."""
    if traj is None:
        traj = hamiltonian_flow(
            problem.h, problem.seed, grid, box=problem.box,
            xi_floor=problem.xi_floor if problem.xi_floor > 0 else None,
            track_jacobian=False,
        )
    n = problem.n_state
    lyap = LyapunovProblem(
        a=PathCoefficients(problem.a, traj),
        b=PathCoefficients(problem.b, traj),
        T=grid.T,
        n_state=n,
        n_obs=problem.b.rows,
    )
    return solve_lyapunov(lyap, grid)


def bichar_amplitude(
    a_field: SymbolField, traj: PhaseTrajectory, b0: np.ndarray, grid: TimeGrid
) -> np.ndarray:
    """Solve b' = -A(flow(t)) b along the trajectory; returns the (steps+1, N) path."""
    b0 = np.asarray(b0, dtype=complex).reshape(-1)
    coeff = PathCoefficients(a_field, traj)

    def rhs(t, bvec):
        return -coeff(t) @ bvec

    return rk4_integrate(rhs, b0, grid, store=True)


@dataclass
class CostLimitResult:
    inverse_cost: float
    cost: float
    gramian: GramianResult
    amplitude_path: np.ndarray
    b_T: np.ndarray
    b_T_normalized: np.ndarray
    trajectory: PhaseTrajectory

    def __iter__(self):
        # unpack like the (inverse_cost, cost) pair the pipelines advertise
        return iter((self.inverse_cost, self.cost))


def microlocal_cost_limit(problem: MicrolocalProblem, grid: TimeGrid) -> CostLimitResult:
    """Limit of the observability cost for data localized at the seed.

    inverse_cost = (b_T^N)* G(T) b_T^N with b_T^N the normalized transported
    amplitude; cost is its inverse.  Raises NotObservableError when the
    Rayleigh quotient falls below the Gramian singularity threshold.
    """
    traj = hamiltonian_flow(
        problem.h, problem.seed, grid, box=problem.box,
        xi_floor=problem.xi_floor if problem.xi_floor > 0 else None,
        track_jacobian=False,
    )
    gram = microlocal_gramian(problem, grid, traj=traj)
    b0 = problem.b0 / np.linalg.norm(problem.b0)
    path = bichar_amplitude(problem.a, traj, b0, grid)
    b_T = path[-1]
    norm_T = float(np.linalg.norm(b_T))
    if norm_T < 1e-300:
        raise NotObservableError(0.0, 1e-300, "transported amplitude underflowed")
    b_norm = b_T / norm_T
    inverse_cost = float(np.real(np.conj(b_norm) @ gram.g_final @ b_norm))
    threshold = 1e-12 * max(1.0, float(np.linalg.norm(gram.g_final)))
    if inverse_cost <= threshold:
        raise NotObservableError(inverse_cost, threshold)
    return CostLimitResult(
        inverse_cost=inverse_cost,
        cost=1.0 / inverse_cost,
        gramian=gram,
        amplitude_path=path,
        b_T=b_T,
        b_T_normalized=b_norm,
        trajectory=traj,
    )


def worst_case_b0(problem: MicrolocalProblem, grid: TimeGrid) -> np.ndarray:
    """Initial amplitude whose cost limit attains 1/lambda_min(G(T)).

    Pulls the minimal eigenvector of G(T) back through the amplitude flow
    (b' = -A b integrated from T to 0), so that the forward-transported
    normalized amplitude is exactly that eigenvector.
    """
    traj = hamiltonian_flow(
        problem.h, problem.seed, grid, box=problem.box,
        xi_floor=problem.xi_floor if problem.xi_floor > 0 else None,
        track_jacobian=False,
    )
    gram = microlocal_gramian(problem, grid, traj=traj)
    coeff = PathCoefficients(problem.a, traj)
    T = grid.T

    def rhs(tau, bvec):
        # tau = T - t; d b / d tau = +A(T - tau) b
        return coeff(T - tau) @ bvec

    back = rk4_integrate(rhs, gram.eigvec_min.astype(complex), grid, store=False)
    return back / np.linalg.norm(back)


def transport_as_microlocal(tp, x0=None, xi0=None, b0=None) -> MicrolocalProblem:
    """Recast a transport problem: H = v(x).xi, A = A(x) - (div v / 2) Id.

    The X-equation of the resulting flow does not involve xi, so the cost
    limit agrees with the transport-module computation for any seed
    frequency; the cutoff floor is disabled because the coefficients carry no
    xi-dependence.
    """
    from .transport import TransportProblem  # local import to avoid a cycle

    if not isinstance(tp, TransportProblem):
        raise TypeError("expected a TransportProblem")
    d = tp.d
    h_tree: Expr = sym.Const(0.0)
    for k in range(d):
        h_tree = sym.add(h_tree, sym.mul(tp.v.entries[k][0], sym.Var(f"xi{k + 1}")))
    div_v: Expr = sym.Const(0.0)
    for k in range(d):
        div_v = sym.add(div_v, tp.v.entries[k][0].diff(f"x{k + 1}"))
    half_div = sym.mul(sym.Const(0.5), div_v)
    n = tp.a.rows
    entries = []
    for i in range(n):
        row = []
        for j in range(n):
            e = tp.a.entries[i][j]
            if i == j:
                e = sym.sub(e, half_div)
            row.append(e)
        entries.append(row)
    a_field = SymbolField(entries, d)
    seed = PhasePoint(
        np.zeros(d) if x0 is None else x0,
        np.ones(d) if xi0 is None else xi0,
    )
    return MicrolocalProblem(
        h=h_tree,
        a=a_field,
        b=tp.b,
        T=tp.T,
        seed=seed,
        b0=np.ones(n) if b0 is None else b0,
        xi_floor=0.0,
        box=None,
    )
