"""Multi-branch hyperbolic systems: eigen-decomposition of a Hermitian symbol
H(x, xi), half-bracket correction A-flat, effective per-branch symbols, the
Poincare normal-form identity, and the combined multi-branch cost limit.

The decomposition H = U D U* with D = sum_k lambda_k Pi_k uses constant
canonical projectors Pi_k (eigenvalues sorted ascending with constant
multiplicity pattern on the declared box; a gap violation is an error).  The
correction

    2 A-flat = {U*, H} U - {D, U*} U

is assembled from exact expression trees when a closed-form U is available
(scalar, diagonal, and the rotating-gas fixture), and otherwise from central
finite differences of a gauge-aligned eigenvector frame.  Per branch k,

    A_k^eff = Pi_k (U* A U + A-flat) Pi_k,      B_k^eff = B U Pi_k,

feed the Lyapunov solver along the lambda_k-flow, and the cost limit is the
amplitude-weighted mean of the branch Rayleigh quotients.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import symbols as sym
from .errors import DimensionError, GapViolationError, NotObservableError
from .gramian import GramianResult, LyapunovProblem, solve_lyapunov
from .matlib import hermitian_eigen
from .microlocal import (
    CostLimitResult,
    MicrolocalProblem,
    PathCoefficients,
    PhaseBox,
    PhasePoint,
    PhaseTrajectory,
    hamiltonian_flow,
    microlocal_cost_limit,
)
from .odeint import TimeGrid, rk4_integrate
from .symbols import Const, Expr, SymbolField

FD_STEP = 1e-5
CLUSTER_RTOL = 1e-8
MIN_GAP = 1e-6


# ---------------------------------------------------------------------------
# decomposition
# ---------------------------------------------------------------------------

@dataclass
class BranchDecomposition:
    """Sorted eigen-structure of a Hermitian symbol field.

    Pi_k are the constant canonical projectors onto the (contiguous) index
    blocks of the sorted eigenvalue pattern; `gap` is the verified lower
    bound on inter-branch separation over the sampling of the declared box.
    """

    h: SymbolField
    m: int
    block_sizes: tuple
    gap: float
    d: int
    n: int
    # expression backing (None for the numeric path)
    lambda_trees: tuple | None = None
    u_field: SymbolField | None = None
    _u_compiled: object = field(default=None, repr=False)
    _lambda_compiled: tuple | None = field(default=None, repr=False)
    _h_compiled: object = field(default=None, repr=False)

    def __post_init__(self):
        self.offsets = np.concatenate([[0], np.cumsum(self.block_sizes)])
        self.pi = []
        for k in range(self.m):
            p = np.zeros((self.n, self.n))
            p[self.offsets[k]:self.offsets[k + 1], self.offsets[k]:self.offsets[k + 1]] = np.eye(
                self.block_sizes[k]
            )
            self.pi.append(p)
        if self.u_field is not None:
            self._u_compiled = self.u_field.compile()
        if self.lambda_trees is not None:
            self._lambda_compiled = tuple(
                sym.compile_expr(t, self.d) for t in self.lambda_trees
            )
        self._h_compiled = self.h.compile()

    @property
    def expression_backed(self) -> bool:
        return self.lambda_trees is not None and self.u_field is not None

    @property
    def is_scalar(self) -> bool:
        return self.m == 1 and self.block_sizes[0] == self.n

    def lambdas_at(self, x, xi) -> np.ndarray:
        """Branch eigenvalues (ascending) at a phase point."""
        if self._lambda_compiled is not None:
            return np.array([float(np.real(fn(x, xi))) for fn in self._lambda_compiled])
        lam, _ = self._eigen_at(x, xi)
        return np.array([lam[self.offsets[k]] for k in range(self.m)])

    def branch_values_at(self, x, xi) -> np.ndarray:
        """Per-state eigenvalues, branch values repeated by multiplicity."""
        lam = self.lambdas_at(x, xi)
        return np.repeat(lam, self.block_sizes)

    def _eigen_at(self, x, xi):
        hval = self._h_compiled(x, xi)
        lam, v = hermitian_eigen(hval)
        blocks = _cluster(lam)
        if tuple(len(b) for b in blocks) != tuple(self.block_sizes):
            raise GapViolationError(
                (np.asarray(x), np.asarray(xi)),
                float(np.min(np.diff(lam))) if len(lam) > 1 else 0.0,
                "eigenvalue multiplicity pattern changed",
            )
        return lam, v

    def u_at(self, x, xi, ref: np.ndarray | None = None) -> np.ndarray:
        """Unitary diagonalizer at a point, gauge-aligned to `ref` if given."""
        if self._u_compiled is not None:
            return np.asarray(self._u_compiled(x, xi))
        _, v = self._eigen_at(x, xi)
        if ref is None:
            return _fix_seed_gauge(v, self.block_sizes, self.offsets)
        return _align_frames(v, ref, self.block_sizes, self.offsets)

    def check_gap_values(self, lam: np.ndarray, point) -> None:
        gaps = np.diff(lam)
        if self.m > 1 and float(np.min(gaps)) < MIN_GAP:
            raise GapViolationError(point, float(np.min(gaps)))


def _cluster(lam: np.ndarray, rtol: float = CLUSTER_RTOL) -> list[list[int]]:
    scale = max(1.0, float(np.max(np.abs(lam))))
    blocks = [[0]]
    for i in range(1, len(lam)):
        if lam[i] - lam[i - 1] <= rtol * scale:
            blocks[-1].append(i)
        else:
            blocks.append([i])
    return blocks


def _fix_seed_gauge(v: np.ndarray, block_sizes, offsets) -> np.ndarray:
    """Make the first sizable component of each column real-positive."""
    out = v.copy()
    n = v.shape[0]
    for j in range(n):
        col = out[:, j]
        idx = int(np.argmax(np.abs(col)))
        ph = col[idx]
        if abs(ph) > 0:
            out[:, j] = col * (np.conj(ph) / abs(ph))
    return out


def _align_frames(v: np.ndarray, ref: np.ndarray, block_sizes, offsets) -> np.ndarray:
    """Blockwise unitary Procrustes alignment of a fresh eigenframe to `ref`."""
    out = v.copy()
    for k in range(len(block_sizes)):
        s, e = offsets[k], offsets[k + 1]
        overlap = v[:, s:e].conj().T @ ref[:, s:e]
        uu, _, vv = np.linalg.svd(overlap)
        out[:, s:e] = v[:, s:e] @ (uu @ vv)
    return out


def _sample_points(box: PhaseBox, d: int, n_per_axis: int, rng) -> list[tuple[np.ndarray, np.ndarray]]:
    lo = np.concatenate([np.asarray(box.x_min, float), np.asarray(box.xi_min, float)])
    hi = np.concatenate([np.asarray(box.x_max, float), np.asarray(box.xi_max, float)])
    pts = []
    axes = [np.linspace(lo[k], hi[k], n_per_axis) for k in range(2 * d)]
    for combo in itertools.product(*axes):
        z = np.asarray(combo)
        pts.append((z[:d], z[d:]))
    # a few random interior points guard against grid-aligned degeneracies
    for _ in range(16):
        z = lo + (hi - lo) * rng.random(2 * d)
        pts.append((z[:d], z[d:]))
    return pts


def _structural_diagonal(h: SymbolField) -> bool:
    n = h.rows
    zero = Const(0.0)
    return all(h.entries[i][j] == zero for i in range(n) for j in range(n) if i != j)


def _structural_scalar(h: SymbolField) -> bool:
    if not _structural_diagonal(h):
        return False
    first = h.entries[0][0]
    return all(h.entries[i][i] == first for i in range(h.rows))


def decompose(
    h: SymbolField,
    box: PhaseBox,
    samples_per_axis: int = 4,
    seed: int = 0,
    analytic: tuple | None = None,
) -> BranchDecomposition:
    """Verify assumption (H1) on a sampling of the box and build the branches.

    Structurally diagonal symbols (and scalar multiples of the identity) get
    expression-backed branches; `analytic` may supply (lambda_trees, u_field)
    for fixtures with closed-form eigenvectors.  Everything else falls back
    to pointwise Jacobi eigensolves with gauge alignment.  Raises
    GapViolationError (with the offending point) when branches collide or the
    multiplicity pattern is not constant.
    """
    if h.rows != h.cols:
        raise DimensionError("H must be square")
    n = h.rows
    d = h.d
    rng = np.random.default_rng(seed)
    pts = _sample_points(box, d, samples_per_axis, rng)
    h_fn = h.compile()

    # Hermitian check at samples
    for x, xi in pts:
        hval = h_fn(x, xi)
        herm_err = float(np.linalg.norm(hval - hval.conj().T))
        if herm_err > 1e-10 * max(1.0, float(np.linalg.norm(hval))):
            raise ValueError(f"H is not Hermitian at ({x}, {xi}): defect {herm_err:.2e}")

    if analytic is not None:
        lambda_trees, u_field = analytic
        lam_fns = [sym.compile_expr(t, d) for t in lambda_trees]
        sizes = None
        gap = np.inf
        u_fn = u_field.compile()
        for x, xi in pts:
            lam = np.array([float(np.real(f(x, xi))) for f in lam_fns])
            if np.any(np.diff(lam) <= 0):
                raise GapViolationError((x, xi), float(np.min(np.diff(lam))))
            gap = min(gap, float(np.min(np.diff(lam))) if len(lam) > 1 else np.inf)
            uval = np.asarray(u_fn(x, xi))
            unit_err = float(np.linalg.norm(uval.conj().T @ uval - np.eye(n)))
            if unit_err > 1e-9:
                raise ValueError(f"analytic U not unitary at ({x}, {xi}): {unit_err:.2e}")
            hval = h_fn(x, xi)
            dmat = uval.conj().T @ hval @ uval
            if sizes is None:
                diag = np.real(np.diag(dmat))
                sizes = tuple(
                    int(np.sum(np.abs(diag - l) <= 1e-8 * max(1.0, abs(l)))) for l in lam
                )
                if sum(sizes) != n:
                    raise ValueError("analytic eigenvalue multiplicities do not tile H")
            block = np.repeat(lam, sizes)
            if float(np.linalg.norm(dmat - np.diag(block))) > 1e-9 * max(
                1.0, float(np.linalg.norm(hval))
            ):
                raise ValueError(f"analytic U does not diagonalize H at ({x}, {xi})")
        if gap < MIN_GAP and len(lambda_trees) > 1:
            raise GapViolationError(pts[0], gap)
        return BranchDecomposition(
            h=h, m=len(lambda_trees), block_sizes=sizes, gap=float(gap), d=d, n=n,
            lambda_trees=tuple(lambda_trees), u_field=u_field,
        )

    if _structural_scalar(h):
        return BranchDecomposition(
            h=h, m=1, block_sizes=(n,), gap=np.inf, d=d, n=n,
            lambda_trees=(h.entries[0][0],), u_field=SymbolField.identity(n, d),
        )

    if _structural_diagonal(h):
        diag_trees = [h.entries[i][i] for i in range(n)]
        # group structurally equal diagonal entries into branches
        groups: list[list[int]] = []
        reps: list[Expr] = []
        for i, t in enumerate(diag_trees):
            for g, r in zip(groups, reps):
                if t == r:
                    g.append(i)
                    break
            else:
                groups.append([i])
                reps.append(t)
        rep_fns = [sym.compile_expr(r, d) for r in reps]
        order = None
        gap = np.inf
        for x, xi in pts:
            vals = np.array([float(np.real(f(x, xi))) for f in rep_fns])
            this_order = tuple(np.argsort(vals, kind="stable"))
            svals = vals[list(this_order)]
            if len(svals) > 1:
                g = float(np.min(np.diff(svals)))
                if g < MIN_GAP:
                    raise GapViolationError((x, xi), g)
                gap = min(gap, g)
            if order is None:
                order = this_order
            elif order != this_order:
                raise GapViolationError((x, xi), 0.0, "branch ordering is not constant")
        lambda_trees = tuple(reps[i] for i in order)
        sizes = tuple(len(groups[i]) for i in order)
        # permutation matrix: column block k holds the states of branch order[k]
        perm_cols = []
        for i in order:
            perm_cols.extend(groups[i])
        u_mat = np.zeros((n, n))
        for new_j, old_j in enumerate(perm_cols):
            u_mat[old_j, new_j] = 1.0
        return BranchDecomposition(
            h=h, m=len(order), block_sizes=sizes, gap=float(gap), d=d, n=n,
            lambda_trees=lambda_trees, u_field=SymbolField.constant(u_mat, d),
        )

    # generic numeric path
    sizes = None
    gap = np.inf
    for x, xi in pts:
        hval = h_fn(x, xi)
        lam, _ = hermitian_eigen(hval)
        blocks = _cluster(lam)
        this_sizes = tuple(len(b) for b in blocks)
        if sizes is None:
            sizes = this_sizes
        elif this_sizes != sizes:
            raise GapViolationError((x, xi), 0.0, "eigenvalue multiplicity pattern changed")
        if len(blocks) > 1:
            reps_v = [lam[b[0]] for b in blocks]
            g = float(np.min(np.diff(reps_v)))
            if g < MIN_GAP:
                raise GapViolationError((x, xi), g)
            gap = min(gap, g)
    return BranchDecomposition(
        h=h, m=len(sizes), block_sizes=sizes, gap=float(gap), d=d, n=n,
    )


# ---------------------------------------------------------------------------
# A-flat and effective symbols
# ---------------------------------------------------------------------------

def _diag_field(decomp: BranchDecomposition) -> SymbolField:
    n, d = decomp.n, decomp.d
    zero = Const(0.0)
    block = np.repeat(np.arange(decomp.m), decomp.block_sizes)
    return SymbolField(
        [
            [decomp.lambda_trees[block[i]] if i == j else zero for j in range(n)]
            for i in range(n)
        ],
        d,
    )


class _FdAflat:
    """Finite-difference A-flat around a supplied gauge frame."""

    def __init__(self, decomp: BranchDecomposition):
        self.decomp = decomp
        d = decomp.d
        self.dh_x = [decomp.h.diff(f"x{k + 1}").compile() for k in range(d)]
        self.dh_xi = [decomp.h.diff(f"xi{k + 1}").compile() for k in range(d)]

    def at(self, x, xi, u0: np.ndarray) -> np.ndarray:
        decomp = self.decomp
        d = decomp.d
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        two_af = np.zeros((decomp.n, decomp.n), dtype=complex)
        for k in range(d):
            step = np.zeros(d)
            step[k] = FD_STEP
            du_x = (
                decomp.u_at(x + step, xi, ref=u0) - decomp.u_at(x - step, xi, ref=u0)
            ) / (2.0 * FD_STEP)
            du_xi = (
                decomp.u_at(x, xi + step, ref=u0) - decomp.u_at(x, xi - step, ref=u0)
            ) / (2.0 * FD_STEP)
            dlam_x = (
                decomp.branch_values_at(x + step, xi) - decomp.branch_values_at(x - step, xi)
            ) / (2.0 * FD_STEP)
            dlam_xi = (
                decomp.branch_values_at(x, xi + step) - decomp.branch_values_at(x, xi - step)
            ) / (2.0 * FD_STEP)
            dhx = np.asarray(self.dh_x[k](x, xi))
            dhxi = np.asarray(self.dh_xi[k](x, xi))
            dux_st = du_x.conj().T
            duxi_st = du_xi.conj().T
            # {U*, H} U
            two_af += (duxi_st @ dhx - dux_st @ dhxi) @ u0
            # -{D, U*} U with dD diagonal
            two_af -= (np.diag(dlam_xi) @ dux_st - np.diag(dlam_x) @ duxi_st) @ u0
        return 0.5 * two_af


def a_flat(h: SymbolField, decomp: BranchDecomposition):
    """Callable (x, xi) -> A-flat(x, xi) = ({U*,H}U - {D,U*}U) / 2.

    Exact expression trees when the decomposition is expression-backed;
    otherwise gauge-aligned central finite differences of the eigenframe
    (step 1e-5) around the pointwise seed gauge.
    """
    if decomp.expression_backed:
        ustar = decomp.u_field.conj_transpose()
        dfield = _diag_field(decomp)
        two_af = sym.poisson_bracket(ustar, h).matmul(decomp.u_field).sub_field(
            sym.poisson_bracket(dfield, ustar).matmul(decomp.u_field)
        )
        fn = two_af.compile()

        def call_expr(x, xi):
            return 0.5 * np.asarray(fn(x, xi))

        return call_expr

    fd = _FdAflat(decomp)

    def call_fd(x, xi):
        return fd.at(x, xi, decomp.u_at(x, xi))

    return call_fd


def effective_symbols(a_field: SymbolField, b_field: SymbolField, decomp: BranchDecomposition, k: int):
    """Callables (x, xi) -> (A_k^eff, B_k^eff) for branch k (0-based)."""
    if not (0 <= k < decomp.m):
        raise DimensionError(f"branch index {k} outside [0, {decomp.m})")
    pi_k = decomp.pi[k]
    af = a_flat(decomp.h, decomp)

    if decomp.expression_backed:
        u = decomp.u_field
        ustar = u.conj_transpose()
        uau = ustar.matmul(a_field).matmul(u)
        uau_fn = uau.compile()
        u_fn = decomp._u_compiled
        b_fn = b_field.compile()

        def a_eff(x, xi):
            core = np.asarray(uau_fn(x, xi)) + af(x, xi)
            return pi_k @ core @ pi_k

        def b_eff(x, xi):
            return np.asarray(b_fn(x, xi)) @ np.asarray(u_fn(x, xi)) @ pi_k

        return a_eff, b_eff

    a_fn = a_field.compile()
    b_fn = b_field.compile()

    def a_eff_num(x, xi):
        u0 = decomp.u_at(x, xi)
        core = u0.conj().T @ np.asarray(a_fn(x, xi)) @ u0 + af(x, xi)
        return pi_k @ core @ pi_k

    def b_eff_num(x, xi):
        return np.asarray(b_fn(x, xi)) @ decomp.u_at(x, xi) @ pi_k

    return a_eff_num, b_eff_num


def gamma_symbol(a_field: SymbolField, decomp: BranchDecomposition):
    """Callable for Gamma = U* A U + A-flat."""
    af = a_flat(decomp.h, decomp)
    if decomp.expression_backed:
        uau = decomp.u_field.conj_transpose().matmul(a_field).matmul(decomp.u_field)
        uau_fn = uau.compile()

        def call(x, xi):
            return np.asarray(uau_fn(x, xi)) + af(x, xi)

        return call

    a_fn = a_field.compile()

    def call_num(x, xi):
        u0 = decomp.u_at(x, xi)
        return u0.conj().T @ np.asarray(a_fn(x, xi)) @ u0 + af(x, xi)

    return call_num


def q_symbol(decomp: BranchDecomposition, gamma_callable):
    """Callable for Q = -sum_{j != k} i Pi_j Gamma Pi_k / (lambda_j - lambda_k)."""

    def call(x, xi):
        lam = decomp.lambdas_at(x, xi)
        decomp.check_gap_values(lam, (np.asarray(x), np.asarray(xi)))
        g = np.asarray(gamma_callable(x, xi))
        q = np.zeros_like(g, dtype=complex)
        for j in range(decomp.m):
            for k in range(decomp.m):
                if j == k:
                    continue
                q -= 1j * (decomp.pi[j] @ g @ decomp.pi[k]) / (lam[j] - lam[k])
        return q

    return call


def normal_form_residual(decomp: BranchDecomposition, gamma_callable, points) -> float:
    """max over points of || -i[D, Q] + Gamma - sum_k Pi_k Gamma Pi_k ||_F.

    The identity is exact pointwise, so the residual only measures assembly
    round-off.
    """
    q_fn = q_symbol(decomp, gamma_callable)
    worst = 0.0
    for x, xi in points:
        lam = decomp.branch_values_at(x, xi)
        dmat = np.diag(lam).astype(complex)
        g = np.asarray(gamma_callable(x, xi))
        q = q_fn(x, xi)
        lhs = -1j * (dmat @ q - q @ dmat) + g
        rhs = sum(decomp.pi[k] @ g @ decomp.pi[k] for k in range(decomp.m))
        worst = max(worst, float(np.linalg.norm(lhs - rhs)))
    return worst


# ---------------------------------------------------------------------------
# multi-branch cost limit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemProblem:
    """Hyperbolic system with Hermitian principal symbol H and lower order A."""

    h: SymbolField
    a: SymbolField
    b: SymbolField
    T: float
    seed: PhasePoint
    b0: np.ndarray
    box: PhaseBox
    xi_floor: float = 0.5
    initial_amplitude: str = "projected"  # or "full": the literal reading

    def __post_init__(self):
        b0 = np.asarray(self.b0, dtype=complex).reshape(-1)
        if np.linalg.norm(b0) == 0.0:
            raise ValueError("b0 must be nonzero")
        object.__setattr__(self, "b0", b0)
        if self.initial_amplitude not in ("projected", "full"):
            raise ValueError("initial_amplitude must be 'projected' or 'full'")


@dataclass
class BranchReport:
    index: int
    lambda_seed: float
    b_T: np.ndarray
    rayleigh: float  # b_T* G_T b_T (unnormalized)
    weight: float  # |b_T|^2
    gramian: GramianResult


@dataclass
class SystemCostResult:
    inverse_cost: float
    cost: float
    branches: list
    decomposition: BranchDecomposition

    def __iter__(self):
        return iter((self.inverse_cost, self.branches))


class _ArrayCoeff:
    """Coefficient samples on the fine trajectory nodes, indexed by time."""

    def __init__(self, values: np.ndarray, half_dt: float):
        self.values = values
        self.half_dt = half_dt

    def __call__(self, t: float) -> np.ndarray:
        return self.values[int(round(t / self.half_dt))]


def _branch_coeffs_along(
    a_field: SymbolField,
    b_field: SymbolField,
    decomp: BranchDecomposition,
    k: int,
    traj: PhaseTrajectory,
    u_seed: np.ndarray,
) -> tuple[_ArrayCoeff, _ArrayCoeff]:
    """Sample (A_k^eff, B_k^eff) on the fine trajectory nodes.

    On the numeric backend the eigenframe is kept gauge-continuous along the
    curve by aligning each sample to the previous one, starting from the
    frame used for the initial amplitude projection.
    """
    n_nodes = traj.xs.shape[0]
    pi_k = decomp.pi[k]
    if decomp.expression_backed:
        a_eff, b_eff = effective_symbols(a_field, b_field, decomp, k)
        a_vals = np.stack([np.asarray(a_eff(traj.xs[i], traj.xis[i])) for i in range(n_nodes)])
        b_vals = np.stack([np.asarray(b_eff(traj.xs[i], traj.xis[i])) for i in range(n_nodes)])
        return _ArrayCoeff(a_vals, traj.half_dt), _ArrayCoeff(b_vals, traj.half_dt)

    fd = _FdAflat(decomp)
    a_fn = a_field.compile()
    b_fn = b_field.compile()
    a_vals = np.empty((n_nodes, decomp.n, decomp.n), dtype=complex)
    b_vals = np.empty((n_nodes, b_field.rows, decomp.n), dtype=complex)
    prev = u_seed
    for i in range(n_nodes):
        x, xi = traj.xs[i], traj.xis[i]
        u0 = decomp.u_at(x, xi, ref=prev)
        prev = u0
        core = u0.conj().T @ np.asarray(a_fn(x, xi)) @ u0 + fd.at(x, xi, u0)
        a_vals[i] = pi_k @ core @ pi_k
        b_vals[i] = np.asarray(b_fn(x, xi)) @ u0 @ pi_k
    return _ArrayCoeff(a_vals, traj.half_dt), _ArrayCoeff(b_vals, traj.half_dt)


def _branch_flow(decomp: BranchDecomposition, k: int, seed: PhasePoint, grid: TimeGrid,
                 box: PhaseBox, xi_floor: float) -> PhaseTrajectory:
    if decomp.lambda_trees is not None:
        return hamiltonian_flow(
            decomp.lambda_trees[k], seed, grid, box=box,
            xi_floor=xi_floor if xi_floor > 0 else None, track_jacobian=False,
        )
    # numeric eigenvalue flow: central-difference gradient of the k-th branch
    d = decomp.d

    def grad(x, xi):
        gx = np.empty(d)
        gxi = np.empty(d)
        for j in range(d):
            ex = np.zeros(d)
            ex[j] = FD_STEP
            gx[j] = (decomp.lambdas_at(x + ex, xi)[k] - decomp.lambdas_at(x - ex, xi)[k]) / (
                2 * FD_STEP
            )
            gxi[j] = (decomp.lambdas_at(x, xi + ex)[k] - decomp.lambdas_at(x, xi - ex)[k]) / (
                2 * FD_STEP
            )
        return gx, gxi

    n_fine = 2 * grid.steps
    h_step = 0.5 * grid.dt
    xs = np.empty((n_fine + 1, d))
    xis = np.empty((n_fine + 1, d))
    xs[0], xis[0] = seed.x, seed.xi
    x, xi = seed.x.copy(), seed.xi.copy()
    for i in range(n_fine):
        def rhs(state):
            gx, gxi = grad(state[:d], state[d:])
            return np.concatenate([gxi, -gx])

        state = np.concatenate([x, xi])
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * h_step * k1)
        k3 = rhs(state + 0.5 * h_step * k2)
        k4 = rhs(state + h_step * k3)
        state = state + (h_step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        x, xi = state[:d], state[d:]
        xs[i + 1], xis[i + 1] = x, xi
        if box is not None and not box.contains(x, xi):
            from .errors import BoxExitError

            raise BoxExitError((i + 1) * h_step, (x.copy(), xi.copy()))
    return PhaseTrajectory(grid=grid, xs=xs, xis=xis, jac_det=None)


def _check_gap_along(decomp: BranchDecomposition, traj: PhaseTrajectory):
    if decomp.m == 1:
        return
    for i in range(0, traj.xs.shape[0], 2):
        lam = decomp.lambdas_at(traj.xs[i], traj.xis[i])
        decomp.check_gap_values(lam, (traj.xs[i], traj.xis[i]))


def system_cost_limit(
    problem: SystemProblem,
    grid: TimeGrid,
    decomp: BranchDecomposition | None = None,
    branch_order: list | None = None,
) -> SystemCostResult:
    """Limit inverse cost: sum_k b_T,k* G_T,k b_T,k / sum_k |b_T,k|^2.

    Branch initial amplitudes are Pi_k U*(seed) b0 (resolution of identity
    preserves |b0|^2); the 'full' mode feeds the whole b0 to every branch
    instead.  Branch computations are independent; `branch_order` only fixes
    the summation order of the final reduction.
    """
    if decomp is None:
        decomp = decompose(problem.h, problem.box)

    if decomp.is_scalar and decomp.expression_backed:
        # single scalar branch: exactly the scalar-principal pipeline
        mic = MicrolocalProblem(
            h=decomp.lambda_trees[0], a=problem.a, b=problem.b, T=problem.T,
            seed=problem.seed, b0=problem.b0, xi_floor=problem.xi_floor, box=problem.box,
        )
        res: CostLimitResult = microlocal_cost_limit(mic, grid)
        branch = BranchReport(
            index=0,
            lambda_seed=float(decomp.lambdas_at(problem.seed.x, problem.seed.xi)[0]),
            b_T=res.b_T,
            rayleigh=res.inverse_cost * float(np.linalg.norm(res.b_T)) ** 2,
            weight=float(np.linalg.norm(res.b_T)) ** 2,
            gramian=res.gramian,
        )
        return SystemCostResult(
            inverse_cost=res.inverse_cost, cost=res.cost, branches=[branch],
            decomposition=decomp,
        )

    u_seed = decomp.u_at(problem.seed.x, problem.seed.xi)
    b0 = problem.b0 / np.linalg.norm(problem.b0)
    reports = []
    for k in range(decomp.m):
        traj = _branch_flow(decomp, k, problem.seed, grid, problem.box, problem.xi_floor)
        _check_gap_along(decomp, traj)
        a_coeff, b_coeff = _branch_coeffs_along(problem.a, problem.b, decomp, k, traj, u_seed)
        lyap = LyapunovProblem(
            a=a_coeff, b=b_coeff, T=grid.T, n_state=decomp.n, n_obs=problem.b.rows
        )
        gram = solve_lyapunov(lyap, grid)
        if problem.initial_amplitude == "projected":
            bk0 = decomp.pi[k] @ (u_seed.conj().T @ b0)
        else:
            bk0 = b0.copy()

        def rhs(t, bvec, coeff=a_coeff):
            return -coeff(t) @ bvec

        bk_T = rk4_integrate(rhs, bk0.astype(complex), grid, store=False)
        weight = float(np.linalg.norm(bk_T)) ** 2
        rayleigh = float(np.real(np.conj(bk_T) @ gram.g_final @ bk_T))
        reports.append(
            BranchReport(
                index=k,
                lambda_seed=float(decomp.lambdas_at(problem.seed.x, problem.seed.xi)[k]),
                b_T=bk_T,
                rayleigh=rayleigh,
                weight=weight,
                gramian=gram,
            )
        )

    order = branch_order if branch_order is not None else list(range(decomp.m))
    num = 0.0
    den = 0.0
    for k in order:
        num += reports[k].rayleigh
        den += reports[k].weight
    if den <= 0.0:
        raise NotObservableError(0.0, 0.0, "all branch amplitudes vanished")
    inverse_cost = num / den
    threshold = 1e-12
    if inverse_cost <= threshold:
        raise NotObservableError(inverse_cost, threshold)
    return SystemCostResult(
        inverse_cost=inverse_cost,
        cost=1.0 / inverse_cost,
        branches=reports,
        decomposition=decomp,
    )
