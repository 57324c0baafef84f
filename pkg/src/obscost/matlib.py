"""Dense small linear algebra: matrices, vectors, Frobenius product, Hermitian eigensolver.

Everything here targets the tiny systems of the cost pipelines (N <= 8, hard
cap 16), so plain dense storage and a cyclic Jacobi sweep are all that is
needed.  Values are complex-capable throughout since the rotating-gas
symmetrized symbol and its eigenvectors are genuinely complex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

DIM_CAP = 16

# Jacobi sweep parameters
_OFFDIAG_TOL = 1e-13
_MAX_SWEEPS = 100


def _as_complex_matrix(entries) -> np.ndarray:
    m = np.asarray(entries, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[0] > DIM_CAP:
        raise DimensionError(f"dimension {m.shape[0]} outside [1, {DIM_CAP}]")
    if not np.all(np.isfinite(m.real)) or not np.all(np.isfinite(m.imag)):
        raise ValueError("matrix entries must be finite")
    return m


@dataclass(frozen=True)
class SquareMatrix:
    """Dense N x N complex matrix (N <= 16)."""

    entries: np.ndarray

    def __init__(self, entries):
        object.__setattr__(self, "entries", _as_complex_matrix(entries))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        m = self.entries
        scale = max(1.0, float(np.linalg.norm(m)))
        return float(np.linalg.norm(m - m.conj().T)) <= tol * scale

    @staticmethod
    def identity(n: int) -> "SquareMatrix":
        return SquareMatrix(np.eye(n))

    @staticmethod
    def zeros(n: int) -> "SquareMatrix":
        return SquareMatrix(np.zeros((n, n)))


@dataclass(frozen=True)
class ColumnVector:
    """Dense N-vector, complex-capable."""

    entries: np.ndarray

    def __init__(self, entries):
        v = np.asarray(entries, dtype=complex).reshape(-1)
        if v.size < 1 or v.size > DIM_CAP:
            raise DimensionError(f"dimension {v.size} outside [1, {DIM_CAP}]")
        if not np.all(np.isfinite(v.real)) or not np.all(np.isfinite(v.imag)):
            raise ValueError("vector entries must be finite")
        object.__setattr__(self, "entries", v)

    @property
    def dim(self) -> int:
        return self.entries.size

    def norm(self) -> float:
        return float(np.linalg.norm(self.entries))


def _raw(m) -> np.ndarray:
    if isinstance(m, SquareMatrix):
        return m.entries
    return np.asarray(m, dtype=complex)


def frobenius(a, b) -> complex:
    """Frobenius product A : B = tr(A* B).

    Satisfies A : (BC) = (A C*) : B and A : (CB) = (C* A) : B, which is what
    makes the Lyapunov equation dual to the energy-tensor ODE.
    """
    am, bm = _raw(a), _raw(b)
    if am.shape != bm.shape:
        raise DimensionError(f"shape mismatch {am.shape} vs {bm.shape}")
    val = complex(np.sum(np.conj(am) * bm))
    return val


def hermitian_eigen(m, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a Hermitian matrix by cyclic Jacobi rotations.

    Returns (eigenvalues ascending, unitary matrix of eigenvectors as
    columns).  Raises ValueError if the input is not Hermitian within `tol`
    relative to its norm.  Convergence: off-diagonal Frobenius norm below
    1e-13 * ||m||, at most 100 sweeps (always reached for N <= 16).
    """
    a = _raw(m).copy()
    n = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected square matrix, got {a.shape}")
    scale = max(1.0, float(np.linalg.norm(a)))
    if float(np.linalg.norm(a - a.conj().T)) > tol * scale:
        raise ValueError("hermitian_eigen: input is not Hermitian")
    # symmetrize to kill round-off asymmetry before sweeping
    a = 0.5 * (a + a.conj().T)
    v = np.eye(n, dtype=complex)

    def offdiag_norm(x):
        o = x - np.diag(np.diag(x))
        return float(np.linalg.norm(o))

    for _ in range(_MAX_SWEEPS):
        if offdiag_norm(a) <= _OFFDIAG_TOL * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                app = a[p, p].real
                aqq = a[q, q].real
                # complex rotation: phase absorbs arg(a_pq), then a real
                # Jacobi angle zeroes the pair
                phase = apq / abs(apq)
                tau = (aqq - app) / (2.0 * abs(apq))
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # columns of the rotation acting on (p, q)
                g = np.eye(n, dtype=complex)
                g[p, p] = c
                g[p, q] = s * phase
                g[q, p] = -s * np.conj(phase)
                g[q, q] = c
                a = g.conj().T @ a @ g
                a[p, q] = 0.0
                a[q, p] = 0.0
                v = v @ g

    lam = np.diag(a).real.copy()
    order = np.argsort(lam, kind="stable")
    lam = lam[order]
    v = v[:, order]
    return lam, v


def matrix_rank(m, rel_tol: float = 1e-10) -> int:
    """Rank by Gaussian elimination with full pivoting.

    Tolerance is relative to the Frobenius norm of the input, matching the
    Kalman-stack convention.
    """
    a = _raw(m).copy()
    if a.ndim != 2:
        raise DimensionError("matrix_rank expects a 2-d array")
    threshold = rel_tol * max(1.0, float(np.linalg.norm(a)))
    rank = 0
    rows, cols = a.shape
    row_used = np.zeros(rows, dtype=bool)
    col_used = np.zeros(cols, dtype=bool)
    for _ in range(min(rows, cols)):
        masked = np.abs(a.copy())
        masked[row_used, :] = 0.0
        masked[:, col_used] = 0.0
        i, j = np.unravel_index(np.argmax(masked), masked.shape)
        if masked[i, j] <= threshold:
            break
        rank += 1
        row_used[i] = True
        col_used[j] = True
        pivot = a[i, j]
        for r in range(rows):
            if r != i and not row_used[r]:
                a[r, :] -= (a[r, j] / pivot) * a[i, :]
    return rank


def lambda_min_2x2(g) -> float:
    """Smallest eigenvalue of a Hermitian 2x2 matrix, cancellation-safe.

    Uses lambda_min = 2 det / (tr + sqrt(tr^2 - 4 det)) so that tiny minimal
    eigenvalues (det << tr^2) are not lost to subtraction.
    """
    m = _raw(g)
    if m.shape != (2, 2):
        raise DimensionError("lambda_min_2x2 expects a 2x2 matrix")
    tr = (m[0, 0] + m[1, 1]).real
    det = (m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]).real
    disc = max(tr * tr - 4.0 * det, 0.0)
    root = np.sqrt(disc)
    if tr + root <= 0.0:
        return 0.5 * (tr - root)
    return 2.0 * det / (tr + root)
