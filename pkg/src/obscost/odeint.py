"""Fixed-step RK4 integration of vector/matrix ODEs on [0, T] with dense output.

Every ODE in the cost pipelines (flows, resolvents, Lyapunov, amplitudes) is
smooth and non-stiff on its declared domain, so classical RK4 on a uniform
grid is used throughout.  States are arbitrary-shape numpy arrays; right-hand
sides are callables f(t, y) -> dy/dt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IntegrationError

DEFAULT_STEPS_PER_UNIT_TIME = 1024


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i T / M on [0, T]."""

    T: float
    steps: int

    def __post_init__(self):
        if not (self.T > 0.0):
            raise ValueError(f"final time must be positive, got {self.T}")
        if self.steps < 1:
            raise ValueError(f"need at least one step, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.steps * factor)

    @staticmethod
    def default(T: float, steps_per_unit: int = DEFAULT_STEPS_PER_UNIT_TIME) -> "TimeGrid":
        return TimeGrid(T, max(1, int(np.ceil(steps_per_unit * T))))


@dataclass
class MatrixPath:
    """Time-sampled matrix-valued function on a TimeGrid."""

    grid: TimeGrid
    values: np.ndarray  # (steps + 1, n, m)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape[0] != self.grid.steps + 1:
            raise ValueError("one value per grid node required")
        if not np.all(np.isfinite(v.view(float))):
            raise ValueError("non-finite entries in MatrixPath")
        self.values = v

    def at_node(self, i: int) -> np.ndarray:
        return self.values[i]

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]


def rk4_integrate(f, y0, grid: TimeGrid, store: bool = True):
    """Classical RK4.  Returns the full path (steps+1, *shape) or just y(T).

    Raises IntegrationError (with the blow-up time) if the state leaves the
    finite range.
    """
    y = np.array(y0, dtype=complex if np.iscomplexobj(y0) else float)
    h = grid.dt
    out = None
    if store:
        out = np.empty((grid.steps + 1,) + y.shape, dtype=y.dtype)
        out[0] = y
    t = 0.0
    for i in range(grid.steps):
        k1 = f(t, y)
        k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = f(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = (i + 1) * h
        if not np.all(np.isfinite(np.asarray(y).view(float))):
            raise IntegrationError(t)
        if store:
            out[i + 1] = y
    return out if store else y


def convergence_order(f, y0, T: float, coarse: int = 64, reference: int = 4096) -> float:
    """Richardson estimate of the observed order of accuracy.

    Compares terminal errors at `coarse` and `2 * coarse` steps against a
    reference solution at `reference` steps.  Returns +inf when both errors
    vanish (exactly integrated problems).
    """
    ref = rk4_integrate(f, y0, TimeGrid(T, reference), store=False)
    e1 = np.linalg.norm(np.asarray(rk4_integrate(f, y0, TimeGrid(T, coarse), store=False) - ref))
    e2 = np.linalg.norm(
        np.asarray(rk4_integrate(f, y0, TimeGrid(T, 2 * coarse), store=False) - ref)
    )
    if e1 < 1e-15 and e2 < 1e-15:
        return float("inf")
    if e2 == 0.0:
        return float("inf")
    return float(np.log2(e1 / e2))
