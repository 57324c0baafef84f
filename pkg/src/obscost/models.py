"""Built-in symbol triples (H, A, B): Couette, shear transport, rotating gas.

couette
    Linearized incompressible Euler at the shear steady state (x2, 0):
    H = x2*xi1 and A = (Id - 2 xi (x) xi / |xi|^2) * D ubar, observed through
    B = diag(1, 0).  A carries the frequency cutoff chi(|xi|) (vanishing for
    |xi| <= 1/4, equal to 1 for |xi| >= 1/2) so it stays bounded near xi = 0;
    H is kept in its pure bilinear form.

transport-shear
    The transport equation u_t + (v . grad) u + A(x) u = 0 with v = (x2, 0)
    recast as a scalar-principal pseudo-differential problem:
    H = v(x) . xi, A(x, xi) = A(x) - (div v / 2) Id = A(x) since the shear is
    divergence free.

rotating-gas
    Symmetrized principal symbol of 2-D compressible gas dynamics in a
    rapidly rotating frame, a 4x4 Hermitian field with a multiplicity-2
    middle branch.  Comes with a closed-form unitary diagonalizer so the
    half-bracket term can be cross-checked against exact expression trees.
    Exponent convention: the mixed exp(s/gamma) vs exp(s/(c gamma)) factors
    of the source display are normalized to exp(s/(c gamma)) throughout,
    which is the unique choice making the symmetrized field Hermitian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from . import symbols as sym
from .symbols import Chi, Const, Expr, SymbolField, Sqrt, Var, add, div, mul, neg, powi, sub


def _xi_norm_sq() -> Expr:
    return add(powi(Var("xi1"), 2), powi(Var("xi2"), 2))


def couette_symbols(cutoff: bool = True) -> tuple[SymbolField, SymbolField, SymbolField]:
    """(H, A, B) for the Couette flow ubar = (x2, 0), d = 2, N = 2."""
    d = 2
    h = SymbolField([[mul(Var("x2"), Var("xi1"))]], d)
    q = _xi_norm_sq()
    # (Id - 2 xi(x)xi / |xi|^2) @ [[0, 1], [0, 0]]
    a12 = sub(Const(1.0), div(mul(Const(2.0), powi(Var("xi1"), 2)), q))
    a22 = neg(div(mul(Const(2.0), mul(Var("xi1"), Var("xi2"))), q))
    if cutoff:
        chi = Chi(Sqrt(q), 0)
        a12 = mul(chi, a12)
        a22 = mul(chi, a22)
    a = SymbolField([[Const(0.0), a12], [Const(0.0), a22]], d)
    b = SymbolField.constant(np.array([[1.0, 0.0], [0.0, 0.0]]), d)
    return h, a, b


def transport_shear_symbols(
    a_entries=None, b_entries=None
) -> tuple[SymbolField, SymbolField, SymbolField]:
    """(H, A, B) for shear transport v = (x2, 0); A, B given as x-expression strings."""
    d = 2
    h = SymbolField([[mul(Var("x2"), Var("xi1"))]], d)
    if a_entries is None:
        a = SymbolField.zeros(2, 2, d)
    else:
        a = SymbolField.from_strings(a_entries, d)
    if b_entries is None:
        b = SymbolField.identity(2, d)
    else:
        b = SymbolField.from_strings(b_entries, d)
    return h, a, b


# ---------------------------------------------------------------------------
# rotating gas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RotatingGasParams:
    gamma: float = 1.4
    c: float = 1.0
    sbar: float = 0.2
    # shear, reference pressure variable and Coriolis profiles (functions of x2)
    ubar1: str = "0.5 + 0.25*sin(x2)"
    pibar: str = "1 + 0.3*cos(x2)"
    b_profile: str = "1 + 0.5*sin(x2)"

    def __post_init__(self):
        if not self.gamma > 1.0:
            raise ConfigError(f"gamma must exceed 1, got {self.gamma}")
        if not self.c > 0.0:
            raise ConfigError(f"sound speed must be positive, got {self.c}")


@dataclass(frozen=True)
class RotatingGasModel:
    """Symbol triple plus closed-form eigenstructure of the rotating-gas fixture."""

    params: RotatingGasParams
    h: SymbolField
    a: SymbolField
    b: SymbolField
    lambdas: tuple  # three branch trees, ascending
    u: SymbolField  # analytic unitary diagonalizer, columns ordered with lambdas
    block_sizes: tuple = (1, 2, 1)
    # trees reused by the display formulas
    _eta: Expr = field(default=None, repr=False)
    _btilde: Expr = field(default=None, repr=False)

    def a_flat_display_entry(self, x, xi) -> complex:
        """Published closed form of the nonzero middle-branch entry of A-flat.

        In the (e4, u0) ordering of the multiplicity-2 eigenspace the block is
        [[0, 0], [0, z]] with z = -i xi1 eta d(btilde)/dx2 / <xi>_b^2.
        """
        d_btilde = self._btilde.diff("x2")
        xi_b_sq = add(_xi_norm_sq(), powi(self._btilde, 2))
        tree = neg(
            div(mul(Var("xi1"), mul(self._eta, d_btilde)), xi_b_sq)
        )
        env = {"x1": x[0], "x2": x[1], "xi1": xi[0], "xi2": xi[1]}
        return 1j * complex(sym.evaluate(tree, env))

    def eigenvalues_numeric_check(self, x, xi) -> str:
        """Which closed form matches the numerically computed outer branches.

        The source display writes the outer eigenvalues with a ubar1*xi2
        drift; the algebra gives ubar1*xi1.  Returns 'xi1' or 'xi2'.
        """
        from .matlib import hermitian_eigen

        hval = self.h.evaluate(x, xi)
        lam, _ = hermitian_eigen(hval)
        env = {"x1": x[0], "x2": x[1], "xi1": xi[0], "xi2": xi[1]}
        u1 = sym.evaluate(sym.parse_symbol(self.params.ubar1, 2), env)
        rho = abs(sym.evaluate(self.lambdas[2], env) - sym.evaluate(self.lambdas[1], env))
        for tag, drift in (("xi1", u1 * xi[0]), ("xi2", u1 * xi[1])):
            if abs(lam[-1] - (drift + rho)) < 1e-8 * max(1.0, abs(lam[-1])):
                return tag
        return "neither"


def rotating_gas_model(params: RotatingGasParams | None = None) -> RotatingGasModel:
    p = params or RotatingGasParams()
    d = 2
    u1 = sym.parse_symbol(p.ubar1, d)
    pib = sym.parse_symbol(p.pibar, d)
    bprof = sym.parse_symbol(p.b_profile, d)
    gamma, c, sbar = p.gamma, p.c, p.sbar
    c1 = float(np.sqrt(gamma * (gamma - 1.0)))
    exp_half = float(np.exp(sbar / (2.0 * c * gamma)))
    exp_full = float(np.exp(sbar / (c * gamma)))

    xi1, xi2 = Var("xi1"), Var("xi2")
    eta = mul(Const(c1 * exp_half), pib)
    drift = mul(u1, xi1)

    zero = Const(0.0)
    mib = mul(Const(-1j), bprof)
    h = SymbolField(
        [
            [drift, mib, mul(eta, xi1), zero],
            [mul(Const(1j), bprof), drift, mul(eta, xi2), zero],
            [mul(eta, xi1), mul(eta, xi2), drift, zero],
            [zero, zero, zero, drift],
        ],
        d,
    )
    # keep the unsymmetrized sub-principal part, conjugated by sqrt(S)
    sigma = float(np.sqrt(4.0 * gamma / (gamma - 1.0)) * exp_half)
    du1 = u1.diff("x2")
    dpib = pib.diff("x2")
    a23 = mul(Const(2.0 * gamma * exp_full / sigma), dpib)
    a24 = mul(Const(2.0 * gamma * exp_full), mul(pib, dpib))
    a32 = mul(Const(sigma), dpib)
    a = SymbolField(
        [
            [zero, du1, zero, zero],
            [zero, zero, a23, a24],
            [zero, a32, zero, zero],
            [zero, zero, zero, zero],
        ],
        d,
    )
    b = SymbolField.identity(4, d)

    # eigenstructure: drift with multiplicity 2, drift +- rho
    q = _xi_norm_sq()
    rho = Sqrt(add(powi(bprof, 2), mul(powi(eta, 2), q)))
    lam_minus = sub(drift, rho)
    lam_plus = add(drift, rho)
    lambdas = (lam_minus, drift, lam_plus)

    # middle branch: e4 and (-i xi2, i xi1, btilde, 0)/<xi>_b with btilde = -b/eta
    btilde = neg(div(bprof, eta))
    xi_b = Sqrt(add(q, powi(btilde, 2)))
    u0 = [
        div(mul(Const(-1j), xi2), xi_b),
        div(mul(Const(1j), xi1), xi_b),
        div(btilde, xi_b),
        zero,
    ]
    # outer branches: ((+-rho xi1 - i b xi2), (+-rho xi2 + i b xi1), eta |xi|, 0) / (sqrt2 rho |xi|)
    xin = Sqrt(q)
    sqrt2 = Const(float(np.sqrt(2.0)))
    den = mul(sqrt2, mul(rho, xin))

    def outer(sign: float):
        srho = mul(Const(sign), rho)
        comp1 = div(sub(mul(srho, xi1), mul(mul(Const(1j), bprof), xi2)), den)
        comp2 = div(add(mul(srho, xi2), mul(mul(Const(1j), bprof), xi1)), den)
        comp3 = div(mul(eta, xin), mul(sqrt2, rho))
        return [comp1, comp2, comp3, zero]

    v_minus = outer(-1.0)
    v_plus = outer(+1.0)
    e4 = [zero, zero, zero, Const(1.0)]
    columns = [v_minus, e4, u0, v_plus]
    u_field = SymbolField(
        [[columns[jc][ir] for jc in range(4)] for ir in range(4)], d
    )

    return RotatingGasModel(
        params=p, h=h, a=a, b=b, lambdas=lambdas, u=u_field, _eta=eta, _btilde=btilde
    )


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def builtin_model(name: str, params: dict | None = None):
    """Return the (H, A, B) symbol triple of a named built-in model."""
    params = dict(params or {})
    if name == "couette":
        cutoff = bool(params.pop("cutoff", True))
        if params:
            raise ConfigError(f"unknown couette parameters: {sorted(params)}")
        return couette_symbols(cutoff=cutoff)
    if name == "transport-shear":
        a_entries = params.pop("a", None)
        b_entries = params.pop("b", None)
        if params:
            raise ConfigError(f"unknown transport-shear parameters: {sorted(params)}")
        return transport_shear_symbols(a_entries, b_entries)
    if name == "rotating-gas":
        model = rotating_gas_model(RotatingGasParams(**params) if params else None)
        return model.h, model.a, model.b
    raise ConfigError(f"unknown builtin model {name!r}")
