"""Renormalization energies: the counterterm E^kappa(X), the constant-coefficient
energy E_Lambda, the dressed potential V^kappa(X) and its leading part.

Two normalizations of the squared density transform are supported:

``'paper'``
    ``|rho_hat|^2`` with the unitary transform, exactly as written in the
    counterterm formula, prefactor ``(2 pi)^-d`` included.
``'inner_product'``
    ``(2 pi)^d`` times the above, i.e. ``rho_hat(0) = q``.  This is the
    normalization under which the counterterm cancels the divergent part of
    ``V^kappa`` (both are then expressed through L2 inner products).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .opcore import (
    ChargeDensity,
    CoefficientSet,
    GridSpec,
    OperatorSet,
    check_kappa,
    rescale,
    sample,
    sample_gradient,
    sample_rows,
)
from .pdo import leading_symbols, quantize_kn

CONVENTIONS = ("paper", "inner_product")


class QuadratureError(RuntimeError):
    """Quadrature failed to converge; ``estimate`` holds the last value."""

    def __init__(self, msg: str, estimate: float):
        super().__init__(f"{msg} (partial estimate {estimate:.12g})")
        self.estimate = estimate


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    """Radial-angular rule: tensor Gauss-Legendre on the sphere, adaptive radial panels."""

    angular_order: int = 16
    rel_tol: float = 1e-8
    radial_order: int = 16
    max_refine: int = 6
    max_panels: int = 400

    def __post_init__(self):
        if not 1e-12 <= self.rel_tol <= 1e-4:
            raise ValueError(f"rel_tol must lie in [1e-12, 1e-4], got {self.rel_tol}")


@functools.lru_cache(maxsize=16)
def spherical_rule(dim: int, order: int = 16):
    """Directions ``(Q, d)`` and weights summing to the area of ``S^{d-1}``."""
    if dim == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    t, w = np.polynomial.legendre.leggauss(2 * order)
    phi = np.pi * (t + 1.0)
    wphi = np.pi * w
    if dim == 2:
        return np.stack([np.cos(phi), np.sin(phi)], axis=1), wphi
    ct, wt = np.polynomial.legendre.leggauss(order)
    C, P = np.meshgrid(ct, phi, indexing="ij")
    S = np.sqrt(1 - C**2)
    dirs = np.stack([S * np.cos(P), S * np.sin(P), C], axis=-1).reshape(-1, 3)
    wts = np.outer(wt, wphi).ravel()
    return dirs, wts


def _panel_nodes(a: float, b: float, order: int):
    t, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (b - a) * (t + 1) + a, 0.5 * (b - a) * w


def _panel_sum(g, a, b, order):
    r, w = _panel_nodes(a, b, order)
    return float(np.sum(w * g(r)))


def _refine_panel(g, a, b, order, coarse, tol, depth):
    """Accept the ``2n``-point value when it matches ``coarse``; otherwise bisect."""
    fine = _panel_sum(g, a, b, 2 * order)
    if abs(fine - coarse) <= tol:
        return fine, True
    if depth == 0:
        return fine, False
    m = 0.5 * (a + b)
    left, ok1 = _refine_panel(g, a, m, order, _panel_sum(g, a, m, order), 0.5 * tol, depth - 1)
    right, ok2 = _refine_panel(g, m, b, order, _panel_sum(g, m, b, order), 0.5 * tol, depth - 1)
    return left + right, ok1 and ok2


def radial_integrate(g: Callable, r_lo: float, r_scale: float, rule: QuadratureRule,
                     r_hi: Optional[float] = None, tail_scale: Optional[float] = None) -> float:
    """Integrate ``g(r)`` (vectorized) over ``[r_lo, r_hi]`` or ``[r_lo, inf)``.

    Panels start at width ``r_scale / 16`` and double in width.  On an
    infinite range panels are added until two consecutive panels beyond
    ``tail_scale`` contribute below ``rel_tol * 1e-3`` of the total.  Each
    panel is then checked against a rule of twice the order and bisected
    (up to ``max_refine`` times) until both agree.
    """
    tail_scale = r_scale if tail_scale is None else tail_scale
    order = rule.radial_order
    panels = []
    total = 0.0
    a, width, quiet = r_lo, r_scale / 16.0, 0
    for _ in range(rule.max_panels):
        b = a + width if r_hi is None else min(a + width, r_hi)
        part = _panel_sum(g, a, b, order)
        panels.append((a, b, part))
        total += part
        a, width = b, 2.0 * width
        if r_hi is not None:
            if b >= r_hi:
                break
            continue
        if b > tail_scale and abs(part) <= rule.rel_tol * 1e-3 * abs(total):
            quiet += 1
            if quiet >= 2:
                break
        else:
            quiet = 0
    else:
        raise QuadratureError("radial panels exhausted", total)
    tol = 0.1 * rule.rel_tol * abs(total) / np.sqrt(len(panels))
    refined, ok = 0.0, True
    for a, b, part in panels:
        val, good = _refine_panel(g, a, b, order, part, tol, rule.max_refine)
        refined += val
        ok = ok and good
    if not ok:
        raise QuadratureError("radial quadrature did not converge", refined)
    return refined


def integrate_radial_angular(f: Callable, dim: int, r_scale: float, rule: QuadratureRule,
                             r_lo: float = 0.0, r_hi: Optional[float] = None,
                             tail_scale: Optional[float] = None) -> float:
    """``int f(xi) dxi`` over ``R^d`` in polar coordinates; ``f`` takes ``(..., d)`` points."""
    dirs, wts = spherical_rule(dim, rule.angular_order)

    def g(r):
        pts = r[:, None, None] * dirs[None, :, :]
        vals = f(pts)
        return (np.real(vals) @ wts) * r ** (dim - 1)

    return radial_integrate(g, r_lo, r_scale, rule, r_hi=r_hi, tail_scale=tail_scale)


# ---------------------------------------------------------------------------
# counterterm E^kappa(X)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CountertermQuery:
    """Inputs of ``E^kappa(X)``."""

    X: tuple
    kappa: float
    coeffs: CoefficientSet
    density: ChargeDensity
    quadrature: QuadratureRule = field(default_factory=QuadratureRule)
    convention: str = "paper"

    def __post_init__(self):
        if self.kappa < 1:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")


def _convention_factor(convention: str, dim: int) -> float:
    return 1.0 if convention == "paper" else (2 * np.pi) ** dim


def _density_scale(rho: ChargeDensity, kappa: float) -> float:
    return kappa / rho.width


def E_kappa_integrand(query: CountertermQuery, rho_hat_sq: Optional[Callable] = None
                      ) -> Callable:
    d = query.coeffs.dim
    ls = leading_symbols(query.coeffs)
    X = np.asarray(query.X, dtype=float).reshape(d)
    pref = -0.5 * (2 * np.pi) ** (-d) * _convention_factor(query.convention, d)
    rho = rescale(query.density, query.kappa)
    if rho_hat_sq is None:
        rho_hat_sq = lambda xi: np.abs(rho.fourier(xi)) ** 2

    def f(xi):
        h0 = ls.h0(X, xi)
        K = ls.K(X, xi)
        return pref * (h0 + 1.0) ** -0.5 * K / (K + 1.0) ** 2 * rho_hat_sq(xi)

    return f


def E_kappa(query: CountertermQuery, rho_hat_sq: Optional[Callable] = None) -> float:
    """Counterterm ``E^kappa(X) = -1/2 (2 pi)^-d int (h0(X,xi)+1)^-1/2 K (K+1)^-2 |rho_hat|^2(xi/kappa)``.

    Parameters
    ----------
    rho_hat_sq : callable, optional
        Replaces ``|rho_hat^kappa|^2`` (used to inject test integrands).
    """
    f = E_kappa_integrand(query, rho_hat_sq)
    d = query.coeffs.dim
    scale = _density_scale(query.density, query.kappa)
    return integrate_radial_angular(f, d, min(1.0, scale), query.quadrature,
                                    tail_scale=10 * max(1.0, scale))


def E_kappa_value(X, kappa: float, coeffs: CoefficientSet, density: ChargeDensity,
                  convention: str = "paper", rule: Optional[QuadratureRule] = None) -> float:
    X = tuple(np.atleast_1d(np.asarray(X, dtype=float)).tolist())
    q = CountertermQuery(X, float(kappa), coeffs, density, rule or QuadratureRule(), convention)
    return E_kappa(q)


def asymptotic_slope(coeffs: CoefficientSet, X, q: float, convention: str = "paper",
                     order: int = 64) -> float:
    """Large-kappa slope ``dE^kappa / dlog kappa``.

    In ``d = 3`` this is
    ``-1/2 (2 pi)^(-2d) q^2 int_{S^2} (theta.a(X) theta)^(-1/2) (theta.A(X) theta)^(-1) dtheta``
    in the ``'paper'`` normalization; the integral converges for ``d < 3`` so
    the slope vanishes there.
    """
    d = coeffs.dim
    if d < 3:
        return 0.0
    X = np.asarray(X, dtype=float).reshape(d)
    dirs, wts = spherical_rule(d, order)
    ls = leading_symbols(coeffs)
    ang = np.sum(wts * ls.h0(X, dirs) ** -0.5 / ls.K(X, dirs))
    return -0.5 * (2 * np.pi) ** (-2 * d) * q * q * ang * _convention_factor(convention, d)


def fit_log_slope(kappas, values) -> tuple[float, float]:
    """Least-squares ``values ~ slope * log(kappa) + intercept``."""
    slope, icpt = np.polyfit(np.log(np.asarray(kappas, dtype=float)),
                             np.asarray(values, dtype=float), 1)
    return float(slope), float(icpt)


def nelson_E_Lambda(Lambda: float, m: float, sigma: float,
                    rule: Optional[QuadratureRule] = None) -> float:
    """Constant-coefficient counterterm with a sharp cutoff in three dimensions.

    ``E_Lambda = -1/2 int_{|k| < Lambda, omega(k) >= sigma} omega^-1 (omega + |k|^2/2)^-1 dk``
    with ``omega(k) = (|k|^2 + m^2)^(1/2)``.  The sharp cutoff ``rho_hat = 1``
    carries no ``(2 pi)`` factor; multiplying by ``(2 pi)^-3 q^2`` (``'inner_product'``)
    or ``(2 pi)^-6 q^2`` (``'paper'``) converts its slope to the one of ``E^kappa``.
    """
    if not Lambda > sigma:
        raise ValueError(f"Lambda = {Lambda} must exceed sigma = {sigma}")
    rule = rule or QuadratureRule()
    k_lo = np.sqrt(max(sigma * sigma - m * m, 0.0))
    if k_lo >= Lambda:
        return 0.0

    def g(k):
        w = np.sqrt(k * k + m * m)
        return 4 * np.pi * k * k / (w * (w + 0.5 * k * k))

    # panels from k_lo towards Lambda grow geometrically, so log-many suffice
    val = radial_integrate(g, k_lo, max(1.0, k_lo), rule, r_hi=Lambda)
    return -0.5 * val


# ---------------------------------------------------------------------------
# V^kappa on the discrete operators (exact route)
# ---------------------------------------------------------------------------


def _weighted_inner(u, M, v):
    """Row-wise ``(u_i | M v_i)``."""
    return np.einsum("ij,ij->i", u, v @ M.T)


def _tinv_rho(ops: OperatorSet, rho_rows: np.ndarray) -> np.ndarray:
    return ops.T.solve(rho_rows)


def V_kappa(X, kappa: float, operators: OperatorSet, dressing_field=None,
            density: Optional[ChargeDensity] = None) -> np.ndarray:
    """Dressed potential on particle nodes.

    ``V(X) = -(rho_X | omega^-1 F T^-1 rho_X) + 1/2 (T^-1 rho_X | F^2 T^-1 rho_X)
    + 1/2 sum A_jk (grad_j T^-1 rho_X | omega^-1 F^2 grad_k T^-1 rho_X)``

    Parameters
    ----------
    X : int, sequence of int or None
        Particle node indices; ``None`` returns all nodes.
    dressing_field : DressingField, optional
        Supplies the density rows ``rho^kappa_{X_i}``; otherwise ``density``
        is sampled.
    """
    rho = _rho_rows(operators, kappa, dressing_field, density)
    ops = operators
    w = _tinv_rho(ops, rho)
    F = ops.F_high.matrix
    F2 = F @ F
    oinv = ops.omega_inv.matrix
    val = -_weighted_inner(rho, oinv @ F, w) + 0.5 * _weighted_inner(w, F2, w)
    grads = [G @ w for G in ops.grads]
    M = oinv @ F2
    d = ops.particle_grid.dim
    for j in range(d):
        for k in range(d):
            val = val + 0.5 * ops.A_nodes[:, j, k] * _weighted_inner(grads[j], M, grads[k])
    return _select(val, X)


def _rho_rows(ops, kappa, dressing_field, density):
    if dressing_field is not None:
        if abs(dressing_field.kappa - kappa) > 1e-12 * kappa:
            raise ValueError("dressing field was built for a different kappa")
        if dressing_field.boson_grid != ops.boson_grid or dressing_field.particle_grid != ops.particle_grid:
            raise ValueError("grid mismatch between dressing field and operators")
        return dressing_field.rho
    if density is None:
        raise ValueError("need a dressing field or a density")
    return sample_rows(rescale(density, kappa), ops.boson_grid, ops.particle_grid)


def _select(val, X):
    if X is None:
        return val
    return val[X]


def split_V(X, kappa: float, operators: OperatorSet, density: ChargeDensity,
            dressing_field=None) -> dict:
    """Split ``V = V1 + V2`` following the symbol decomposition of ``T^-1``.

    With ``w = T^-1 rho``, ``y_j = T^-1 (d_j rho)`` (the symbol applied to the
    derivative of the density) and ``u_j = grad_{X_j} w + y_j``:

    ``V1 = 1/2 (w|F^2 w) + 1/2 sum A (u_j|M u_k) - sum A (u_j|M y_k)``,
    ``V2 = -(rho|omega^-1 F w) + 1/2 sum A (y_j|M y_k)``, ``M = omega^-1 F^2``.
    """
    ops = operators
    rho_k = rescale(density, kappa)
    rho = _rho_rows(ops, kappa, dressing_field, density)
    drho = sample_rows(rho_k, ops.boson_grid, ops.particle_grid, gradient=True)
    w = ops.T.solve(rho)
    F = ops.F_high.matrix
    F2 = F @ F
    oinv = ops.omega_inv.matrix
    M = oinv @ F2
    d = ops.particle_grid.dim
    y = [ops.T.solve(drho[..., j]) for j in range(d)]
    u = [ops.grads[j] @ w + y[j] for j in range(d)]
    V1 = 0.5 * _weighted_inner(w, F2, w)
    V2 = -_weighted_inner(rho, oinv @ F, w)
    for j in range(d):
        for k in range(d):
            A = ops.A_nodes[:, j, k]
            V1 = V1 + A * (0.5 * _weighted_inner(u[j], M, u[k]) - _weighted_inner(u[j], M, y[k]))
            V2 = V2 + 0.5 * A * _weighted_inner(y[j], M, y[k])
    return {"V1": _select(V1, X), "V2": _select(V2, X)}


def V_constant_fourier(kappa: float, density: ChargeDensity, grid: GridSpec, A: float,
                       mass: float, sigma: float) -> float:
    """Momentum-space ``V^kappa`` for constant coefficients on a matched tensor grid.

    On the lattice all operators are Fourier multipliers; a tensor plane wave
    ``e^{ik(x - X)}`` sees ``T(k) = omega(k) + A k^2`` and ``grad_X -> -i k``.
    """
    from .opcore import smoothstep_high
    d = grid.dim
    k = grid.dual_freqs
    k2 = np.sum(k * k, axis=1)
    w = np.sqrt(k2 + mass**2)
    F = smoothstep_high(sigma)(w)
    Kk = k2.copy()
    # Nyquist components of the particle gradient are zeroed
    kg = k.copy()
    kg[np.isclose(np.abs(kg), grid.nyquist)] = 0.0
    grad2 = np.sum(kg * kg, axis=1)
    rho_sq = (2 * np.pi / grid.box_length) ** d * np.abs(rescale(density, kappa).fourier(k)) ** 2
    T = w + A * Kk
    terms = -F / (w * T) + 0.5 * F**2 / T**2 + 0.5 * A * grad2 * F**2 / (w * T**2)
    return float(np.sum(rho_sq * terms))


# ---------------------------------------------------------------------------
# leading part V~2 (symbol route and grid route)
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=16)
def _gauss_hermite(dim: int, order: int):
    t, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / np.sqrt(2 * np.pi)
    T = np.stack(np.meshgrid(*([t] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    W = np.prod(np.stack(np.meshgrid(*([w] * dim), indexing="ij"), axis=-1).reshape(-1, dim),
                axis=1)
    return T, W


def _symbol_G(coeffs, q, K, Axi, x):
    """``-c + 1/2 K d - i/2 sum A_jk xi_k d_{x_j} d`` at (complex) points ``x``.

    ``q = xi.a0 xi`` and ``K`` are per frequency; the boson metric is
    ``alpha(x) a0`` so only ``alpha`` and its gradient depend on ``x``.
    """
    alpha, dalpha = coeffs.a.profile.value_and_grad(x)
    s = 1.0 / np.sqrt(alpha * q + 1.0)
    inv = 1.0 / (K + 1.0)
    G = s * inv * (-1.0 + 0.5 * K * inv)
    # x-derivative of d = s (K+1)^-2 is -1/2 s^3 (K+1)^-2 q grad(alpha)
    G = G + 0.25j * (s * s * s) * (inv * inv) * q * np.sum(Axi * dalpha, axis=-1)
    return G


def V_tilde2(X, kappa: float, coeffs: CoefficientSet, density: ChargeDensity,
             route: str = "symbol", grid: Optional[GridSpec] = None,
             rule: Optional[QuadratureRule] = None, gh_order: int = 6,
             convention: str = "inner_product") -> float:
    """Leading part ``V~2 = -(rho|c_X(x,D) rho) + 1/2 sum A_jk (d_j rho|d_X(x,D) d_k rho)``.

    Parameters
    ----------
    route : {'symbol', 'grid'}
        ``'symbol'`` evaluates the oscillatory integral in polar frequency
        coordinates; the inner position integral against the Gaussian (or
        mexican-hat) profile is done by Gauss-Hermite quadrature on a contour
        shifted by ``i s^2 xi / kappa``, which requires coefficient profiles
        analytic in a strip.  ``'grid'`` quantizes ``c_X`` and ``d_X`` on a
        torus grid (any profile).
    convention : str
        ``'inner_product'`` (the natural one, default) or ``'paper'`` (divided
        by ``(2 pi)^d``) for comparison with :func:`E_kappa`.
    """
    d = coeffs.dim
    X = np.atleast_1d(np.asarray(X, dtype=float)).reshape(d)
    rho = rescale(density, kappa)
    ls = leading_symbols(coeffs)
    conv = 1.0 if convention == "inner_product" else (2 * np.pi) ** (-d)
    if route == "grid":
        if grid is None:
            raise ValueError("grid route needs a grid")
        check_kappa(grid, rho)
        r = sample(rho, grid, X)
        dr = sample_gradient(rho, grid, X)
        C = quantize_kn(ls.symbol("c", X), grid)
        D = quantize_kn(ls.symbol("d", X), grid)
        A_X = coeffs.A(X)
        val = -np.vdot(r, C @ r)
        for j in range(d):
            for k in range(d):
                val += 0.5 * A_X[j, k] * np.vdot(dr[:, j], D @ dr[:, k])
        return float(np.real(val)) * conv
    if route != "symbol":
        raise ValueError(f"unknown route '{route}'")
    if density.profile not in ("gaussian", "mexican_hat"):
        raise ValueError("symbol route supports gaussian and mexican_hat profiles")
    rule = rule or QuadratureRule()
    s = density.width
    W, Wt = _gauss_hermite(d, gh_order)
    W = s * W
    A_X = coeffs.A(X)

    def f(xi):
        shp = xi.shape[:-1]
        xi2 = xi.reshape(-1, d)
        t = xi2 / kappa
        tt = np.sum(t * t, axis=1)
        # contour-shifted position samples z = w + i s^2 t
        z = W[None, :, :] + 1j * s * s * t[:, None, :]
        x = X + z / kappa
        q = np.einsum("nj,jk,nk->n", xi2, coeffs.a.base_matrix, xi2)[:, None]
        K = ls.K(X, xi2)[:, None]
        Axi = (xi2 @ A_X.T)[:, None, :]
        G = _symbol_G(coeffs, q, K, Axi, x)
        if density.profile == "gaussian":
            Pz = density.q
        else:
            Pz = density.amplitude * (d - np.sum(z * z, axis=-1) / (s * s))
        inner = np.exp(-0.5 * s * s * tt) * ((Pz * G) @ Wt)
        rh = rho.fourier(xi2)
        out = (2 * np.pi) ** (-d / 2) * rh * inner
        out = np.where(np.abs(rh) > 1e-300, out, 0.0)
        return np.real(out).reshape(shp)

    scale = _density_scale(density, kappa)
    val = integrate_radial_angular(f, d, min(1.0, scale), rule, tail_scale=10 * max(1.0, scale))
    return val * conv


def V_tilde2_fourier_constant(kappa: float, coeffs: CoefficientSet, density: ChargeDensity,
                              X=None, rule: Optional[QuadratureRule] = None) -> float:
    """Constant-coefficient ``V~2 = -int (h0+1)^-1/2 (K+1)^-2 (K/2 + 1) |rho_hat|^2``."""
    d = coeffs.dim
    X = np.zeros(d) if X is None else np.asarray(X, dtype=float).reshape(d)
    ls = leading_symbols(coeffs)
    rho = rescale(density, kappa)
    rule = rule or QuadratureRule()

    def f(xi):
        h0 = ls.h0(X, xi)
        K = ls.K(X, xi)
        return -(h0 + 1) ** -0.5 * (0.5 * K + 1) / (K + 1) ** 2 * np.abs(rho.fourier(xi)) ** 2

    scale = _density_scale(density, kappa)
    return integrate_radial_angular(f, d, min(1.0, scale), rule, tail_scale=10 * max(1.0, scale))


# ---------------------------------------------------------------------------
# limit study
# ---------------------------------------------------------------------------


@dataclass
class RenormReport:
    """``V^kappa - E^kappa`` along a kappa ladder for several particle points."""

    kappa_ladder: np.ndarray
    X_samples: list
    E_values: np.ndarray
    V_values: np.ndarray
    mode: str
    slope: float = float("nan")
    convention: str = "inner_product"

    def __post_init__(self):
        k = np.asarray(self.kappa_ladder, dtype=float)
        if np.any(np.diff(k) <= 0):
            raise ValueError("kappa ladder must be strictly increasing")
        if not (np.all(np.isfinite(self.E_values)) and np.all(np.isfinite(self.V_values))):
            raise ValueError("non-finite values in renormalization report")

    @property
    def diffs(self) -> np.ndarray:
        return self.V_values - self.E_values

    @property
    def diff_increments(self) -> np.ndarray:
        """``sup_X |Delta_kappa (V - E)|`` between consecutive rungs."""
        return np.max(np.abs(np.diff(self.diffs, axis=1)), axis=0)

    @property
    def E_increments(self) -> np.ndarray:
        return np.max(np.abs(np.diff(self.E_values, axis=1)), axis=0)

    def rows(self):
        out = []
        for i, X in enumerate(self.X_samples):
            for j, k in enumerate(self.kappa_ladder):
                out.append({"X": list(np.atleast_1d(X)), "kappa": float(k),
                            "E": float(self.E_values[i, j]), "V": float(self.V_values[i, j]),
                            "V_minus_E": float(self.diffs[i, j])})
        return out


def renorm_limit_study(X_samples, kappa_ladder, mode: str, coeffs: CoefficientSet,
                       density: ChargeDensity, operators: Optional[OperatorSet] = None,
                       rule: Optional[QuadratureRule] = None, gh_order: int = 6
                       ) -> RenormReport:
    """Tabulate ``V^kappa - E^kappa`` on a kappa ladder.

    Parameters
    ----------
    mode : {'d1_operator', 'symbol'}
        ``'d1_operator'`` uses :func:`V_kappa` on the discrete operators
        (``X_samples`` are particle node indices); ``'symbol'`` uses
        :func:`V_tilde2` (``X_samples`` are points).
    """
    ladder = np.asarray(kappa_ladder, dtype=float)
    if ladder.size < 3:
        raise ValueError("kappa ladder needs at least 3 rungs")
    E = np.empty((len(X_samples), ladder.size))
    V = np.empty_like(E)
    if mode == "d1_operator":
        if operators is None:
            raise ValueError("d1_operator mode needs an OperatorSet")
        for k in ladder:
            check_kappa(operators.boson_grid, rescale(density, k))
        nodes = operators.particle_grid.nodes
        pts = [nodes[i] for i in X_samples]
        for j, k in enumerate(ladder):
            V[:, j] = V_kappa(list(X_samples), k, operators, density=density)
            for i, Xp in enumerate(pts):
                E[i, j] = E_kappa_value(Xp, k, coeffs, density, "inner_product", rule)
    elif mode == "symbol":
        pts = [np.atleast_1d(np.asarray(x, dtype=float)) for x in X_samples]
        for j, k in enumerate(ladder):
            for i, Xp in enumerate(pts):
                V[i, j] = V_tilde2(Xp, k, coeffs, density, rule=rule, gh_order=gh_order)
                E[i, j] = E_kappa_value(Xp, k, coeffs, density, "inner_product", rule)
    else:
        raise ValueError(f"unknown mode '{mode}'")
    slope = fit_log_slope(ladder, E.mean(axis=0))[0]
    return RenormReport(ladder, list(X_samples), E, V, mode, slope)
