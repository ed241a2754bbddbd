"""The dressing vector beta_X = -T^-1 F(omega >= sigma) omega^(-1/2) rho_X.

Tensor vectors are ``(P, n)`` arrays: row ``i`` is the boson-space vector
(in l2 coordinates) attached to the particle node ``X_i``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .opcore import (
    ChargeDensity,
    GridSpec,
    OperatorSet,
    SpectralOperator,
    TensorSumOperator,
    gradient_matrix,
    matrix_function,
    power,
    sample_rows,
    smoothstep_high,
    sobolev_norm,
)

MIN_GRAD_POINTS = 16


@dataclass(frozen=True)
class DressingField:
    """``beta[i, :]`` is ``beta^kappa_{X_i}`` on the boson grid.

    Attributes
    ----------
    rho : ndarray
        The densities ``rho^kappa_{X_i}`` used to build ``beta`` (same layout).
    grad : tuple of ndarray or None
        ``grad_{X_j} beta`` per particle axis, once computed.
    """

    beta: np.ndarray
    rho: np.ndarray
    kappa: float
    sigma: float
    particle_grid: GridSpec
    boson_grid: GridSpec
    grad: Optional[tuple] = None

    def __post_init__(self):
        if np.iscomplexobj(self.beta) and np.max(np.abs(self.beta.imag)) > 1e-12:
            raise ValueError("beta must be real")
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta has non-finite entries")

    @property
    def grad_beta(self):
        return self.grad


def coupling_rows(ops: OperatorSet, rho_rows: np.ndarray, variant: str = "omega_sigma"
                  ) -> np.ndarray:
    """``F(omega >= sigma) omega_sigma^(-1/2) rho_X`` for each row (or the omega variant)."""
    if variant == "omega_sigma":
        M = ops.F_high.matrix @ ops.omega_sigma_inv_sqrt.matrix
    elif variant == "omega":
        M = ops.F_high.matrix @ ops.omega_inv_sqrt.matrix
    else:
        raise ValueError(f"unknown variant '{variant}'")
    return rho_rows @ M.T


def compute_beta(T: TensorSumOperator, omega: SpectralOperator, F_cutoff: SpectralOperator,
                 density: ChargeDensity, grid_pair: tuple, variant: str = "omega_sigma",
                 rho_rows: Optional[np.ndarray] = None) -> DressingField:
    """Dressing vectors for every particle node by a tensor-grid solve.

    Parameters
    ----------
    T : TensorSumOperator
        ``K0 x I + I x omega_sigma``.
    omega : SpectralOperator
        ``h^(1/2)`` (only used by the ``'omega'`` variant).
    F_cutoff : SpectralOperator
        ``F(omega >= sigma)``.
    density : ChargeDensity
        ``rho^kappa`` (its ``kappa`` is used).
    grid_pair : (GridSpec, GridSpec)
        Particle and boson grids.
    variant : {'omega_sigma', 'omega'}
        Which inverse square root multiplies the density; both agree on the
        range of the cutoff.
    rho_rows : ndarray, optional
        Pre-sampled densities, overriding ``density``.
    """
    pgrid, bgrid = grid_pair
    if rho_rows is None:
        rho_rows = sample_rows(density, bgrid, pgrid)
    if variant == "omega_sigma":
        W = matrix_function(T.omega_sigma, power(-0.5), "omega_sigma^(-1/2)")
    elif variant == "omega":
        W = matrix_function(omega, power(-0.5), "omega^(-1/2)")
    else:
        raise ValueError(f"unknown variant '{variant}'")
    g = rho_rows @ (F_cutoff.matrix @ W.matrix).T
    beta = -T.solve(g)
    sigma = float(T.omega_sigma.eigenvalues.min())
    return DressingField(beta, rho_rows, float(density.kappa), sigma, pgrid, bgrid)


def dressing_field(ops: OperatorSet, density: ChargeDensity, variant: str = "omega_sigma",
                   with_grad: bool = False) -> DressingField:
    """:func:`compute_beta` on an :class:`OperatorSet`."""
    f = compute_beta(ops.T, ops.omega, ops.F_high, density,
                     (ops.particle_grid, ops.boson_grid), variant=variant)
    f = replace(f, sigma=ops.sigma)
    return grad_beta(f, ops.particle_grid) if with_grad else f


def verify_beta_identity(beta: DressingField, density, K0: SpectralOperator,
                         omega: SpectralOperator, F_low: SpectralOperator) -> float:
    """Max over nodes of the relative residual of
    ``omega^(-1/2) rho_X + (K0 x 1 + 1 x omega) beta_X = omega^(-1/2) F(omega <= sigma) rho_X``.

    ``density`` may be a :class:`ChargeDensity` or pre-sampled rows; when
    ``None`` the rows stored in the field are used.
    """
    if density is None:
        rho = beta.rho
    elif isinstance(density, ChargeDensity):
        rho = sample_rows(density, beta.boson_grid, beta.particle_grid)
    else:
        rho = np.asarray(density)
    Wm = matrix_function(omega, power(-0.5), "omega^(-1/2)").matrix
    lhs = rho @ Wm.T + K0.matrix @ beta.beta + beta.beta @ omega.matrix.T
    rhs = rho @ (Wm @ F_low.matrix).T
    den = np.linalg.norm(rho @ Wm.T, axis=1)
    num = np.linalg.norm(lhs - rhs, axis=1)
    mask = den > 0
    if not mask.any():
        return float(np.max(num))
    return float(np.max(num[mask] / den[mask]))


def grad_beta(field: DressingField, particle_grid: Optional[GridSpec] = None) -> DressingField:
    """Spectral derivative of ``beta`` along the particle index."""
    grid = particle_grid or field.particle_grid
    if grid.n_points < MIN_GRAD_POINTS:
        raise ValueError(
            f"particle grid with {grid.n_points} points is too coarse for differentiation "
            f"(need >= {MIN_GRAD_POINTS})"
        )
    grads = tuple(gradient_matrix(grid, j) @ field.beta for j in range(grid.dim))
    return replace(field, grad=grads)


def grad_beta_analytic(ops: OperatorSet, density: ChargeDensity, field: DressingField
                       ) -> tuple:
    """``grad_X beta`` from the closed-form density derivative.

    ``grad_X beta = -T^-1 (grad_X g) - T^-1 ([grad_X, K0] x 1) beta`` with
    ``grad_X g = -F omega_sigma^(-1/2) (grad rho)(x - X)``.
    """
    pgrid, bgrid = ops.particle_grid, ops.boson_grid
    drho = sample_rows(density, bgrid, pgrid, gradient=True)
    M = (ops.F_high.matrix @ ops.omega_sigma_inv_sqrt.matrix).T
    out = []
    for j in range(pgrid.dim):
        G = ops.grads[j]
        dg = -drho[..., j] @ M
        comm = G @ ops.K0.matrix - ops.K0.matrix @ G
        out.append(-ops.T.solve(dg) - ops.T.solve(comm @ field.beta))
    return tuple(out)


def beta_fourier_constant(density: ChargeDensity, particle_grid: GridSpec,
                          boson_grid: GridSpec, A: float, mass: float, sigma: float
                          ) -> np.ndarray:
    """Momentum-space dressing vector for constant coefficients ``a = I``, ``A = A I``.

    ``beta_X(k) = -F(omega(k) >= sigma) omega(k)^(-1/2) rho_hat(k) e^{-i k X}
    / (omega(k) + A |k|^2)`` with ``omega(k) = (|k|^2 + m^2)^(1/2)``, summed on
    the boson lattice and returned in l2 coordinates.  Exact for the
    discretized operators when the particle grid equals the boson grid.
    """
    d = boson_grid.dim
    k = boson_grid.dual_freqs
    k2 = np.sum(k * k, axis=1)
    w = np.sqrt(k2 + mass**2)
    cut = smoothstep_high(sigma)(w)
    # periodized rho has Fourier coefficients (2 pi / L)^{d/2} rho_hat(k)
    coef = (2 * np.pi / boson_grid.box_length) ** (d / 2) * density.fourier(k)
    bk = -cut * coef / (np.sqrt(w) * (w + A * k2))
    E = np.exp(1j * boson_grid.nodes @ k.T) / np.sqrt(boson_grid.size)
    X = particle_grid.nodes
    out = np.empty((len(X), boson_grid.size))
    for i, Xi in enumerate(X):
        out[i] = (E @ (bk * np.exp(-1j * k @ Xi))).real
    return out


def beta_weighted_norms(field: DressingField, alpha_list: Sequence[float],
                        omega: SpectralOperator, s: float = 1.6,
                        node_indices: Optional[Sequence[int]] = None) -> list:
    """Rows ``{kappa, X, alpha, norm, ratio}`` with ``norm = ||omega^alpha beta_X||``.

    ``ratio`` divides by ``||rho^kappa_X||_{H^-s}``.  Powers ``alpha >= 1``
    lie outside the range covered by the bound and raise a warning.
    """
    rows = []
    idx = range(field.beta.shape[0]) if node_indices is None else node_indices
    X = field.particle_grid.nodes
    for a in alpha_list:
        if a >= 1:
            warnings.warn(f"alpha = {a} is outside [0, 1)", RuntimeWarning, stacklevel=2)
        Wa = matrix_function(omega, power(a), f"omega^{a}").matrix
        for i in idx:
            nrm = float(np.linalg.norm(Wa @ field.beta[i]))
            hs = sobolev_norm(field.rho[i], -s, field.boson_grid)
            rows.append({"kappa": field.kappa, "X": X[i].tolist(), "alpha": float(a),
                         "norm": nrm, "ratio": nrm / hs if hs > 0 else 0.0})
    return rows


def grad_beta_norms(field: DressingField, alpha: float, omega: SpectralOperator) -> np.ndarray:
    """``max_X ||omega^(-alpha) grad_{X_j} beta_X||`` per particle axis."""
    if field.grad is None:
        raise ValueError("gradient not computed; call grad_beta first")
    Wa = matrix_function(omega, power(-alpha), f"omega^-{alpha}").matrix
    return np.array([np.max(np.linalg.norm(g @ Wa.T, axis=1)) for g in field.grad])
