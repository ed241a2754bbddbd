"""Symbols and their quantizations on the torus.

A symbol is a function ``a(x, xi)`` evaluated with broadcasting: ``x`` and
``xi`` are arrays of shape ``(..., d)``.  Two quantizations are provided:

* the (1,0) or Kohn-Nirenberg quantization, ``u -> sum_xi a(x, xi) u_hat(xi) e^{i x xi}``;
* the Weyl quantization, assembled on the Fourier side with the symbol
  evaluated at the mean frequency ``(xi_k + xi_l) / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .opcore import CoefficientSet, GridSpec, fourier_matrix


@dataclass(frozen=True)
class Symbol:
    """Closed-form symbol with its weight order.

    Parameters
    ----------
    func : callable
        ``func(x, xi)`` with broadcasting over leading axes.
    order : float
        Weight order ``p``: ``|a(x, xi)| <= C <xi>^p``.
    metric : str
        ``'g'`` (standard) or ``'G'`` (product metric on the tensor grid).
    bound : float, optional
        Stored constant ``C`` for :meth:`check_order`.
    """

    func: Callable
    order: float = 0.0
    metric: str = "g"
    bound: Optional[float] = None
    name: str = "a"

    def __call__(self, x, xi):
        return self.func(np.asarray(x), np.asarray(xi))

    def weighted_max(self, grid: GridSpec) -> float:
        """``max |a(x, xi)| <xi>^{-p}`` over nodes and dual frequencies."""
        x = grid.nodes[:, None, :]
        xi = grid.dual_freqs[None, :, :]
        vals = np.abs(self(x, xi)) * (1 + np.sum(xi * xi, axis=-1)) ** (-self.order / 2)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"symbol {self.name} is not finite on the grid")
        return float(vals.max())

    def check_order(self, grid: GridSpec) -> bool:
        if self.bound is None:
            raise ValueError("no stored bound for this symbol")
        return self.weighted_max(grid) <= self.bound


def quantize_kn(symbol, grid: GridSpec) -> np.ndarray:
    """(1,0) quantization ``A[i, j] = N^-1 sum_k a(x_i, xi_k) exp(i xi_k (x_i - x_j))``."""
    F = fourier_matrix(grid)
    x = grid.nodes[:, None, :]
    xi = grid.dual_freqs[None, :, :]
    a = np.broadcast_to(np.asarray(symbol(x, xi)), (grid.size, grid.size))
    return (a * F.conj().T) @ F


def quantize_weyl(symbol, grid: GridSpec) -> np.ndarray:
    """Weyl quantization on the Fourier side.

    Matrix elements between plane waves are
    ``<e_k, A e_l> = N^-1 sum_i a(x_i, (xi_k + xi_l)/2) exp(-i (xi_k - xi_l) x_i)``.
    Real symbols give Hermitian matrices and ``w(x) xi`` quantizes to
    ``(w D + D w) / 2`` exactly.
    """
    n, d = grid.n_points, grid.dim
    if n % 2:
        raise ValueError("Weyl quantization needs an even number of points per axis")
    k1 = grid.axis_freqs
    dk = 2 * np.pi / grid.box_length
    # mean frequencies on the half-integer lattice, index s = k + l per axis
    eta1 = k1[0] + 0.5 * dk * np.arange(2 * n - 1)
    S = 2 * n - 1
    eta = np.stack(np.meshgrid(*([eta1] * d), indexing="ij"), axis=-1).reshape(-1, d)
    x = grid.nodes
    vals = np.asarray(symbol(x[None, :, :], eta[:, None, :]))
    vals = np.broadcast_to(vals, (eta.shape[0], grid.size))
    vals = vals.reshape((S,) * d + (n,) * d)
    # DFT over the node axes; nodes start at -L/2, giving a (-1)^delta phase
    C = np.fft.fftn(vals, axes=tuple(range(d, 2 * d))) / grid.size
    idx = np.arange(n)
    kflat = np.stack([g.ravel() for g in np.meshgrid(*([idx] * d), indexing="ij")], axis=-1)
    K, Lk = kflat[:, None, :], kflat[None, :, :]
    sign = np.prod(np.where((K - Lk) % 2, -1.0, 1.0), axis=-1)
    index = tuple((K + Lk)[..., j] for j in range(d)) + tuple(((K - Lk) % n)[..., j] for j in range(d))
    AF = C[index] * sign
    F = fourier_matrix(grid)
    return F.conj().T @ AF @ F


@dataclass(frozen=True)
class LeadingSymbols:
    """Closed-form leading symbols built from a :class:`CoefficientSet`.

    ``h0(x, xi) = xi.a(x)xi``, ``K(X, xi) = xi.A(X)xi``,
    ``b_lead(X, x, xi) = (K(X, xi) + (h0(x, xi) + 1)^{1/2})^-1``,
    ``d_lead(x, xi) = (h0 + 1)^{-1/2}``,
    ``c(X, x, xi) = (h0 + 1)^{-1/2} (K + 1)^{-1}``,
    ``d(X, x, xi) = (h0 + 1)^{-1/2} (K + 1)^{-2}``.
    """

    coeffs: CoefficientSet

    def h0(self, x, xi):
        return self.coeffs.a.quadratic(x, xi)

    def K(self, X, xi):
        return self.coeffs.A.quadratic(X, xi)

    def b_lead(self, X, x, xi):
        return 1.0 / (self.K(X, xi) + np.sqrt(self.h0(x, xi) + 1.0))

    def d_lead(self, x, xi):
        return 1.0 / np.sqrt(self.h0(x, xi) + 1.0)

    def c(self, X, x, xi):
        return self.d_lead(x, xi) / (self.K(X, xi) + 1.0)

    def d(self, X, x, xi):
        return self.d_lead(x, xi) / (self.K(X, xi) + 1.0) ** 2

    def dx_d(self, X, x, xi):
        """``grad_x d(X, x, xi)``, shape ``broadcast + (d,)``."""
        h0 = self.h0(x, xi)
        dh = self.coeffs.a.quadratic_grad(x, xi)
        fac = -0.5 * (h0 + 1.0) ** -1.5 / (self.K(X, xi) + 1.0) ** 2
        return fac[..., None] * dh

    def symbol(self, name: str, X=None) -> Symbol:
        """Return one of the symbols as a :class:`Symbol` (``X`` frozen if needed)."""
        if name == "h0":
            return Symbol(self.h0, 2.0, name="h0")
        if name == "d_lead":
            return Symbol(self.d_lead, -1.0, name="d_lead")
        if name == "K":
            return Symbol(lambda x, xi: self.K(x, xi), 2.0, name="K")
        if X is None:
            raise ValueError(f"symbol '{name}' depends on the particle point X")
        X = np.asarray(X, dtype=float)
        fn = {"b_lead": self.b_lead, "c": self.c, "d": self.d}[name]
        order = {"b_lead": -2.0, "c": -3.0, "d": -5.0}[name]
        return Symbol(lambda x, xi: fn(X, x, xi), order, name=f"{name}_X")

    def tensor_b_lead(self) -> Symbol:
        """Leading symbol of ``T^-1`` on the product grid ``(X, x)``.

        The product grid has dimension ``2d`` with coordinates ``(X, x)`` and
        frequencies ``(Xi, xi)``.
        """
        d = self.coeffs.dim

        def f(y, eta):
            X, x = y[..., :d], y[..., d:]
            Xi, xi = eta[..., :d], eta[..., d:]
            return 1.0 / (self.K(X, Xi) + np.sqrt(self.h0(x, xi) + 1.0))

        return Symbol(f, -2.0, metric="G", name="b_lead")


def leading_symbols(coeffs: CoefficientSet) -> LeadingSymbols:
    return LeadingSymbols(coeffs)


@dataclass
class DecayReport:
    """Residuals ``r(xi)`` of exact-minus-quantized operators on plane waves."""

    japanese: np.ndarray
    residuals: np.ndarray
    slope: float
    intercept: float
    fit_residual: float
    label: str = ""

    def rows(self):
        return [
            {"probe_japanese": float(j), "residual": float(r), "slope": self.slope}
            for j, r in zip(self.japanese, self.residuals)
        ]


def plane_wave(grid: GridSpec, xi) -> np.ndarray:
    """Normalized plane wave ``exp(i xi.x) / sqrt(N)`` on ``grid``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    return np.exp(1j * grid.nodes @ xi) / np.sqrt(grid.size)


def fit_power_law(japanese, residuals):
    """Least-squares slope of ``log r`` against ``log <xi>``; returns (slope, intercept, rms)."""
    lx = np.log(np.asarray(japanese, dtype=float))
    ly = np.log(np.asarray(residuals, dtype=float))
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    rms = float(np.sqrt(np.mean((A @ coef - ly) ** 2)))
    return float(coef[0]), float(coef[1]), rms


def remainder_decay_check(exact_op, symbol, grid: GridSpec, probe_freqs,
                          exclude_top_octave: bool = True, fit: bool = True,
                          label: str = "") -> DecayReport:
    """Relative residuals ``||(A - a(x,D)) e_xi|| / ||a(x,D) e_xi||`` on plane waves.

    Parameters
    ----------
    exact_op : ndarray or callable
        Matrix on ``grid`` or a function applying it to a vector.
    symbol : Symbol or callable
        Closed-form symbol; ``a(x, D) e_xi = a(x, xi) e_xi`` exactly on the lattice.
    probe_freqs : array_like
        Frequencies (shape ``(m,)`` in 1-d or ``(m, d)``).
    exclude_top_octave : bool
        Drop probes with any component above half the Nyquist frequency.
    fit : bool
        Fit a power law (requires at least one decade of ``<xi>``).
    """
    probes = np.asarray(probe_freqs, dtype=float)
    if probes.ndim == 1:
        probes = probes[:, None]
    if exclude_top_octave:
        keep = np.all(np.abs(probes) <= 0.5 * grid.nyquist + 1e-12, axis=1)
        probes = probes[keep]
    apply = exact_op if callable(exact_op) else (lambda u: exact_op @ u)
    jap = np.sqrt(1.0 + np.sum(probes**2, axis=1))
    res = np.empty(len(probes))
    x = grid.nodes
    for i, xi in enumerate(probes):
        e = plane_wave(grid, xi)
        q = symbol(x, np.broadcast_to(xi, x.shape)) * e
        res[i] = np.linalg.norm(apply(e) - q) / np.linalg.norm(q)
    if fit:
        if len(jap) < 2 or jap.max() / jap.min() < 10.0:
            raise ValueError("probe range must span at least one decade of <xi>")
        slope, icpt, rms = fit_power_law(jap, res)
    else:
        slope = icpt = rms = float("nan")
    return DecayReport(jap, res, slope, icpt, rms, label)


def japanese_multiplier(grid: GridSpec, s: float) -> np.ndarray:
    """Matrix of ``<D>^s``."""
    from .opcore import fourier_multiplier
    xi2 = np.sum(grid.dual_freqs**2, axis=1)
    return fourier_multiplier(grid, (1 + xi2) ** (s / 2))


def sobolev_operator_norm(matrix: np.ndarray, grid: GridSpec, s: float, p: float) -> float:
    """Norm of ``matrix`` from discrete ``H^s`` to ``H^{s-p}``."""
    M = japanese_multiplier(grid, s - p) @ matrix @ japanese_multiplier(grid, -s)
    return float(np.linalg.norm(M, 2))
