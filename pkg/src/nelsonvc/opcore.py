"""Discretization core: torus grids, coefficient fields, elliptic operators.

Functions on the torus are represented by their nodal samples.  Vectors that
enter inner products are stored in *l2 coordinates*, i.e. samples multiplied
by ``sqrt(cell_volume)``, so that the Euclidean inner product of two vectors
approximates the L2 inner product of the underlying functions.  All operators
built here are matrices acting on l2 coordinates.

The Fourier convention used throughout is the unitary one::

    rho_hat(xi) = (2 pi)^(-d/2) * integral exp(-i x.xi) rho(x) dx
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import interpolate, special

FOURIER_CONVENTION = "rho_hat(k) = (2 pi)^(-d/2) int exp(-i k.x) rho(x) dx"
MASS_FLOOR = 1e-6
DEFAULT_MAX_TENSOR_DIM = 20000


class EllipticityError(ValueError):
    """Raised when a coefficient matrix field is not uniformly elliptic."""


class SpectralError(ValueError):
    """Raised when a spectral function is singular on the spectrum."""


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid on the torus ``[-L/2, L/2)^d``.

    Nodes are ``x_i = -L/2 + i L / n`` so that the origin is a node.  Dual
    frequencies are ``2 pi k / L`` for ``k = -n/2, ..., n/2 - 1`` in ascending
    order.  Multi-dimensional arrays use ``'ij'`` indexing and are flattened
    in C order.
    """

    dim: int
    n_points: int
    box_length: float

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        n = self.n_points
        if n < 8 or n & (n - 1):
            raise ValueError(f"n_points must be a power of two >= 8, got {n}")
        if not self.box_length > 0:
            raise ValueError(f"box_length must be positive, got {self.box_length}")

    @property
    def spacing(self) -> float:
        return self.box_length / self.n_points

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def size(self) -> int:
        return self.n_points**self.dim

    @property
    def nyquist(self) -> float:
        return np.pi * self.n_points / self.box_length

    @property
    def axis_nodes(self) -> np.ndarray:
        return -0.5 * self.box_length + self.spacing * np.arange(self.n_points)

    @property
    def axis_freqs(self) -> np.ndarray:
        k = np.arange(-self.n_points // 2, self.n_points // 2)
        return 2.0 * np.pi * k / self.box_length

    def _mesh(self, axis: np.ndarray) -> np.ndarray:
        grids = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    @property
    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(size, dim)``."""
        return self._mesh(self.axis_nodes)

    @property
    def dual_freqs(self) -> np.ndarray:
        """Frequency vectors, shape ``(size, dim)``."""
        return self._mesh(self.axis_freqs)

    def node_index(self, X) -> int:
        """Flat index of the node at position ``X`` (must be a node)."""
        X = np.atleast_1d(np.asarray(X, dtype=float))
        if X.shape != (self.dim,):
            raise ValueError(f"point of dimension {X.shape} on a {self.dim}-d grid")
        t = (X + 0.5 * self.box_length) / self.spacing
        k = np.rint(t)
        if np.max(np.abs(t - k)) > 1e-9:
            raise ValueError(f"{X} is not a grid node")
        k = k.astype(int) % self.n_points
        return int(np.ravel_multi_index(tuple(k), (self.n_points,) * self.dim))

    def to_l2(self, samples: np.ndarray) -> np.ndarray:
        return np.sqrt(self.cell_volume) * np.asarray(samples)

    def from_l2(self, vec: np.ndarray) -> np.ndarray:
        return np.asarray(vec) / np.sqrt(self.cell_volume)


def build_grid(dim: int, n_points: int, box_length: float) -> GridSpec:
    """Construct a :class:`GridSpec` (validates its arguments)."""
    return GridSpec(int(dim), int(n_points), float(box_length))


@functools.lru_cache(maxsize=32)
def _fourier_matrix_cached(dim: int, n: int, L: float) -> np.ndarray:
    g = GridSpec(dim, n, L)
    x = g.axis_nodes
    k = g.axis_freqs
    f1 = np.exp(-1j * np.outer(k, x)) / np.sqrt(n)
    out = f1
    for _ in range(dim - 1):
        out = np.kron(out, f1)
    out.setflags(write=False)
    return out


def fourier_matrix(grid: GridSpec) -> np.ndarray:
    """Unitary DFT matrix ``F[k, i] = exp(-i xi_k . x_i) / sqrt(N)``."""
    return _fourier_matrix_cached(grid.dim, grid.n_points, grid.box_length)


def fourier_multiplier(grid: GridSpec, symbol: np.ndarray) -> np.ndarray:
    """Matrix of the Fourier multiplier with values ``symbol`` on ``dual_freqs``."""
    F = fourier_matrix(grid)
    return (F.conj().T * symbol) @ F


def spectral_derivative(grid: GridSpec, axis: int) -> np.ndarray:
    """Hermitian matrix of ``D_j = -i d/dx_j`` (Nyquist mode kept)."""
    return fourier_multiplier(grid, grid.dual_freqs[:, axis])


def gradient_matrix(grid: GridSpec, axis: int) -> np.ndarray:
    """Real antisymmetric spectral derivative ``d/dx_j`` with the Nyquist mode zeroed."""
    xi = grid.dual_freqs[:, axis].copy()
    xi[np.isclose(np.abs(xi), grid.nyquist)] = 0.0
    G = fourier_multiplier(grid, 1j * xi)
    return np.ascontiguousarray(G.real)


# ---------------------------------------------------------------------------
# coefficient fields
# ---------------------------------------------------------------------------


def _as_points(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    return x


@dataclass(frozen=True)
class ScalarField:
    """Closed-form scalar field with analytic gradient.

    Built-in kinds
    --------------
    ``constant``
        ``value``.
    ``sinusoid``
        ``offset + amplitude * sin(k . x + phase)``.
    ``plateau``
        ``offset + height * prod_j w(x_j - c_j)`` with the smooth window
        ``w(t) = (tanh((t + r)/s) - tanh((t - r)/s)) / 2``.

    All kinds extend analytically to complex arguments.
    """

    kind: str
    params: tuple = ()

    @classmethod
    def constant(cls, value: float) -> "ScalarField":
        return cls("constant", (("value", float(value)),))

    @classmethod
    def sinusoid(cls, offset: float, amplitude: float, wavenumber, phase: float = 0.0):
        k = tuple(np.atleast_1d(np.asarray(wavenumber, dtype=float)).tolist())
        return cls(
            "sinusoid",
            (("offset", float(offset)), ("amplitude", float(amplitude)),
             ("wavenumber", k), ("phase", float(phase))),
        )

    @classmethod
    def plateau(cls, offset: float, height: float, radius: float,
                steepness: float, center=0.0):
        c = tuple(np.atleast_1d(np.asarray(center, dtype=float)).tolist())
        return cls(
            "plateau",
            (("offset", float(offset)), ("height", float(height)),
             ("radius", float(radius)), ("steepness", float(steepness)),
             ("center", c)),
        )

    @property
    def p(self) -> dict:
        return dict(self.params)

    def _vec(self, key, d):
        v = np.asarray(self.p[key], dtype=float)
        if v.size == 1:
            v = np.full(d, float(v.ravel()[0]))
        if v.size != d:
            raise ValueError(f"{self.kind} field: '{key}' has {v.size} entries for dim {d}")
        return v

    def __call__(self, x) -> np.ndarray:
        x = _as_points(x)
        d = x.shape[-1]
        p = self.p
        if self.kind == "constant":
            return np.full(x.shape[:-1], p["value"], dtype=float)
        if self.kind == "sinusoid":
            k = self._vec("wavenumber", d)
            return p["offset"] + p["amplitude"] * np.sin(x @ k + p["phase"])
        if self.kind == "plateau":
            c = self._vec("center", d)
            t = x - c
            r, s = p["radius"], p["steepness"]
            w = 0.5 * (np.tanh((t + r) / s) - np.tanh((t - r) / s))
            return p["offset"] + p["height"] * np.prod(w, axis=-1)
        raise ValueError(f"unknown scalar field kind '{self.kind}'")

    def grad(self, x) -> np.ndarray:
        """Analytic gradient, shape ``x.shape``."""
        x = _as_points(x)
        d = x.shape[-1]
        p = self.p
        if self.kind == "constant":
            return np.zeros(x.shape, dtype=np.result_type(x, float))
        if self.kind == "sinusoid":
            k = self._vec("wavenumber", d)
            c = p["amplitude"] * np.cos(x @ k + p["phase"])
            return c[..., None] * k
        if self.kind == "plateau":
            c = self._vec("center", d)
            t = x - c
            r, s = p["radius"], p["steepness"]
            w = 0.5 * (np.tanh((t + r) / s) - np.tanh((t - r) / s))
            dw = 0.5 / s * (1.0 / np.cosh((t + r) / s) ** 2 - 1.0 / np.cosh((t - r) / s) ** 2)
            out = np.empty(np.broadcast(t, w).shape, dtype=np.result_type(w, float))
            for j in range(d):
                others = np.prod(np.delete(w, j, axis=-1), axis=-1)
                out[..., j] = p["height"] * dw[..., j] * others
            return out
        raise ValueError(f"unknown scalar field kind '{self.kind}'")

    def value_and_grad(self, x):
        """``(self(x), self.grad(x))`` sharing work where possible."""
        if self.kind == "sinusoid":
            x = _as_points(x)
            p = self.p
            k = self._vec("wavenumber", x.shape[-1])
            arg = x @ k + p["phase"]
            return (p["offset"] + p["amplitude"] * np.sin(arg),
                    (p["amplitude"] * np.cos(arg))[..., None] * k)
        return self(x), self.grad(x)

    def bounds(self) -> tuple[float, float]:
        """Rigorous lower/upper bounds of the field over real arguments."""
        p = self.p
        if self.kind == "constant":
            return p["value"], p["value"]
        if self.kind == "sinusoid":
            a = abs(p["amplitude"])
            return p["offset"] - a, p["offset"] + a
        h = p["height"]
        return (p["offset"] + min(h, 0.0), p["offset"] + max(h, 0.0))


@dataclass(frozen=True)
class MatrixField:
    """Symmetric matrix field ``profile(x) * base``."""

    base: tuple
    profile: ScalarField = field(default_factory=lambda: ScalarField.constant(1.0))

    @classmethod
    def scalar(cls, value: float, dim: int, profile: Optional[ScalarField] = None):
        base = value * np.eye(dim)
        return cls.from_matrix(base, profile)

    @classmethod
    def from_matrix(cls, base, profile: Optional[ScalarField] = None):
        base = np.atleast_2d(np.asarray(base, dtype=float))
        if base.shape[0] != base.shape[1] or not np.allclose(base, base.T, atol=1e-14):
            raise ValueError("matrix field base must be square symmetric")
        prof = profile if profile is not None else ScalarField.constant(1.0)
        return cls(tuple(map(tuple, base.tolist())), prof)

    @property
    def base_matrix(self) -> np.ndarray:
        return np.asarray(self.base, dtype=float)

    @property
    def dim(self) -> int:
        return len(self.base)

    def __call__(self, x) -> np.ndarray:
        """Values, shape ``x.shape[:-1] + (d, d)``."""
        return self.profile(x)[..., None, None] * self.base_matrix

    def quadratic(self, x, xi) -> np.ndarray:
        """``xi . a(x) xi`` with broadcasting over leading axes."""
        xi = np.asarray(xi)
        q = np.einsum("...j,jk,...k->...", xi, self.base_matrix, xi)
        return self.profile(x) * q

    def quadratic_grad(self, x, xi) -> np.ndarray:
        """``d/dx_j (xi . a(x) xi)``, shape ``broadcast + (d,)``."""
        xi = np.asarray(xi)
        q = np.einsum("...j,jk,...k->...", xi, self.base_matrix, xi)
        return self.profile.grad(x) * q[..., None]

    def eig_bounds(self) -> tuple[float, float]:
        """Bounds of the pointwise eigenvalues over real arguments."""
        ev = np.linalg.eigvalsh(self.base_matrix)
        lo, hi = self.profile.bounds()
        cands = [lo * ev[0], lo * ev[-1], hi * ev[0], hi * ev[-1]]
        return min(cands), max(cands)


@dataclass(frozen=True)
class CoefficientSet:
    """Coefficient fields of the boson operator ``h`` and particle operator ``K``.

    Parameters
    ----------
    a, A : MatrixField
        Boson metric ``a^{jk}(x)`` and inverse particle mass ``A^{jk}(X)``.
    v, m, W : ScalarField
        Boson potential, mass field and particle potential.
    c0, c1 : float, optional
        Declared ellipticity constants.  When omitted they are taken from the
        field bounds.
    """

    a: MatrixField
    v: ScalarField
    m: ScalarField
    A: MatrixField
    W: ScalarField
    c0: Optional[float] = None
    c1: Optional[float] = None

    @property
    def dim(self) -> int:
        return self.a.dim

    @classmethod
    def constant(cls, dim: int, a: float = 1.0, A: float = 0.5, mass: float = 1.0,
                 v: float = 0.0, W: float = 0.0) -> "CoefficientSet":
        return cls(
            a=MatrixField.scalar(a, dim),
            v=ScalarField.constant(v),
            m=ScalarField.constant(mass),
            A=MatrixField.scalar(A, dim),
            W=ScalarField.constant(W),
        )

    def ellipticity(self) -> tuple[float, float]:
        lo_a, hi_a = self.a.eig_bounds()
        lo_A, hi_A = self.A.eig_bounds()
        c0 = self.c0 if self.c0 is not None else min(lo_a, lo_A)
        c1 = self.c1 if self.c1 is not None else max(hi_a, hi_A)
        return c0, c1

    def potential(self, x) -> np.ndarray:
        """``v(x) + m(x)^2``."""
        return self.v(x) + self.m(x) ** 2


def _check_matrix_field(values: np.ndarray, c0: float, c1: float, name: str) -> None:
    ev = np.linalg.eigvalsh(values)
    lo, hi = ev.min(), ev.max()
    if not c0 > 0:
        raise EllipticityError(f"{name}: ellipticity constant c0={c0} must be positive")
    tol = 1e-12 * max(1.0, abs(c1))
    if lo < c0 - tol or hi > c1 + tol:
        raise EllipticityError(
            f"{name}: pointwise eigenvalues in [{lo:.6g}, {hi:.6g}] "
            f"violate [c0, c1] = [{c0:.6g}, {c1:.6g}]"
        )


# ---------------------------------------------------------------------------
# spectral operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectralOperator:
    """Hermitian matrix with its eigendecomposition ``M = Q diag(lam) Q^H``."""

    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    grid: Optional[GridSpec] = None

    @classmethod
    def from_matrix(cls, matrix, grid: Optional[GridSpec] = None,
                    name: str = "operator") -> "SpectralOperator":
        M = np.asarray(matrix)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError(f"{name}: expected a square matrix, got {M.shape}")
        scale = max(np.linalg.norm(M), 1e-300)
        herm = np.linalg.norm(M - M.conj().T) / scale
        if herm > 1e-12:
            raise ValueError(f"{name}: Hermiticity residual {herm:.3e} exceeds 1e-12")
        M = 0.5 * (M + M.conj().T)
        if np.iscomplexobj(M) and np.max(np.abs(M.imag)) <= 1e-14 * scale:
            M = M.real
        lam, Q = np.linalg.eigh(M)
        for arr in (M, lam, Q):
            arr.setflags(write=False)
        return cls(M, lam, Q, grid)

    @property
    def shape(self):
        return self.matrix.shape

    def norm(self) -> float:
        return float(np.max(np.abs(self.eigenvalues)))

    def min_eig(self) -> float:
        return float(np.min(self.eigenvalues))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def function(self, f: Callable, name: str = "f") -> "SpectralOperator":
        return matrix_function(self, f, name=name)


def matrix_function(op: SpectralOperator, f: Callable, name: str = "f") -> SpectralOperator:
    """Exact functional calculus ``Q f(Lambda) Q^H``.

    Raises
    ------
    SpectralError
        If ``f`` is not finite at some eigenvalue.
    """
    lam = op.eigenvalues
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        vals = np.asarray(f(lam), dtype=float)
    bad = ~np.isfinite(vals)
    if bad.any():
        raise SpectralError(
            f"{name} is singular on the spectrum: eigenvalue {lam[bad][0]:.6g} "
            f"gives {vals[bad][0]}"
        )
    Q = op.eigenvectors
    M = (Q * vals) @ Q.conj().T
    M = 0.5 * (M + M.conj().T)
    for arr in (M, vals):
        arr.setflags(write=False)
    return SpectralOperator(M, vals, Q, op.grid)


def power(p: float, clip_tol: float = 1e-9) -> Callable:
    """``lam -> lam**p`` with tiny negative eigenvalues clipped to zero.

    Negative powers of zero are reported as singular by :func:`matrix_function`.
    """

    def f(lam):
        lam = np.asarray(lam, dtype=float)
        scale = max(1.0, float(np.max(np.abs(lam)))) if lam.size else 1.0
        if np.any(lam < -clip_tol * scale):
            return np.full_like(lam, np.nan)
        return np.maximum(lam, 0.0) ** p

    return f


def omega_sigma_profile(sigma: float) -> Callable:
    """Interpolating function for ``omega_sigma = f(h)``.

    ``f = sigma`` below ``sigma^2``, ``f = sqrt`` above ``4 sigma^2`` and a
    quintic Hermite blend in between, matching value, first and second
    derivative at both ends.  The blend is monotone and stays ``>= sigma``.
    """
    s = float(sigma)
    if not s > 0:
        raise ValueError("sigma must be positive")
    l0, l1 = s * s, 4 * s * s
    blend = interpolate.BPoly.from_derivatives(
        [l0, l1], [[s, 0.0, 0.0], [2 * s, 1.0 / (4 * s), -1.0 / (32 * s**3)]]
    )

    def f(lam):
        lam = np.asarray(lam, dtype=float)
        mid = blend(np.clip(lam, l0, l1))
        return np.where(lam <= l0, s, np.where(lam >= l1, np.sqrt(np.maximum(lam, l1)), mid))

    return f


def smoothstep_high(sigma: float) -> Callable:
    """Smooth cutoff ``F(lam >= sigma)``: 0 for ``|lam| <= 2 sigma``, 1 for ``|lam| >= 4 sigma``."""
    s = float(sigma)

    def f(lam):
        t = np.clip((np.abs(np.asarray(lam, dtype=float)) - 2 * s) / (2 * s), 0.0, 1.0)
        return t**3 * (10 - 15 * t + 6 * t * t)

    return f


def smoothstep_low(sigma: float) -> Callable:
    """``F(lam <= sigma) = 1 - F(lam >= sigma)``."""
    hi = smoothstep_high(sigma)
    return lambda lam: 1.0 - hi(lam)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def _divergence_form(grid: GridSpec, field_values: np.ndarray) -> np.ndarray:
    """``sum_jk D_j diag(a^{jk}) D_k`` averaged over both Nyquist sign choices."""
    N = grid.size
    D = [spectral_derivative(grid, j) for j in range(grid.dim)]
    out = np.zeros((N, N), dtype=complex)
    for j in range(grid.dim):
        for k in range(grid.dim):
            ajk = field_values[:, j, k]
            if np.all(ajk == 0):
                continue
            out += D[j].conj().T @ (ajk[:, None] * D[k])
    # the imaginary part only comes from the unpaired Nyquist frequency;
    # dropping it averages +/- Nyquist and keeps the operator real
    return np.ascontiguousarray(out.real)


def assemble_h(grid: GridSpec, coeffs: CoefficientSet, mass_floor: float = 0.0
               ) -> SpectralOperator:
    """Boson one-particle operator ``h = sum D_j a^{jk} D_k + v + m^2``.

    Parameters
    ----------
    mass_floor : float
        Added as ``mass_floor**2`` to the potential (used for massless runs).
    """
    if coeffs.dim != grid.dim:
        raise ValueError("coefficient and grid dimensions differ")
    x = grid.nodes
    c0, c1 = coeffs.ellipticity()
    avals = coeffs.a(x)
    _check_matrix_field(avals, c0, c1, "a(x)")
    pot = coeffs.potential(x) + mass_floor**2
    if np.min(pot) < 0:
        warnings.warn(
            f"v + m^2 has negative values (min {np.min(pot):.3g}); h may be indefinite",
            RuntimeWarning,
            stacklevel=2,
        )
    M = _divergence_form(grid, avals) + np.diag(pot)
    op = SpectralOperator.from_matrix(M, grid, name="h")
    if op.min_eig() < -1e-9 * op.norm():
        warnings.warn(f"h has negative eigenvalue {op.min_eig():.3g}", RuntimeWarning,
                      stacklevel=2)
    return op


def assemble_K0(grid: GridSpec, coeffs: CoefficientSet) -> SpectralOperator:
    """Particle kinetic operator ``K0 = sum D_j A^{jk}(X) D_k``."""
    if coeffs.dim != grid.dim:
        raise ValueError("coefficient and grid dimensions differ")
    c0, c1 = coeffs.ellipticity()
    Avals = coeffs.A(grid.nodes)
    _check_matrix_field(Avals, c0, c1, "A(X)")
    return SpectralOperator.from_matrix(_divergence_form(grid, Avals), grid, name="K0")


def assemble_K(grid: GridSpec, coeffs: CoefficientSet, w_shift: float = 0.0
               ) -> SpectralOperator:
    """``K = K0 + W(X) + w_shift``."""
    K0 = assemble_K0(grid, coeffs)
    W = coeffs.W(grid.nodes) + w_shift
    return SpectralOperator.from_matrix(K0.matrix + np.diag(W), grid, name="K")


@dataclass(frozen=True)
class TensorSumOperator:
    """``T = K0 x I + I x omega_sigma`` acting on ``(P, n)`` arrays.

    A tensor vector ``u`` is stored as a matrix with particle index first.
    Solves use the product eigenbasis, so no ``Pn x Pn`` matrix is formed.
    """

    K0: SpectralOperator
    omega_sigma: SpectralOperator

    @property
    def shape(self) -> tuple[int, int]:
        return (self.K0.shape[0], self.omega_sigma.shape[0])

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.add.outer(self.K0.eigenvalues, self.omega_sigma.eigenvalues)

    def min_eig(self) -> float:
        return float(self.eigenvalues.min())

    def apply(self, U: np.ndarray) -> np.ndarray:
        return self.K0.matrix @ U + U @ self.omega_sigma.matrix.T

    def solve(self, U: np.ndarray) -> np.ndarray:
        QK, Qw = self.K0.eigenvectors, self.omega_sigma.eigenvectors
        lam = self.eigenvalues
        if np.min(np.abs(lam)) < 1e-14 * max(1.0, np.max(np.abs(lam))):
            raise np.linalg.LinAlgError("T is singular")
        C = QK.conj().T @ U @ Qw.conj()
        C = C / lam
        out = QK @ C @ Qw.T
        if not np.iscomplexobj(U) and np.iscomplexobj(out):
            out = out.real
        return out

    def dense(self) -> np.ndarray:
        P, n = self.shape
        return (np.kron(self.K0.matrix, np.eye(n))
                + np.kron(np.eye(P), self.omega_sigma.matrix))


def build_T(K0: SpectralOperator, omega_sigma: SpectralOperator, sigma: Optional[float] = None,
            max_dim: int = DEFAULT_MAX_TENSOR_DIM) -> TensorSumOperator:
    """Tensor-sum operator ``T = K0 x I + I x omega_sigma``.

    Parameters
    ----------
    sigma : float, optional
        When given, ``min spec T >= sigma - 1e-9`` is verified.
    max_dim : int
        Guard on the total tensor dimension ``P * n``.
    """
    P, n = K0.shape[0], omega_sigma.shape[0]
    if P * n > max_dim:
        raise ValueError(f"tensor dimension {P * n} exceeds the configured maximum {max_dim}")
    T = TensorSumOperator(K0, omega_sigma)
    if sigma is not None and T.min_eig() < sigma - 1e-9:
        raise SpectralError(f"min spec T = {T.min_eig():.6g} is below sigma = {sigma}")
    return T


@dataclass(frozen=True)
class OperatorSet:
    """All one-body operators of a scenario, built once.

    Attributes
    ----------
    h, omega, omega_sigma, F_high, F_low : SpectralOperator
        Boson operators; ``F_high = F(omega >= sigma)``.
    K0, K : SpectralOperator
        Particle operators.
    T : TensorSumOperator
    grads : tuple of ndarray
        Real spectral derivative matrices on the particle grid.
    A_nodes : ndarray
        ``A^{jk}(X_i)``, shape ``(P, d, d)``.
    """

    particle_grid: GridSpec
    boson_grid: GridSpec
    coeffs: CoefficientSet
    sigma: float
    mass_floor: float
    h: SpectralOperator
    omega: SpectralOperator
    omega_sigma: SpectralOperator
    F_high: SpectralOperator
    F_low: SpectralOperator
    K0: SpectralOperator
    K: SpectralOperator
    T: TensorSumOperator
    grads: tuple
    A_nodes: np.ndarray

    @property
    def dim(self) -> int:
        return self.boson_grid.dim

    @functools.cached_property
    def omega_inv_sqrt(self) -> SpectralOperator:
        return matrix_function(self.omega, power(-0.5), "omega^(-1/2)")

    @functools.cached_property
    def omega_sigma_inv_sqrt(self) -> SpectralOperator:
        return matrix_function(self.omega_sigma, power(-0.5), "omega_sigma^(-1/2)")

    @functools.cached_property
    def omega_inv(self) -> SpectralOperator:
        return matrix_function(self.omega, power(-1.0), "omega^(-1)")


def build_operators(particle_grid: GridSpec, boson_grid: GridSpec, coeffs: CoefficientSet,
                    sigma: float = 1.0, mass_floor: float = 0.0,
                    max_tensor_dim: int = DEFAULT_MAX_TENSOR_DIM) -> OperatorSet:
    """Assemble ``h``, ``omega``, ``omega_sigma``, cutoffs, ``K0``, ``K`` and ``T``."""
    h = assemble_h(boson_grid, coeffs, mass_floor=mass_floor)
    omega = matrix_function(h, power(0.5), "sqrt")
    omega_sigma = matrix_function(h, omega_sigma_profile(sigma), "omega_sigma")
    F_high = matrix_function(omega, smoothstep_high(sigma), "F(omega>=sigma)")
    F_low = SpectralOperator(
        np.eye(h.shape[0]) - F_high.matrix, 1.0 - F_high.eigenvalues,
        F_high.eigenvectors, boson_grid,
    )
    K0 = assemble_K0(particle_grid, coeffs)
    K = assemble_K(particle_grid, coeffs)
    T = build_T(K0, omega_sigma, sigma=sigma, max_dim=max_tensor_dim)
    grads = tuple(gradient_matrix(particle_grid, j) for j in range(particle_grid.dim))
    A_nodes = coeffs.A(particle_grid.nodes)
    return OperatorSet(particle_grid, boson_grid, coeffs, float(sigma), float(mass_floor),
                       h, omega, omega_sigma, F_high, F_low, K0, K, T, grads, A_nodes)


# ---------------------------------------------------------------------------
# Sobolev norms
# ---------------------------------------------------------------------------


def _fft_freq_sq(grid: GridSpec) -> np.ndarray:
    k = 2 * np.pi * np.fft.fftfreq(grid.n_points, d=grid.spacing)
    mesh = np.meshgrid(*([k] * grid.dim), indexing="ij")
    return sum(m**2 for m in mesh)


def sobolev_norm(vector, s: float, grid: GridSpec) -> float:
    """Discrete ``H^s`` norm of a vector given in l2 coordinates."""
    u = np.asarray(vector).reshape((grid.n_points,) * grid.dim)
    uh = np.fft.fftn(u, norm="ortho")
    w = (1.0 + _fft_freq_sq(grid)) ** s
    return float(np.sqrt(np.sum(w * np.abs(uh) ** 2)))


def discrete_delta(grid: GridSpec, X, q: float = 1.0) -> np.ndarray:
    """l2 coordinates of ``q`` times the lattice delta at node ``X``."""
    out = np.zeros(grid.size)
    out[grid.node_index(X)] = q / np.sqrt(grid.cell_volume)
    return out


# ---------------------------------------------------------------------------
# charge densities
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=16)
def _bump_rule(dim: int, order: int = 400):
    """Gauss-Legendre nodes on [0, 1] and the unnormalized bump profile."""
    t, w = np.polynomial.legendre.leggauss(order)
    r = 0.5 * (t + 1.0)
    w = 0.5 * w
    prof = np.exp(-1.0 / (1.0 - r * r))
    area = {1: 2.0, 2: 2 * np.pi, 3: 4 * np.pi}[dim]
    mass = area * np.sum(w * prof * r ** (dim - 1))
    return r, w, prof, mass


def _radial_ft(dim: int, r, w, prof, k):
    """``(2 pi)^(-d/2) int f(|x|) exp(-i k.x) dx`` for a radial f on the unit ball."""
    kr = np.multiply.outer(np.atleast_1d(k), r)
    if dim == 1:
        ker = 2.0 * np.cos(kr)
    elif dim == 2:
        ker = 2 * np.pi * special.j0(kr) * r
    else:
        ker = 4 * np.pi * np.sinc(kr / np.pi) * r * r
    return (2 * np.pi) ** (-dim / 2) * (ker * (w * prof)).sum(axis=-1)


@dataclass(frozen=True)
class ChargeDensity:
    """Radial charge density ``rho`` with total charge ``q`` and scale ``kappa``.

    ``rho^kappa(x) = kappa^d rho(kappa x)`` so ``rho_hat^kappa(xi) = rho_hat(xi/kappa)``.

    Profiles
    --------
    ``gaussian``
        ``q (2 pi s^2)^(-d/2) exp(-|x|^2 / 2 s^2)``.
    ``bump``
        ``C exp(-1 / (1 - |x|^2/s^2))`` on ``|x| < s`` normalized to ``q``.
    ``mexican_hat``
        ``amplitude * (d - |x|^2/s^2) * (2 pi s^2)^(-d/2) exp(-|x|^2/2 s^2)``;
        signed with zero total charge.
    """

    profile: str
    q: float
    width: float
    dim: int
    kappa: float = 1.0
    amplitude: float = 1.0
    center: tuple = ()

    def __post_init__(self):
        if self.profile not in ("gaussian", "bump", "mexican_hat"):
            raise ValueError(f"unknown density profile '{self.profile}'")
        if not self.width > 0:
            raise ValueError("density width must be positive")
        if self.kappa < 1:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")

    @property
    def total_charge(self) -> float:
        return 0.0 if self.profile == "mexican_hat" else self.q

    def _unit(self, r2):
        """Profile at scale kappa=1 as a function of ``|x|^2`` (complex ok)."""
        s, d = self.width, self.dim
        if self.profile == "gaussian":
            return self.q * (2 * np.pi * s * s) ** (-d / 2) * np.exp(-r2 / (2 * s * s))
        if self.profile == "mexican_hat":
            g = (2 * np.pi * s * s) ** (-d / 2) * np.exp(-r2 / (2 * s * s))
            return self.amplitude * (d - r2 / (s * s)) * g
        r, w, prof, mass = _bump_rule(d)
        u = np.real(r2) / (s * s)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            val = np.where(u < 1, np.exp(-1.0 / (1.0 - np.minimum(u, 1 - 1e-300))), 0.0)
        return self.q / (mass * s**d) * val

    def _unit_dr2(self, r2):
        """Derivative of :meth:`_unit` with respect to ``|x|^2``."""
        s, d = self.width, self.dim
        if self.profile == "gaussian":
            return -self._unit(r2) / (2 * s * s)
        if self.profile == "mexican_hat":
            g = (2 * np.pi * s * s) ** (-d / 2) * np.exp(-r2 / (2 * s * s))
            return self.amplitude * g * (-1.0 / (s * s) - (d - r2 / (s * s)) / (2 * s * s))
        u = np.real(r2) / (s * s)
        inside = u < 1
        um = np.where(inside, u, 0.0)
        return np.where(inside, -self._unit(r2) / ((1.0 - um) ** 2) / (s * s), 0.0)

    def __call__(self, x) -> np.ndarray:
        """``rho^kappa(x - center)`` for points ``x`` of shape ``(..., d)``."""
        x = self._shift(x)
        r2 = np.sum(x * x, axis=-1) * self.kappa**2
        return self.kappa**self.dim * self._unit(r2)

    def gradient(self, x) -> np.ndarray:
        """Analytic ``grad_x rho^kappa(x - center)``."""
        x = self._shift(x)
        k = self.kappa
        r2 = np.sum(x * x, axis=-1) * k * k
        return (k**self.dim * 2 * k * k * self._unit_dr2(r2))[..., None] * x

    def _shift(self, x):
        x = np.asarray(x)
        if self.center:
            x = x - np.asarray(self.center)
        return x

    def fourier(self, xi) -> np.ndarray:
        """Unitary Fourier transform of ``rho^kappa`` (centered), ``rho_hat(xi/kappa)``."""
        xi = np.asarray(xi)
        k2 = np.sum(xi * xi, axis=-1) / self.kappa**2
        s, d = self.width, self.dim
        if self.profile == "gaussian":
            return (2 * np.pi) ** (-d / 2) * self.q * np.exp(-0.5 * s * s * k2)
        if self.profile == "mexican_hat":
            return (2 * np.pi) ** (-d / 2) * self.amplitude * s * s * k2 * np.exp(-0.5 * s * s * k2)
        r, w, prof, mass = _bump_rule(d)
        kk = np.sqrt(np.real(k2)) * s
        vals = _radial_ft(d, r, w, prof, kk.ravel()).reshape(kk.shape)
        return self.q / mass * vals


def make_density(kind: str, q: float, width: float, dim: int = 3,
                 amplitude: float = 1.0) -> ChargeDensity:
    """Create a centered density at scale ``kappa = 1``."""
    if kind != "mexican_hat" and q == 0:
        raise ValueError("total charge q must be nonzero")
    return ChargeDensity(kind, float(q), float(width), int(dim), 1.0, float(amplitude))


def rescale(rho: ChargeDensity, kappa: float) -> ChargeDensity:
    """``rho^kappa(x) = kappa^d rho(kappa x)``."""
    from dataclasses import replace
    return replace(rho, kappa=float(kappa))


def kappa_cap(grid: GridSpec, width: float) -> float:
    """Largest admissible ``kappa``: ``0.25 * nyquist * width``."""
    return 0.25 * grid.nyquist * width


def particle_kappa_cap(grid: GridSpec, width: float) -> float:
    """Largest ``kappa`` a particle grid resolves in a tensor solve: ``nyquist * width``.

    ``rho(x - X)`` carries the joint frequencies ``(-k, k)``; once ``rho_hat^kappa``
    is not small at the particle Nyquist frequency, ``K0`` sees aliased
    frequencies and ``T^-1`` is overestimated.
    """
    return grid.nyquist * width


def check_kappa(grid: GridSpec, rho: ChargeDensity, kappa: Optional[float] = None) -> None:
    k = rho.kappa if kappa is None else kappa
    cap = kappa_cap(grid, rho.width)
    if k > cap * (1 + 1e-12):
        raise ValueError(f"kappa = {k} exceeds the aliasing cap {cap:.4g} of this grid")


def _periodized(grid: GridSpec, fn, X, images: int = 1) -> np.ndarray:
    X = np.atleast_1d(np.asarray(X, dtype=float))
    x = grid.nodes - X
    L = grid.box_length
    x = (x + 0.5 * L) % L - 0.5 * L
    shifts = np.array(np.meshgrid(*([np.arange(-images, images + 1)] * grid.dim),
                                  indexing="ij")).reshape(grid.dim, -1).T * L
    return sum(fn(x + sh) for sh in shifts)


def sample(rho: ChargeDensity, grid: GridSpec, X=None) -> np.ndarray:
    """l2 coordinates of the periodized ``rho^kappa(x - X)`` on ``grid``."""
    if rho.dim != grid.dim:
        raise ValueError("density and grid dimensions differ")
    check_kappa(grid, rho)
    X = np.zeros(grid.dim) if X is None else X
    from dataclasses import replace
    r0 = replace(rho, center=())
    return grid.to_l2(_periodized(grid, r0, X))


def sample_gradient(rho: ChargeDensity, grid: GridSpec, X=None) -> np.ndarray:
    """l2 coordinates of ``grad_x rho^kappa(x - X)``, shape ``(N, d)``."""
    check_kappa(grid, rho)
    X = np.zeros(grid.dim) if X is None else X
    from dataclasses import replace
    r0 = replace(rho, center=())
    return grid.to_l2(_periodized(grid, r0.gradient, X))


def sample_rows(rho: ChargeDensity, boson_grid: GridSpec, particle_grid: GridSpec,
                gradient: bool = False) -> np.ndarray:
    """Samples of ``rho_{X_i}`` for every particle node, shape ``(P, n)`` or ``(P, n, d)``."""
    fn = sample_gradient if gradient else sample
    return np.stack([fn(rho, boson_grid, X) for X in particle_grid.nodes])
