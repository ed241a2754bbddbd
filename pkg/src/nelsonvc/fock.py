"""Truncated bosonic Fock space coupled to a particle on a grid.

The Fock space is built over ``M`` one-particle modes (orthonormal vectors of
the boson grid, by default the lowest eigenvectors of ``h``) with at most
``n_max`` bosons.  The coupled space is ``C^P (particle nodes) x Fock`` with
the particle index outermost.  Couplings that depend on the particle position
are ``(P, M)`` arrays of mode coefficients.
"""

from __future__ import annotations

import functools
import itertools
import struct
import warnings
from dataclasses import dataclass
from math import comb
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import optimize
import scipy.sparse.linalg as spla

from .opcore import OperatorSet, rescale, sample_rows

DEFAULT_MAX_FOCK_DIM = 20000
LEAKAGE_WARN = 0.10


# ---------------------------------------------------------------------------
# Fock basis and field operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FockBasis:
    """Occupation-number basis with ``sum(n) <= n_max`` in graded lexicographic order."""

    modes: np.ndarray
    n_max: int
    states: tuple
    energies: Optional[np.ndarray] = None

    @property
    def M(self) -> int:
        return self.modes.shape[1]

    @property
    def dim(self) -> int:
        return len(self.states)

    @functools.cached_property
    def occupations(self) -> np.ndarray:
        return np.array(self.states, dtype=float).reshape(self.dim, self.M)

    @functools.cached_property
    def total_number(self) -> np.ndarray:
        return self.occupations.sum(axis=1)

    @functools.cached_property
    def index(self) -> dict:
        return {s: i for i, s in enumerate(self.states)}

    @functools.cached_property
    def annihilators(self) -> tuple:
        """Sparse ``a_m`` with ``a_m |n> = sqrt(n_m) |n - e_m>``."""
        idx = self.index
        out = []
        for m in range(self.M):
            rows, cols, vals = [], [], []
            for j, s in enumerate(self.states):
                if s[m]:
                    t = s[:m] + (s[m] - 1,) + s[m + 1:]
                    rows.append(idx[t])
                    cols.append(j)
                    vals.append(np.sqrt(s[m]))
            out.append(sp.csr_matrix((vals, (rows, cols)), shape=(self.dim, self.dim)))
        return tuple(out)

    @functools.cached_property
    def creators(self) -> tuple:
        return tuple(a.T.tocsr() for a in self.annihilators)

    def sector(self, n_cut: int) -> np.ndarray:
        """Indices of states with at most ``n_cut`` bosons."""
        return np.flatnonzero(self.total_number <= n_cut)


def fock_dimension(M: int, n_max: int) -> int:
    return comb(M + n_max, M)


def enumerate_states(M: int, n_max: int) -> tuple:
    """Occupation tuples ordered by total number, then lexicographically descending."""
    states = []
    for n in range(n_max + 1):
        for combo in itertools.combinations_with_replacement(range(M), n):
            occ = [0] * M
            for m in combo:
                occ[m] += 1
            states.append(tuple(occ))
    return tuple(states)


def build_fock(modes, n_max: int, energies=None, max_dim: int = DEFAULT_MAX_FOCK_DIM
               ) -> FockBasis:
    """Truncated Fock basis over the orthonormal columns of ``modes``.

    Parameters
    ----------
    modes : ndarray, shape (n, M) or int
        Mode vectors, or an integer ``M`` for abstract unit modes.
    energies : array_like, optional
        One-particle energies of the modes (needed for ``dGamma(omega)``).
    """
    if np.isscalar(modes):
        modes = np.eye(int(modes))
    modes = np.asarray(modes, dtype=float)
    if modes.ndim != 2 or modes.shape[1] < 1:
        raise ValueError("modes must be an (n, M) array with M >= 1")
    if n_max < 0:
        raise ValueError("n_max must be non-negative")
    M = modes.shape[1]
    err = np.max(np.abs(modes.T @ modes - np.eye(M)))
    if err > 1e-12:
        raise ValueError(f"modes are not orthonormal (error {err:.2e})")
    dim = fock_dimension(M, n_max)
    if dim > max_dim:
        raise ValueError(f"Fock dimension {dim} exceeds the configured maximum {max_dim}")
    if energies is not None:
        energies = np.asarray(energies, dtype=float)
        if energies.shape != (M,):
            raise ValueError("one energy per mode is required")
    return FockBasis(modes, int(n_max), enumerate_states(M, n_max), energies)


def lowest_modes(ops: OperatorSet, M: int) -> tuple[np.ndarray, np.ndarray]:
    """Lowest ``M`` eigenvectors of ``h`` and the matching ``omega`` eigenvalues."""
    lam = ops.h.eigenvalues
    order = np.argsort(lam, kind="stable")[:M]
    Q = np.ascontiguousarray(ops.h.eigenvectors[:, order].real)
    return Q, np.sqrt(np.maximum(lam[order], 0.0))


def project(fock: FockBasis, vectors: np.ndarray) -> tuple[np.ndarray, float]:
    """Mode coefficients of boson-grid vectors and the worst relative leakage."""
    V = np.atleast_2d(vectors)
    C = V @ fock.modes
    rest = V - C @ fock.modes.T
    nv = np.linalg.norm(V, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        leak = np.where(nv > 0, np.linalg.norm(rest, axis=1) / nv, 0.0)
    C = C if np.ndim(vectors) == 2 else C[0]
    return C, float(np.max(leak)) if leak.size else 0.0


@dataclass(frozen=True)
class FieldOps:
    a: sp.csr_matrix
    adag: sp.csr_matrix
    phi: sp.csr_matrix
    leakage: float


def annihilation(fock: FockBasis, coef) -> sp.csr_matrix:
    """``a(f) = sum_m conj(f_m) a_m`` for mode coefficients ``f``."""
    coef = np.asarray(coef)
    out = sp.csr_matrix((fock.dim, fock.dim), dtype=np.result_type(coef, float))
    for c, a in zip(np.conj(coef), fock.annihilators):
        if c != 0:
            out = out + c * a
    return out.tocsr()


def field_ops(fock: FockBasis, f, in_modes: bool = True) -> FieldOps:
    """``a(f)``, ``a*(f)`` and ``phi(f) = (a*(f) + a(f)) / sqrt(2)``.

    Parameters
    ----------
    in_modes : bool
        ``f`` holds mode coefficients; otherwise it is a boson-grid vector
        that is projected and its leakage reported.
    """
    leak = 0.0
    if not in_modes:
        f, leak = project(fock, np.asarray(f))
    a = annihilation(fock, f)
    adag = a.conj().T.tocsr()
    return FieldOps(a, adag, ((adag + a) / np.sqrt(2)).tocsr(), leak)


def second_quantize(fock: FockBasis, b) -> sp.csr_matrix:
    """``dGamma(b) = sum_mn b_mn a_m^* a_n``.

    ``b`` is an ``(M, M)`` matrix in the mode basis or a boson-grid operator
    (``(n, n)``), compressed to the modes.
    """
    b = np.asarray(b)
    if b.shape == (fock.M, fock.M):
        bm = b
    elif b.shape == (fock.modes.shape[0],) * 2:
        bm = fock.modes.T @ b @ fock.modes
    else:
        raise ValueError(f"operator shape {b.shape} fits neither modes nor grid")
    if not np.any(bm - np.diag(np.diagonal(bm))):
        return sp.diags(fock.occupations @ np.diagonal(bm)).tocsr()
    out = sp.csr_matrix((fock.dim, fock.dim), dtype=bm.dtype)
    A, C = fock.annihilators, fock.creators
    for m in range(fock.M):
        for n in range(fock.M):
            if bm[m, n] != 0:
                out = out + bm[m, n] * (C[m] @ A[n])
    return out.tocsr()


def number_operator(fock: FockBasis) -> sp.csr_matrix:
    return sp.diags(fock.total_number).tocsr()


def dgamma_energies(fock: FockBasis, energies=None) -> sp.csr_matrix:
    e = fock.energies if energies is None else np.asarray(energies, dtype=float)
    if e is None:
        raise ValueError("mode energies are needed")
    return sp.diags(fock.occupations @ e).tocsr()


def particle_annihilation(fock: FockBasis, V: np.ndarray) -> sp.csr_matrix:
    """``a(v)`` for a position-dependent coupling ``V[i, m]`` (block diagonal)."""
    V = np.asarray(V)
    P = V.shape[0]
    out = sp.csr_matrix((P * fock.dim, P * fock.dim), dtype=np.result_type(V, float))
    for m, a in enumerate(fock.annihilators):
        col = np.conj(V[:, m])
        if np.any(col != 0):
            out = out + sp.kron(sp.diags(col), a, format="csr")
    return out.tocsr()


def particle_field(fock: FockBasis, V: np.ndarray) -> sp.csr_matrix:
    """``phi(v)`` block diagonal over particle nodes for real ``V``."""
    a = particle_annihilation(fock, V)
    return ((a.conj().T + a) / np.sqrt(2)).tocsr()


def coupling_norm(V: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    """``||w v||`` in B(K, K x h) for a multiplication coupling: ``max_i ||w v_i||``."""
    V = np.asarray(V)
    if weights is not None:
        V = V * weights
    return float(np.max(np.linalg.norm(V, axis=1)))


# ---------------------------------------------------------------------------
# coupled system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoupledSystem:
    """Particle grid tensor truncated Fock space.

    Attributes
    ----------
    ops : OperatorSet
    fock : FockBasis
        Built over the lowest eigenmodes of ``h``.
    w_shift : float
        Constant added to the particle potential.
    """

    ops: OperatorSet
    fock: FockBasis
    w_shift: float = 0.0

    @property
    def particle_dim(self) -> int:
        return self.ops.particle_grid.size

    @property
    def dim(self) -> int:
        return self.particle_dim * self.fock.dim

    @functools.cached_property
    def K(self) -> np.ndarray:
        return self.ops.K.matrix + self.w_shift * np.eye(self.particle_dim)

    @functools.cached_property
    def H0(self) -> sp.csr_matrix:
        """``K x 1 + 1 x dGamma(omega)``."""
        P, D = self.particle_dim, self.fock.dim
        return (sp.kron(sp.csr_matrix(self.K), sp.identity(D), format="csr")
                + sp.kron(sp.identity(P), dgamma_energies(self.fock), format="csr")).tocsr()

    @functools.cached_property
    def id_fock(self):
        return sp.identity(self.fock.dim, format="csr")

    def couplings(self, density, kappa: float) -> tuple[np.ndarray, float]:
        """Mode coefficients of ``omega^(-1/2) rho^kappa_{X_i}`` and the leakage."""
        rho = sample_rows(rescale(density, kappa), self.ops.boson_grid, self.ops.particle_grid)
        g = rho @ self.ops.omega_inv_sqrt.matrix.T
        return project(self.fock, g)

    def E_shift(self, E_values) -> sp.csr_matrix:
        return sp.kron(sp.diags(np.asarray(E_values, dtype=float)), self.id_fock, format="csr")


def build_system(ops: OperatorSet, M: int, n_max: int, w_shift: float = 0.0,
                 max_dim: int = DEFAULT_MAX_FOCK_DIM) -> CoupledSystem:
    modes, w = lowest_modes(ops, M)
    return CoupledSystem(ops, build_fock(modes, n_max, w, max_dim), float(w_shift))


def _warn_leakage(leak: float, what: str):
    if leak > LEAKAGE_WARN:
        warnings.warn(f"{what}: {100 * leak:.1f}% of the norm lies outside the mode span",
                      RuntimeWarning, stacklevel=3)


def assemble_H(system: CoupledSystem, density, kappa: float) -> sp.csr_matrix:
    """``H = K x 1 + 1 x dGamma(omega) + sum_i |X_i><X_i| x phi(omega^(-1/2) rho_{X_i})``."""
    g, leak = system.couplings(density, kappa)
    _warn_leakage(leak, "interaction")
    return (system.H0 + particle_field(system.fock, g)).tocsr()


def assemble_H_from_coupling(system: CoupledSystem, g: np.ndarray) -> sp.csr_matrix:
    return (system.H0 + particle_field(system.fock, g)).tocsr()


# ---------------------------------------------------------------------------
# dressing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProjectedDressing:
    """Mode coefficients of ``beta`` and its particle gradients."""

    beta: np.ndarray
    grad: tuple
    g: np.ndarray
    leakage: float
    kappa: float


def project_dressing(system: CoupledSystem, field) -> ProjectedDressing:
    """Project a :class:`DressingField` onto the Fock modes.

    ``grad`` is the spectral particle derivative of the projected ``beta``
    (mode projection commutes with differentiation in ``X``).
    """
    beta, leak = project(system.fock, field.beta)
    _warn_leakage(leak, "dressing vector")
    grads = tuple(G @ beta for G in system.ops.grads)
    g, _ = project(system.fock, field.rho @ system.ops.omega_inv_sqrt.matrix.T)
    return ProjectedDressing(beta, grads, g, leak, field.kappa)


def _expi_phi_i(fock: FockBasis, beta_m: np.ndarray) -> np.ndarray:
    """``exp(i phi(i beta))`` for real mode coefficients (a real orthogonal matrix)."""
    a = annihilation(fock, beta_m).toarray()
    # i phi(i beta) = (a(beta) - a*(beta)) / sqrt(2), real antisymmetric
    S = (a - a.T) / np.sqrt(2)
    # exponentiate through the Hermitian matrix iS
    lam, Q = np.linalg.eigh(1j * S)
    U = (Q * np.exp(-1j * lam)) @ Q.conj().T
    return np.ascontiguousarray(U.real)


@dataclass(frozen=True)
class BlockUnitary:
    """Block-diagonal ``U = sum_i |X_i><X_i| x U_i``."""

    blocks: np.ndarray

    @property
    def shape(self):
        P, D, _ = self.blocks.shape
        return (P * D, P * D)

    def apply(self, v: np.ndarray) -> np.ndarray:
        P, D, _ = self.blocks.shape
        V = v.reshape(P, D, -1)
        return np.einsum("pij,pjk->pik", self.blocks, V).reshape(v.shape)

    def apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        P, D, _ = self.blocks.shape
        V = v.reshape(P, D, -1)
        return np.einsum("pji,pjk->pik", self.blocks, V).reshape(v.shape)

    def dense(self) -> np.ndarray:
        from scipy.linalg import block_diag
        return block_diag(*self.blocks)

    def unitarity_error(self) -> float:
        D = self.blocks.shape[1]
        return float(max(np.max(np.abs(b.T @ b - np.eye(D))) for b in self.blocks))


def dressing_unitary(system: CoupledSystem, dressing) -> BlockUnitary:
    """``U = exp(i phi(i beta_X))`` block by block.

    ``dressing`` may be a :class:`DressingField` or a :class:`ProjectedDressing`.
    """
    pd = dressing if isinstance(dressing, ProjectedDressing) else project_dressing(system, dressing)
    blocks = np.stack([_expi_phi_i(system.fock, b) for b in pd.beta])
    return BlockUnitary(blocks)


def conjugate(U: BlockUnitary, H) -> spla.LinearOperator:
    """``U H U*`` as a linear operator."""
    n = U.shape[0]

    def mv(v):
        v = np.asarray(v).reshape(n, -1)
        return U.apply(H @ U.apply_adjoint(v))

    return spla.LinearOperator((n, n), matvec=mv, matmat=mv, dtype=float)


def default_sector_cut(n_max: int) -> int:
    return max(0, min(n_max - 2, n_max // 2 + 1))


@dataclass
class WeylShiftReport:
    residual: float
    abs_residual: float
    rhs_norm: float
    n_max: int
    sector_cut: int


def verify_weyl_shift(fock: FockBasis, g_vector, beta, omega=None,
                      sector_cut: Optional[int] = None) -> WeylShiftReport:
    """Compare ``U (dGamma(omega) + phi(g)) U*`` with
    ``dGamma(omega) + phi(omega beta + g) + (omega beta / 2 + g | beta)``.

    All vectors are real mode coefficients.  The residual is measured on the
    protected sector ``n <= sector_cut``; the default
    ``min(n_max - 2, n_max // 2 + 1)`` keeps the sector a fixed fraction of
    the truncation, so the residual decreases with ``n_max``.
    """
    beta = np.asarray(beta, dtype=float)
    g = np.asarray(g_vector, dtype=float)
    w = fock.energies if omega is None else np.asarray(omega, dtype=float)
    nb = np.linalg.norm(beta)
    if nb > 1:
        raise ValueError(f"||beta|| = {nb:.3g} is too large for the truncation (max 1)")
    cut = default_sector_cut(fock.n_max) if sector_cut is None else sector_cut
    dG = dgamma_energies(fock, w).toarray()
    U = _expi_phi_i(fock, beta)
    lhs = U @ (dG + field_ops(fock, g).phi.toarray()) @ U.T
    rhs = (dG + field_ops(fock, w * beta + g).phi.toarray()
           + float(np.dot(0.5 * w * beta + g, beta)) * np.eye(fock.dim))
    S = fock.sector(cut)
    diff = (lhs - rhs)[np.ix_(S, S)]
    R = rhs[np.ix_(S, S)]
    num = float(np.linalg.norm(diff, 2))
    den = float(np.linalg.norm(R, 2))
    return WeylShiftReport(num / den if den > 0 else num, num, den, fock.n_max, cut)


def dressed_potential(system: CoupledSystem, pd: ProjectedDressing) -> np.ndarray:
    """``V(X_i) = (g|beta) + 1/2 (omega beta|beta) + 1/2 sum A_jk (grad_j beta|grad_k beta)``."""
    w = system.fock.energies
    V = np.sum(pd.g * pd.beta, axis=1) + 0.5 * np.sum(w * pd.beta**2, axis=1)
    A = system.ops.A_nodes
    d = len(pd.grad)
    for j in range(d):
        for k in range(d):
            V = V + 0.5 * A[:, j, k] * np.sum(pd.grad[j] * pd.grad[k], axis=1)
    return V


def remainder_R(system: CoupledSystem, pd: ProjectedDressing) -> sp.csr_matrix:
    """Operator remainder of the dressed Hamiltonian.

    ``R = 2 sum_jk (grad_j A_jk a_k - a_j^* A_jk grad_k)
    + sum_jk (2 a_j^* A_jk a_k - a_j^* A_jk a_k^* - a_j A_jk a_k)``
    with ``a_j = a(grad_j beta) / sqrt(2)``.
    """
    fock = system.fock
    P = system.particle_dim
    I = system.id_fock
    d = len(pd.grad)
    a = [particle_annihilation(fock, g) / np.sqrt(2) for g in pd.grad]
    ad = [x.T.tocsr() for x in a]
    G = [sp.kron(sp.csr_matrix(Gm), I, format="csr") for Gm in system.ops.grads]
    R = sp.csr_matrix((P * fock.dim, P * fock.dim))
    for j in range(d):
        for k in range(d):
            Ajk = system.ops.A_nodes[:, j, k]
            if not np.any(Ajk):
                continue
            A = sp.kron(sp.diags(Ajk), I, format="csr")
            R = R + 2 * (G[j] @ A @ a[k] - ad[j] @ A @ G[k])
            R = R + 2 * (ad[j] @ A @ a[k]) - ad[j] @ A @ ad[k] - a[j] @ A @ a[k]
    R = R.tocsr()
    asym = spla.norm(R - R.T)
    scale = max(spla.norm(R), 1e-300)
    if asym > 1e-10 * scale:
        raise ArithmeticError(f"remainder is not Hermitian (relative asymmetry {asym / scale:.2e})")
    return R


@dataclass(frozen=True)
class DressedParts:
    """Pieces of the dressed Hamiltonian."""

    total: sp.csr_matrix
    R: sp.csr_matrix
    V: np.ndarray
    ir_coupling: np.ndarray


def assemble_dressed(system: CoupledSystem, dressing, kappa: Optional[float] = None,
                     E_values=None, V_values=None, return_parts: bool = False):
    """Algebraic dressed Hamiltonian
    ``K + dGamma(omega) + phi(g + (K0 + omega) beta) + R + V(X) [- E(X)]``.

    The field argument equals ``omega^(-1/2) F(omega <= sigma) rho_X`` on the
    modes.  Pass ``E_values`` (one per particle node) to subtract the
    counterterm.  ``V_values`` replaces the potential computed from the
    projected ``beta`` (for instance by the untruncated one), which breaks the
    exact correspondence with the truncated conjugation.
    """
    pd = dressing if isinstance(dressing, ProjectedDressing) else project_dressing(system, dressing)
    if kappa is not None and abs(pd.kappa - kappa) > 1e-12 * kappa:
        raise ValueError("dressing was built for a different kappa")
    w = system.fock.energies
    ir = pd.g + system.ops.K0.matrix @ pd.beta + pd.beta * w
    R = remainder_R(system, pd)
    V = dressed_potential(system, pd) if V_values is None else np.asarray(V_values, dtype=float)
    diag = V if E_values is None else V - np.asarray(E_values, dtype=float)
    H = (system.H0 + particle_field(system.fock, ir) + R + system.E_shift(diag)).tocsr()
    asym = spla.norm(H - H.T)
    if asym > 1e-10 * spla.norm(H):
        raise ArithmeticError("dressed Hamiltonian is not Hermitian")
    if return_parts:
        return DressedParts(H, R, V, ir)
    return H


# ---------------------------------------------------------------------------
# operator bounds
# ---------------------------------------------------------------------------


def _h0_diag(system: CoupledSystem, offset: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Eigenbasis of K and the diagonal of ``H0`` (K shifted to min 0) in it."""
    lamK, QK = np.linalg.eigh(system.K)
    lamK = lamK - lamK.min() + offset
    dG = system.fock.occupations @ system.fock.energies
    return QK, np.add.outer(lamK, dG).ravel()


def _in_k_basis(QK: np.ndarray, op: sp.spmatrix, D: int) -> np.ndarray:
    Q = np.kron(QK, np.eye(D))
    return Q.T @ op.toarray() @ Q


def op_norm(M: np.ndarray, dense_limit: int = 600) -> float:
    """Largest singular value; Lanczos on ``M^T M`` for large matrices."""
    if min(M.shape) <= dense_limit:
        return float(np.linalg.norm(M, 2))
    if not np.any(M):
        return 0.0
    n = M.shape[1]
    G = spla.LinearOperator((n, n), matvec=lambda x: M.T @ (M @ x), dtype=M.dtype)
    lam = spla.eigsh(G, k=1, which="LA", v0=np.ones(n), tol=1e-14,
                     return_eigenvectors=False)
    return float(np.sqrt(max(lam[0], 0.0)))


def a6_bounds(system: CoupledSystem, v_samples: Sequence, s_values: Sequence[float],
              number: str = "full", sigma: Optional[float] = None) -> list:
    """Evaluate the four operator bounds for annihilation/creation operators.

    For each coupling pair ``(v1, v2)`` (``(P, M)`` real arrays) and each ``s``:

    1. ``||(N+1)^{-s/2} a(v1) (H0+1)^{-(1-s)/2}|| <= ||omega^{(s-1)/2} v1||``
    2. ``||(H0+1)^{-s/2} a*(v1) (N+1)^{-(1-s)/2}|| <= ||omega^{-s/2} v1||``
    3. ``||(N+1)^{-s} a(v1) a(v2) (H0+1)^{-1+s}|| <= ||omega^{-(1-s)/2} v1|| ||omega^{-(1-s)/2} v2||``
    4. ``||(H0+1)^{-s} a*(v1) a*(v2) (N+1)^{-1+s}|| <= ||omega^{-s/2} v1|| ||omega^{-s/2} v2||``

    ``H0`` is the free Hamiltonian with ``K`` shifted to ``min spec K = 0``.
    With ``number='projected'`` the number operator counts only modes with
    ``omega >= sigma / 2`` and couplings are restricted to those modes.

    Bounds 3 and 4 as written fail by a factor ``sqrt(2)`` at ``s = 1`` and
    ``s = 0`` respectively: ``(N+1)^{-1} a(f) a(f)`` maps the normalized
    two-boson state ``a*(f)^2 Omega / sqrt(2)`` to ``sqrt(2) ||f||^2 Omega``.
    Each row therefore also carries ``slack_sharp``, the slack against the
    right side multiplied by ``2^{s/2}`` (bound 3) or ``2^{(1-s)/2}`` (bound 4),
    the constants obtained by interpolating between the endpoints.
    """
    fock = system.fock
    P, D = system.particle_dim, fock.dim
    w = fock.energies
    QK, h0 = _h0_diag(system)
    if number == "full":
        Nd = np.tile(fock.total_number, P)
        keep = np.ones(fock.M, dtype=bool)
    elif number == "projected":
        if sigma is None:
            raise ValueError("projected number operator needs sigma")
        keep = w >= 0.5 * sigma
        Nd = np.tile(fock.occupations[:, keep].sum(axis=1), P)
    else:
        raise ValueError(f"unknown number operator '{number}'")
    rows = []
    for idx, pair in enumerate(v_samples):
        v1, v2 = (pair if isinstance(pair, tuple) else (pair, pair))
        v1 = np.where(keep, v1, 0.0)
        v2 = np.where(keep, v2, 0.0)
        a1 = _in_k_basis(QK, particle_annihilation(fock, v1), D)
        a2 = _in_k_basis(QK, particle_annihilation(fock, v2), D)
        a12 = a1 @ a2
        for s in s_values:
            Np = lambda p: (Nd + 1.0) ** p
            Hp = lambda p: (h0 + 1.0) ** p
            lhs = [
                op_norm(Np(-s / 2)[:, None] * a1 * Hp(-(1 - s) / 2)[None, :]),
                op_norm(Hp(-s / 2)[:, None] * a1.T * Np(-(1 - s) / 2)[None, :]),
                op_norm(Np(-s)[:, None] * a12 * Hp(-1 + s)[None, :]),
                op_norm(Hp(-s)[:, None] * a12.T * Np(-1 + s)[None, :]),
            ]
            rhs = [
                coupling_norm(v1, w ** ((s - 1) / 2)),
                coupling_norm(v1, w ** (-s / 2)),
                coupling_norm(v1, w ** (-(1 - s) / 2)) * coupling_norm(v2, w ** (-(1 - s) / 2)),
                coupling_norm(v1, w ** (-s / 2)) * coupling_norm(v2, w ** (-s / 2)),
            ]
            sharp = [1.0, 1.0, 2.0 ** (s / 2), 2.0 ** ((1 - s) / 2)]
            for b in range(4):
                rows.append({"sample": idx, "s": float(s), "bound": b + 1,
                             "lhs": float(lhs[b]), "rhs": float(rhs[b]),
                             "slack": float(rhs[b] - lhs[b]),
                             "slack_sharp": float(sharp[b] * rhs[b] - lhs[b])})
    return rows


def ju88_norm(fock: FockBasis, v: np.ndarray, P: int = 1) -> tuple[float, float]:
    """``||a(v)(N+1)^{-1/2}||`` and ``||a*(v)(N+1)^{-1/2}||`` for a coupling ``v``."""
    v = np.atleast_2d(v)
    a = particle_annihilation(fock, v).toarray()
    Nd = np.tile(fock.total_number, v.shape[0])
    s = (Nd + 1.0) ** -0.5
    return float(np.linalg.norm(a * s[None, :], 2)), float(np.linalg.norm(a.T * s[None, :], 2))


@dataclass
class FormBound:
    """Minimal relative bound ``a(b)`` on a grid of ``b`` values."""

    b_values: np.ndarray
    a_values: np.ndarray

    @property
    def premise_holds(self) -> bool:
        return bool(np.any(self.a_values < 1))

    @property
    def b(self) -> float:
        i = self._pick()
        return float(self.b_values[i])

    @property
    def a(self) -> float:
        return float(self.a_values[self._pick()])

    def _pick(self) -> int:
        ok = np.flatnonzero(self.a_values < 1)
        return int(ok[0]) if ok.size else int(np.argmin(self.a_values))

    def a_at(self, b: float) -> float:
        i = np.flatnonzero(np.isclose(self.b_values, b))
        if not i.size:
            raise KeyError(f"b = {b} is not on the grid")
        return float(self.a_values[i[0]])


def _relative_bound(Bt: np.ndarray, hd: np.ndarray, b: float, tol: float = 1e-10,
                    norm_B: Optional[float] = None) -> float:
    """Smallest ``a`` with ``|<B psi, psi>| <= a <H0 psi, psi> + b ||psi||^2``.

    ``g(a) = ||(H0 + b/a)^{-1/2} B (H0 + b/a)^{-1/2}||`` is nonincreasing in
    ``a``, so the answer is the root of ``g(a) - a``.
    """

    def g(a):
        if a <= 0:
            return np.inf
        s = (hd + b / a) ** -0.5 if b > 0 else np.where(hd > 0, hd ** -0.5, np.inf)
        if not np.all(np.isfinite(s)):
            return np.inf
        M = s[:, None] * Bt * s[None, :]
        return float(np.max(np.abs(np.linalg.eigvalsh(M))))

    if not np.any(Bt):
        return 0.0
    if norm_B is None:
        norm_B = float(np.max(np.abs(np.linalg.eigvalsh(Bt))))
    # a bounded form is dominated by b alone
    if b >= norm_B:
        return 0.0
    if b == 0 and np.any(hd <= 0):
        return np.inf
    hi = 1.0
    while g(hi) > hi:
        hi *= 2.0
        if hi > 1e8:
            return np.inf
    lo = hi / 2.0
    while g(lo) <= lo:
        lo /= 2.0
        if lo < 1e-300:
            return 0.0
    return float(optimize.brentq(lambda a: g(a) - a, lo, hi, xtol=1e-14, rtol=tol))


def form_bound(B_form, H0, b_grid=(0.0, 0.1, 1.0, 10.0, 100.0)) -> FormBound:
    """Relative form bound of the symmetric matrix ``B`` with respect to ``H0 >= 0``.

    For each ``b`` the minimal ``a`` with
    ``|<psi, B psi>| <= a <psi, H0 psi> + b ||psi||^2`` is found by bisection,
    using that the condition is equivalent to
    ``||(H0 + b/a)^{-1/2} B (H0 + b/a)^{-1/2}|| <= a``.
    """
    B = B_form.toarray() if sp.issparse(B_form) else np.asarray(B_form)
    H = H0.toarray() if sp.issparse(H0) else np.asarray(H0)
    lam, Q = np.linalg.eigh(H)
    scale = max(1.0, np.max(np.abs(lam)))
    if lam.min() < -1e-9 * scale:
        raise ValueError("H0 must be positive semidefinite")
    lam = np.where(lam < 1e-12 * scale, 0.0, lam)
    Bt = Q.T @ B @ Q
    Bt = 0.5 * (Bt + Bt.T)
    b_grid = np.asarray(b_grid, dtype=float)
    norm_B = float(np.max(np.abs(np.linalg.eigvalsh(Bt)))) if np.any(Bt) else 0.0
    a_vals = np.array([_relative_bound(Bt, lam, b, norm_B=norm_B) for b in b_grid])
    return FormBound(b_grid, a_vals)


# ---------------------------------------------------------------------------
# spectra and resolvents
# ---------------------------------------------------------------------------

DENSE_LIMIT = 3000


def _fix_sign(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))
    return v if v[i].real >= 0 else -v


def ground_state(H, dense_limit: int = DENSE_LIMIT) -> tuple[float, np.ndarray]:
    """Lowest eigenpair; the largest-magnitude entry of the vector is made positive."""
    n = H.shape[0]
    if isinstance(H, spla.LinearOperator) and not sp.issparse(H):
        v0 = np.ones(n) / np.sqrt(n)
        lam, vec = spla.eigsh(H, k=1, which="SA", v0=v0, tol=1e-13)
        return float(lam[0]), _fix_sign(vec[:, 0])
    if n <= dense_limit:
        M = H.toarray() if sp.issparse(H) else np.asarray(H)
        lam, vec = np.linalg.eigh(M)
        return float(lam[0]), _fix_sign(vec[:, 0])
    v0 = np.ones(n) / np.sqrt(n)
    lam, vec = spla.eigsh(H, k=1, which="SA", v0=v0, tol=1e-13)
    return float(lam[0]), _fix_sign(vec[:, 0])


def lowest_eigs(H, k: int) -> tuple[np.ndarray, np.ndarray]:
    M = H.toarray() if sp.issparse(H) else np.asarray(H)
    lam, vec = np.linalg.eigh(M)
    return lam[:k], np.stack([_fix_sign(vec[:, i]) for i in range(k)], axis=1)


def resolvent_apply(H, z: float, psi: np.ndarray, E0: Optional[float] = None) -> np.ndarray:
    """``(H - z)^{-1} psi`` after checking ``z <= min spec H - 1``."""
    if E0 is None:
        E0, _ = ground_state(H)
    if z > E0 - 1.0:
        raise ValueError(f"z = {z} is not below the spectrum (min {E0:.6g}) by at least 1")
    n = H.shape[0]
    if sp.issparse(H):
        return spla.spsolve((H - z * sp.identity(n, format="csc")).tocsc(), psi)
    return np.linalg.solve(np.asarray(H) - z * np.eye(n), psi)


def resolvent_matrix(H, z: float) -> np.ndarray:
    """Dense ``(H - z)^{-1}`` (spectrum checked)."""
    M = H.toarray() if sp.issparse(H) else np.asarray(H)
    lam, Q = np.linalg.eigh(M)
    if z > lam[0] - 1.0:
        raise ValueError(f"z = {z} is not below the spectrum (min {lam[0]:.6g}) by at least 1")
    return (Q / (lam - z)) @ Q.T


# ---------------------------------------------------------------------------
# dense export
# ---------------------------------------------------------------------------

_MAGIC = b"NVCMAT01"


def export_dense(matrix, path) -> None:
    """Write ``8-byte magic, uint64 rows, uint64 cols, float64 row-major data``."""
    M = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix)
    if np.iscomplexobj(M):
        if np.max(np.abs(M.imag)) > 0:
            raise ValueError("only real matrices can be exported")
        M = M.real
    M = np.ascontiguousarray(M, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQ", *M.shape))
        fh.write(M.tobytes(order="C"))


def import_dense(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError("not a dense matrix file")
        rows, cols = struct.unpack("<QQ", fh.read(16))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(rows, cols).copy()
