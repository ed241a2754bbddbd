import numpy as np
import pytest

from nelsonvc import opcore as oc

from conftest import variable_coeffs


def test_grid_dual_freqs():
    g = oc.build_grid(1, 8, 2 * np.pi)
    np.testing.assert_allclose(g.dual_freqs[:, 0], np.arange(-4, 4), atol=1e-14)


def test_grid_2d_counts():
    g = oc.build_grid(2, 8, 10.0)
    assert g.nodes.shape == (64, 2)
    assert g.dual_freqs.shape == (64, 2)


@pytest.mark.parametrize("args", [(1, 7, 2 * np.pi), (1, 4, 1.0), (1, 8, 0.0), (4, 8, 1.0)])
def test_grid_rejects(args):
    with pytest.raises(ValueError):
        oc.build_grid(*args)


def test_origin_is_node():
    g = oc.build_grid(2, 16, 3.0)
    i = g.node_index([0.0, 0.0])
    np.testing.assert_allclose(g.nodes[i], 0.0)
    with pytest.raises(ValueError):
        g.node_index([0.01, 0.0])


def test_h_constant_spectrum():
    g = oc.build_grid(1, 8, 2 * np.pi)
    h = oc.assemble_h(g, oc.CoefficientSet.constant(1, a=1.0, mass=1.0))
    xi = g.dual_freqs[:, 0]
    # the unpaired Nyquist mode is symmetrized, which keeps xi^2 unchanged
    np.testing.assert_allclose(h.eigenvalues, np.sort(xi**2 + 1), atol=1e-12)


def test_h_massless_kernel():
    g = oc.build_grid(1, 16, 2 * np.pi)
    h = oc.assemble_h(g, oc.CoefficientSet.constant(1, mass=0.0))
    assert np.sum(np.abs(h.eigenvalues) < 1e-10) == 1
    v = h.eigenvectors[:, 0]
    np.testing.assert_allclose(np.abs(v), 1 / 4, atol=1e-12)


def _fd_h(a_fn, v, n, L):
    """Second-order conservative finite differences for -(a u')' + v u."""
    dx = L / n
    x = -L / 2 + dx * np.arange(n)
    am = a_fn(x + dx / 2)
    ap = np.roll(am, 1)
    M = np.diag(am + ap) / dx**2 + np.diag(np.full(n, v))
    M -= np.diag(am[:-1], 1) / dx**2 + np.diag(am[:-1], -1) / dx**2
    M[0, -1] -= am[-1] / dx**2
    M[-1, 0] -= am[-1] / dx**2
    return np.linalg.eigvalsh(M)


def test_h_variable_vs_finite_differences():
    L = 2 * np.pi
    co = oc.CoefficientSet(
        a=oc.MatrixField.scalar(1.0, 1, oc.ScalarField.sinusoid(1.0, 0.3, 1.0)),
        v=oc.ScalarField.constant(0.5), m=oc.ScalarField.constant(0.0),
        A=oc.MatrixField.scalar(0.5, 1), W=oc.ScalarField.constant(0.0))
    h = oc.assemble_h(oc.build_grid(1, 64, L), co)
    ref = _fd_h(lambda x: 1 + 0.3 * np.sin(x), 0.5, 256, L)
    np.testing.assert_allclose(h.eigenvalues[:10], ref[:10], rtol=1e-2)


def test_h_hermitian_psd(var_ops):
    for op in (var_ops.h, var_ops.K0):
        M = op.matrix
        assert np.linalg.norm(M - M.T) <= 1e-12 * np.linalg.norm(M)
        assert op.min_eig() >= -1e-9 * op.norm()
    Q = var_ops.h.eigenvectors
    assert np.abs(Q.T @ Q - np.eye(Q.shape[0])).max() < 1e-10


def test_K0_constant():
    g = oc.build_grid(1, 16, 2 * np.pi)
    K0 = oc.assemble_K0(g, oc.CoefficientSet.constant(1, A=0.5))
    np.testing.assert_allclose(K0.eigenvalues, np.sort(g.dual_freqs[:, 0] ** 2 / 2), atol=1e-12)


def test_K_quadratic_potential_bounded_below():
    g = oc.build_grid(1, 16, 2 * np.pi)
    co = oc.CoefficientSet(
        a=oc.MatrixField.scalar(1.0, 1), v=oc.ScalarField.constant(0.0),
        m=oc.ScalarField.constant(1.0), A=oc.MatrixField.scalar(1.0, 1),
        W=oc.ScalarField.constant(0.0))
    K0 = oc.assemble_K0(g, co)
    K = oc.SpectralOperator.from_matrix(K0.matrix + np.diag(g.nodes[:, 0] ** 2))
    assert K.min_eig() >= 0


def test_K0_degenerate_rejected():
    g = oc.build_grid(1, 16, 2 * np.pi)
    co = oc.CoefficientSet(
        a=oc.MatrixField.scalar(1.0, 1), v=oc.ScalarField.constant(0.0),
        m=oc.ScalarField.constant(1.0),
        A=oc.MatrixField.scalar(1.0, 1, oc.ScalarField.sinusoid(0.5, 0.5, 1.0)),
        W=oc.ScalarField.constant(0.0))
    with pytest.raises(oc.EllipticityError):
        oc.assemble_K0(g, co)


def test_nonhermitian_rejected():
    with pytest.raises(ValueError):
        oc.SpectralOperator.from_matrix(np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_matrix_function_identity_and_sqrt(var_ops):
    h = var_ops.h
    same = oc.matrix_function(h, lambda x: x)
    assert np.abs(same.matrix - h.matrix).max() <= 1e-12 * h.norm()
    w = var_ops.omega.matrix
    assert np.linalg.norm(w @ w - h.matrix) <= 1e-10 * np.linalg.norm(h.matrix)


def test_matrix_function_composition(var_ops):
    sq = oc.matrix_function(var_ops.omega, lambda x: x**2)
    assert np.abs(sq.matrix - var_ops.h.matrix).max() <= 1e-10 * var_ops.h.norm()


def test_singular_function_names_eigenvalue():
    w = oc.SpectralOperator.from_matrix(np.diag([0.0, 1.0, 4.0]))
    with pytest.raises(oc.SpectralError, match="eigenvalue 0"):
        oc.matrix_function(w, oc.power(-1.0), "omega^-1")
    with pytest.raises(oc.SpectralError):
        oc.matrix_function(oc.SpectralOperator.from_matrix(-np.eye(2)), oc.power(0.5))


def test_cutoffs_partition_unity(var_ops):
    total = var_ops.F_high.matrix + var_ops.F_low.matrix
    np.testing.assert_allclose(total, np.eye(total.shape[0]), atol=1e-14)


def test_omega_sigma_matches_omega_high(var_ops):
    s = var_ops.sigma
    lam = var_ops.h.eigenvalues
    Q = var_ops.h.eigenvectors
    P = Q[:, lam >= 4 * s * s]
    diff = (var_ops.omega.matrix - var_ops.omega_sigma.matrix) @ P
    assert np.abs(diff).max() <= 1e-10
    d2 = (var_ops.omega.matrix - var_ops.omega_sigma.matrix) @ var_ops.F_high.matrix
    assert np.abs(d2).max() <= 1e-10


def test_omega_sigma_profile_bounds():
    f = oc.omega_sigma_profile(1.0)
    lam = np.linspace(0, 10, 2001)
    v = f(lam)
    assert v.min() >= 1.0 - 1e-14
    assert np.all(np.diff(v) >= -1e-14)
    np.testing.assert_allclose(v[lam >= 4], np.sqrt(lam[lam >= 4]))


def test_T_tensor_sum_spectrum():
    K0 = oc.SpectralOperator.from_matrix(np.diag([0.0, 0.5]))
    ws = oc.SpectralOperator.from_matrix(np.diag([1.0, 2.0]))
    T = oc.build_T(K0, ws)
    np.testing.assert_allclose(np.sort(T.eigenvalues.ravel()), [1, 1.5, 2, 2.5])


def test_T_massless_above_sigma():
    pg = oc.build_grid(1, 8, 2 * np.pi)
    bg = oc.build_grid(1, 16, 2 * np.pi)
    ops = oc.build_operators(pg, bg, oc.CoefficientSet.constant(1, mass=0.0),
                             sigma=1.0, mass_floor=1e-6)
    assert ops.T.min_eig() >= 1.0 - 1e-9


def test_T_solve_vs_dense(var_ops, rng):
    T = var_ops.T
    u = np.outer(rng.standard_normal(T.shape[0]), rng.standard_normal(T.shape[1]))
    x = T.solve(u)
    ref = np.linalg.solve(T.dense(), u.ravel()).reshape(u.shape)
    np.testing.assert_allclose(x, ref, atol=1e-12)
    np.testing.assert_allclose(T.apply(x), u, atol=1e-11)


def test_T_dim_guard(var_ops):
    with pytest.raises(ValueError, match="exceeds"):
        oc.build_T(var_ops.K0, var_ops.omega_sigma, max_dim=100)


def test_sobolev_constant_is_l2():
    g = oc.build_grid(1, 32, 5.0)
    u = np.full(32, 0.7)
    assert oc.sobolev_norm(u, 0.0, g) == pytest.approx(np.linalg.norm(u), rel=1e-13)


def test_sobolev_weight_direct():
    g = oc.build_grid(1, 16, 2 * np.pi)
    u = np.cos(3 * g.nodes[:, 0])
    # cos(3x) has |u_hat|^2 split equally on +-3
    expect = np.linalg.norm(u) * (1 + 9) ** 1.0
    assert oc.sobolev_norm(u, 2.0, g) == pytest.approx(expect, rel=1e-12)


def test_density_normalization():
    g = oc.build_grid(1, 64, 2 * np.pi)
    rho = oc.make_density("gaussian", 1.0, 2 * np.pi / 16, dim=1)
    total = np.sum(g.from_l2(oc.sample(rho, g))) * g.spacing
    assert total == pytest.approx(1.0, abs=1e-10)
    for k in (2.0, 3.0):
        r = oc.rescale(rho, k)
        assert np.sum(g.from_l2(oc.sample(r, g))) * g.spacing == pytest.approx(1.0, rel=1e-8)


def test_density_fourier_scaling():
    rho = oc.make_density("gaussian", 2.0, 0.7, dim=3)
    xi = np.array([[0.3, -1.2, 2.0]])
    r4 = oc.rescale(rho, 4.0)
    assert r4.fourier(xi)[0] == pytest.approx(rho.fourier(xi / 4)[0], rel=1e-14)
    assert rho.fourier(np.zeros((1, 3)))[0] == pytest.approx((2 * np.pi) ** -1.5 * 2.0)


def test_density_fourier_vs_grid_sum():
    g = oc.build_grid(1, 128, 16.0)
    rho = oc.make_density("gaussian", 1.0, 1.0, dim=1)
    s = g.from_l2(oc.sample(rho, g))
    xi = g.axis_freqs
    # unitary convention on the line: (2 pi)^(-1/2) sum rho(x) e^{-i xi x} dx
    direct = np.exp(-1j * np.outer(xi, g.axis_nodes)) @ s * g.spacing / np.sqrt(2 * np.pi)
    np.testing.assert_allclose(direct.real, rho.fourier(xi[:, None]), atol=1e-9)


@pytest.mark.parametrize("dim", [1, 3])
def test_bump_fourier_vs_quad(dim):
    from scipy import integrate
    rho = oc.make_density("bump", 1.0, 1.3, dim=dim)
    for k in (0.0, 0.7, 3.0):
        if dim == 1:
            f = lambda x: 2 * np.cos(k * x) * rho(np.array([[x]]))[0]
        else:
            f = lambda r: 4 * np.pi * r * r * np.sinc(k * r / np.pi) * rho(np.array([[r, 0, 0]]))[0]
        val = integrate.quad(f, 0, 1.3, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
        ref = val * (2 * np.pi) ** (-dim / 2)
        xi = np.zeros((1, dim))
        xi[0, 0] = k
        assert rho.fourier(xi)[0] == pytest.approx(ref, rel=1e-8, abs=1e-12)


def test_density_gradient_matches_spectral():
    g = oc.build_grid(1, 64, 2 * np.pi)
    rho = oc.make_density("gaussian", 1.0, 2 * np.pi / 16, dim=1)
    u = oc.sample(rho, g, [0.5890486225480862])
    du = oc.sample_gradient(rho, g, [0.5890486225480862])[:, 0]
    D = oc.gradient_matrix(g, 0)
    np.testing.assert_allclose(D @ u, du, atol=1e-8 * np.abs(du).max())


def test_density_delta_limit():
    g = oc.build_grid(1, 256, 2 * np.pi)
    rho = oc.make_density("gaussian", 1.0, 2 * np.pi / 8, dim=1)
    delta = oc.discrete_delta(g, [0.0])
    dist = [oc.sobolev_norm(oc.sample(oc.rescale(rho, k), g) - delta, -2.0, g)
            for k in (1, 2, 4, 8, 16)]
    assert all(b < a for a, b in zip(dist, dist[1:]))
    hm2 = [oc.sobolev_norm(oc.sample(oc.rescale(rho, k), g), -2.0, g) for k in (1, 2, 4, 8, 16)]
    assert max(hm2) / min(hm2) < 1.5


def test_kappa_cap_enforced():
    g = oc.build_grid(1, 64, 2 * np.pi)
    rho = oc.make_density("gaussian", 1.0, 2 * np.pi / 16, dim=1)
    cap = oc.kappa_cap(g, rho.width)
    assert cap == pytest.approx(0.25 * 32 * rho.width)
    with pytest.raises(ValueError, match="aliasing cap"):
        oc.sample(oc.rescale(rho, cap * 1.01), g)


def test_density_rejects():
    with pytest.raises(ValueError):
        oc.make_density("gaussian", 0.0, 1.0)
    with pytest.raises(ValueError):
        oc.rescale(oc.make_density("gaussian", 1.0, 1.0), 0.5)


def test_variable_coeff_fields():
    co = variable_coeffs()
    x = np.linspace(-3, 3, 7)[:, None]
    np.testing.assert_allclose(co.a(x)[:, 0, 0], 1 + 0.3 * np.sin(x[:, 0]))
    lo, hi = co.ellipticity()
    assert lo == pytest.approx(0.7) and hi == pytest.approx(1.3)
    f = oc.ScalarField.plateau(1.0, 0.5, 1.0, 0.3)
    h = 1e-6
    fd = (f(x + h) - f(x - h)) / (2 * h)
    np.testing.assert_allclose(f.grad(x)[:, 0], fd, atol=1e-8)
