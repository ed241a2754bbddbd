import numpy as np
import pytest

from nelsonvc import dressing as dr
from nelsonvc import opcore as oc

L = 2 * np.pi


@pytest.fixture(scope="module")
def same_grid_ops():
    g = oc.build_grid(1, 64, L)
    return oc.build_operators(g, g, oc.CoefficientSet.constant(1, A=0.5), sigma=0.5)


@pytest.fixture(scope="module")
def fine_ops():
    from conftest import variable_coeffs
    # the particle grid must resolve the joint frequency (-k, k) of rho(x - X)
    pg = oc.build_grid(1, 64, L)
    bg = oc.build_grid(1, 512, L)
    return oc.build_operators(pg, bg, variable_coeffs(), sigma=0.5, max_tensor_dim=2**15)


@pytest.fixture(scope="module")
def grad_ops():
    from conftest import variable_coeffs
    pg = oc.build_grid(1, 32, L)
    bg = oc.build_grid(1, 32, L)
    return oc.build_operators(pg, bg, variable_coeffs(), sigma=0.5)


def test_zero_density_zero_beta(var_ops):
    P, n = var_ops.T.shape
    rho = oc.make_density("gaussian", 1.0, L / 16, dim=1)
    f = dr.compute_beta(var_ops.T, var_ops.omega, var_ops.F_high, rho,
                        (var_ops.particle_grid, var_ops.boson_grid), rho_rows=np.zeros((P, n)))
    assert np.all(f.beta == 0)
    assert np.all(dr.grad_beta(f).grad[0] == 0)


def test_fourier_oracle(same_grid_ops, density_1d):
    ops = same_grid_ops
    for k in (1.0, 1.5):
        rk = oc.rescale(density_1d, k)
        f = dr.dressing_field(ops, rk)
        ref = dr.beta_fourier_constant(rk, ops.particle_grid, ops.boson_grid, 0.5, 1.0, ops.sigma)
        assert np.abs(f.beta - ref).max() <= 1e-8


def test_omega_variants_agree(var_ops, density_1d):
    a = dr.dressing_field(var_ops, density_1d, variant="omega_sigma")
    b = dr.dressing_field(var_ops, density_1d, variant="omega")
    assert np.abs(a.beta - b.beta).max() <= 1e-10


def test_identity_holds(var_ops, density_1d):
    f = dr.dressing_field(var_ops, density_1d)
    assert dr.verify_beta_identity(f, density_1d, var_ops.K0, var_ops.omega, var_ops.F_low) <= 1e-9


def test_identity_without_low_part(var_ops, density_1d):
    # with omega >= 1 and sigma = 0.2 the low cutoff vanishes on the spectrum
    ops = oc.build_operators(var_ops.particle_grid, var_ops.boson_grid, var_ops.coeffs, sigma=0.2)
    assert np.abs(ops.F_low.matrix).max() < 1e-14
    f = dr.dressing_field(ops, density_1d)
    lhs = ops.K0.matrix @ f.beta + f.beta @ ops.omega.matrix.T
    rhs = -f.rho @ ops.omega_inv_sqrt.matrix.T
    assert np.abs(lhs - rhs).max() <= 1e-10 * np.abs(rhs).max()


def test_identity_has_teeth(var_ops, density_1d, rng):
    f = dr.dressing_field(var_ops, density_1d)
    noisy = dr.DressingField(f.beta + 1e-3 * rng.standard_normal(f.beta.shape), f.rho, f.kappa,
                             f.sigma, f.particle_grid, f.boson_grid)
    assert dr.verify_beta_identity(noisy, None, var_ops.K0, var_ops.omega, var_ops.F_low) > 1e-4


def test_beta_real_and_high_frequency(var_ops, density_1d):
    f = dr.dressing_field(var_ops, density_1d)
    assert not np.iscomplexobj(f.beta)
    Fh = oc.matrix_function(var_ops.omega, oc.smoothstep_high(var_ops.sigma / 2)).matrix
    assert np.abs(f.beta @ Fh.T - f.beta).max() <= 1e-10


def test_grad_spectral_vs_analytic(grad_ops, density_1d):
    f = dr.dressing_field(grad_ops, density_1d, with_grad=True)
    ref = dr.grad_beta_analytic(grad_ops, density_1d, f)[0]
    assert np.linalg.norm(f.grad[0] - ref) <= 1e-6 * np.linalg.norm(ref)


def test_translation_covariance(same_grid_ops, density_1d):
    ops = same_grid_ops
    f = dr.dressing_field(ops, density_1d, with_grad=True)
    Dx = oc.gradient_matrix(ops.boson_grid, 0)
    assert np.abs(f.grad[0] + f.beta @ Dx.T).max() <= 1e-8
    # beta_X(x) = beta_0(x - X) on identical grids
    np.testing.assert_allclose(f.beta[5], np.roll(f.beta[0], 5), atol=1e-12)


def test_grad_coarse_grid_rejected(density_1d):
    g = oc.build_grid(1, 8, L)
    bg = oc.build_grid(1, 32, L)
    ops = oc.build_operators(g, bg, oc.CoefficientSet.constant(1), sigma=0.5)
    f = dr.dressing_field(ops, density_1d)
    with pytest.raises(ValueError, match="too coarse"):
        dr.grad_beta(f)


def test_kappa_uniform_bounds(fine_ops, density_1d):
    ratios, gnorms, fields = [], [], []
    for k in (1, 2, 4, 8, 16):
        f = dr.dressing_field(fine_ops, oc.rescale(density_1d, k), with_grad=True)
        fields.append(f)
        rows = dr.beta_weighted_norms(f, [0.5], fine_ops.omega, node_indices=range(0, 64, 8))
        ratios.append(max(r["ratio"] for r in rows))
        gnorms.append(dr.grad_beta_norms(f, 0.5, fine_ops.omega)[0])
    assert ratios[-1] <= 1.5 * ratios[0]
    # both sequences saturate: increments shrink at least twofold per doubling
    for seq in (ratios, gnorms):
        inc = np.diff(seq)
        assert np.all(np.abs(inc[1:]) <= 0.5 * np.abs(inc[:-1]))
    diffs = [np.max(np.linalg.norm(b.beta - a.beta, axis=1)) for a, b in zip(fields, fields[1:])]
    assert all(d2 < d1 for d1, d2 in zip(diffs, diffs[1:]))


def test_weighted_norms_alpha0(var_ops, density_1d):
    f = dr.dressing_field(var_ops, density_1d)
    rows = dr.beta_weighted_norms(f, [0.0], var_ops.omega, node_indices=[3])
    assert rows[0]["norm"] == pytest.approx(np.linalg.norm(f.beta[3]), rel=1e-12)
    with pytest.warns(RuntimeWarning, match="outside"):
        dr.beta_weighted_norms(f, [1.0], var_ops.omega, node_indices=[0])


def test_weighted_norms_massless_floor(density_1d):
    from conftest import variable_coeffs
    from dataclasses import replace
    co = replace(variable_coeffs(), m=oc.ScalarField.constant(0.0))
    pg = oc.build_grid(1, 16, L)
    bg = oc.build_grid(1, 32, L)
    ops = oc.build_operators(pg, bg, co, sigma=0.5, mass_floor=1e-6)
    f = dr.dressing_field(ops, density_1d)
    rows = dr.beta_weighted_norms(f, [0.5], ops.omega)
    assert all(np.isfinite(r["norm"]) and np.isfinite(r["ratio"]) for r in rows)
    assert dr.verify_beta_identity(f, None, ops.K0, ops.omega, ops.F_low) <= 1e-9
