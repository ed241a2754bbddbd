import numpy as np
import pytest
from scipy import integrate

from nelsonvc import counterterm as ct
from nelsonvc import dressing as dr
from nelsonvc import opcore as oc

L = 2 * np.pi


@pytest.fixture(scope="module")
def co3():
    return oc.CoefficientSet.constant(3, a=1.0, A=0.5, mass=1.0)


@pytest.fixture(scope="module")
def rho3():
    return oc.make_density("gaussian", 1.0, 1.0, dim=3)


@pytest.fixture(scope="module")
def matched_ops():
    g = oc.build_grid(1, 64, L)
    return oc.build_operators(g, g, oc.CoefficientSet.constant(1, A=0.5), sigma=0.5)


def _radial_E(kappa, q=1.0, s=1.0):
    """-1/2 (2 pi)^-3 int |xi|^2 (xi^2+1)^-1/2 K (K+1)^-2 |rho_hat|^2 4 pi d|xi|, K = xi^2/2."""
    def f(r):
        K = 0.5 * r * r
        rh2 = (2 * np.pi) ** -3 * q * q * np.exp(-(s * r / kappa) ** 2)
        return 4 * np.pi * r * r * (r * r + 1) ** -0.5 * K / (K + 1) ** 2 * rh2
    val = integrate.quad(f, 0, np.inf, epsabs=0, epsrel=1e-12, limit=500)[0]
    return -0.5 * (2 * np.pi) ** -3 * val


def test_zero_integrand(co3, rho3):
    q = ct.CountertermQuery((0.0, 0.0, 0.0), 4.0, co3, rho3)
    assert ct.E_kappa(q, rho_hat_sq=lambda xi: np.zeros(xi.shape[:-1])) == 0.0


def test_radial_oracle(co3, rho3):
    val = ct.E_kappa_value([0, 0, 0], 16.0, co3, rho3)
    assert val == pytest.approx(_radial_E(16.0), rel=1e-6)


def test_log_slope(co3, rho3):
    ks = 2.0 ** np.arange(4, 11)
    E = [ct.E_kappa_value([0, 0, 0], k, co3, rho3) for k in ks]
    slope, _ = ct.fit_log_slope(ks, E)
    target = -1.0 / (16 * np.pi**5)
    assert ct.asymptotic_slope(co3, [0, 0, 0], 1.0) == pytest.approx(target, rel=1e-12)
    assert slope == pytest.approx(target, rel=0.02)


def test_E_nonpositive_and_quadratic(co3, rho3):
    from conftest import variable_coeffs
    co = variable_coeffs(3)
    for X in ([0, 0, 0], [0.3, -1.0, 2.0]):
        e1 = ct.E_kappa_value(X, 8.0, co, rho3)
        assert e1 <= 0
        e2 = ct.E_kappa_value(X, 8.0, co, oc.make_density("gaussian", 2.0, 1.0, dim=3))
        assert e2 == pytest.approx(4 * e1, rel=1e-10)


def test_E_continuous_in_X():
    from conftest import variable_coeffs
    co = variable_coeffs(3)
    rho = oc.make_density("gaussian", 1.0, 1.0, dim=3)
    xs = np.linspace(0, 2, 9)
    E = np.array([ct.E_kappa_value([x, 0, 0], 4.0, co, rho, rule=ct.QuadratureRule(angular_order=8))
                  for x in xs])
    h = xs[1] - xs[0]
    assert np.max(np.abs(np.diff(E))) <= 2 * np.max(np.abs(E)) * h


def test_quadrature_failure_reports_estimate(co3, rho3):
    rule = ct.QuadratureRule(rel_tol=1e-12, radial_order=2, max_refine=0)
    with pytest.raises(ct.QuadratureError, match="partial estimate") as exc:
        ct.E_kappa_value([0, 0, 0], 16.0, co3, rho3, rule=rule)
    assert np.isfinite(exc.value.estimate)
    with pytest.raises(ValueError):
        ct.QuadratureRule(rel_tol=1e-2)


def test_nelson_sign_and_error():
    assert ct.nelson_E_Lambda(1.2, 1.0, 1.0) <= 0
    # massless: the shell [sigma, Lambda] is thin, so E is small
    assert ct.nelson_E_Lambda(1.0 + 1e-3, 0.0, 1.0) > -1e-2
    with pytest.raises(ValueError):
        ct.nelson_E_Lambda(0.5, 1.0, 1.0)


def test_nelson_log_increments():
    inc = [ct.nelson_E_Lambda(2 * lam, 0.0, 1.0) - ct.nelson_E_Lambda(lam, 0.0, 1.0)
           for lam in (1e2, 1e3, 1e4)]
    assert max(inc) / min(inc) - 1 <= 0.05
    # massless tail: -1/2 int 8 pi dk / k = -4 pi log 2 per doubling
    assert inc[-1] == pytest.approx(-4 * np.pi * np.log(2), rel=1e-3)


def test_nelson_mass_independent_tail():
    d = [ct.nelson_E_Lambda(lam, 0.0, 1.0) - ct.nelson_E_Lambda(lam, 1.0, 1.0)
         for lam in (1e2, 1e3, 1e4)]
    assert abs(d[2] - d[1]) < abs(d[1] - d[0]) < 1.0


def test_nelson_vs_E_slope(co3, rho3):
    lam = np.array([1e3, 4e3, 1.6e4])
    slope_n = ct.fit_log_slope(lam, [ct.nelson_E_Lambda(x, 1.0, 1.0) for x in lam])[0]
    conv = (2 * np.pi) ** -6
    assert conv * slope_n == pytest.approx(ct.asymptotic_slope(co3, [0, 0, 0], 1.0), rel=0.05)


def test_V_zero_density(matched_ops, density_1d):
    ops = matched_ops
    P, n = ops.T.shape
    f = dr.DressingField(np.zeros((P, n)), np.zeros((P, n)), 1.0, ops.sigma,
                         ops.particle_grid, ops.boson_grid)
    assert np.all(ct.V_kappa(None, 1.0, ops, dressing_field=f) == 0)


def test_V_constant_fourier(matched_ops, density_1d):
    ops = matched_ops
    for k in (1.0, 2.0):
        V = ct.V_kappa(None, k, ops, density=density_1d)
        ref = ct.V_constant_fourier(k, density_1d, ops.boson_grid, 0.5, 1.0, ops.sigma)
        assert np.abs(V - ref).max() <= 1e-8
        assert not np.iscomplexobj(V)


def test_V_split(var_ops, density_1d):
    V = ct.V_kappa(None, 1.0, var_ops, density=density_1d)
    parts = ct.split_V(None, 1.0, var_ops, density_1d)
    assert np.abs(parts["V1"] + parts["V2"] - V).max() <= 1e-10


def test_V_split_zero_density(matched_ops):
    ops = matched_ops
    P, n = ops.T.shape
    f = dr.DressingField(np.zeros((P, n)), np.zeros((P, n)), 1.0, ops.sigma,
                         ops.particle_grid, ops.boson_grid)
    rho = oc.make_density("mexican_hat", 0.0, L / 16, dim=1, amplitude=0.0)
    parts = ct.split_V([0, 3], 1.0, ops, rho, dressing_field=f)
    assert np.all(parts["V1"] == 0) and np.all(parts["V2"] == 0)


def test_V1_cauchy_d1(density_1d):
    from conftest import variable_coeffs
    pg = oc.build_grid(1, 64, L)
    bg = oc.build_grid(1, 256, L)
    ops = oc.build_operators(pg, bg, variable_coeffs(), sigma=0.5)
    V1 = np.array([ct.split_V(None, k, ops, density_1d)["V1"] for k in (1, 2, 4, 8)])
    inc = np.max(np.abs(np.diff(V1, axis=0)), axis=1)
    assert np.all(np.diff(inc) < 0)


def test_V_dressing_field_mismatch(matched_ops, var_ops, density_1d):
    f = dr.dressing_field(var_ops, density_1d)
    with pytest.raises(ValueError, match="grid mismatch"):
        ct.V_kappa(None, 1.0, matched_ops, dressing_field=f)
    with pytest.raises(ValueError, match="different kappa"):
        ct.V_kappa(None, 2.0, var_ops, dressing_field=f)


def test_V_tilde2_constant_oracle(co3, rho3):
    rule = ct.QuadratureRule(rel_tol=1e-9)
    for k in (1.0, 8.0):
        v = ct.V_tilde2([0, 0, 0], k, co3, rho3, rule=rule, gh_order=2)
        ref = ct.V_tilde2_fourier_constant(k, co3, rho3, rule=rule)
        assert v == pytest.approx(ref, rel=1e-6)


def test_V_tilde2_signed_profile(co3):
    rho = oc.make_density("mexican_hat", 0.0, 1.0, dim=3, amplitude=1.0)
    rule = ct.QuadratureRule(rel_tol=1e-9)
    vals = []
    # constant coefficients: the position integrand is quadratic, so order 2 is exact
    for k in (4.0, 16.0):
        v = ct.V_tilde2([0, 0, 0], k, co3, rho, rule=rule, gh_order=2)
        ref = ct.V_tilde2_fourier_constant(k, co3, rho, rule=rule)
        assert v == pytest.approx(ref, rel=1e-6)
        vals.append(v)
    assert np.all(np.isfinite(vals))


def test_V_tilde2_routes_agree_d1():
    from conftest import variable_coeffs
    co = variable_coeffs(1)
    rho = oc.make_density("gaussian", 1.0, 0.5, dim=1)
    g = oc.build_grid(1, 512, 32.0)
    for X in (0.0, 0.8):
        a = ct.V_tilde2([X], 2.0, co, rho, route="symbol", gh_order=12)
        b = ct.V_tilde2([X], 2.0, co, rho, route="grid", grid=g)
        assert a == pytest.approx(b, rel=1e-6)


def test_V_tilde2_quadratic_in_q(co3):
    from conftest import variable_coeffs
    co = variable_coeffs(3)
    r1 = oc.make_density("gaussian", 1.0, 1.0, dim=3)
    r2 = oc.make_density("gaussian", 2.0, 1.0, dim=3)
    rule = ct.QuadratureRule(angular_order=8, rel_tol=1e-8)
    a = ct.V_tilde2([0.2, 0, 0], 4.0, co, r1, rule=rule, gh_order=4)
    b = ct.V_tilde2([0.2, 0, 0], 4.0, co, r2, rule=rule, gh_order=4)
    assert b == pytest.approx(4 * a, rel=1e-10)


def test_limit_study_d1(density_1d):
    from conftest import variable_coeffs
    pg = oc.build_grid(1, 32, L)
    bg = oc.build_grid(1, 256, L)
    co = variable_coeffs()
    ops = oc.build_operators(pg, bg, co, sigma=0.5)
    rho = oc.make_density("gaussian", 1.0, L / 8, dim=1)
    rep = ct.renorm_limit_study([0, 8, 16, 24], [1, 2, 4, 8], "d1_operator", co, rho,
                                operators=ops)
    assert np.all(np.diff(rep.diff_increments) < 0)
    assert len(rep.rows()) == 16


def test_limit_study_symbol_constant(co3, rho3):
    # constant coefficients: the divergent parts of V~2 and E cancel exactly
    rule = ct.QuadratureRule(rel_tol=1e-9)
    rep = ct.renorm_limit_study([[0, 0, 0]], [64, 128, 256], "symbol", co3, rho3, rule=rule,
                                gh_order=2)
    assert rep.diff_increments[-1] * 10 <= rep.E_increments[-1]


def test_limit_study_rejects_short_ladder(co3, rho3):
    with pytest.raises(ValueError, match="3 rungs"):
        ct.renorm_limit_study([[0, 0, 0]], [16.0], "symbol", co3, rho3)
    with pytest.raises(ValueError, match="increasing"):
        ct.RenormReport(np.array([2.0, 1.0, 3.0]), [0], np.zeros((1, 3)), np.zeros((1, 3)), "symbol")
