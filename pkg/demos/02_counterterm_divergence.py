"""The counterterm grows like log kappa; the dressed potential cancels it.

In three dimensions with a = 1, A = 1/2 and a Gaussian density, the slope of
E^kappa against log kappa approaches -q^2 / (16 pi^5).  The leading part of
the dressed potential carries the same divergence, so their difference
settles down.
"""

import numpy as np

from nelsonvc import counterterm as ct
from nelsonvc import opcore as oc

co = oc.CoefficientSet.constant(3, a=1.0, A=0.5, mass=1.0)
rho = oc.make_density("gaussian", 1.0, 1.0, dim=3)
X = [0.0, 0.0, 0.0]

ks = 2.0 ** np.arange(4, 11)
E = [ct.E_kappa_value(X, k, co, rho) for k in ks]
slope, _ = ct.fit_log_slope(ks, E)
ref = ct.asymptotic_slope(co, X, 1.0)
print(f"fitted slope {slope:.6e}, asymptote {ref:.6e}, rel. error {abs(slope / ref - 1):.2%}")

# Nelson's sharp-cutoff energy: constant increments per doubling of Lambda
for lam in (1e2, 1e3, 1e4):
    inc = ct.nelson_E_Lambda(2 * lam, 0.0, 1.0) - ct.nelson_E_Lambda(lam, 0.0, 1.0)
    print(f"Lambda = {lam:8.0f}: E_2L - E_L = {inc:.6f}  (massless tail -4 pi log 2 = "
          f"{-4 * np.pi * np.log(2):.6f})")

# V~2 - E stops moving while E keeps growing
rule = ct.QuadratureRule(rel_tol=1e-9)
rep = ct.renorm_limit_study([X], [64, 128, 256], "symbol", co, rho, rule=rule, gh_order=2)
print("\nE increments      ", np.array2string(rep.E_increments, precision=3))
print("V - E increments  ", np.array2string(rep.diff_increments, precision=3))
