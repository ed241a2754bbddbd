"""Truncated Fock space: a solvable oracle and the dressing transformation.

Without the particle kinetic term the model is solvable: the ground energy
is -1/2 <rho, omega^-2 rho>.  We watch exact diagonalization converge to it,
then conjugate a coupled Hamiltonian with the dressing unitary and compare
with the algebraically dressed one.
"""

import warnings

import numpy as np

from nelsonvc import dressing as dr
from nelsonvc import fock as fk
from nelsonvc import opcore as oc

L = 2 * np.pi
g = oc.build_grid(1, 8, L)
ops = oc.build_operators(g, g, oc.CoefficientSet.constant(1, A=0.5), sigma=0.5)
rho = oc.make_density("gaussian", 1.0, L / 4, dim=1)
r = oc.sample_rows(rho, g, g)[0]
exact = -0.5 * r @ np.linalg.solve(ops.h.matrix, r)
modes, w = fk.lowest_modes(ops, 8)
coupling = ops.omega_inv_sqrt.matrix @ r
print(f"exact ground energy {exact:.12f}")
for n in (2, 4, 6, 8):
    fock = fk.build_fock(modes, n, w)
    gm, _ = fk.project(fock, coupling)
    E0, _ = fk.ground_state(fk.dgamma_energies(fock) + fk.field_ops(fock, gm).phi)
    print(f"n_max = {n}: E0 = {E0:.12f}, rel. error {abs(E0 / exact - 1):.1e}")

# dressing on a coupled system: algebraic vs conjugated ground energy
pg, bg = oc.build_grid(1, 16, L), oc.build_grid(1, 32, L)
coeffs = oc.CoefficientSet.constant(1, A=0.5)
ops = oc.build_operators(pg, bg, coeffs, sigma=0.5)
rho = oc.make_density("gaussian", 1.0, L / 16, dim=1)
field = dr.dressing_field(ops, rho)
print("\nn_max  E_algebraic      E_conjugated     Weyl residual")
with warnings.catch_warnings():
    warnings.simplefilter("ignore", RuntimeWarning)  # mode leakage is expected here
    for n in (4, 6, 8):
        system = fk.build_system(ops, 2, n)
        pd = fk.project_dressing(system, field)
        Ea, _ = fk.ground_state(fk.assemble_dressed(system, pd, 1.0))
        H = fk.assemble_H(system, rho, 1.0)
        Ec, _ = fk.ground_state(fk.conjugate(fk.dressing_unitary(system, pd), H))
        wr = max(fk.verify_weyl_shift(system.fock, pd.g[i], pd.beta[i]).abs_residual
                 for i in range(system.particle_dim))
        print(f"{n:5d}  {Ea:.10f}  {Ec:.10f}  {wr:.2e}")
