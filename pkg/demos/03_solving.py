"""
Linear and elastoplastic solves
===============================

A uniaxial compression of a cube checked against the analytic reaction,
then a load-unload cycle past yield compared with the bilinear
stress-strain curve.
"""

import numpy as np

from vertebra_hfe.materials import MaterialField
from vertebra_hfe.mesh import box_mesh
from vertebra_hfe.solver import DirichletSet, reaction_force_axial, solve_elastic, solve_elastoplastic

m = box_mesh((10.0, 10.0, 10.0), (4, 4, 4))
c = m.coords
n = m.n_elements


def rollers(d):
    """Low faces on rollers, top face displaced by ``d`` along z."""
    bc = DirichletSet.from_nodes(np.flatnonzero(np.isclose(c[:, 0], 0)), 0.0, (0,))
    bc = bc.merge(DirichletSet.from_nodes(np.flatnonzero(np.isclose(c[:, 1], 0)), 0.0, (1,)))
    bc = bc.merge(DirichletSet.from_nodes(np.flatnonzero(np.isclose(c[:, 2], 0)), 0.0, (2,)))
    return bc.merge(DirichletSet.from_nodes(np.flatnonzero(np.isclose(c[:, 2], 10)), d, (2,)))


top = np.flatnonzero(np.isclose(c[:, 2], 10))
elastic = MaterialField.uniform(n, E=1000.0)
sol = solve_elastic(m, elastic, rollers(-0.1))
print(f"reaction on top {reaction_force_axial(sol, top):.1f} N (analytic -1000 N)")

# bilinear hardening with a post-yield tangent of 5% of E
plastic = MaterialField.uniform(n, E=1000.0, sigma_y=5.0, Ep=50.0)
state = None
for strain in (-0.003, -0.01, -0.02, -0.015):
    sol = solve_elastoplastic(m, plastic, rollers(10 * strain), n_steps=4, state=state)
    state = sol.state
    print(f"strain {strain:+.3f}: stress {reaction_force_axial(sol, top) / 100:+.3f} MPa, "
          f"max eq. plastic strain {sol.plastic_strain.max():.4f}")
