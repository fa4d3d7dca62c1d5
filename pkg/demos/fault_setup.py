"""The synthetic fault problem: geometry, kernel, regularizer and noisy data.

Run with ``python demos/fault_setup.py``. Writes geometry.csv to the current directory.
"""
import numpy as np

from sepinv.faultsim import (TRUE_M, NoiseScenario, build_regularizer_gram, fault_prior,
                             fault_problem, geometry_csv, geometry_from_m)

# six numbers fix two planar pieces meeting along the edge P2 P3
geom = geometry_from_m(TRUE_M)
np.set_printoptions(precision=3, suppress=True)
print("control points (km):\n", geom.control_points)
print("cos of the dihedral angle:", round(geom.cos_dihedral, 4))
print("inside the prior:", fault_prior().contains(np.append(TRUE_M, -2.0)))

# regularizer R'R = D'D + E'E, finite differences along both lattice axes
gram = build_regularizer_gram(5)
print("R'R on a 5 x 5 lattice, first row:", gram.dense()[0, :7])

# noisy data for both noise levels; same slip, same stations
for scenario in (NoiseScenario.low(), NoiseScenario.high()):
    setup = fault_problem(scenario)
    u = setup.problem.data_u
    print(f"{scenario.label:>4} noise: n = {u.size}, p = {setup.problem.p}, "
          f"realized relative error {setup.relative_error:.3f}, max |u| {np.abs(u).max():.3e}")

# the slip patch and the three displacement components at the first stations
setup = fault_problem()
print("slip max", setup.slip_true.values.max(), "on", np.count_nonzero(setup.slip_true.values),
      "of", setup.slip_true.values.size, "fine-lattice nodes")
print("first stations (x1, x2):\n", setup.stations[:4, :2])
print("their displacements:\n", setup.u_free[:12].reshape(4, 3))

geometry_csv("geometry.csv", geom, grid_m=41)
print("wrote geometry.csv")
