"""Single-patient baseline: projected gradient descent on the relative misfit.

Fits the two membrane diffusion fractions to the example patient's measured
outlet concentrations, starting from (0.2, 0.2), and prints the descent trace.
"""

import numpy as np

from fiberdialysis import identify_single
from fiberdialysis.config import load_patient_csv, load_profile, packaged_data_path
from fiberdialysis.inverse import context_from_profile

profile = load_profile()
ctx = context_from_profile(profile, jobs=1, mesh_res=(40, 6, 4, 5))

patient = load_patient_csv(packaged_data_path("patient1.csv"), profile.base_hydraulics())
patient.calibrated = True  # shipped pressures act as the frozen calibration

result = identify_single(patient, np.array([0.2, 0.2]), ctx,
                         initial_step=0.25, tol=1e-4, n_max=60)

print("descent trace (d_Ca, d_Ci, J):")
for k, (point, value) in enumerate(result.trace):
    print(f"  {k:3d}  {point[0]:.4f}  {point[1]:.4f}  {value:10.4f}")

j0 = result.trace[0][1]
print(f"\nbest beta = {np.round(result.best_point, 4)}")
print(f"misfit reduced {j0:.2f} -> {result.best_value:.4f} "
      f"({j0 / result.best_value:.0f}x, {result.n_evals} forward evaluations)")
ctx.close()
