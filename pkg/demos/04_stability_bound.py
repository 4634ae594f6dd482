"""
Checking the stability bound on small problems
==============================================

For exactly sparse innovations, known theta, and measurement matrices with
a small restricted isometry constant, the time-averaged error is bounded by
a multiple of the noise level. We draw p = 40 coordinates over T = 10 steps
with two events per step and certify the matrices before use.
"""

# %%
import numpy as np

from dyncs.harness import bound_trial, certified_ensemble
from dyncs.sensing import rip_constant, rip_upper_bound

# %%
# Exact enumeration of delta_8 for p = 40 needs C(40, 8) ~ 7.7e7 subsets,
# so the ensembles are certified with the Gershgorin bound instead. That
# needs tall matrices: with 8000 rows the bound is comfortably below 1/3.
ens = certified_ensemble(40, [8000] * 10, order=8, delta=1 / 3, seed=0)
print("Gershgorin bound on delta_8:", round(rip_upper_bound(ens.A_tilde(0), 8), 3))

# For a small case both methods can be compared directly.
A = np.random.default_rng(1).standard_normal((400, 12)) / np.sqrt(400)
print("delta_3 exact:", round(rip_constant(A, 3), 4), "bound:", round(rip_upper_bound(A, 3), 4))

# %%
rows = []
for seed in range(20):
    r = bound_trial(40, 10, 2, [8000] * 10, 0.95, 1e-4, seed=seed)
    rows.append((r["l2_error"], r["bound"]))
err, bound = np.array(rows).T
print(f"bound held in {(err <= bound).sum()}/20 trials")
print(f"error range [{err.min():.3g}, {err.max():.3g}], bound range "
      f"[{bound.min():.3g}, {bound.max():.3g}]")

# %%
# The bound is loose by three orders of magnitude, as worst-case bounds
# usually are; the check is that it is never violated.
