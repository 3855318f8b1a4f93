"""Simulate the two-state scenario, select (K, lambda0) by ICL and compare with the truth.

Run with ``python demos/simulation_study.py [seed]``. One replica takes about
a minute and a half on a single core.
"""
import sys

import numpy as np

from hsmmvar import em, scenarios
from hsmmvar.hidden import map_labels
from hsmmvar.simboot import SimConfig, accuracy, adjusted_rand, align_labels, simulate

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
truth = scenarios.simulation(2)
T = scenarios.SIMULATION_T
x, z = scenarios.simulation_covariates(T, seed)
data, states, dwell = simulate(SimConfig(truth, T, seed, x, z))
print(f"simulated T = {T}; share of time in state 1: {np.mean(states == 0):.3f}")

grid = em.lambda_grid()
gs = em.grid_select(data, [2, 3, 4], grid, seeds=[0], H=4, m=28)
tab = gs.icl_table()
print("\nICL by K (rows) and lambda0 (columns, every fourth shown):")
print("lambda0 " + " ".join(f"{g:9.2g}" for g in grid[::4]))
for K, row in zip(gs.K_list, tab):
    print(f"K = {K}   " + " ".join(f"{v:9.1f}" for v in row[::4]))

fit = gs.selected
print(f"\nselected K = {fit.params.K}, lambda0 = {fit.lambda0:.4g}, converged = {fit.converged}")
labels = map_labels(fit.posteriors)
print(f"ARI = {adjusted_rand(states, labels):.4f}, accuracy = {accuracy(states, labels):.4f}")

if fit.params.K == 2:
    est = em.permute_states(fit.params, align_labels(states, labels, 2, 2))
    print("\nhazard coefficients (intercept, dwell, covariate):")
    for k in range(2):
        t = (truth.hazard.beta0[k], truth.hazard.beta1[k], truth.hazard.beta2[k, 0])
        e = (est.hazard.beta0[k], est.hazard.beta1[k], est.hazard.beta2[k, 0])
        print(f"  state {k + 1}: true {np.round(t, 2)}  estimated {np.round(e, 2)}")
    nz_true = truth.var.A != 0
    nz_est = est.var.A != 0
    print(f"\nAR coefficients: {nz_est[nz_true].mean():.0%} of true nonzeros kept, "
          f"{nz_est[~nz_true].mean():.0%} of true zeros selected")
