"""Periodic potential: the slope sits between C and 1."""
import numpy as np

from rse_heat import (EnsembleConfig, Grid, cosine_model, estimate_a2_slope, lower_bound_C, run_ensemble,
                      sample_pi, variational_bound)

g = Grid(1)  # one cell: the answer is known in closed form
model = cosine_model(g, 0.5)
rng = np.random.default_rng(1)
pi = sample_pi(model, 50_000, rng)

C, C_se = lower_bound_C(model, pi)
ub = variational_bound(model, 4, pi)
print(f"C = {C:.4f} +- {C_se:.4f}, variational bound = {ub.bound:.4f}")

cfg = EnsembleConfig(n_env=40, n_noise=40, n_cells=1, dt=1e-3, checkpoints=np.arange(0.0, 20.01, 1.0), master_seed=3)
est = estimate_a2_slope(run_ensemble(cfg, model, workers=2))
print(f"a2_hat = {est.a2_hat:.4f} +- {est.se:.4f}")

from scipy.special import i0
print(f"closed form = {1 / i0(1.0) ** 2:.4f}")
