"""
Particle smoother against the exact Gaussian smoother
=====================================================

For linear dynamics the smoothing distribution is Gaussian and available
in closed form.  Here the particle smoother is run at increasing ensemble
sizes and its posterior mean is compared with the exact one.
"""

import numpy as np

from cthmm import diffusion, models
from cthmm.linear_gaussian import LinearModel, discrete_rts_smoother, kalman_smoother

F = np.array([[-0.5, 1.0], [-1.0, -0.3]])
model = models.linear(F, np.eye(2), sigma=0.5, eta=0.2, mu0=[1.0, 0.0])
path = models.euler_maruyama_simulate(model, T=1.0, dt=0.01, seed=3)
obs = path.observations

# exact smoother of the Euler-discretised model the particles target
exact_model = LinearModel(F, np.eye(2), 0.5, 0.2, [1.0, 0.0], np.zeros((2, 2)))
exact, _ = discrete_rts_smoother(exact_model, obs)

# the continuous-time smoother differs from it by O(dt)
cont = kalman_smoother(LinearModel(F, np.eye(2), 0.5, 0.2, [1.0, 0.0], 1e-9 * np.eye(2)), obs)
print(f"continuous vs discrete smoother mean: {np.abs(cont.mu_rho - exact).max():.2e}")

for N in (32, 128, 512):
    ens = diffusion.run_smoother(model, obs, N, seed=4)
    _, smoothed = diffusion.state_estimates(ens)
    rmse = np.sqrt(np.mean((smoothed - exact) ** 2))
    print(f"N = {N:4d}: RMSE of particle smoother mean {rmse:.4f}")
