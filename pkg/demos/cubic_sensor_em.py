"""
Drift-matrix estimation behind a cubic sensor
=============================================

A two-dimensional rotation ``dX = F X dt + sigma dW`` is observed through
``dY = X^3 dt + eta dB``.  Monte Carlo EM with the particle smoother
recovers ``F`` starting from the zero matrix.  With much smaller ensembles
the smoothed statistics get too noisy and the iterates can drift away.
"""

import numpy as np

from cthmm import diffusion, models
from cthmm.harness import tail_average

truth = models.cubic_matrix(sigma=0.2, eta=0.2)
path = models.euler_maruyama_simulate(truth, T=10.0, dt=0.02, seed=5)

start = truth.with_theta(np.zeros(4))
report = diffusion.fit_parameters(start, path.observations, N=128, iters=20, seed=6)

# theta is vec(F) in column-major order
F_hat = np.reshape(tail_average(report.theta_history), (2, 2), order="F")
print("true F:\n", np.reshape(truth.theta, (2, 2), order="F"))
print("estimated F (mean of the last quarter of iterates):\n", np.round(F_hat, 3))
for k in (0, 1, 5, 10, 20):
    F_k = np.reshape(report.theta_history[k], (2, 2), order="F")
    print(f"iteration {k:2d}: max |F_k - F| = {np.abs(F_k - np.reshape(truth.theta, (2, 2), order='F')).max():.3f}")
