# Capacity gate: how much signal survives the noise?
#
# Mixing a signal with Gaussian noise as eta = sqrt(1 - lam) xi + sqrt(lam) sigma nu
# leaves a downstream layer with an imperfect view of xi. The best it can do is
# the Wiener estimate, and the normalized error of that estimate is exactly lam.
#
# The per-unit gate flips the roles: there lam is the signal fraction,
# y = sqrt(lam) x + sqrt(1 - lam) sigma nu, so lam = 1 is a fully open unit.
# Run: python3 demos/01_gate_noise_and_mmse.py

import numpy as np

from dyncap import GateState, Tensor, gate_per_unit, mc_normalized_error
from dyncap.rng import RngStream

# Monte Carlo check of the error law.
print("noise lam  measured error")
for lam in (0.1, 0.3, 0.5, 0.7, 0.9):
    print(f"{lam:9.1f}  {mc_normalized_error(lam, 200_000, seed=1):14.4f}")

# A per-unit gate on three units. Training adds noise; evaluation only scales.
gate = GateState(3)
gate.set_lambdas([0.9, 0.5, 0.0])
gate.sigma_ema = np.ones(3)
x = RngStream(0).normal((20_000, 3))
noisy = gate_per_unit(Tensor(x), gate, RngStream(1).normal((20_000, 3)), training=True).data
clean = gate_per_unit(Tensor(x), gate).data

print()
print("per-unit output variance in training mode:", noisy.var(axis=0).round(3))
print("eval-mode scaling sqrt(lambda):          ", (clean / x)[0].round(4))

# The third unit carries nothing but noise, so it can be removed outright.
