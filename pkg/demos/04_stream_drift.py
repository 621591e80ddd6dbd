"""A divergence-free drift and the check that catches a fake one."""
import numpy as np

from rse_heat.environment import (DivFreeSpec, cosine_model, exponential_battery, verify_divergence_free,
                                  with_imposter)
from rse_heat.lattice import Grid

g = Grid(16)
rng = np.random.default_rng(4)
tests = exponential_battery(g, 5, rng)

stream = cosine_model(g, 0.5, DivFreeSpec(amplitude=0.2))
for d in verify_divergence_free(stream, [0.0], tests, 50_000, rng):
    print(f"stream   {d.estimate:+.2e} +- {d.se:.1e}")

# B = DV is not divergence-free with respect to the Gibbs weight
fake = with_imposter(cosine_model(g, 0.5))
for d in verify_divergence_free(fake, [0.0], tests, 50_000, rng):
    print(f"imposter {d.estimate:+.2e} +- {d.se:.1e}  z = {d.estimate / d.se:.1f}")
