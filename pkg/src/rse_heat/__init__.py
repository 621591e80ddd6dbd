"""Simulation and effective-diffusivity estimation for a stochastic heat
equation with a random stationary drift on the unit interval."""

from .lattice import Grid, inner_h, neumann_laplacian_apply, cosine_transform, sample_wiener_shape
from .environment import (
    DivFreeSpec,
    EnvModel,
    Mode,
    cosine_model,
    periodic_model,
    quasiperiodic_model,
    two_mode_model,
    with_imposter,
    zero_model,
)
from .ensemble import EnsembleConfig, EnsembleStats, run_ensemble
from .diffusivity import estimate_a2_slope, lower_bound_C, sample_pi, variational_bound

__version__ = "0.1.0"
