"""Time stepping for the discretised stochastic heat equation

    du = (1/2) Lap_N u dt - (DV + B)(sigma, u) dt + dW,

with per-cell white-noise increments of variance ``dt/dx`` (variance ``dt`` per
orthonormal H-mode).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .environment import EnvModel, eval_drift
from .errors import BlowUpError, ConfigurationError
from .lattice import DENSE_TRANSFORM_MAX, Grid, check_field, cosine_transform, spectral_multiplier_matrix

BLOW_UP = 1e6
SCHEMES = {"semi_implicit": 1.0, "crank_nicolson": 0.5, "exact_free": None}
NOISE_BLOCK = 256


@dataclass
class SimState:
    t: float
    u: np.ndarray
    sigma: np.ndarray


@dataclass
class Trajectory:
    """Checkpoint record of one run.

    ``mean_mode`` is ``<u, 1>_H``; ``fluct_norm_sq`` is ``||u - mean_mode||_H^2``;
    ``fields`` holds full snapshots when requested.
    """

    times: np.ndarray
    mean_mode: np.ndarray
    fluct_norm_sq: np.ndarray
    fields: np.ndarray | None = None

    @property
    def fluct_norm(self) -> np.ndarray:
        return np.sqrt(self.fluct_norm_sq)


class LinearPropagator:
    """Deterministic linear part of one step, applied in the cosine basis.

    For ``theta`` in ``(0, 1]``::

        u+ = (I - theta dt/2 Lap)^{-1} [(I + (1 - theta) dt/2 Lap) u + r]

    ``theta = 1`` is backward Euler in the Laplacian; ``theta = 1/2`` is the
    trapezoidal rule, whose stationary free-field mode variances are exact.
    """

    def __init__(self, grid: Grid, dt: float, theta: float = 1.0):
        if not dt > 0:
            raise ConfigurationError(f"dt must be positive, got {dt!r}")
        if not 0.0 < theta <= 1.0:
            raise ConfigurationError(f"theta must lie in (0, 1], got {theta!r}")
        self.grid = grid
        mu = grid.eigenvalues
        self.solve_mult = 1.0 / (1.0 + theta * dt * mu / 2.0)
        self.explicit_mult = 1.0 - (1.0 - theta) * dt * mu / 2.0
        self.dense = grid.n_cells <= DENSE_TRANSFORM_MAX
        self.has_explicit = theta != 1.0
        if self.dense:
            self.solve_mat = spectral_multiplier_matrix(grid, self.solve_mult)
            self.step_mat = spectral_multiplier_matrix(grid, self.solve_mult * self.explicit_mult)

    def __call__(self, u: np.ndarray, r: np.ndarray) -> np.ndarray:
        if self.dense:
            if self.has_explicit:
                return u @ self.step_mat + r @ self.solve_mat
            return (u + r) @ self.solve_mat
        a = cosine_transform(self.grid, u)
        b = cosine_transform(self.grid, r)
        return cosine_transform(self.grid, a * self.solve_mult * self.explicit_mult + b * self.solve_mult, "inverse")


def _check_finite(u, drift=None, step=None):
    if drift is not None and not np.all(np.isfinite(drift)):
        raise BlowUpError(f"non-finite drift at step {step}", step=step)
    if not np.all(np.isfinite(u)) or np.max(np.abs(u), initial=0.0) > BLOW_UP:
        raise BlowUpError(f"solution left |u| <= {BLOW_UP:g} at step {step}", step=step)


def step_semi_implicit(
    grid: Grid,
    model: EnvModel,
    state: SimState,
    dt: float,
    rng: np.random.Generator | None,
    theta: float = 1.0,
    propagator: LinearPropagator | None = None,
) -> SimState:
    """One step: drift explicit at ``u``, Laplacian implicit (``theta``-weighted).

    ``rng=None`` suppresses the noise.
    """
    u = check_field(grid, state.u)
    prop = propagator or LinearPropagator(grid, dt, theta)
    drift = eval_drift(model, state.sigma, u)
    if not np.all(np.isfinite(drift)):
        raise BlowUpError(f"non-finite drift at t={state.t:g}, sigma={state.sigma}")
    r = -dt * drift
    if rng is not None:
        r = r + np.sqrt(dt / grid.dx) * rng.standard_normal(u.shape)
    return SimState(state.t + dt, prop(u, r), state.sigma)


def step_exact_free(grid: Grid, state: SimState, dt: float, rng: np.random.Generator | None) -> SimState:
    """Exact transition of the free field (``V = B = 0``), mode by mode.

    Mode 0 is a Brownian motion; mode ``k >= 1`` is an Ornstein-Uhlenbeck
    process with rate ``mu_k / 2`` and unit noise intensity.
    """
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt!r}")
    u = check_field(grid, state.u)
    a = cosine_transform(grid, u)
    decay, sd = _exact_coefficients(grid, dt)
    a = a * decay
    if rng is not None:
        a = a + sd * rng.standard_normal(u.shape)
    return SimState(state.t + dt, cosine_transform(grid, a, "inverse"), state.sigma)


def _exact_coefficients(grid: Grid, dt: float):
    mu = grid.eigenvalues
    decay = np.exp(-mu * dt / 2.0)
    var = np.empty_like(mu)
    var[0] = dt
    var[1:] = -np.expm1(-mu[1:] * dt) / mu[1:]
    return decay, np.sqrt(var)


def checkpoint_steps(times: Sequence[float], dt: float, tol: float = 1e-9) -> np.ndarray:
    """Step indices of the checkpoint times, which must be increasing multiples of ``dt``."""
    times = np.asarray(times, dtype=float)
    steps = np.rint(times / dt).astype(np.int64)
    if np.any(times < 0) or np.any(np.abs(steps * dt - times) > tol * np.maximum(1.0, times)):
        raise ConfigurationError("checkpoints must be non-negative multiples of dt")
    if np.any(np.diff(steps) <= 0):
        raise ConfigurationError("checkpoints must be strictly increasing")
    return steps


def integrate_batch(
    grid: Grid,
    model: EnvModel,
    sigma: np.ndarray,
    u0: np.ndarray,
    dt: float,
    checkpoints: Sequence[float],
    rngs: Sequence[np.random.Generator] | None,
    scheme: str = "crank_nicolson",
    probe: np.ndarray | None = None,
    keep_fields: bool = False,
):
    """Integrate a batch of independent trajectories.

    Row ``r`` of ``u0``/``sigma`` draws its noise from ``rngs[r]`` alone, in
    blocks of ``NOISE_BLOCK`` steps, so a row's noise does not depend on the
    rest of the batch.  Returns a dict with ``mean`` and ``fluct_sq`` of shape
    ``(B, K)``, ``probe`` of shape ``(B, K, P)`` (cell values minus the mean
    mode) and optionally ``fields`` ``(B, K, n)``.
    """
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}; choose from {sorted(SCHEMES)}")
    if scheme == "exact_free" and (model.kind != "zero" or model.has_drift):
        raise ConfigurationError("the exact integrator applies to the free field only")
    u = np.array(check_field(grid, u0), dtype=float, ndmin=2)
    nb, n = u.shape
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float).reshape(-1, model.d), (nb, model.d)).copy()
    if rngs is not None and len(rngs) != nb:
        raise ConfigurationError("one random stream per trajectory is required")
    steps = checkpoint_steps(checkpoints, dt)
    probe = np.zeros(0, dtype=int) if probe is None else np.asarray(probe, dtype=int)

    k = len(steps)
    out = {
        "mean": np.empty((nb, k)),
        "fluct_sq": np.empty((nb, k)),
        "probe": np.empty((nb, k, probe.size)),
    }
    if keep_fields:
        out["fields"] = np.empty((nb, k, n))

    if scheme == "exact_free":
        decay, sd = _exact_coefficients(grid, dt)
        noise_scale = sd
        coeffs = cosine_transform(grid, u)
    else:
        prop = LinearPropagator(grid, dt, SCHEMES[scheme])
        noise_scale = np.sqrt(dt / grid.dx)
    free = model.kind == "zero" and not model.has_drift

    def record(j, field):
        mean = field.mean(axis=-1)
        out["mean"][:, j] = mean
        out["fluct_sq"][:, j] = grid.dx * np.sum((field - mean[:, None]) ** 2, axis=-1)
        out["probe"][:, j, :] = field[:, probe] - mean[:, None]
        if keep_fields:
            out["fields"][:, j, :] = field

    step = 0
    j = 0
    noise = None
    block_pos = NOISE_BLOCK
    total = int(steps[-1])
    while True:
        while j < k and steps[j] == step:
            field = cosine_transform(grid, coeffs, "inverse") if scheme == "exact_free" else u
            _check_finite(field, step=step)
            record(j, field)
            j += 1
        if step == total:
            break
        if rngs is not None and block_pos == NOISE_BLOCK:
            # a short final block is a prefix of the full one, so streams are unchanged
            m = min(NOISE_BLOCK, total - step)
            noise = np.stack([g.standard_normal((m, n)) for g in rngs], axis=1)
            noise *= noise_scale
            block_pos = 0
            if scheme != "exact_free":
                _check_finite(u, step=step)
        if scheme == "exact_free":
            coeffs = coeffs * decay
            if noise is not None:
                coeffs = coeffs + noise[block_pos]
        else:
            if free:
                r = noise[block_pos] if noise is not None else np.zeros_like(u)
            else:
                r = -dt * eval_drift(model, sigma, u)
                if noise is not None:
                    r += noise[block_pos]
            u = prop(u, r)
        block_pos += 1
        step += 1
    return out


def simulate_trajectory(
    grid: Grid,
    model: EnvModel,
    sigma,
    v0,
    T: float,
    dt: float,
    checkpoints: Sequence[float],
    rng: np.random.Generator | None,
    scheme: str = "crank_nicolson",
    keep_fields: bool = False,
) -> Trajectory:
    """Run one trajectory from ``v0`` and record statistics at ``checkpoints`` (all ``<= T``)."""
    checkpoints = np.asarray(checkpoints, dtype=float)
    if checkpoints.size == 0 or checkpoints[-1] > T + 1e-12:
        raise ConfigurationError("checkpoints must be non-empty and not exceed T")
    try:
        res = integrate_batch(
            grid, model, np.atleast_1d(sigma), v0, dt, checkpoints,
            None if rng is None else [rng], scheme, keep_fields=keep_fields,
        )
    except BlowUpError as exc:
        raise BlowUpError(f"{exc} (sigma={np.atleast_1d(sigma).tolist()})", step=exc.step) from exc
    return Trajectory(
        checkpoints,
        res["mean"][0],
        res["fluct_sq"][0],
        res["fields"][0] if keep_fields else None,
    )


def environment_view(state: SimState, frequencies=(1.0,)):
    """Standard expression of the environment seen from ``u``.

    Returns the shape ``u - u_0`` (first-cell value as the anchor) and the base
    phase ``frac(sigma + lambda u_0)``.
    """
    u = np.asarray(state.u, dtype=float)
    u0 = u[..., :1]
    base = np.mod(np.asarray(state.sigma, dtype=float) + np.asarray(frequencies) * u0, 1.0)
    return u - u0, base
