"""Estimators and bounds for the effective variance ``a^2`` of the mean mode."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .environment import EnvModel, ExpTestFunction, eval_V, exponential_battery, sample_env, verify_divergence_free
from .errors import ConfigurationError, DivergenceCheckError, IllConditionedWarning
from .lattice import Grid, inner_h, sample_wiener_shape, wiener_covariance


@dataclass
class SlopeEstimate:
    a2_hat: float
    se: float
    intercept: float
    times: np.ndarray
    n_boot: int


def _wls_slope(t, y, w, intercept=True):
    if intercept:
        X = np.column_stack([t, np.ones_like(t)])
    else:
        X = t[:, None]
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    return coef[0], (coef[1] if intercept else 0.0)


def estimate_a2_slope(
    stats,
    burn_in_fraction: float = 0.2,
    n_boot: int = 200,
    rng: np.random.Generator | None = None,
    intercept: bool = True,
) -> SlopeEstimate:
    """Slope of the pooled second moment ``E[mean_mode(t)^2]`` against ``t``.

    Weighted least squares over checkpoints with ``t >= burn_in_fraction * T``;
    weights are inverse squared cluster standard errors.  The standard error
    comes from resampling environments with replacement (``n_boot`` times),
    which keeps the within-environment correlation.
    """
    times = np.asarray(stats.times, dtype=float)
    keep = np.flatnonzero((times > 0) & (times >= burn_in_fraction * times[-1] - 1e-12))
    if keep.size < 3:
        raise ConfigurationError("slope estimation needs at least 3 checkpoints after burn-in")
    t = times[keep]
    env_m2 = np.mean(stats.mean_mode[:, :, keep] ** 2, axis=1)  # (E, K)

    def fit(m2_env):
        y = m2_env.mean(axis=0)
        se = m2_env.std(axis=0, ddof=1) / np.sqrt(m2_env.shape[0])
        w = 1.0 / np.maximum(se, 1e-12 * np.maximum(np.abs(y), 1e-300)) ** 2
        return _wls_slope(t, y, w, intercept)

    slope, icpt = fit(env_m2)
    rng = np.random.default_rng(0) if rng is None else rng
    n_env = env_m2.shape[0]
    boots = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n_env, n_env)
        boots[b] = fit(env_m2[idx])[0]
    return SlopeEstimate(float(slope), float(np.std(boots, ddof=1)), float(icpt), t, n_boot)


@dataclass
class PiSamples:
    """Importance samples for the invariant measure: shapes, base phases and weights ``exp(-2V)``."""

    v: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.weights.size

    @property
    def Z_hat(self) -> float:
        return float(self.weights.mean())

    @property
    def Z_se(self) -> float:
        return float(self.weights.std(ddof=1) / np.sqrt(self.n))

    @property
    def normalized(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    def expect(self, values) -> float:
        """Self-normalised estimate of ``E_pi[values]``."""
        return float(np.sum(self.normalized * np.asarray(values)))


def sample_pi(model: EnvModel, n: int, rng: np.random.Generator, chunk: int = 50_000) -> PiSamples:
    """Draw ``sigma ~ Q`` and ``v ~ mu_0`` independently, weight by ``exp(-2V(sigma, v))``."""
    if n < 100:
        raise ConfigurationError("sample_pi needs at least 100 samples")
    sig = sample_env(model, rng, n)
    v = sample_wiener_shape(model.grid, rng, n)
    w = np.empty(n)
    for s in range(0, n, chunk):
        w[s : s + chunk] = np.exp(-2.0 * np.asarray(eval_V(model, sig[s : s + chunk], v[s : s + chunk])))
    return PiSamples(v, sig, w)


def lower_bound_C(model: EnvModel, pi: PiSamples) -> tuple[float, float]:
    """``C = exp(-2 sup|V|) / Z`` with ``sup|V|`` from the potential envelope; returns ``(C, se)``."""
    c = float(np.exp(-2.0 * model.sup_V) / pi.Z_hat)
    return c, c * pi.Z_se / pi.Z_hat


@dataclass(frozen=True)
class TrialFamily:
    """Shift-invariant trial functions built from local values ``lambda_c v_i + sigma_c``.

    ``f_theta = dx sum_i sum_c sum_{m <= M} [theta cos(2 pi m y) + theta' sin(2 pi m y)]``,
    coefficients ordered ``(cos, sin)`` per ``m``, then per phase coordinate.
    """

    n_modes: int

    def dimension(self, model: EnvModel) -> int:
        return 2 * self.n_modes * model.d

    def gradients(self, model: EnvModel, v, sigma) -> np.ndarray:
        """H-gradients of the basis functions, shape ``(..., dim, n)``."""
        v = np.asarray(v, dtype=float)
        sigma = np.asarray(sigma, dtype=float).reshape(v.shape[:-1] + (model.d,))
        cols = []
        for c, lam in enumerate(model.potential.frequencies):
            y = lam * v + sigma[..., c : c + 1]
            for m in range(1, self.n_modes + 1):
                k = 2 * np.pi * m
                cols.append(-lam * k * np.sin(k * y))
                cols.append(lam * k * np.cos(k * y))
        if not cols:
            return np.zeros(v.shape[:-1] + (0, v.shape[-1]))
        return np.stack(cols, axis=-2)


@dataclass
class VariationalResult:
    bound: float
    theta: np.ndarray
    condition: float
    n_modes: int


def variational_bound(
    model: EnvModel,
    trial: TrialFamily | int,
    pi: PiSamples,
    max_condition: float = 1e12,
    chunk: int = 20_000,
) -> VariationalResult:
    """Minimise ``E_pi ||D f_theta + 1||_H^2`` over the trial family.

    The objective is ``theta' A theta + 2 b' theta + 1``; the minimiser solves
    ``A theta = -b`` (minimum-norm solution).  With ``B = 0`` the minimum is an
    upper bound for ``a^2``.
    """
    if model.has_drift:
        raise ConfigurationError("the variational principle holds only for B = 0")
    trial = TrialFamily(trial) if isinstance(trial, int) else trial
    dim = trial.dimension(model)
    if dim == 0:
        return VariationalResult(1.0, np.zeros(0), 1.0, trial.n_modes)
    grid = model.grid
    wn = pi.normalized
    A = np.zeros((dim, dim))
    b = np.zeros(dim)
    for s in range(0, pi.n, chunk):
        G = trial.gradients(model, pi.v[s : s + chunk], pi.sigma[s : s + chunk])  # (N, dim, n)
        w = wn[s : s + chunk]
        A += grid.dx * np.einsum("s,sji,ski->jk", w, G, G, optimize=True)
        b += grid.dx * np.einsum("s,sji->j", w, G)
    A = 0.5 * (A + A.T)
    evals, evecs = np.linalg.eigh(A)
    top = max(evals[-1], 0.0)
    cond = float(top / evals[0]) if evals[0] > 0 else float("inf")
    cutoff = top * 1e-15
    if cond > max_condition:
        warnings.warn(
            f"Gram matrix condition number {cond:.3g} exceeds {max_condition:.0e}; truncating its spectrum",
            IllConditionedWarning,
            stacklevel=2,
        )
        cutoff = top / max_condition
    keep = evals > cutoff
    theta = -(evecs[:, keep] @ ((evecs[:, keep].T @ b) / evals[keep]))
    value = float(theta @ A @ theta + 2 * b @ theta + 1.0)
    return VariationalResult(max(value, 0.0), theta, cond, trial.n_modes)


@dataclass
class DiffusivityReport:
    a2_hat: float
    se: float
    lower_C: float
    lower_C_se: float
    upper: float = 1.0
    variational_bound: float | None = None
    method: dict = field(default_factory=dict)

    def sandwich_ok(self, n_se: float = 3.0) -> bool:
        return self.lower_C - n_se * np.hypot(self.se, self.lower_C_se) <= self.a2_hat <= self.upper + n_se * self.se

    def to_json(self, **extra) -> str:
        return json.dumps({**asdict(self), **extra}, indent=2, sort_keys=True)


@dataclass
class EnhancementResult:
    a2_gradient: SlopeEstimate
    a2_full: SlopeEstimate
    margin: float
    combined_se: float
    divergence: list

    def passes(self, n_se: float = 3.0) -> bool:
        return self.margin >= -n_se * self.combined_se


def enhancement_check(
    model_V: EnvModel,
    model_VB: EnvModel,
    config,
    workers: int | None = None,
    n_div_samples: int = 100_000,
    n_test_functions: int = 10,
    rng: np.random.Generator | None = None,
    stats_V=None,
) -> EnhancementResult:
    """Compare ``a^2`` with and without the divergence-free drift.

    Both ensembles use the same master seed.  ``stats_V`` may carry an existing
    run of ``model_V`` under ``config``.
    """
    from .ensemble import run_ensemble

    if model_V.potential != model_VB.potential or model_V.kind != model_VB.kind:
        raise ConfigurationError("the two models must share the potential")
    if model_V.has_drift:
        raise ConfigurationError("model_V must have B = 0")
    rng = np.random.default_rng(config.master_seed) if rng is None else rng
    battery = exponential_battery(model_VB.grid, n_test_functions, rng)
    sigma = sample_env(model_VB, rng)
    div = verify_divergence_free(model_VB, sigma, battery, n_div_samples, rng)
    bad = [i for i, d in enumerate(div) if not d.passes()]
    if bad:
        detail = ", ".join(f"#{i}: {div[i].estimate:.3g} +- {div[i].se:.3g}" for i in bad)
        raise DivergenceCheckError(f"drift of model_VB is not divergence-free ({detail})")
    sv = stats_V if stats_V is not None else run_ensemble(config, model_V, workers)
    svb = run_ensemble(config, model_VB, workers)
    e_v = estimate_a2_slope(sv)
    e_vb = estimate_a2_slope(svb)
    return EnhancementResult(e_v, e_vb, e_vb.a2_hat - e_v.a2_hat, float(np.hypot(e_v.se, e_vb.se)), div)


# -- Poincare inequality -------------------------------------------------------


@dataclass(frozen=True)
class CylinderFunction:
    """``f(v) = g(<v, h_1>_H, ..., <v, h_k>_H)`` with ``grad_g`` its gradient."""

    name: str
    directions: np.ndarray  # (k, n)
    g: Callable[[np.ndarray], np.ndarray]
    grad_g: Callable[[np.ndarray], np.ndarray]

    def coords(self, grid: Grid, v):
        return grid.dx * np.asarray(v) @ np.atleast_2d(self.directions).T

    def value(self, grid: Grid, v):
        return self.g(self.coords(grid, v))

    def gradient(self, grid: Grid, v):
        """``Df = sum_j d_j g * h_j``."""
        return self.grad_g(self.coords(grid, v)) @ np.atleast_2d(self.directions)


def default_poincare_battery(grid: Grid) -> list[CylinderFunction]:
    x = grid.centers
    one = np.ones((1, grid.n_cells))
    c1 = np.cos(np.pi * x)[None, :]
    pair = np.array([np.ones_like(x), np.cos(2 * np.pi * x)])
    ramp = (1.0 - x)[None, :]
    return [
        CylinderFunction("constant", one, lambda z: np.ones(z.shape[0]), lambda z: np.zeros_like(z)),
        CylinderFunction("linear_cos1", c1, lambda z: z[:, 0], lambda z: np.ones_like(z)),
        CylinderFunction("linear_ramp", ramp, lambda z: z[:, 0], lambda z: np.ones_like(z)),
        CylinderFunction("cos_mean", one, lambda z: np.cos(z[:, 0]), lambda z: -np.sin(z)),
        CylinderFunction("tanh_cos1", 2 * c1, lambda z: np.tanh(z[:, 0]), lambda z: 1.0 / np.cosh(z) ** 2),
        CylinderFunction(
            "sin_product",
            pair,
            lambda z: np.sin(z[:, 0]) * np.cos(z[:, 1]),
            lambda z: np.column_stack([np.cos(z[:, 0]) * np.cos(z[:, 1]), -np.sin(z[:, 0]) * np.sin(z[:, 1])]),
        ),
        CylinderFunction(
            "gauss_pair",
            3 * pair,
            lambda z: np.exp(-0.5 * (z**2).sum(axis=1)),
            lambda z: -z * np.exp(-0.5 * (z**2).sum(axis=1))[:, None],
        ),
    ]


@dataclass
class PoincareResult:
    name: str
    variance: float
    energy: float
    variance_se: float
    energy_se: float

    @property
    def combined_se(self) -> float:
        return float(np.hypot(self.variance_se, self.energy_se))

    def passes(self, n_se: float = 3.0) -> bool:
        return self.variance <= self.energy + n_se * self.combined_se


def poincare_check(
    grid: Grid,
    f_battery: Sequence[CylinderFunction],
    n_samples: int,
    rng: np.random.Generator,
) -> list[PoincareResult]:
    """Monte Carlo ``Var_mu0(f)`` and ``E_mu0 ||Df||_H^2`` for each cylinder function.

    Standard errors: delta method for the variance, plain for the energy.
    """
    v = sample_wiener_shape(grid, rng, n_samples)
    out = []
    for f in f_battery:
        y = np.asarray(f.value(grid, v), dtype=float)
        e = np.asarray(inner_h(grid, f.gradient(grid, v), f.gradient(grid, v)), dtype=float)
        dev2 = (y - y.mean()) ** 2
        var = float(dev2.mean() * n_samples / (n_samples - 1))
        var_se = float(dev2.std(ddof=1) / np.sqrt(n_samples))
        out.append(PoincareResult(f.name, var, float(e.mean()), var_se, float(e.std(ddof=1) / np.sqrt(n_samples))))
    return out


def linear_functional_variance(grid: Grid, h) -> float:
    """Exact ``Var_mu0 <v, h>_H = dx^2 h' Sigma_0 h`` for the discrete Wiener vector."""
    h = np.asarray(h, dtype=float)
    return float(grid.dx**2 * h @ wiener_covariance(grid) @ h)
