"""Nested Monte Carlo over environments (outer) and noise (inner).

Every replica gets its own random stream derived from ``(master_seed, indices)``
through :class:`numpy.random.SeedSequence` feeding a Philox counter-based
generator, so results do not depend on how replicas are scheduled.  Environments
are integrated in fixed batches of ``env_batch`` and reassembled in index order.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.stats
from numpy.polynomial.hermite import hermgauss

from .dynamics import SCHEMES, checkpoint_steps, integrate_batch
from .environment import EnvModel, sample_env
from .errors import BlowUpError, ConfigurationError, StatisticsError
from .lattice import Grid

PROBE_X = (0.1, 0.5, 0.9)


def env_rng(master_seed: int, env_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(master_seed, spawn_key=(0, env_index))
    return np.random.Generator(np.random.Philox(ss))


def noise_rng(master_seed: int, env_index: int, noise_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(master_seed, spawn_key=(1, env_index, noise_index))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class EnsembleConfig:
    n_env: int
    n_noise: int
    n_cells: int
    dt: float
    checkpoints: tuple[float, ...]
    master_seed: int = 0
    scheme: str = "crank_nicolson"
    initial: tuple[float, ...] | None = None
    env_batch: int = 8

    def __post_init__(self):
        object.__setattr__(self, "checkpoints", tuple(float(t) for t in self.checkpoints))
        if self.initial is not None:
            object.__setattr__(self, "initial", tuple(float(v) for v in self.initial))
        if self.n_env < 2 or self.n_noise < 2:
            raise ConfigurationError("n_env and n_noise must both be at least 2 (variances undefined otherwise)")
        if self.n_cells < 1:
            raise ConfigurationError("n_cells must be positive")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")
        if self.env_batch < 1:
            raise ConfigurationError("env_batch must be positive")
        if not self.checkpoints:
            raise ConfigurationError("at least one checkpoint is required")
        if self.initial is not None and len(self.initial) != self.n_cells:
            raise ConfigurationError("initial condition must have n_cells values")
        checkpoint_steps(self.checkpoints, self.dt)

    @property
    def T(self) -> float:
        return self.checkpoints[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checkpoints"] = list(self.checkpoints)
        d["initial"] = None if self.initial is None else list(self.initial)
        return d


@dataclass
class EnsembleStats:
    """Per-replica checkpoint records, indexed ``[env, noise, checkpoint]``.

    ``probe_fluct[..., p]`` is ``u(t, x_p) - mean_mode(t)`` at the probe cells.
    """

    times: np.ndarray
    mean_mode: np.ndarray
    fluct_sq: np.ndarray
    probe_fluct: np.ndarray
    probe_x: np.ndarray
    sigma: np.ndarray
    config: EnsembleConfig | None = None

    @property
    def n_env(self) -> int:
        return self.mean_mode.shape[0]

    @property
    def n_noise(self) -> int:
        return self.mean_mode.shape[1]

    def inner_means(self, values: np.ndarray) -> np.ndarray:
        """Average over the noise axis: ``E_P`` per environment."""
        return np.mean(values, axis=1)

    def pooled_mean(self, values: np.ndarray) -> np.ndarray:
        return np.mean(self.inner_means(values), axis=0)

    def cluster_se(self, values: np.ndarray) -> np.ndarray:
        """Standard error of the pooled mean, treating environments as independent clusters."""
        m = self.inner_means(values)
        return np.std(m, axis=0, ddof=1) / np.sqrt(m.shape[0])

    def var_mean_mode(self) -> np.ndarray:
        flat = self.mean_mode.reshape(-1, self.mean_mode.shape[-1])
        return np.var(flat, axis=0, ddof=1)

    def second_moment(self) -> tuple[np.ndarray, np.ndarray]:
        sq = self.mean_mode**2
        return self.pooled_mean(sq), self.cluster_se(sq)

    def fluct_var_cells(self) -> np.ndarray:
        """Pooled ``Var(u(t, x_p) - mean_mode(t))``, shape ``(K, P)``."""
        flat = self.probe_fluct.reshape(-1, *self.probe_fluct.shape[2:])
        return np.var(flat, axis=0, ddof=1)

    def fluct_h_norm_sq(self) -> np.ndarray:
        return self.pooled_mean(self.fluct_sq)

    def scaled_mean_mode(self, index: int = -1) -> np.ndarray:
        t = self.times[index]
        if t <= 0:
            raise StatisticsError("scaling by sqrt(t) needs t > 0")
        return self.mean_mode[:, :, index] / np.sqrt(t)

    def save(self, path) -> None:
        np.savez(
            path,
            times=self.times,
            mean_mode=self.mean_mode,
            fluct_sq=self.fluct_sq,
            probe_fluct=self.probe_fluct,
            probe_x=self.probe_x,
            sigma=self.sigma,
        )

    @classmethod
    def load(cls, path, config: EnsembleConfig | None = None) -> "EnsembleStats":
        with np.load(path) as z:
            return cls(
                z["times"], z["mean_mode"], z["fluct_sq"], z["probe_fluct"], z["probe_x"], z["sigma"], config
            )


def _run_env_batch(args):
    config, model, env_indices = args
    grid = model.grid
    probe = grid.probe_indices(PROBE_X)
    sigmas = np.array([sample_env(model, env_rng(config.master_seed, e)) for e in env_indices])
    rows_sigma = np.repeat(sigmas, config.n_noise, axis=0)
    rngs = [noise_rng(config.master_seed, e, w) for e in env_indices for w in range(config.n_noise)]
    u0 = np.zeros(grid.n_cells) if config.initial is None else np.asarray(config.initial)
    u0 = np.broadcast_to(u0, (len(rngs), grid.n_cells))
    try:
        res = integrate_batch(
            grid, model, rows_sigma, u0, config.dt, config.checkpoints, rngs, config.scheme, probe
        )
    except BlowUpError as exc:
        # locate the offending replica by rerunning rows one at a time
        for row, rng in enumerate(
            noise_rng(config.master_seed, e, w) for e in env_indices for w in range(config.n_noise)
        ):
            try:
                integrate_batch(
                    grid, model, rows_sigma[row], u0[row], config.dt, config.checkpoints, [rng], config.scheme
                )
            except BlowUpError:
                e, w = env_indices[row // config.n_noise], row % config.n_noise
                raise BlowUpError(f"replica (env={e}, noise={w}): {exc}", e, w, exc.step) from exc
        raise
    shape = (len(env_indices), config.n_noise)
    return (
        sigmas,
        res["mean"].reshape(shape + res["mean"].shape[1:]),
        res["fluct_sq"].reshape(shape + res["fluct_sq"].shape[1:]),
        res["probe"].reshape(shape + res["probe"].shape[1:]),
    )


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("RSE_HEAT_WORKERS", "1"))
    return max(1, int(workers))


def run_ensemble(config: EnsembleConfig, model: EnvModel, workers: int | None = None) -> EnsembleStats:
    """Simulate ``n_env x n_noise`` trajectories and collect checkpoint statistics.

    Environment ``e`` uses phases from ``env_rng(master, e)``; its noise replica
    ``w`` uses ``noise_rng(master, e, w)``.  Output is bit-identical for any
    number of workers.
    """
    if model.grid.n_cells != config.n_cells:
        raise ConfigurationError("model grid and config n_cells disagree")
    batches = [
        list(range(i, min(i + config.env_batch, config.n_env)))
        for i in range(0, config.n_env, config.env_batch)
    ]
    tasks = [(config, model, b) for b in batches]
    workers = resolve_workers(workers)
    if workers == 1 or len(tasks) == 1:
        parts = [_run_env_batch(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            parts = list(pool.map(_run_env_batch, tasks))
    sigma, mean, fluct, probe = (np.concatenate(p, axis=0) for p in zip(*parts))
    return EnsembleStats(
        np.asarray(config.checkpoints),
        mean,
        fluct,
        probe,
        np.asarray(PROBE_X),
        sigma,
        config,
    )


# -- CLT functionals ---------------------------------------------------------


@dataclass(frozen=True)
class BatteryFunction:
    """A bounded Lipschitz functional of ``w = u/sqrt(t)``, written in terms of
    ``m = <w, 1>_H`` and ``r2 = ||w - m 1||_H^2``."""

    name: str
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def __call__(self, m, r2):
        return self.fn(np.asarray(m), np.asarray(r2))


def _cos_mean(m, r2):
    return np.cos(m) + 0.0 * r2


def _gauss_mean(m, r2):
    return np.exp(-(m**2)) + 0.0 * r2


def _clipped_norm(m, r2):
    return np.minimum(np.sqrt(m**2 + r2), 1.0)


def _fluct_decay(m, r2):
    return 1.0 / (1.0 + r2) + 0.0 * m


def _constant_one(m, r2):
    return np.ones(np.broadcast_shapes(np.shape(m), np.shape(r2)))


DEFAULT_BATTERY = (
    BatteryFunction("cos_mean", _cos_mean),
    BatteryFunction("gauss_mean", _gauss_mean),
    BatteryFunction("clipped_norm", _clipped_norm),
    BatteryFunction("fluct_decay", _fluct_decay),
)
BATTERY_BY_NAME = {f.name: f for f in DEFAULT_BATTERY + (BatteryFunction("one", _constant_one),)}

_GH_NODES, _GH_WEIGHTS = hermgauss(64)


def gaussian_reference(f: BatteryFunction, a: float) -> float:
    """``int f(1 y) Phi_a(y) dy`` by 64-point Gauss-Hermite quadrature."""
    y = np.sqrt(2.0) * a * _GH_NODES
    # normalising by the weight sum makes constants exact
    return float(np.sum(_GH_WEIGHTS * f(y, np.zeros_like(y))) / np.sum(_GH_WEIGHTS))


@dataclass
class CltMetric:
    times: np.ndarray
    names: list[str]
    values: np.ndarray  # (K, F)
    noise_floor: np.ndarray  # (K, F)
    reference: np.ndarray  # (F,)

    @property
    def combined(self) -> np.ndarray:
        return self.values.mean(axis=1)


def clt_l1_metric(stats: EnsembleStats, f_battery: Sequence[BatteryFunction], a: float) -> CltMetric:
    """``E_Q | E_P f(u(t)/sqrt t) - int f(1 y) Phi_a(y) dy |`` at each checkpoint with ``t > 0``.

    The noise floor is ``sqrt(2/pi)`` times the mean inner standard error, the
    value the metric takes when the inner averages are exact up to Monte Carlo noise.
    """
    if not f_battery:
        raise ConfigurationError("the functional battery is empty")
    if not a > 0:
        raise ConfigurationError("a must be positive")
    keep = np.flatnonzero(stats.times > 0)
    t = stats.times[keep]
    m = stats.mean_mode[:, :, keep] / np.sqrt(t)
    r2 = stats.fluct_sq[:, :, keep] / t
    ref = np.array([gaussian_reference(f, a) for f in f_battery])
    values = np.empty((len(keep), len(f_battery)))
    floor = np.empty_like(values)
    for j, f in enumerate(f_battery):
        fx = f(m, r2)
        inner = fx.mean(axis=1)  # (E, K)
        values[:, j] = np.mean(np.abs(inner - ref[j]), axis=0)
        inner_se = fx.std(axis=1, ddof=1) / np.sqrt(stats.n_noise)
        floor[:, j] = np.sqrt(2.0 / np.pi) * inner_se.mean(axis=0)
    return CltMetric(t, [f.name for f in f_battery], values, floor, ref)


@dataclass
class KsResult:
    statistic: float
    threshold: float
    passed: bool
    n: int

    def to_dict(self) -> dict:
        return {"D_n": self.statistic, "threshold": self.threshold, "pass": self.passed, "n": self.n}


def ks_null_quantile(n: int, level: float = 0.01, n_sim: int = 2000, seed: int = 20240611) -> float:
    """Upper ``level`` quantile of the KS statistic for ``n`` samples, by simulation."""
    rng = np.random.default_rng(seed)
    u = np.sort(rng.random((n_sim, n)), axis=1)
    i = np.arange(1, n + 1)
    d = np.maximum(np.max(i / n - u, axis=1), np.max(u - (i - 1) / n, axis=1))
    return float(np.quantile(d, 1.0 - level))


def ks_gaussianity(samples, a: float, level: float = 0.01, n_sim: int = 2000) -> KsResult:
    """KS distance of ``samples`` to ``Normal(0, a^2)`` against a simulated null quantile."""
    x = np.ravel(np.asarray(samples, dtype=float))
    if x.size < 200:
        raise ConfigurationError("ks_gaussianity needs at least 200 samples")
    if not a > 0:
        raise ConfigurationError("a must be positive")
    if np.ptp(x) == 0.0:
        raise StatisticsError("samples are degenerate (zero variance)")
    d = float(scipy.stats.kstest(x, scipy.stats.norm(scale=a).cdf).statistic)
    thr = ks_null_quantile(x.size, level, n_sim)
    return KsResult(d, thr, d <= thr, int(x.size))


@dataclass
class ConcentrationStats:
    times: np.ndarray
    sup_fluct_var: np.ndarray
    var_mean: np.ndarray
    fluct_h_sq: np.ndarray
    t1: float
    t2: float
    fluct_ratio: float
    mean_ratio: float
    extra: dict = field(default_factory=dict)


def concentration_stats(stats: EnsembleStats, t1: float | None = None, t2: float | None = None) -> ConcentrationStats:
    """Probe-cell fluctuation variance and mean-mode variance over time.

    The ratio diagnostics compare ``t2`` (default: last checkpoint) with ``t1``
    (default: the latest checkpoint not after ``t2 / 2``).
    """
    times = stats.times
    sup_var = stats.fluct_var_cells().max(axis=1) if stats.probe_fluct.shape[-1] else np.zeros(len(times))
    var_mean = stats.var_mean_mode()
    i2 = len(times) - 1 if t2 is None else int(np.argmin(np.abs(times - t2)))
    if t1 is None:
        cand = np.flatnonzero((times > 0) & (times <= times[i2] / 2 + 1e-12))
        if cand.size == 0:
            raise ConfigurationError("need a positive checkpoint at or before t2/2")
        i1 = int(cand[-1])
    else:
        i1 = int(np.argmin(np.abs(times - t1)))
    if times[i2] < 2 * times[i1] - 1e-12:
        raise ConfigurationError("concentration diagnostics need t2 >= 2 t1")
    fluct_ratio = float(sup_var[i2] / sup_var[i1]) if sup_var[i1] > 0 else float("nan")
    mean_ratio = float(var_mean[i2] / var_mean[i1]) if var_mean[i1] > 0 else float("nan")
    return ConcentrationStats(
        times, sup_var, var_mean, stats.fluct_h_norm_sq(), float(times[i1]), float(times[i2]), fluct_ratio, mean_ratio
    )


def free_field_fluct_variance(grid: Grid, x: float, t: float = np.inf) -> float:
    """``Var(u(t, x) - mean_mode)`` for the free field started at 0 (OU mode sum)."""
    mu = grid.eigenvalues[1:]
    e = grid.basis[1:, grid.probe_indices([x])[0]]
    growth = 1.0 if np.isinf(t) else -np.expm1(-mu * t)
    return float(np.sum(e**2 * growth / mu))
