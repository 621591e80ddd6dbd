"""Random environments ``(V, B)`` and checks of their structural assumptions.

An environment point (the phase ``sigma``) is an array whose last axis has
length ``model.d``: ``d = 1`` for the zero and periodic models, ``d >= 2`` for
the quasi-periodic one.  Evaluators broadcast over leading batch axes of both
``sigma`` and ``u``.

The potential is ``V(sigma, u) = dx * sum_i Vbar(x_i, lambda * u_i + sigma)``
with ``Vbar(x, y) = sum_c sum_modes kappa * w(x) * cos(2 pi m y_c + theta)``
and ``w(x) = cos(j pi x)`` (``j = 0`` is the flat profile).

Gradients follow the H convention: ``(DF)_i = (1/dx) dF/du_i``, so that
``<DF, h>_H`` is the ordinary directional derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .lattice import Grid, check_field, inner_h, norm_h, sample_wiener_shape, wiener_precision

KINDS = ("zero", "periodic", "quasiperiodic")


@dataclass(frozen=True)
class Mode:
    """One term ``amplitude * cos(profile * pi * x) * cos(2 pi m y + phase)``."""

    m: int
    amplitude: float
    phase: float = 0.0
    profile: int = 0

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ConfigurationError(f"mode number must be a positive integer, got {self.m!r}")
        if int(self.profile) != self.profile or self.profile < 0:
            raise ConfigurationError(f"profile index must be >= 0, got {self.profile!r}")


@dataclass(frozen=True)
class PotentialSpec:
    """Mode lists per phase coordinate and the frequency vector ``lambda``."""

    modes: tuple[tuple[Mode, ...], ...] = ((),)
    frequencies: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        modes = tuple(tuple(ms) for ms in self.modes)
        freqs = tuple(float(f) for f in self.frequencies)
        if len(modes) != len(freqs):
            raise ConfigurationError("one mode list per frequency is required")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "frequencies", freqs)

    @property
    def d(self) -> int:
        return len(self.frequencies)

    @property
    def sup_bound(self) -> float:
        """Envelope ``sum |kappa|`` for ``sup |V|`` (``|w| <= 1``)."""
        return float(sum(abs(md.amplitude) for ms in self.modes for md in ms))

    @property
    def gradient_bound(self) -> float:
        """Envelope for ``sup ||DV||_H``."""
        return float(
            sum(
                abs(lam) * 2 * np.pi * md.m * abs(md.amplitude)
                for lam, ms in zip(self.frequencies, self.modes)
                for md in ms
            )
        )

    @property
    def lipschitz_bound(self) -> float:
        """Envelope for the H-Lipschitz constant of ``DV`` (sup of the second y-derivative)."""
        return float(
            sum(
                lam**2 * (2 * np.pi * md.m) ** 2 * abs(md.amplitude)
                for lam, ms in zip(self.frequencies, self.modes)
                for md in ms
            )
        )


@dataclass(frozen=True)
class DivFreeSpec:
    """Data for the stream-function drift.

    ``modes`` picks two cosine modes; each gets its first-cell value set to zero
    and the pair is Gram-Schmidt orthonormalised in H.  The stream profile is a
    bump of the given ``amplitude`` and ``radius`` centred at ``center``, in
    coordinates where each Gaussian score has unit standard deviation.
    """

    modes: tuple[int, int] = (1, 2)
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 2.0
    amplitude: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.modes) != 2 or self.modes[0] == self.modes[1]:
            raise ConfigurationError("divfree needs two distinct cosine modes")
        if len(self.center) != 2:
            raise ConfigurationError("divfree center must have two coordinates")
        if not self.radius > 0:
            raise ConfigurationError("divfree radius must be positive")


def bump(z, center, radius, amplitude):
    """``amplitude * exp(1 - 1/(1 - s))`` with ``s = |z - center|^2 / radius^2`` for ``s < 1``.

    Returns the value and its gradient (last axis of ``z`` has length 2).
    """
    dz = (np.asarray(z) - np.asarray(center)) / radius
    s = np.sum(dz**2, axis=-1)
    inside = s < 1.0
    safe = np.where(inside, s, 0.0)
    val = np.where(inside, amplitude * np.exp(1.0 - 1.0 / (1.0 - safe)), 0.0)
    dval_ds = np.where(inside, -val / (1.0 - safe) ** 2, 0.0)
    grad = dval_ds[..., None] * 2.0 * dz / radius
    return val, grad


class StreamDrift:
    """Precomputed linear algebra for the stream-function construction.

    With ``P`` the precision matrix of the discrete Wiener vector, the Gaussian
    scores are ``l_a(u) = q_a . u`` with ``q_a = P k_a``; they satisfy
    ``E[d_{k_a} f] = E[f l_a]``.  The stream is ``psi = chi(l_1 / s_1, l_2 / s_2)``
    and the drift

        B = exp(2V) [(d_{k2} psi - l_2 psi) k_1 - (d_{k1} psi - l_1 psi) k_2]

    integrates to zero against ``exp(-2V) <Df, .>_H`` for every smooth ``f``.
    Since ``P 1`` is supported on the first cell and ``k_a`` vanish there, the
    scores (and ``psi``) are invariant under ``u -> u + c``.
    """

    def __init__(self, grid: Grid, spec: DivFreeSpec):
        if grid.n_cells < 3:
            raise ConfigurationError("the stream drift needs at least 3 cells")
        self.grid = grid
        self.spec = spec
        ks = []
        for j in spec.modes:
            k = grid.mode(j)
            k[0] = 0.0
            for prev in ks:
                k = k - inner_h(grid, k, prev) * prev
            k = k / norm_h(grid, k)
            k[0] = 0.0
            ks.append(k)
        self.k = np.array(ks)  # (2, n)
        prec = wiener_precision(grid)
        self.q = self.k @ prec  # (2, n)
        self.p = self.q @ self.k.T  # p_ab = k_a^T P k_b
        self.scale = np.sqrt(np.diag(self.p))

    def scores(self, u):
        return np.einsum("...i,ai->...a", u, self.q)

    def bracket(self, u):
        """Coefficients ``(c_1, c_2)`` with ``B = exp(2V) (c_1 k_1 + c_2 k_2)``."""
        ell = self.scores(u)
        spec = self.spec
        psi, grad = bump(ell / self.scale, spec.center, spec.radius, spec.amplitude)
        dchi = grad / self.scale  # d psi / d l_a
        dpsi = dchi @ self.p  # d_{k_b} psi = sum_a dchi_a p_ab
        c1 = dpsi[..., 1] - ell[..., 1] * psi
        c2 = -(dpsi[..., 0] - ell[..., 0] * psi)
        return np.stack([c1, c2], axis=-1)

    @cached_property
    def bracket_bound(self) -> float:
        """Sup of ``sqrt(c_1^2 + c_2^2)`` over the bump support, evaluated on a fine polar mesh."""
        spec = self.spec
        r = np.linspace(0.0, 1.0, 401)[:, None] * spec.radius
        ang = np.linspace(0.0, 2 * np.pi, 721)[None, :]
        z = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1) + np.asarray(spec.center)
        ell = z * self.scale
        psi, grad = bump(z, spec.center, spec.radius, spec.amplitude)
        dpsi = (grad / self.scale) @ self.p
        c1 = dpsi[..., 1] - ell[..., 1] * psi
        c2 = dpsi[..., 0] - ell[..., 0] * psi
        # 2% head-room for the mesh resolution
        return float(np.max(np.hypot(c1, c2)) * 1.02)


@dataclass(frozen=True)
class EnvModel:
    """A law of random environments on a fixed grid.

    ``imposter=True`` replaces ``B`` by ``DV``; this is a gradient field that
    is *not* divergence-free and exists only to exercise the validators.
    """

    kind: str
    grid: Grid
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    divfree: DivFreeSpec | None = None
    imposter: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown environment kind {self.kind!r}")
        if self.kind == "quasiperiodic" and self.potential.d < 2:
            raise ConfigurationError("the quasi-periodic model needs at least two frequencies")
        if self.kind in ("zero", "periodic") and self.potential.d != 1:
            raise ConfigurationError(f"the {self.kind} model has a single phase coordinate")
        if self.kind == "zero" and self.potential.sup_bound != 0.0:
            raise ConfigurationError("the zero model cannot carry potential modes")
        if self.divfree is not None and self.imposter:
            raise ConfigurationError("choose either a divergence-free drift or the imposter")

    @property
    def d(self) -> int:
        return self.potential.d

    @property
    def frequencies(self) -> np.ndarray:
        return np.asarray(self.potential.frequencies)

    @property
    def has_drift(self) -> bool:
        return self.divfree is not None or self.imposter

    @property
    def sup_V(self) -> float:
        return self.potential.sup_bound

    @cached_property
    def stream(self) -> StreamDrift | None:
        if self.divfree is None:
            return None
        return StreamDrift(self.grid, self.divfree)

    @property
    def B_bound(self) -> float:
        if self.imposter:
            return self.potential.gradient_bound
        if self.stream is None:
            return 0.0
        return float(np.exp(2 * self.sup_V) * self.stream.bracket_bound)

    def shift(self, sigma, c):
        """Environment shift ``tau_c sigma = frac(sigma + lambda c)``."""
        sigma = np.asarray(sigma, dtype=float)
        c = np.asarray(c, dtype=float)[..., None]
        return np.mod(sigma + self.frequencies * c, 1.0)


def zero_model(grid: Grid) -> EnvModel:
    return EnvModel("zero", grid)


def periodic_model(grid: Grid, modes: Sequence[Mode], divfree: DivFreeSpec | None = None) -> EnvModel:
    return EnvModel("periodic", grid, PotentialSpec((tuple(modes),), (1.0,)), divfree)


def cosine_model(grid: Grid, kappa: float, divfree: DivFreeSpec | None = None) -> EnvModel:
    """``Vbar(x, y) = kappa cos(2 pi y)``, flat in ``x``."""
    return periodic_model(grid, [Mode(1, kappa)], divfree)


def two_mode_model(grid: Grid, kappa: float, divfree: DivFreeSpec | None = None) -> EnvModel:
    """An ``x``-dependent periodic potential with two modes."""
    return periodic_model(grid, [Mode(1, kappa), Mode(2, kappa / 2, 0.3, 1)], divfree)


def quasiperiodic_model(
    grid: Grid,
    modes: Sequence[Sequence[Mode]],
    frequencies: Sequence[float] = (1.0, np.sqrt(2.0)),
    divfree: DivFreeSpec | None = None,
) -> EnvModel:
    pot = PotentialSpec(tuple(tuple(ms) for ms in modes), tuple(frequencies))
    return EnvModel("quasiperiodic", grid, pot, divfree)


def with_imposter(model: EnvModel) -> EnvModel:
    return replace(model, divfree=None, imposter=True)


# -- evaluators --------------------------------------------------------------


def _phases(model: EnvModel, sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 0:
        sigma = sigma[None]
    if sigma.shape[-1] != model.d:
        raise ConfigurationError(f"environment point needs {model.d} phases, got shape {sigma.shape}")
    return sigma


def sample_env(model: EnvModel, rng: np.random.Generator, size=None) -> np.ndarray:
    """Phases uniform on ``[0, 1)^d``; shape ``(d,)`` or ``size + (d,)``."""
    shape = (() if size is None else tuple(np.atleast_1d(size))) + (model.d,)
    return rng.random(shape)


def _local_terms(model: EnvModel, sigma, u, order: int) -> np.ndarray:
    """Per-cell ``Vbar`` (order 0), its lambda-weighted y-derivative (1) or second derivative (2)."""
    grid = model.grid
    out = np.zeros(np.broadcast_shapes(u.shape, sigma.shape[:-1] + (1,)))
    x = grid.centers
    for c, (lam, ms) in enumerate(zip(model.potential.frequencies, model.potential.modes)):
        if not ms:
            continue
        y = lam * u + sigma[..., c : c + 1]
        for md in ms:
            w = md.amplitude * (np.cos(md.profile * np.pi * x) if md.profile else 1.0)
            arg = 2 * np.pi * md.m * y + md.phase
            if order == 0:
                out = out + w * np.cos(arg)
            elif order == 1:
                out = out - (lam * 2 * np.pi * md.m) * w * np.sin(arg)
            else:
                out = out - (lam * 2 * np.pi * md.m) ** 2 * w * np.cos(arg)
    return out


def eval_V(model: EnvModel, sigma, u):
    """``V(sigma, u) = dx sum_i Vbar(x_i, lambda u_i + sigma)``."""
    u = check_field(model.grid, u)
    sigma = _phases(model, sigma)
    if model.kind == "zero":
        out = np.zeros(np.broadcast_shapes(u.shape[:-1], sigma.shape[:-1]))
    else:
        out = model.grid.dx * _local_terms(model, sigma, u, 0).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def eval_DV(model: EnvModel, sigma, u) -> np.ndarray:
    """H-gradient of ``V``: cell ``i`` holds ``sum_c lambda_c d_{y_c} Vbar(x_i, .)``."""
    u = check_field(model.grid, u)
    sigma = _phases(model, sigma)
    if model.kind == "zero":
        return np.zeros(np.broadcast_shapes(u.shape, sigma.shape[:-1] + (1,)))
    return _local_terms(model, sigma, u, 1)


def eval_B(model: EnvModel, sigma, u) -> np.ndarray:
    """Non-gradient drift; zero unless the model carries a stream (or the imposter)."""
    u = check_field(model.grid, u)
    sigma = _phases(model, sigma)
    if model.imposter:
        return eval_DV(model, sigma, u)
    shape = np.broadcast_shapes(u.shape, sigma.shape[:-1] + (1,))
    if model.stream is None:
        return np.zeros(shape)
    coef = model.stream.bracket(u)
    weight = np.exp(2.0 * np.asarray(eval_V(model, sigma, u)))
    drift = (weight[..., None] * coef) @ model.stream.k
    return np.broadcast_to(drift, shape).copy()


def eval_drift(model: EnvModel, sigma, u) -> np.ndarray:
    """``DV + B``, the full non-linear term of the equation."""
    if model.imposter:
        return 2.0 * eval_DV(model, sigma, u)
    drift = eval_DV(model, sigma, u)
    if model.stream is not None:
        drift = drift + eval_B(model, sigma, u)
    return drift


# -- validators --------------------------------------------------------------


@dataclass(frozen=True)
class ExpTestFunction:
    """Real (``cos``) or imaginary (``sin``) part of ``exp(i <v, h>_H)``."""

    h: np.ndarray
    part: str = "cos"

    def value(self, grid: Grid, v):
        z = inner_h(grid, v, self.h)
        return np.cos(z) if self.part == "cos" else np.sin(z)

    def gradient(self, grid: Grid, v):
        z = np.asarray(inner_h(grid, v, self.h))
        d = -np.sin(z) if self.part == "cos" else np.cos(z)
        return d[..., None] * self.h


def exponential_battery(grid: Grid, count: int, rng: np.random.Generator, max_mode: int = 4, scale: float = 1.5):
    """``count`` test functions with ``h = sum_{j <= max_mode} a_j cos(j pi x)``, ``a_j ~ N(0, scale^2)``.

    Cosine polynomials have zero derivative at both ends, as the exponential class requires.
    """
    modes = np.array([grid.mode(j) for j in range(max_mode + 1)])
    out = []
    for i in range(count):
        a = scale * rng.standard_normal(max_mode + 1)
        out.append(ExpTestFunction(a @ modes, "cos" if i % 2 == 0 else "sin"))
    return out


@dataclass(frozen=True)
class DivergenceEstimate:
    estimate: float
    se: float

    def passes(self, n_se: float = 3.0) -> bool:
        return abs(self.estimate) <= n_se * self.se


def verify_divergence_free(
    model: EnvModel,
    sigma,
    test_fns: Sequence[ExpTestFunction],
    n_samples: int,
    rng: np.random.Generator,
    chunk: int = 50_000,
) -> list[DivergenceEstimate]:
    """Monte Carlo estimate of ``E_mu0[exp(-2V) <Df, B>_H]`` for each test function.

    All test functions share the same Wiener draws; samples are processed in chunks.
    """
    if n_samples < 100:
        raise ConfigurationError("verify_divergence_free needs at least 100 samples")
    grid = model.grid
    sigma = _phases(model, sigma)
    if not model.has_drift:
        return [DivergenceEstimate(0.0, 0.0) for _ in test_fns]
    total = np.zeros(len(test_fns))
    total_sq = np.zeros(len(test_fns))
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        v = sample_wiener_shape(grid, rng, m)
        b = eval_B(model, sigma, v)
        w = np.exp(-2.0 * np.asarray(eval_V(model, sigma, v)))
        for j, f in enumerate(test_fns):
            y = w * inner_h(grid, f.gradient(grid, v), b)
            total[j] += y.sum()
            total_sq[j] += (y**2).sum()
        done += m
    mean = total / n_samples
    var = np.maximum(total_sq / n_samples - mean**2, 0.0) * n_samples / (n_samples - 1)
    se = np.sqrt(var / n_samples)
    return [DivergenceEstimate(float(a), float(s)) for a, s in zip(mean, se)]


def verify_shift_covariance(model: EnvModel, sigma, u, c: float) -> float:
    """Max discrepancy between ``F(sigma, u + c)`` and ``F(tau_c sigma, u)`` for ``F = V, DV, B``."""
    u = check_field(model.grid, u)
    sigma = _phases(model, sigma)
    shifted_u = u + c
    shifted_sigma = model.shift(sigma, c)
    dev = 0.0
    for fn in (eval_V, eval_DV, eval_B):
        a = np.asarray(fn(model, sigma, shifted_u))
        b = np.asarray(fn(model, shifted_sigma, u))
        dev = max(dev, float(np.max(np.abs(a - b), initial=0.0)))
    return dev


@dataclass
class AssumptionReport:
    """Sampled sup norms and Lipschitz ratios next to the analytic envelopes."""

    sup_V: float
    sup_DV: float
    sup_B: float
    lip_DV: float
    bound_V: float
    bound_DV: float
    bound_B: float
    bound_lip_DV: float
    n_samples: int
    violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "sup_V": self.sup_V,
            "sup_DV": self.sup_DV,
            "sup_B": self.sup_B,
            "lip_DV": self.lip_DV,
            "bound_V": self.bound_V,
            "bound_DV": self.bound_DV,
            "bound_B": self.bound_B,
            "bound_lip_DV": self.bound_lip_DV,
            "n_samples": self.n_samples,
            "violations": list(self.violations),
            "passed": self.passed,
        }


def assumption_report(model: EnvModel, n_samples: int, rng: np.random.Generator, rel_tol: float = 1e-9) -> AssumptionReport:
    """Probe boundedness and Lipschitz continuity on random inputs.

    States are Wiener shapes plus a uniform offset; Lipschitz ratios use pairs at
    H-distance between ``1e-3`` and ``1``.
    """
    grid = model.grid
    sigma = sample_env(model, rng, n_samples)
    u = sample_wiener_shape(grid, rng, n_samples) + rng.uniform(-2, 2, (n_samples, 1))
    eps = 10.0 ** rng.uniform(-3, 0, (n_samples, 1))
    h = rng.standard_normal((n_samples, grid.n_cells))
    h /= np.asarray(norm_h(grid, h))[:, None]
    u2 = u + eps * h

    V = np.abs(np.asarray(eval_V(model, sigma, u)))
    DV = eval_DV(model, sigma, u)
    DV2 = eval_DV(model, sigma, u2)
    B = eval_B(model, sigma, u)
    sup_V = float(V.max(initial=0.0))
    sup_DV = float(np.max(norm_h(grid, DV), initial=0.0))
    sup_B = float(np.max(norm_h(grid, B), initial=0.0))
    lip = float(np.max(norm_h(grid, DV2 - DV) / eps[:, 0], initial=0.0))

    pot = model.potential
    bounds = {
        "V": (sup_V, pot.sup_bound),
        "DV": (sup_DV, pot.gradient_bound),
        "B": (sup_B, model.B_bound),
        "lip_DV": (lip, pot.lipschitz_bound),
    }
    violations = [
        f"{name}: sampled {got:.6g} exceeds bound {bound:.6g}"
        for name, (got, bound) in bounds.items()
        if got > bound * (1 + rel_tol) + 1e-12
    ]
    return AssumptionReport(
        sup_V, sup_DV, sup_B, lip,
        pot.sup_bound, pot.gradient_bound, model.B_bound, pot.lipschitz_bound,
        n_samples, violations,
    )
