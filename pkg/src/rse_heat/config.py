"""Experiment configuration: a single JSON document with fixed sections.

Unknown keys are rejected.  Errors name the offending field path and, when it
can be located, the line in the source text.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .dynamics import SCHEMES
from .ensemble import BATTERY_BY_NAME, DEFAULT_BATTERY, EnsembleConfig
from .environment import KINDS, DivFreeSpec, EnvModel, Mode, PotentialSpec, with_imposter
from .errors import ConfigurationError
from .lattice import Grid

DEFAULTS: dict[str, Any] = {
    "environment": {"kind": "zero", "modes": [], "frequencies": None, "divfree": None},
    "grid": {"n_cells": 64},
    "dynamics": {"dt": 1e-3, "T": 20.0, "checkpoints": None, "n_checkpoints": 40, "scheme": "crank_nicolson"},
    "ensemble": {"n_env": 50, "n_noise": 40, "master_seed": 0, "env_batch": 8},
    "analysis": {
        "battery": [f.name for f in DEFAULT_BATTERY],
        "trial_modes": 4,
        "burn_in_fraction": 0.2,
        "n_pi": 100_000,
        "n_bootstrap": 200,
        "ks_level": 0.01,
    },
    "validation": {"n_samples": 100_000, "n_test_functions": 10, "n_shift_checks": 100, "n_report_samples": 2000},
    "output": {"directory": "rse_heat_out", "samples": True},
}

SIMULATION_SECTIONS = ("environment", "grid", "dynamics", "ensemble")
DIVFREE_KEYS = {"modes", "center", "radius", "amplitude"}
MODE_KEYS = {"m", "amplitude", "phase", "profile"}


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


class ConfigError(ConfigurationError):
    """Invalid configuration, with the field path and source line if known."""

    def __init__(self, path: str, message: str, line: int | None = None):
        where = path + (f" (line {line})" if line else "")
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


def _locate(text: str | None, path: str) -> int | None:
    if not text:
        return None
    key = re.findall(r"[A-Za-z_]+", path)
    if not key:
        return None
    pat = re.compile(r'"' + re.escape(key[-1]) + r'"\s*:')
    for i, line in enumerate(text.splitlines(), 1):
        if pat.search(line):
            return i
    return None


def _merge(defaults: dict, given: dict, prefix: str, text: str | None) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        path = f"{prefix}.{k}" if prefix else k
        if k not in defaults:
            raise ConfigError(path, f"unknown key (allowed: {', '.join(sorted(defaults))})", _locate(text, path))
        if isinstance(defaults[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(path, "expected an object", _locate(text, path))
            out[k] = _merge(defaults[k], v, path, text)
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    data: dict
    text: str | None = None

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"invalid JSON: {exc.msg}", exc.lineno) from exc
        if not isinstance(raw, dict):
            raise ConfigError("<document>", "top level must be an object", 1)
        cfg = cls(_merge(DEFAULTS, raw, "", text), text)
        cfg.check()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("<document>", f"cannot read {path}: {exc.strerror}") from exc
        return cls.from_text(text)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return cls.from_text(json.dumps(raw))

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        if seed is None:
            return self
        data = copy.deepcopy(self.data)
        data["ensemble"]["master_seed"] = seed
        cfg = ExperimentConfig(data, self.text)
        cfg.check()
        return cfg

    # -- validation -----------------------------------------------------------

    def _fail(self, path, message):
        raise ConfigError(path, message, _locate(self.text, path))

    def _number(self, section, key, lo=None, hi=None, integer=False, lo_open=False):
        v = self.data[section][key]
        path = f"{section}.{key}"
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
            self._fail(path, f"expected a number, got {v!r}")
        if integer and int(v) != v:
            self._fail(path, f"expected an integer, got {v!r}")
        if lo is not None and (v <= lo if lo_open else v < lo):
            self._fail(path, f"must be {'>' if lo_open else '>='} {lo}, got {v!r}")
        if hi is not None and v > hi:
            self._fail(path, f"must be <= {hi}, got {v!r}")
        return int(v) if integer else float(v)

    def check(self) -> None:
        d = self.data
        self._number("grid", "n_cells", 1, 4096, integer=True)
        self._number("dynamics", "dt", 0, 1, lo_open=True)
        T = self._number("dynamics", "T", 0, lo_open=True)
        if d["dynamics"]["scheme"] not in SCHEMES:
            self._fail("dynamics.scheme", f"expected one of {sorted(SCHEMES)}")
        if d["dynamics"]["checkpoints"] is None:
            self._number("dynamics", "n_checkpoints", 1, integer=True)
        for key in ("n_env", "n_noise"):
            self._number("ensemble", key, 1, integer=True)
        if d["ensemble"]["n_env"] < 2 or d["ensemble"]["n_noise"] < 2:
            self._fail("ensemble.n_env", "n_env and n_noise must both be >= 2 (variances undefined otherwise)")
        self._number("ensemble", "master_seed", 0, 2**64 - 1, integer=True)
        self._number("ensemble", "env_batch", 1, integer=True)
        self._number("analysis", "trial_modes", 0, 64, integer=True)
        self._number("analysis", "burn_in_fraction", 0, 0.9)
        self._number("analysis", "n_pi", 100, integer=True)
        self._number("analysis", "n_bootstrap", 10, integer=True)
        self._number("analysis", "ks_level", 0, 0.5, lo_open=True)
        self._number("validation", "n_samples", 100, integer=True)
        self._number("validation", "n_test_functions", 1, integer=True)
        self._number("validation", "n_shift_checks", 1, integer=True)
        self._number("validation", "n_report_samples", 10, integer=True)
        battery = d["analysis"]["battery"]
        if not isinstance(battery, list) or not battery:
            self._fail("analysis.battery", "expected a non-empty list of functional names")
        for name in battery:
            if name not in BATTERY_BY_NAME:
                self._fail("analysis.battery", f"unknown functional {name!r} (allowed: {sorted(BATTERY_BY_NAME)})")
        if not isinstance(d["output"]["directory"], str):
            self._fail("output.directory", "expected a string")
        if not isinstance(d["output"]["samples"], bool):
            self._fail("output.samples", "expected true or false")
        self.checkpoints  # noqa: B018 - validates the schedule
        self.model  # noqa: B018 - validates the environment
        if self.checkpoints[-1] > T + 1e-12:
            self._fail("dynamics.checkpoints", "checkpoints must not exceed T")

    # -- derived objects ------------------------------------------------------

    @property
    def checkpoints(self) -> tuple[float, ...]:
        dyn = self.data["dynamics"]
        dt, T = float(dyn["dt"]), float(dyn["T"])
        if dyn["checkpoints"] is not None:
            pts = dyn["checkpoints"]
            if not isinstance(pts, list) or not pts:
                self._fail("dynamics.checkpoints", "expected a non-empty list of times")
            times = [float(t) for t in pts]
        else:
            n = int(dyn["n_checkpoints"])
            times = [T * i / n for i in range(n + 1)]
        steps = np.rint(np.asarray(times) / dt)
        if np.any(np.diff(steps) <= 0) or steps[0] < 0:
            self._fail("dynamics.checkpoints", "times must be increasing and at least dt apart")
        return tuple(float(s * dt) for s in steps)

    @property
    def grid(self) -> Grid:
        return Grid(int(self.data["grid"]["n_cells"]))

    @property
    def model(self) -> EnvModel:
        env = self.data["environment"]
        kind = env["kind"]
        if kind not in KINDS:
            self._fail("environment.kind", f"expected one of {list(KINDS)}")
        grid = self.grid
        freqs = env["frequencies"]
        if kind == "quasiperiodic":
            if freqs is None:
                freqs = [1.0, float(np.sqrt(2.0))]
            lists = env["modes"]
            if not isinstance(lists, list) or len(lists) != len(freqs):
                self._fail("environment.modes", "quasi-periodic modes must be one list per frequency")
            modes = tuple(
                tuple(self._mode(m, f"environment.modes[{c}][{j}]") for j, m in enumerate(ms))
                for c, ms in enumerate(lists)
            )
        else:
            if freqs not in (None, [1.0], [1]):
                self._fail("environment.frequencies", f"the {kind} model uses the single frequency 1")
            freqs = [1.0]
            if not isinstance(env["modes"], list):
                self._fail("environment.modes", "expected a list of mode objects")
            if kind == "zero" and env["modes"]:
                self._fail("environment.modes", "the zero model has no modes")
            modes = (tuple(self._mode(m, f"environment.modes[{j}]") for j, m in enumerate(env["modes"])),)
        divfree, imposter = None, False
        spec = env["divfree"]
        if spec is not None:
            if not isinstance(spec, dict):
                self._fail("environment.divfree", "expected an object or null")
            if spec.get("kind") == "imposter_gradient":
                if set(spec) != {"kind"}:
                    self._fail("environment.divfree", "the imposter takes no parameters")
                imposter = True
            else:
                extra = set(spec) - DIVFREE_KEYS
                if extra:
                    self._fail(f"environment.divfree.{sorted(extra)[0]}", f"unknown key (allowed: {sorted(DIVFREE_KEYS)})")
                try:
                    divfree = DivFreeSpec(**spec)
                except (TypeError, ConfigurationError) as exc:
                    self._fail("environment.divfree", str(exc))
                if max(divfree.modes) >= grid.n_cells or min(divfree.modes) < 1 or grid.n_cells < 3:
                    self._fail("environment.divfree.modes", f"modes must lie in 1..{grid.n_cells - 1} (and n_cells >= 3)")
        try:
            model = EnvModel(kind, grid, PotentialSpec(modes, freqs), divfree)
        except ConfigurationError as exc:
            self._fail("environment", str(exc))
        return with_imposter(model) if imposter else model

    def _mode(self, m, path) -> Mode:
        if not isinstance(m, dict):
            self._fail(path, "expected a mode object {m, amplitude, phase, profile}")
        extra = set(m) - MODE_KEYS
        if extra:
            self._fail(f"{path}.{sorted(extra)[0]}", f"unknown key (allowed: {sorted(MODE_KEYS)})")
        if "m" not in m or "amplitude" not in m:
            self._fail(path, "a mode needs 'm' and 'amplitude'")
        try:
            return Mode(**m)
        except ConfigurationError as exc:
            self._fail(path, str(exc))

    @property
    def master_seed(self) -> int:
        return int(self.data["ensemble"]["master_seed"])

    @property
    def ensemble_config(self) -> EnsembleConfig:
        e = self.data["ensemble"]
        return EnsembleConfig(
            int(e["n_env"]),
            int(e["n_noise"]),
            int(self.data["grid"]["n_cells"]),
            float(self.data["dynamics"]["dt"]),
            self.checkpoints,
            self.master_seed,
            self.data["dynamics"]["scheme"],
            env_batch=int(e["env_batch"]),
        )

    @property
    def battery(self):
        return [BATTERY_BY_NAME[n] for n in self.data["analysis"]["battery"]]

    def hashed_part(self) -> dict:
        """Everything that determines the numbers; the output section is excluded."""
        return {k: v for k, v in self.data.items() if k != "output"}

    @property
    def config_hash(self) -> str:
        return _digest(self.hashed_part())

    @property
    def simulation_hash(self) -> str:
        """Digest of the sections that determine the ensemble; analysis settings may change freely."""
        return _digest({k: self.data[k] for k in SIMULATION_SECTIONS})

    def rng(self, stage: int) -> np.random.Generator:
        """Analysis streams, disjoint from the replica streams."""
        ss = np.random.SeedSequence(self.master_seed, spawn_key=(2, stage))
        return np.random.Generator(np.random.Philox(ss))
