"""Command line driver: ``rse-heat {validate,simulate,analyze,full}``.

Exit codes: 0 all gates pass, 1 a gate failed, 2 usage or configuration
error, 3 numerical blow-up, 4 stale inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ExperimentConfig
from .diffusivity import (
    DiffusivityReport,
    estimate_a2_slope,
    lower_bound_C,
    sample_pi,
    variational_bound,
)
from .ensemble import EnsembleStats, clt_l1_metric, concentration_stats, ks_gaussianity, run_ensemble
from .environment import (
    assumption_report,
    exponential_battery,
    sample_env,
    verify_divergence_free,
    verify_shift_covariance,
)
from .errors import BlowUpError, ConfigurationError, StaleInputError
from .lattice import sample_wiener_shape

log = logging.getLogger("rse_heat")

EXIT_OK, EXIT_GATE, EXIT_USAGE, EXIT_BLOWUP, EXIT_STALE = 0, 1, 2, 3, 4
SHIFT_TOL = 1e-10
KS_MIN_SAMPLES = 200
SIMULATE_FILES = ("checkpoints.csv", "samples.csv", "run_meta.json", "ensemble.npz")


def _fmt(x) -> str:
    return repr(float(x))


def _header(cfg: ExperimentConfig) -> str:
    return f"# config_hash={cfg.config_hash}, master_seed={cfg.master_seed}\n"


def _write_csv(path: Path, cfg: ExperimentConfig, columns, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(_header(cfg))
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(str(v) if isinstance(v, (int, np.integer)) else _fmt(v) for v in row))
            fh.write("\n")


def _write_json(path: Path, cfg: ExperimentConfig, payload: dict) -> None:
    doc = {"config_hash": cfg.config_hash, "master_seed": cfg.master_seed, **payload}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


# -- validate --------------------------------------------------------------------


def cmd_validate(cfg: ExperimentConfig, out: Path) -> bool:
    model = cfg.model
    val = cfg.data["validation"]
    rng = cfg.rng(0)
    report = assumption_report(model, int(val["n_report_samples"]), rng)
    sigma = sample_env(model, rng)
    battery = exponential_battery(model.grid, int(val["n_test_functions"]), rng)
    div = verify_divergence_free(model, sigma, battery, int(val["n_samples"]), rng)
    worst_shift = 0.0
    for _ in range(int(val["n_shift_checks"])):
        s = sample_env(model, rng)
        u = sample_wiener_shape(model.grid, rng) + rng.uniform(-2, 2)
        worst_shift = max(worst_shift, verify_shift_covariance(model, s, u, rng.uniform(-3, 3)))
    gates = {
        "assumptions": report.passed,
        "divergence_free": all(d.passes(3.0) for d in div),
        "shift_covariance": worst_shift <= SHIFT_TOL,
    }
    _write_json(
        out / "validation.json",
        cfg,
        {
            "assumptions": report.to_dict(),
            "divergence": [
                {"estimate": d.estimate, "se": d.se, "pass": d.passes(3.0)} for d in div
            ],
            "divergence_sigma": sigma,
            "shift_covariance_max": worst_shift,
            "shift_covariance_tol": SHIFT_TOL,
            "gates": gates,
            "passed": all(gates.values()),
        },
    )
    for name, ok in gates.items():
        log.info("validate %-17s %s", name, "pass" if ok else "FAIL")
    return all(gates.values())


# -- simulate --------------------------------------------------------------------


def _checkpoint_rows(stats: EnsembleStats):
    times = stats.times
    var = stats.var_mean_mode()
    centered = (stats.mean_mode - stats.pooled_mean(stats.mean_mode)) ** 2
    var_se = stats.cluster_se(centered)
    cells = stats.fluct_var_cells()
    h2 = stats.fluct_h_norm_sq()
    for k, t in enumerate(times):
        yield [t, var[k], var_se[k], *cells[k], h2[k], stats.n_env, stats.n_noise]


def cmd_simulate(cfg: ExperimentConfig, out: Path, workers: int | None) -> None:
    model = cfg.model
    ens = cfg.ensemble_config
    written = []
    try:
        stats = run_ensemble(ens, model, workers)
    except BlowUpError:
        for name in SIMULATE_FILES:
            (out / name).unlink(missing_ok=True)
        raise
    try:
        cols = ["t", "var_mean_mode", "var_mean_mode_se", "fluct_var_cell_01", "fluct_var_cell_05",
                "fluct_var_cell_09", "fluct_h_norm_sq", "n_env", "n_noise"]
        path = out / "checkpoints.csv"
        written.append(path)
        _write_csv(path, cfg, cols, _checkpoint_rows(stats))
        if cfg.data["output"]["samples"]:
            path = out / "samples.csv"
            written.append(path)
            _write_csv(
                path,
                cfg,
                ["t", "env_index", "noise_index", "mean_mode"],
                (
                    [t, e, w, stats.mean_mode[e, w, k]]
                    for k, t in enumerate(stats.times)
                    for e in range(stats.n_env)
                    for w in range(stats.n_noise)
                ),
            )
        path = out / "ensemble.npz"
        written.append(path)
        with open(path, "wb") as fh:
            np.savez(
                fh,
                times=stats.times,
                mean_mode=stats.mean_mode,
                fluct_sq=stats.fluct_sq,
                probe_fluct=stats.probe_fluct,
                probe_x=stats.probe_x,
                sigma=stats.sigma,
                config_hash=np.array(cfg.config_hash),
                simulation_hash=np.array(cfg.simulation_hash),
            )
        path = out / "run_meta.json"
        written.append(path)
        _write_json(
            path,
            cfg,
            {
                "simulation_hash": cfg.simulation_hash,
                "config": cfg.hashed_part(),
                "ensemble": ens.to_dict(),
                "versions": {
                    "rse_heat": __version__,
                    "numpy": np.__version__,
                    "scipy": scipy.__version__,
                    "python": platform.python_version(),
                },
            },
        )
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    log.info("simulate: %d x %d replicas, T = %g", ens.n_env, ens.n_noise, ens.T)


# -- analyze ---------------------------------------------------------------------


def _load_stats(cfg: ExperimentConfig, out: Path) -> EnsembleStats:
    meta_path, npz_path = out / "run_meta.json", out / "ensemble.npz"
    if not meta_path.exists() or not npz_path.exists():
        raise StaleInputError(f"no simulation outputs in {out}; run 'simulate' first")
    meta = json.loads(meta_path.read_text())
    with np.load(npz_path) as z:
        stored = str(z["simulation_hash"]) if "simulation_hash" in z.files else None
    # only the simulation-determining sections must match
    for what, h in (("run_meta.json", meta.get("simulation_hash")), ("ensemble.npz", stored)):
        if h != cfg.simulation_hash:
            raise StaleInputError(
                f"{what} was produced by simulation settings {h}, current settings are {cfg.simulation_hash}"
            )
    return EnsembleStats.load(npz_path, cfg.ensemble_config)


def cmd_analyze(cfg: ExperimentConfig, out: Path) -> bool:
    stats = _load_stats(cfg, out)
    model = cfg.model
    an = cfg.data["analysis"]
    est = estimate_a2_slope(stats, float(an["burn_in_fraction"]), int(an["n_bootstrap"]), cfg.rng(1))
    pi = sample_pi(model, int(an["n_pi"]), cfg.rng(2))
    C, C_se = lower_bound_C(model, pi)
    var_bound = None
    gates = {}
    if not model.has_drift:
        vb = variational_bound(model, int(an["trial_modes"]), pi)
        var_bound = vb.bound
        gates["variational_dominance"] = est.a2_hat <= vb.bound + 3 * est.se
    report = DiffusivityReport(
        est.a2_hat,
        est.se,
        C,
        C_se,
        1.0,
        var_bound,
        {
            "estimator": "weighted least squares slope of E[mean_mode^2] vs t, with intercept",
            "burn_in_fraction": float(an["burn_in_fraction"]),
            "n_bootstrap": int(an["n_bootstrap"]),
            "intercept": est.intercept,
            "n_pi": int(an["n_pi"]),
            "Z_hat": pi.Z_hat,
            "Z_se": pi.Z_se,
            "trial_modes": int(an["trial_modes"]),
            "scheme": cfg.data["dynamics"]["scheme"],
        },
    )
    gates["sandwich"] = report.sandwich_ok(3.0)

    a = float(np.sqrt(max(est.a2_hat, 1e-12)))
    battery = cfg.battery
    met = clt_l1_metric(stats, battery, a)
    _write_csv(
        out / "clt_metric.csv",
        cfg,
        ["t", *met.names, "combined", *[f"floor_{n}" for n in met.names]],
        ([t, *met.values[k], met.combined[k], *met.noise_floor[k]] for k, t in enumerate(met.times)),
    )
    nontrivial = [j for j, f in enumerate(battery) if f.name != "one"]
    gates["metric_finite_positive"] = bool(np.all(np.isfinite(met.values)) and np.all(met.values[:, nontrivial] > 0))

    last = int(np.flatnonzero(stats.times > 0)[-1])
    ks_meta = {"t": float(stats.times[last]), "a": a, "level": float(an["ks_level"])}
    if stats.n_env * stats.n_noise >= KS_MIN_SAMPLES:
        ks = ks_gaussianity(stats.scaled_mean_mode(last), a, float(an["ks_level"]))
        gates["ks"] = ks.passed
        _write_json(out / "ks.json", cfg, {**ks.to_dict(), **ks_meta})
    else:
        reason = f"{stats.n_env * stats.n_noise} samples, at least {KS_MIN_SAMPLES} needed"
        _write_json(out / "ks.json", cfg, {"skipped": reason, "pass": None, **ks_meta})

    plot = out / "plotdata"
    plot.mkdir(exist_ok=True)
    var = stats.var_mean_mode()
    _write_csv(plot / "var_mean_mode.csv", cfg, ["t", "var_mean_mode", "a2_hat_times_t"],
               ([t, var[k], est.a2_hat * t] for k, t in enumerate(stats.times)))
    _write_csv(plot / "clt_metric.csv", cfg, ["t", "combined"], ([t, met.combined[k]] for k, t in enumerate(met.times)))
    conc = None
    try:
        conc = concentration_stats(stats)
    except ConfigurationError:
        pass
    _write_csv(plot / "fluctuation.csv", cfg, ["t", "sup_cell_fluct_var", "fluct_h_norm_sq"],
               ([t, stats.fluct_var_cells()[k].max(initial=0.0), stats.fluct_h_norm_sq()[k]]
                for k, t in enumerate(stats.times)))

    extra = {"gates": gates, "passed": all(gates.values())}
    if conc is not None:
        extra["concentration"] = {
            "t1": conc.t1, "t2": conc.t2, "fluct_ratio": conc.fluct_ratio, "mean_ratio": conc.mean_ratio
        }
    doc = json.loads(report.to_json(**extra))
    _write_json(out / "diffusivity.json", cfg, doc)
    log.info("analyze: a2_hat = %.4f +- %.4f, C = %.4f, variational = %s", est.a2_hat, est.se, C,
             "n/a" if var_bound is None else f"{var_bound:.4f}")
    for name, ok in gates.items():
        log.info("analyze %-23s %s", name, "pass" if ok else "FAIL")
    return all(gates.values())


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rse-heat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("validate", "check the environment assumptions"),
        ("simulate", "run the replica ensemble"),
        ("analyze", "estimate a^2, bounds and CLT diagnostics from a finished run"),
        ("full", "validate, simulate and analyze"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, type=Path, help="JSON experiment file")
        sp.add_argument("--out", type=Path, default=None, help="output directory (overrides output.directory)")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides ensemble.master_seed)")
        sp.add_argument("--workers", type=int, default=None, help="worker processes (default: $RSE_HEAT_WORKERS or 1)")
        sp.add_argument("--skip-validate", action="store_true", help="do not run the validation gate first")
        sp.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = ExperimentConfig.from_file(args.config).with_seed(args.seed)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = args.out if args.out is not None else Path(cfg.data["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        ok = True
        if args.command == "validate" or (args.command in ("simulate", "full") and not args.skip_validate):
            ok = cmd_validate(cfg, out)
            if not ok:
                print("validation failed; see validation.json", file=sys.stderr)
                return EXIT_GATE
        if args.command in ("simulate", "full"):
            cmd_simulate(cfg, out, args.workers)
        if args.command in ("analyze", "full"):
            ok = cmd_analyze(cfg, out) and ok
    except BlowUpError as exc:
        print(f"numerical blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except StaleInputError as exc:
        print(f"stale input: {exc}", file=sys.stderr)
        return EXIT_STALE
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if ok else EXIT_GATE


if __name__ == "__main__":
    sys.exit(main())
