"""Experiment orchestration: stages, artifacts, manifest.

A run executes spectral checks, the Monte Carlo ensemble, the
Stein-kernel estimation ladder, and density verification, writing CSV
tables plus a JSON report and manifest into one output directory per run
(named by config-hash prefix and timestamp).  All randomness comes from
counter-based streams, so two runs of the same config produce
byte-identical CSV artifacts.
"""

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

from . import __version__
from .config import config_hash, config_to_dict, validate_config
from .errors import IllPosedModelError
from .malliavin import conditional_norm_diag, discrete_psi
from .solver import ensemble_solve
from .spectral import (
    Operator,
    RieszKernel,
    SpectralModel,
    check_wellposed,
    compute_phi,
    t0_condition,
    variance_profile,
)
from .stein import (
    ThetaQuadrature,
    check_g_bounds,
    decompose_gF,
    density_from_g,
    derivative_norm_samples,
    regress_gF,
    stein_samples,
)
from .verify import cross_validate, fit_sandwich, fit_sandwich_joint, gaussian_ks, kde

FLOAT_FMT = "%.17g"


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------


def write_csv(path, header, columns):
    """Delimited table with a fixed float format (reproducible bytes)."""
    columns = [np.asarray(c) for c in columns]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return FLOAT_FMT % float(v)


def _atomic_json(obj, path):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, default=_json_default)
    os.replace(tmp, path)


def _json_default(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.bool_,)):
        return bool(v)
    raise TypeError(f"not JSON serializable: {type(v)!r}")


def _sha256(path):
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    version: str
    seed: int
    status: str = "ok"
    failed_stage: str | None = None
    error: str | None = None
    resumed: bool = False
    stage_seconds: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)


class _Stages:
    def __init__(self):
        self.seconds = {}

    def run(self, name, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        finally:
            self.seconds[name] = round(time.perf_counter() - t0, 3)


def _prepare_dir(cfg, explicit=None):
    h = config_hash(cfg)
    if explicit is not None:
        run_dir = explicit
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = os.path.join(cfg.output.directory, f"{h[:8]}-{stamp}")
    os.makedirs(run_dir, exist_ok=True)
    return run_dir, h


def _write_manifest(run_dir, manifest):
    inv = {}
    for name in sorted(os.listdir(run_dir)):
        p = os.path.join(run_dir, name)
        if os.path.isfile(p) and name != "manifest.json":
            inv[name] = {"sha256": _sha256(p), "bytes": os.path.getsize(p)}
    manifest.artifacts = inv
    _atomic_json(asdict(manifest), os.path.join(run_dir, "manifest.json"))


# ---------------------------------------------------------------------------
# Scan mode (no simulation, no randomness)
# ---------------------------------------------------------------------------


def run_scan(cfg, run_dir):
    sc = cfg.scan
    rows = []
    for opk in sc.operators:
        for eps in sc.epsilons:
            model = SpectralModel(Operator(opk, sc.dimension), RieszKernel(eps), sc.horizon)
            rep = check_wellposed(model)
            rows.append(
                {
                    "operator": opk,
                    "epsilon": eps,
                    "satisfied": rep.satisfied,
                    "variance_integrable": rep.variance_integrable,
                    "dalang_integrable": rep.dalang_integrable,
                    "tail_exponent": rep.diagnostics["dalang"]["tail_exponent_estimate"],
                }
            )
    write_csv(
        os.path.join(run_dir, "scan.csv"),
        ["operator", "epsilon", "satisfied", "variance_integrable",
         "dalang_integrable", "tail_exponent"],
        [
            [r["operator"] for r in rows],
            [r["epsilon"] for r in rows],
            [r["satisfied"] for r in rows],
            [r["variance_integrable"] for r in rows],
            [r["dalang_integrable"] for r in rows],
            [r["tail_exponent"] for r in rows],
        ],
    )
    report = {"mode": "scan", "dimension": sc.dimension, "rows": rows}
    _atomic_json(report, os.path.join(run_dir, "report.json"))
    return report


# ---------------------------------------------------------------------------
# Check (spectral stage only)
# ---------------------------------------------------------------------------


def check(cfg, out_dir=None):
    """Well-posedness report without any simulation (no random numbers)."""
    validate_config(cfg)
    if cfg.mode == "scan":
        if out_dir is None:
            report_rows = []
            sc = cfg.scan
            for opk in sc.operators:
                for eps in sc.epsilons:
                    model = SpectralModel(
                        Operator(opk, sc.dimension), RieszKernel(eps), sc.horizon
                    )
                    rep = check_wellposed(model)
                    report_rows.append(
                        {"operator": opk, "epsilon": eps, "satisfied": rep.satisfied}
                    )
            return {"mode": "scan", "rows": report_rows}
        run_dir, _ = _prepare_dir(cfg, out_dir)
        return run_scan(cfg, run_dir)

    model = cfg.build_model()
    lattice = cfg.build_lattice()
    drift = cfg.build_drift()
    rep = check_wellposed(model)
    out = {
        "mode": "check",
        "satisfied": rep.satisfied,
        "variance_integrable": rep.variance_integrable,
        "mass_bounded": rep.mass_bounded,
        "dalang_integrable": rep.dalang_integrable,
        "gamma_mass_sup": rep.diagnostics["gamma_mass_sup"],
    }
    if rep.satisfied:
        times = _profile_times(cfg, lattice)
        profile = variance_profile(model, times, rel_tol=cfg.tolerances.quad_rel, check=False)
        t0res = t0_condition(profile, drift.lip)
        out["t0_condition"] = {"t0": t0res.t0, "feasible": t0res.feasible,
                               "k1": t0res.k1, "k2": t0res.k2}
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            write_csv(
                os.path.join(out_dir, "profile.csv"),
                ["t", "phi", "psi"],
                [profile.times, profile.phi, profile.psi],
            )
            _atomic_json(out, os.path.join(out_dir, "check.json"))
    return out


def _profile_times(cfg, lattice):
    dt = lattice.dt
    coarse = {max(1, (lattice.steps * k) // 32) for k in range(1, 33)}
    coarse.update(cfg.scan_steps())
    return np.array(sorted(coarse)) * dt


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def run(cfg, out_dir=None, resume=False):
    """Execute the full pipeline; returns (manifest, run_dir)."""
    validate_config(cfg)
    run_dir, h = _prepare_dir(cfg, out_dir)
    manifest = RunManifest(config_hash=h, version=__version__, seed=cfg.sampling.seed)
    stages = _Stages()
    with open(os.path.join(run_dir, "config.yaml"), "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)
    try:
        if cfg.mode == "scan":
            report = stages.run("scan", lambda: run_scan(cfg, run_dir))
        else:
            report = _run_pipeline(cfg, run_dir, stages, resume, manifest)
    except Exception as exc:  # record the failing stage, then re-raise
        manifest.status = "failed"
        manifest.failed_stage = _last_stage(stages)
        manifest.error = f"{type(exc).__name__}: {exc}"
        manifest.stage_seconds = stages.seconds
        _write_manifest(run_dir, manifest)
        raise
    manifest.stage_seconds = stages.seconds
    _write_manifest(run_dir, manifest)
    return manifest, run_dir


def _last_stage(stages):
    return next(reversed(stages.seconds), None) if stages.seconds else None


def _run_pipeline(cfg, run_dir, stages, resume, manifest):
    model = cfg.build_model()
    lattice = cfg.build_lattice()
    drift = cfg.build_drift()
    tol = cfg.tolerances
    dt = lattice.dt

    # -- spectral stage ----------------------------------------------------
    def spectral_stage():
        rep = check_wellposed(model)
        if not rep.satisfied:
            raise IllPosedModelError(
                "model fails the well-posedness checks; run the check command for details",
                diagnostics=rep,
            )
        times = _profile_times(cfg, lattice)
        profile = variance_profile(model, times, rel_tol=tol.quad_rel, check=False)
        t0res = t0_condition(profile, drift.lip)
        write_csv(
            os.path.join(run_dir, "profile.csv"),
            ["t", "phi", "psi"],
            [profile.times, profile.phi, profile.psi],
        )
        return rep, profile, t0res

    wellposed, profile, t0res = stages.run("spectral", spectral_stage)

    # -- ensemble stage ----------------------------------------------------
    scan_steps = cfg.scan_steps()
    scan_times = [n * dt for n in scan_steps]
    chunk = cfg.sampling.chunk or None

    def ensemble_stage():
        ens = ensemble_solve(
            model, drift, lattice, cfg.sampling.n_paths, cfg.sampling.seed,
            target_times=scan_times, chunk=chunk, workers=cfg.sampling.workers,
            spectral_cutoff=tol.spectral_cutoff,
        )
        write_csv(
            os.path.join(run_dir, "ensemble.csv"),
            ["path"] + [f"f_step{n}" for n in scan_steps],
            [ens.path_indices] + [ens.centered[:, i] for i in range(len(scan_steps))],
        )
        return ens

    ens = stages.run("ensemble", ensemble_stage)

    # -- stein stage ---------------------------------------------------------
    quad = ThetaQuadrature.gauss_laguerre(cfg.stein.theta_nodes)
    cache_path = os.path.join(run_dir, "stein_cache.npz")

    def stein_scan_stage():
        cached = _load_cache(cache_path, manifest.config_hash, scan_steps, dt) if resume else None
        if cached is not None:
            manifest.resumed = True
            return cached
        s = stein_samples(
            ens, drift, model, quad=quad, n_primes=cfg.stein.n_primes,
            target_steps=scan_steps, chunk=chunk, workers=cfg.sampling.workers,
        )
        _save_cache(cache_path, manifest.config_hash, s)
        return s

    samples_scan = stages.run("stein-scan", stein_scan_stage)

    phi_scan = compute_phi(model, scan_times, rel_tol=tol.quad_rel, check=False)

    def ladder_stage():
        rows = []
        stable_steps = []
        for i, n in enumerate(scan_steps):
            g = regress_gF(
                samples_scan.f_values[:, i], samples_scan.y_values[:, i], n * dt,
                n_primes=cfg.stein.n_primes, z_points=cfg.stein.z_points,
                n_boot=cfg.stein.bootstrap, seed=cfg.sampling.seed,
                min_local=cfg.stein.min_local,
            )
            b = check_g_bounds(g, phi_scan[i])
            stable = bool(
                b.passed and np.isfinite(b.c2_hat)
                and b.c2_hat / b.c1_hat < cfg.ladder.stability_ratio
            )
            rows.append((n, n * dt, b.c1_hat, b.c2_hat, b.passed, stable))
            if stable:
                stable_steps.append(n)
        write_csv(
            os.path.join(run_dir, "scan_bounds.csv"),
            ["step", "t", "c1_hat", "c2_hat", "passed", "stable"],
            list(map(list, zip(*rows))),
        )
        if stable_steps:
            n0 = max(stable_steps)
            n0 -= n0 % 8  # keep the t0/8 ladder on the grid
            n0 = max(n0, 8)
            empirical = True
        else:
            n0 = max(scan_steps[0] - scan_steps[0] % 8, 8)
            empirical = False
        verify_steps = sorted({max(1, n0 // 8), max(1, n0 // 4), max(1, n0 // 2)})
        return rows, n0, empirical, tuple(verify_steps)

    scan_rows, t0_step, t0_found, verify_steps = stages.run("ladder", ladder_stage)

    def stein_verify_stage():
        if set(verify_steps) <= set(scan_steps):
            idx = [scan_steps.index(n) for n in verify_steps]
            import dataclasses

            return dataclasses.replace(
                samples_scan,
                target_steps=tuple(verify_steps),
                target_times=np.asarray(verify_steps) * dt,
                f_values=samples_scan.f_values[:, idx],
                y_values=samples_scan.y_values[:, idx],
                a1=samples_scan.a1[:, idx],
                a2=samples_scan.a2[:, idx],
                a3=samples_scan.a3[:, idx],
                phi_disc=samples_scan.phi_disc[idx],
            )
        return stein_samples(
            ens, drift, model, quad=quad, n_primes=cfg.stein.n_primes,
            target_steps=verify_steps, chunk=chunk, workers=cfg.sampling.workers,
        )

    samples_v = stages.run("stein-verify", stein_verify_stage)
    verify_times = [n * dt for n in verify_steps]
    phi_verify = compute_phi(model, verify_times, rel_tol=tol.quad_rel, check=False)

    # -- diagnostics stage ---------------------------------------------------
    def diagnostics_stage():
        n_r = cfg.diagnostics.r_points
        r_steps = sorted({max(1, (t0_step * k) // n_r) for k in range(1, n_r + 1)})
        own, shifted = derivative_norm_samples(
            ens, drift, model, r_steps, thetas=cfg.diagnostics.theta_probe, chunk=chunk,
        )
        phi_t0 = float(compute_phi(model, [t0_step * dt], rel_tol=tol.quad_rel, check=False)[0])
        f_cond = ens.u_ref[:, t0_step] - ens.mean_series[t0_step]
        tables = {"own": conditional_norm_diag(
            own, np.asarray(r_steps) * dt, f_cond, phi_t0,
            n_bins=cfg.diagnostics.bins, min_count=cfg.diagnostics.min_bin_count,
        )}
        for th, arr in shifted.items():
            tables[f"theta={th:g}"] = conditional_norm_diag(
                arr, np.asarray(r_steps) * dt, f_cond, phi_t0,
                n_bins=cfg.diagnostics.bins, min_count=cfg.diagnostics.min_bin_count,
            )
        cols = {"kind": [], "r_time": [], "bin": [], "count": [], "mean_norm": [],
                "ratio": [], "included": []}
        for kind, tab in tables.items():
            for b in range(tab.table.shape[0]):
                for j, rt in enumerate(tab.r_times):
                    cols["kind"].append(kind)
                    cols["r_time"].append(rt)
                    cols["bin"].append(b)
                    cols["count"].append(int(tab.counts[b]))
                    cols["mean_norm"].append(tab.table[b, j])
                    cols["ratio"].append(tab.ratios[b, j])
                    cols["included"].append(bool(tab.included[b]))
        write_csv(
            os.path.join(run_dir, "norm_diagnostics.csv"),
            list(cols.keys()), list(cols.values()),
        )
        return tables, phi_t0

    norm_tables, phi_t0 = stages.run("diagnostics", diagnostics_stage)

    # -- verification stage ---------------------------------------------------
    def verify_stage():
        entries = []
        joint_inputs = []
        for i, n in enumerate(verify_steps):
            t = n * dt
            F = samples_v.f_values[:, i]
            phi_t = float(phi_verify[i])
            m_hat = float(ens.mean_series[n])
            e_abs = float(np.abs(F).mean())
            g = regress_gF(
                F, samples_v.y_values[:, i], t,
                n_primes=cfg.stein.n_primes, z_points=cfg.stein.z_points,
                n_boot=cfg.stein.bootstrap, seed=cfg.sampling.seed,
                min_local=cfg.stein.min_local,
            )
            write_csv(
                os.path.join(run_dir, f"gf_step{n}.csv"),
                ["z", "value", "stderr"],
                [g.z, g.values, g.stderr],
            )
            dec = decompose_gF(samples_v, target_index=i)
            entry = {
                "preset": cfg.preset,
                "t": t,
                "phi": phi_t,
                "m": m_hat,
                "g_bandwidth": g.bandwidth,
                "decomposition": {
                    "phi_disc": dec.phi_disc,
                    "a1": dec.a1_mean, "a2": dec.a2_mean, "a3": dec.a3_mean,
                    "residual_mean": dec.residual_mean,
                    "residual_se": dec.residual_se,
                },
            }
            q_lo, q_hi = np.quantile(F, [0.005, 0.995])
            try:
                nv = density_from_g(g, e_abs)
                write_csv(
                    os.path.join(run_dir, f"nv_step{n}.csv"),
                    ["z", "value", "stderr"],
                    [nv.z, nv.rho, np.zeros_like(nv.rho)],
                )
                fit = fit_sandwich(nv, 0.0, phi_t, e_abs, z_range=(q_lo, q_hi))
                entry.update(
                    C1=fit.c1, C2=fit.c2, feasible=fit.feasible,
                    nv_normalization=nv.normalization,
                )
                joint_inputs.append((nv, 0.0, phi_t, e_abs, (q_lo, q_hi)))
            except ValueError as exc:
                nv = None
                entry.update(C1=None, C2=None, feasible=False, nv_error=str(exc))
            ksr = gaussian_ks(F, 0.0, phi_t, slack=tol.ks_slack)
            entry["KS"] = ksr.statistic
            entry["KS_verdict"] = ksr.verdict
            if F.size >= 1000:
                kd = kde(F, 0.0, phi_t)
                write_csv(
                    os.path.join(run_dir, f"kde_step{n}.csv"),
                    ["z", "value", "stderr"],
                    [kd.z, kd.p, np.zeros_like(kd.p)],
                )
                if nv is not None:
                    cv = cross_validate(nv, kd)
                    entry["L1_cross"] = cv.l1_distance
            else:
                entry["L1_cross"] = None
            entries.append(entry)

        joint = None
        if len(joint_inputs) == len(verify_steps) and joint_inputs:
            jf = fit_sandwich_joint(
                [ji[0] for ji in joint_inputs],
                [ji[1] for ji in joint_inputs],
                [ji[2] for ji in joint_inputs],
                [ji[3] for ji in joint_inputs],
                z_ranges=[ji[4] for ji in joint_inputs],
            )
            joint = {"C1": jf.c1, "C2": jf.c2, "feasible": jf.feasible,
                     "ratio": (jf.c2 / jf.c1) if jf.feasible else None}
        return entries, joint

    entries, joint = stages.run("verify", verify_stage)

    # -- metadata + report -----------------------------------------------------
    meta = {
        "seed": cfg.sampling.seed,
        "n_paths": cfg.sampling.n_paths,
        "lattice": asdict(cfg.lattice),
        "model": asdict(cfg.model),
        "drift": asdict(cfg.drift),
        "quadrature": {"kind": "gauss-laguerre", "nodes": cfg.stein.theta_nodes},
        "n_primes": cfg.stein.n_primes,
    }
    with open(os.path.join(run_dir, "metadata.yaml"), "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=True)

    report = {
        "preset": cfg.preset,
        "wellposed": wellposed.satisfied,
        "t0_condition": {"t0": t0res.t0, "feasible": t0res.feasible,
                         "k1": t0res.k1, "k2": t0res.k2},
        "t0_empirical": t0_step * dt,
        "t0_empirical_found": t0_found,
        "scan": [
            {"step": r[0], "t": r[1], "c1_hat": r[2], "c2_hat": r[3],
             "passed": bool(r[4]), "stable": bool(r[5])}
            for r in scan_rows
        ],
        "targets": entries,
        "joint_sandwich": joint,
        "norm_diag_sup_ratio": {k: v.sup_ratio for k, v in norm_tables.items()},
        "gronwall_ratio_bound": math.exp(
            drift.lip * discrete_psi(model.operator, lattice, t0_step)
        ),
        "n_failed_paths": ens.n_failed,
    }
    _atomic_json(report, os.path.join(run_dir, "report.json"))
    return report


def _save_cache(path, h, samples):
    np.savez_compressed(
        path,
        config_hash=h,
        target_steps=np.asarray(samples.target_steps),
        f_values=samples.f_values,
        y_values=samples.y_values,
        a1=samples.a1,
        a2=samples.a2,
        a3=samples.a3,
        phi_disc=samples.phi_disc,
        n_primes=samples.n_primes,
        seed=samples.seed,
    )


def _load_cache(path, h, target_steps):
    if not os.path.exists(path):
        return None
    from .stein import SteinSamples

    with np.load(path, allow_pickle=False) as z:
        if str(z["config_hash"]) != h:
            return None
        steps = tuple(int(x) for x in z["target_steps"])
        if steps != tuple(target_steps):
            return None
        return SteinSamples(
            target_steps=steps,
            target_times=np.asarray(steps, dtype=float),
            f_values=z["f_values"],
            y_values=z["y_values"],
            a1=z["a1"],
            a2=z["a2"],
            a3=z["a3"],
            phi_disc=z["phi_disc"],
            n_paths=z["f_values"].shape[0],
            n_primes=int(z["n_primes"]),
            seed=int(z["seed"]),
        )
