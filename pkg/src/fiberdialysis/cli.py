"""Batch command-line surface for the forward/inverse pipeline.

Every command writes its outputs (plus a manifest with the config hash,
seeds and arguments) under the chosen output directory and nowhere else;
re-running a command with the same inputs reproduces the bundle byte for
byte.  Exit codes: 0 ok, 1 solver non-convergence, 2 config/parse error,
3 bundle version mismatch, 4 incomplete bundle.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .cohort import (CohortTable, NoiseSpec, add_measurement_noise, derive_seed,
                     generate_cohort, load_records, make_reference_targets, save_records)
from .config import RunConfig, load_patient_csv, packaged_data_path
from .exceptions import ConfigurationError, FiberDialysisError, NewtonError, UsageError
from .inverse import (ForwardContext, MultiCostConfig, context_from_profile,
                      default_weights, identify_multi, identify_single,
                      landscape_scan, sensitivity_study)
from .transport import export_field_csv

EXIT_OK = 0
EXIT_SOLVER = 1
EXIT_CONFIG = 2
EXIT_BUNDLE_MISMATCH = 3
EXIT_INCOMPLETE = 4

BUNDLE_VERSION = 1


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, (int, float, np.floating))
                     else str(v) for v in row) + "\n")


def _parse_pair(text, name):
    parts = [p for p in text.split(",") if p.strip() != ""]
    if len(parts) != 2:
        raise ConfigurationError(f"{name} must be two comma-separated numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.defaults()
    if getattr(args, "jobs", None):
        cfg.options["jobs"] = int(args.jobs)
    return cfg


_OPEN_CONTEXTS = []


def _context(cfg: RunConfig, mesh_res=None) -> ForwardContext:
    ctx = context_from_profile(cfg.profile, jobs=int(cfg.options["jobs"]),
                               mesh_res=mesh_res or cfg.mesh_resolution())
    _OPEN_CONTEXTS.append(ctx)
    return ctx


def _close_contexts():
    while _OPEN_CONTEXTS:
        _OPEN_CONTEXTS.pop().close()


def _outdir(args):
    out = args.out
    os.makedirs(out, exist_ok=True)
    return out


def _prepare_patient(ctx, cfg, path):
    rec = load_patient_csv(path, cfg.profile.base_hydraulics())
    if "Q_uf" in rec.extras:
        rec = ctx.calibrate_record(rec)
    else:
        # shipped pressures act as this patient's frozen calibration
        rec.calibrated = True
    return rec


def _check_bundle(path, needed):
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isdir(path) or not os.path.exists(manifest_path):
        raise FileNotFoundError(f"bundle {path} has no manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("bundle_version") != BUNDLE_VERSION:
        raise _BundleMismatch(
            f"bundle {path} has version {manifest.get('bundle_version')}, "
            f"expected {BUNDLE_VERSION}")
    missing = [n for n in needed if not os.path.exists(os.path.join(path, n))]
    if missing:
        raise FileNotFoundError(f"bundle {path} is missing {', '.join(missing)}")
    return manifest


class _BundleMismatch(FiberDialysisError):
    pass


# -- commands ---------------------------------------------------------------------

def cmd_forward(args) -> int:
    cfg = _load_config(args)
    ctx = _context(cfg)
    rec = _prepare_patient(ctx, cfg, args.patient)
    beta = _parse_pair(args.beta, "--beta")
    out = _outdir(args)
    try:
        outlet, field, result = ctx.forward_detailed(rec, np.asarray(beta))
    except NewtonError as exc:
        _write_json(os.path.join(out, "newton_failure.json"),
                    {"patient": rec.id, "beta": list(beta),
                     "error": str(exc), "trace": [float(v) for v in exc.trace]})
        print(f"forward solve failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    export_field_csv(field, ctx.mesh, os.path.join(out, "field.csv"))
    _write_csv(os.path.join(out, "newton_trace.csv"), ["n", "update_norm"],
               list(enumerate(result.trace)))
    _write_json(os.path.join(out, "outlet.json"),
                {"patient": rec.id, "beta": list(beta),
                 "outlet": [float(v) for v in outlet],
                 "newton_solves": result.n_solves})
    _write_json(os.path.join(out, "manifest.json"),
                cfg.manifest_dict("forward", {"patient": os.path.basename(args.patient),
                                              "beta": list(beta)}))
    print(f"outlet: {[round(float(v), 6) for v in outlet]}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    ns = int(args.ns) if args.ns else int(cfg.options["ns"])
    seed = int(args.seed) if args.seed is not None else int(cfg.options["seed"])
    beta_star = _parse_pair(args.beta_star, "--beta-star") if args.beta_star \
        else tuple(cfg.options["beta_star"])
    real_path = args.real or str(packaged_data_path("sample_cohort.csv"))
    real = CohortTable.from_csv(real_path)
    table = generate_cohort(real, ns=ns, seed=seed)
    ctx = _context(cfg)
    records = make_reference_targets(table, ctx, np.asarray(beta_star))
    out = _outdir(args)
    table.to_csv(os.path.join(out, "cohort.csv"))
    save_records(records, os.path.join(out, "targets.json"))
    _write_json(os.path.join(out, "manifest.json"),
                cfg.manifest_dict("synth", {"ns": ns, "seed": seed,
                                            "beta_star": list(beta_star),
                                            "real": os.path.basename(real_path),
                                            "n_valid": len(records)}))
    print(f"synthesized {ns} patients ({len(records)} valid) at beta*={list(beta_star)}")
    return EXIT_OK


def _load_targets(args, needed=("targets.json",)):
    import hashlib
    manifest = _check_bundle(args.targets, needed)
    targets_path = os.path.join(args.targets, "targets.json")
    records = load_records(targets_path)
    with open(targets_path, "rb") as fh:
        manifest["targets_sha256"] = hashlib.sha256(fh.read()).hexdigest()
    return manifest, records


def _select_patients(records, spec_text):
    if not spec_text:
        return records
    wanted = [s.strip() for s in spec_text.split(",") if s.strip()]
    by_id = {r.id: r for r in records}
    missing = [w for w in wanted if w not in by_id]
    if missing:
        raise UsageError(f"unknown patient ids: {', '.join(missing)}")
    return [by_id[w] for w in wanted]


def _cost_config(cfg: RunConfig, records, bounds_text=None):
    bounds = tuple(tuple(b) for b in cfg.options["bounds"])
    if bounds_text:
        parts = [float(v) for v in bounds_text.split(",")]
        if len(parts) != 4:
            raise ConfigurationError("--bounds must be lo1,hi1,lo2,hi2")
        bounds = ((parts[0], parts[1]), (parts[2], parts[3]))
    return MultiCostConfig(weights=default_weights(records),
                           lam=float(cfg.options["lambda"]),
                           bounds=bounds,
                           penalty_scale=float(cfg.options["penalty_scale"]),
                           failure_value=float(cfg.options["failure_value"]))


def cmd_invert_single(args) -> int:
    cfg = _load_config(args)
    ctx = _context(cfg)
    rec = _prepare_patient(ctx, cfg, args.patient)
    if rec.observed_outlet is None:
        raise ConfigurationError(f"{args.patient}: needs an observed_outlet_blood row")
    beta0 = _parse_pair(args.beta0, "--beta0") if args.beta0 else (0.2, 0.2)
    result = identify_single(rec, np.asarray(beta0), ctx,
                             initial_step=float(cfg.options["pg_initial_step"]),
                             tol=float(cfg.options["pg_tol"]),
                             n_max=int(cfg.options["pg_max_iter"]),
                             fd_step=float(cfg.options["fd_step"]))
    out = _outdir(args)
    _write_csv(os.path.join(out, "descent_trace.csv"),
               ["k", "d_ca", "d_ci", "J"],
               [(k, p[0], p[1], v) for k, (p, v) in enumerate(result.trace)])
    _write_json(os.path.join(out, "result.json"),
                {"best_point": [float(v) for v in result.best_point],
                 "best_value": float(result.best_value),
                 "initial_value": float(result.trace[0][1]),
                 "n_evals": result.n_evals,
                 "converged": result.converged,
                 "stop_reason": result.stop_reason})
    _write_json(os.path.join(out, "manifest.json"),
                cfg.manifest_dict("invert-single",
                                  {"patient": os.path.basename(args.patient),
                                   "beta0": list(beta0)}))
    print(f"best beta = {[round(float(v), 6) for v in result.best_point]}, "
          f"J {result.trace[0][1]:.4g} -> {result.best_value:.4g}")
    return EXIT_OK


def cmd_invert_multi(args) -> int:
    cfg = _load_config(args)
    manifest, records = _load_targets(args)
    patients = _select_patients(records, args.patients)
    if args.noise_sigma:
        spec = NoiseSpec(sigma=float(args.noise_sigma),
                         clip_factor=float(cfg.options["clip_factor"]),
                         seed=derive_seed(int(cfg.options["seed"]), "noise", args.noise_sigma))
        patients = add_measurement_noise(patients, spec)
    mcfg = _cost_config(cfg, patients, args.bounds)
    init = _parse_pair(args.init, "--init") if args.init else (0.3, 0.8)
    ctx = _context(cfg)
    result = identify_multi(patients, np.asarray(init), mcfg, ctx,
                            tol=float(cfg.options["powell_tol"]),
                            max_iter=int(cfg.options["powell_max_iter"]))
    out = _outdir(args)
    beta_star = manifest.get("args", {}).get("beta_star")
    rows = []
    for k, (p, v) in enumerate(result.trace):
        err = float(np.linalg.norm(np.asarray(p) - np.asarray(beta_star))) \
            if beta_star else ""
        rows.append((k, p[0], p[1], v, err))
    _write_csv(os.path.join(out, "powell_trace.csv"),
               ["k", "d_ca", "d_ci", "J", "err_to_truth"], rows)
    payload = {"best_point": [float(v) for v in result.best_point],
               "best_value": float(result.best_value),
               "n_evals": result.n_evals,
               "converged": result.converged,
               "stop_reason": result.stop_reason,
               "patients": [p.id for p in patients]}
    if beta_star:
        payload["beta_star"] = beta_star
        payload["max_abs_error"] = float(
            np.max(np.abs(result.best_point - np.asarray(beta_star))))
    _write_json(os.path.join(out, "result.json"), payload)
    _write_json(os.path.join(out, "manifest.json"),
                cfg.manifest_dict("invert-multi",
                                  {"targets": os.path.basename(os.path.normpath(args.targets)),
                                   "targets_sha256": manifest["targets_sha256"],
                                   "patients": [p.id for p in patients],
                                   "init": list(init),
                                   "bounds": [list(b) for b in mcfg.bounds],
                                   "noise_sigma": args.noise_sigma or 0.0}))
    print(f"recovered beta = {[round(float(v), 6) for v in result.best_point]} "
          f"(J = {result.best_value:.4g}, {result.n_evals} evaluations)")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _load_config(args)
    manifest, records = _load_targets(args)
    patients = _select_patients(records, args.patients)
    mcfg = _cost_config(cfg, patients, args.bounds)
    if args.box:
        parts = [float(v) for v in args.box.split(",")]
        if len(parts) != 4:
            raise ConfigurationError("--box must be lo1,hi1,lo2,hi2")
        box = ((parts[0], parts[1]), (parts[2], parts[3]))
    else:
        box = ((0.02, 3.0), (0.02, 3.0)) if args.clinical else ((0.02, 1.0), (0.02, 1.0))
    if args.n:
        ns = [int(v) for v in args.n.split(",")]
        n1, n2 = (ns[0], ns[0]) if len(ns) == 1 else (ns[0], ns[1])
    else:
        n1 = n2 = 31
    ctx = _context(cfg)
    grid = landscape_scan(patients, box, n1, n2, mcfg, ctx)
    out = _outdir(args)
    _write_csv(os.path.join(out, "landscape.csv"),
               ["d_ca", "d_ci", "J", "log10_J"], grid.rows())
    payload = {"argmin": [float(v) for v in grid.argmin_point],
               "argmin_index": list(grid.argmin_index),
               "box": [list(b) for b in box], "n": [n1, n2],
               "n_evals": grid.n_evals,
               "patients": [p.id for p in patients]}
    if args.refine_box:
        parts = [float(v) for v in args.refine_box.split(",")]
        if len(parts) != 4:
            raise ConfigurationError("--refine-box must be lo1,hi1,lo2,hi2")
        rbox = ((parts[0], parts[1]), (parts[2], parts[3]))
        refined = landscape_scan(patients, rbox, n1, n2, mcfg, ctx)
        _write_csv(os.path.join(out, "landscape_refined.csv"),
                   ["d_ca", "d_ci", "J", "log10_J"], refined.rows())
        payload["refined_argmin"] = [float(v) for v in refined.argmin_point]
        payload["refine_box"] = [list(b) for b in rbox]
    _write_json(os.path.join(out, "grid_result.json"), payload)
    _write_json(os.path.join(out, "manifest.json"),
                cfg.manifest_dict("grid", {"box": [list(b) for b in box],
                                           "n": [n1, n2],
                                           "targets_sha256": manifest["targets_sha256"],
                                           "patients": [p.id for p in patients],
                                           "refine_box": args.refine_box or ""}))
    print(f"grid argmin = {[round(float(v), 6) for v in grid.argmin_point]}")
    return EXIT_OK


def cmd_noise_study(args) -> int:
    cfg = _load_config(args)
    manifest, records = _load_targets(args)
    sigmas = [float(s) for s in (args.sigmas.split(",") if args.sigmas
                                 else cfg.options["noise_sigmas"])]
    size = int(args.subcohort_size)
    n_sub = int(args.n_subcohorts)
    if len(records) < size * n_sub:
        raise ConfigurationError(
            f"need at least {size * n_sub} patients for {n_sub} disjoint "
            f"sub-cohorts of {size}, bundle has {len(records)}")
    ctx = _context(cfg)
    init = _parse_pair(args.init, "--init") if args.init else (0.3, 0.8)
    seed = int(cfg.options["seed"])
    beta_star = manifest.get("args", {}).get("beta_star")
    estimates = []
    for k_sig, sigma in enumerate(sigmas):
        spec = NoiseSpec(sigma=sigma, clip_factor=float(cfg.options["clip_factor"]),
                         seed=derive_seed(seed, "noise", k_sig))
        noisy = add_measurement_noise(records, spec)
        for k_sub in range(n_sub):
            sub = noisy[k_sub * size:(k_sub + 1) * size]
            mcfg = _cost_config(cfg, sub, args.bounds)
            res = identify_multi(sub, np.asarray(init), mcfg, ctx,
                                 tol=float(cfg.options["powell_tol"]),
                                 max_iter=int(cfg.options["powell_max_iter"]))
            estimates.append({"sigma": sigma, "subcohort": f"P{k_sub + 1}",
                              "patients": [p.id for p in sub],
                              "beta": [float(v) for v in res.best_point],
                              "J": float(res.best_value),
                              "n_evals": res.n_evals})
        if abs(sigma - float(args.full_at)) < 1e-12:
            full = noisy[: size * n_sub]
            mcfg = _cost_config(cfg, full, args.bounds)
            res = identify_multi(full, np.asarray(init), mcfg, ctx,
                                 tol=float(cfg.options["powell_tol"]),
                                 max_iter=int(cfg.options["powell_max_iter"]))
            estimates.append({"sigma": sigma, "subcohort": "full",
                              "patients": [p.id for p in full],
                              "beta": [float(v) for v in res.best_point],
                              "J": float(res.best_value),
                              "n_evals": res.n_evals})
    out = _outdir(args)
    _write_csv(os.path.join(out, "subcohort_estimates.csv"),
               ["sigma", "subcohort", "d_ca", "d_ci", "J"],
               [(e["sigma"], e["subcohort"], e["beta"][0], e["beta"][1], e["J"])
                for e in estimates])
    payload = {"estimates": estimates, "sigmas": sigmas}
    if beta_star:
        payload["beta_star"] = beta_star
    _write_json(os.path.join(out, "noise_study.json"), payload)
    _write_json(os.path.join(out, "manifest.json"),
                cfg.manifest_dict("noise-study",
                                  {"targets": os.path.basename(os.path.normpath(args.targets)),
                                   "targets_sha256": manifest["targets_sha256"],
                                   "sigmas": sigmas, "subcohort_size": size,
                                   "n_subcohorts": n_sub, "init": list(init),
                                   "full_at": float(args.full_at)}))
    print(f"{len(estimates)} inversions written to {out}")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    cfg = _load_config(args)
    manifest, records = _load_targets(args)
    sigmas = [float(s) for s in (args.sigmas.split(",") if args.sigmas
                                 else cfg.options["noise_sigmas"])]
    beta_star = _parse_pair(args.beta_star, "--beta-star") if args.beta_star else \
        tuple(manifest.get("args", {}).get("beta_star", cfg.options["beta_star"]))
    ctx = _context(cfg)
    seed = int(args.seed) if args.seed is not None else int(cfg.options["seed"])
    study = sensitivity_study(records, ctx, np.asarray(beta_star), sigmas, seed)
    out = _outdir(args)
    _write_csv(os.path.join(out, "sensitivity_species.csv"),
               ["sigma", "species", "mean_rel_error"], study.rows())
    _write_csv(os.path.join(out, "sensitivity_patients.csv"),
               ["sigma", "patient", "mean_rel_error"],
               [(lvl.sigma, pid, err) for lvl in study.levels
                for pid, err in sorted(lvl.per_patient_mean.items())])
    _write_json(os.path.join(out, "sensitivity.json"),
                {"beta_star": [float(v) for v in study.beta_star],
                 "seed": study.seed,
                 "levels": [{"sigma": lvl.sigma,
                             "cohort_mean": lvl.cohort_mean,
                             "cohort_max": lvl.cohort_max,
                             "per_species_mean": [float(v) for v in lvl.per_species_mean],
                             "excluded": lvl.excluded}
                            for lvl in study.levels]})
    _write_json(os.path.join(out, "manifest.json"),
                cfg.manifest_dict("sensitivity",
                                  {"targets": os.path.basename(os.path.normpath(args.targets)),
                                   "targets_sha256": manifest["targets_sha256"],
                                   "sigmas": sigmas, "seed": seed,
                                   "beta_star": list(beta_star)}))
    for lvl in study.levels:
        print(f"sigma={lvl.sigma:g}: cohort mean {lvl.cohort_mean:.4%}, "
              f"max {lvl.cohort_max:.4%}")
    return EXIT_OK


def cmd_report(args) -> int:
    bundle = args.bundle
    if not os.path.isdir(bundle):
        print(f"{bundle}: not a directory", file=sys.stderr)
        return EXIT_INCOMPLETE
    known = {
        "result.json": "inversion result",
        "powell_trace.csv": "Powell iterates (phase plane / error / objective)",
        "descent_trace.csv": "projected-gradient iterates",
        "landscape.csv": "objective landscape",
        "landscape_refined.csv": "localized objective landscape",
        "noise_study.json": "sub-cohort noise estimates",
        "sensitivity.json": "coefficient sensitivity summary",
        "outlet.json": "forward outlet vector",
        "targets.json": "reference targets",
        "cohort.csv": "synthetic cohort table",
    }
    present = {n: d for n, d in known.items() if os.path.exists(os.path.join(bundle, n))}
    if not present:
        print(f"{bundle}: no reportable artifacts found "
              f"(expected any of: {', '.join(sorted(known))})", file=sys.stderr)
        return EXIT_INCOMPLETE
    lines = [f"bundle: {os.path.basename(os.path.normpath(bundle))}"]
    if os.path.exists(os.path.join(bundle, "manifest.json")):
        with open(os.path.join(bundle, "manifest.json")) as fh:
            manifest = json.load(fh)
        lines.append(f"command: {manifest.get('command')}")
        lines.append(f"profile: {manifest.get('profile_name')} "
                     f"({manifest.get('profile_sha256', '')[:12]})")
    for name, desc in sorted(present.items()):
        lines.append(f"artifact: {name} ({desc})")

    if "powell_trace.csv" in present:
        rows = _read_csv_rows(os.path.join(bundle, "powell_trace.csv"))
        _write_csv(os.path.join(bundle, "report_objective.csv"), ["k", "J"],
                   [(r[0], r[3]) for r in rows])
        _write_csv(os.path.join(bundle, "report_phase_plane.csv"),
                   ["k", "d_ca", "d_ci"], [(r[0], r[1], r[2]) for r in rows])
        if rows and rows[0][4] != "":
            _write_csv(os.path.join(bundle, "report_beta_error.csv"), ["k", "err"],
                       [(r[0], r[4]) for r in rows])
            lines.append(f"final beta error: {float(rows[-1][4]):.3e}")
    if "result.json" in present:
        with open(os.path.join(bundle, "result.json")) as fh:
            res = json.load(fh)
        lines.append(f"best point: {res['best_point']} (J = {res['best_value']:.6g})")
    if "noise_study.json" in present:
        with open(os.path.join(bundle, "noise_study.json")) as fh:
            study = json.load(fh)
        for e in study["estimates"]:
            lines.append(f"sigma {e['sigma']:g} {e['subcohort']}: "
                         f"beta = {[round(v, 5) for v in e['beta']]}")
    if "sensitivity.json" in present:
        with open(os.path.join(bundle, "sensitivity.json")) as fh:
            sens = json.load(fh)
        for lvl in sens["levels"]:
            lines.append(f"sigma {lvl['sigma']:g}: mean output error "
                         f"{lvl['cohort_mean']:.4%} (max {lvl['cohort_max']:.4%})")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(bundle, "summary.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK


def _read_csv_rows(path):
    with open(path) as fh:
        lines = fh.read().strip().splitlines()
    return [line.split(",") for line in lines[1:]]


# -- entry point ---------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(
        prog="fiberdialysis",
        description="Hollow-fiber dialysis transport simulation and "
                    "membrane-diffusion identification")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, targets=False):
        p.add_argument("--config", help="run config JSON (profile, seeds, options)")
        p.add_argument("--jobs", type=int, help="concurrent forward solves")
        p.add_argument("--out", default="out", help="output directory")
        if targets:
            p.add_argument("--targets", required=True, help="targets bundle directory")

    p = sub.add_parser("forward", help="single forward solve, field dump + outlet")
    common(p)
    p.add_argument("--patient", required=True, help="patient CSV (boundary rows)")
    p.add_argument("--beta", required=True, help="d_Ca,d_Ci")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("synth", help="synthesize a cohort and its exact targets")
    common(p)
    p.add_argument("--real", help="real cohort CSV (fields x patients); "
                                  "defaults to the packaged sample")
    p.add_argument("--ns", type=int, help="number of synthetic patients")
    p.add_argument("--seed", type=int, help="cohort sampling seed")
    p.add_argument("--beta-star", dest="beta_star", help="ground-truth d_Ca,d_Ci")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("invert-single", help="projected-gradient single-patient fit")
    common(p)
    p.add_argument("--patient", required=True)
    p.add_argument("--beta0", help="initial d_Ca,d_Ci (default 0.2,0.2)")
    p.set_defaults(func=cmd_invert_single)

    p = sub.add_parser("invert-multi", help="Powell multi-patient identification")
    common(p, targets=True)
    p.add_argument("--patients", help="comma-separated patient ids (default: all)")
    p.add_argument("--init", help="initial d_Ca,d_Ci (default 0.3,0.8)")
    p.add_argument("--bounds", help="lo1,hi1,lo2,hi2 soft bounds")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float,
                   help="perturb targets multiplicatively before inverting")
    p.set_defaults(func=cmd_invert_multi)

    p = sub.add_parser("grid", help="exhaustive objective landscape scan")
    common(p, targets=True)
    p.add_argument("--patients")
    p.add_argument("--box", help="lo1,hi1,lo2,hi2 (default [0.02,1]^2; "
                                 "[0.02,3]^2 with --clinical)")
    p.add_argument("--n", help="grid resolution n or n1,n2 (default 31)")
    p.add_argument("--bounds", help="soft bounds for the cost")
    p.add_argument("--clinical", action="store_true",
                   help="clinical-mode defaults (wide box)")
    p.add_argument("--refine-box", dest="refine_box",
                   help="second, localized scan box lo1,hi1,lo2,hi2")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("noise-study", help="sub-cohort inversions under target noise")
    common(p, targets=True)
    p.add_argument("--sigmas", help="comma-separated noise levels (default config)")
    p.add_argument("--subcohort-size", dest="subcohort_size", default=5)
    p.add_argument("--n-subcohorts", dest="n_subcohorts", default=4)
    p.add_argument("--full-at", dest="full_at", default=0.05,
                   help="also invert the pooled cohort at this noise level")
    p.add_argument("--init")
    p.add_argument("--bounds")
    p.set_defaults(func=cmd_noise_study)

    p = sub.add_parser("sensitivity", help="coefficient-perturbation sensitivity study")
    common(p, targets=True)
    p.add_argument("--sigmas")
    p.add_argument("--seed", type=int)
    p.add_argument("--beta-star", dest="beta_star")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("report", help="summarize a bundle into plot-ready CSVs")
    p.add_argument("bundle")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except _BundleMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUNDLE_MISMATCH
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except NewtonError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        _close_contexts()


if __name__ == "__main__":
    sys.exit(main())
