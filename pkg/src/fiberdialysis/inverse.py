"""Cost functionals and identification drivers.

The forward map per patient embeds the two identifiable membrane fractions
as alpha = (d_Ca, 0, 0, d_Ci, d_Ci), runs the stationary transport solve with
the patient's frozen calibrated hydraulics, and observes the blood outlet
averages.  Identification minimizes the weighted multi-patient least squares
(Powell in log-parameters) or the single-patient relative misfit (projected
gradient), with forward failures folded into a large objective value.

Per-patient forward solves are independent; ``ForwardContext`` fans them out
over a process pool.  Warm-start fields travel through the main process with
each task, so results do not depend on worker scheduling and re-runs are
byte-identical.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .cohort import PatientRecord
from .exceptions import ConfigurationError, UsageError
from .flow import HydraulicState, calibrate_hydraulics, compute_velocity_field
from .mesh import AxiGeometry, build_structured_mesh
from .optim import (GridResult, OptimResult, grid_search, powell_minimize,
                    projected_gradient)
from .transport import (BoundaryData, ConcentrationField, TransportConfig,
                        TransportSolver, outlet_concentration)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionVector:
    """The identifiable membrane fractions beta = (d_Ca, d_Ci)."""

    d_ca: float
    d_ci: float

    def __post_init__(self):
        if not (self.d_ca > 0 and self.d_ci > 0):
            raise ConfigurationError(
                f"diffusion fractions must be positive, got ({self.d_ca}, {self.d_ci})")

    def as_beta(self) -> np.ndarray:
        return np.array([self.d_ca, self.d_ci])

    def embed(self) -> np.ndarray:
        """Five-species membrane fractions (d_Ca, 0, 0, d_Ci, d_Ci)."""
        return np.array([self.d_ca, 0.0, 0.0, self.d_ci, self.d_ci])

    def require_admissible_single(self):
        """The single-patient admissible set additionally caps fractions at 1."""
        if self.d_ca > 1.0 or self.d_ci > 1.0:
            raise ConfigurationError(
                f"single-patient admissible set requires fractions <= 1, "
                f"got ({self.d_ca}, {self.d_ci})")


@dataclass
class MultiCostConfig:
    weights: np.ndarray
    lam: float = 0.0
    bounds: tuple = ((0.02, 1.0), (0.02, 1.0))
    penalty_scale: float = 1e4
    failure_value: float = 1e10
    prior: np.ndarray | None = None   # defaults to the box center when lam > 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (5,) or np.any(self.weights <= 0):
            raise ConfigurationError("weights must be 5 positive scalars")
        if self.lam < 0:
            raise ConfigurationError("regularization weight must be >= 0")
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ConfigurationError(f"bound interval [{lo}, {hi}] is degenerate")
        if self.prior is not None:
            self.prior = np.asarray(self.prior, dtype=float)

    def prior_point(self):
        if self.prior is not None:
            return self.prior
        return np.array([(lo + hi) / 2.0 for lo, hi in self.bounds])


def default_weights(patients) -> np.ndarray:
    """Inverse empirical scales: w_i = 1 / mean_p |y_pi|; absolute weighting
    (w_i = 1) wherever the cohort mean is numerically zero."""
    targets = np.array([p.observed_outlet for p in patients], dtype=float)
    scales = np.mean(np.abs(targets), axis=0)
    return np.where(scales > 1e-12, 1.0 / np.maximum(scales, 1e-300), 1.0)


# -- forward context ---------------------------------------------------------------

_WORKER: dict = {}


def _worker_init(geom, mesh_res, cfg_template):
    _WORKER["geom"] = geom
    _WORKER["mesh"] = build_structured_mesh(geom, *mesh_res)
    _WORKER["cfg"] = cfg_template
    _WORKER["velocity"] = {}


def _worker_forward(task):
    """One forward solve: (record dict, beta, warm flat field or None) ->
    (outlet list, converged flat field, error string)."""
    rec_dict, beta, c0_flat = task
    try:
        rec = PatientRecord.from_dict(rec_dict)
        geom = _WORKER["geom"]
        mesh = _WORKER["mesh"]
        cfg = _WORKER["cfg"]
        vel_cache = _WORKER["velocity"]
        key = (rec.id, rec.hydraulics)
        if key not in vel_cache:
            vel_cache[key] = compute_velocity_field(mesh, geom, rec.hydraulics)
        velocity = vel_cache[key]
        cfg_b = replace(cfg, species=cfg.species.with_beta(beta[0], beta[1]))
        bd = BoundaryData(inlet_blood=tuple(rec.inlet_blood),
                          inlet_dialysate=tuple(rec.inlet_dialysate))
        solver = TransportSolver(mesh, velocity, cfg_b, bd)
        c0 = None
        if c0_flat is not None:
            c0 = ConcentrationField.from_flat(mesh, np.asarray(c0_flat))
        fld, _ = solver.solve(c0=c0)
        outlet = outlet_concentration(fld, mesh, geom)
        return outlet.tolist(), fld.flat(), None
    except Exception as exc:
        return None, None, f"{type(exc).__name__}: {exc}"


class ForwardContext:
    """Shared mesh/config plus per-patient forward evaluation, optionally
    fanned out over a process pool (jobs > 1).  Immutable inputs; the only
    mutable state is the main-process warm-start cache."""

    def __init__(self, geom: AxiGeometry, mesh_res, cfg_template: TransportConfig,
                 base_hydraulics: HydraulicState, jobs: int = 1, warm_start: bool = True):
        self.geom = geom
        self.mesh_res = tuple(int(n) for n in mesh_res)
        self.mesh = build_structured_mesh(geom, *self.mesh_res)
        self.cfg_template = cfg_template
        self.base_hydraulics = base_hydraulics
        self.jobs = max(1, int(jobs))
        self.warm_start = warm_start
        self._warm: dict = {}
        self._velocity: dict = {}
        self._pool = None

    # .. plumbing ..

    def _ensure_pool(self):
        if self._pool is None:
            self._pool = ProcessPoolExecutor(
                max_workers=self.jobs, initializer=_worker_init,
                initargs=(self.geom, self.mesh_res, self.cfg_template))
        return self._pool

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def clear_warm_cache(self):
        self._warm.clear()

    def _velocity_for(self, rec):
        key = (rec.id, rec.hydraulics)
        if key not in self._velocity:
            self._velocity[key] = compute_velocity_field(self.mesh, self.geom, rec.hydraulics)
        return self._velocity[key]

    # .. calibration ..

    def calibrate_record(self, rec: PatientRecord) -> PatientRecord:
        """Fix the patient's pressure levels so the net transmembrane flux
        matches its Q_uf, then freeze them."""
        target = rec.extras.get("Q_uf")
        if target is None:
            raise ConfigurationError(f"patient {rec.id} carries no Q_uf calibration target")
        hyd = calibrate_hydraulics(self.mesh, self.geom, rec.hydraulics, float(target))
        return replace(rec, hydraulics=hyd, calibrated=True, extras=dict(rec.extras))

    # .. forward evaluation ..

    def forward_detailed(self, rec: PatientRecord, beta, c0_flat=None):
        """In-process forward solve; returns (outlet, field, NewtonResult)."""
        beta = np.asarray(beta, dtype=float)
        velocity = self._velocity_for(rec)
        cfg = replace(self.cfg_template,
                      species=self.cfg_template.species.with_beta(beta[0], beta[1]))
        bd = BoundaryData(inlet_blood=tuple(rec.inlet_blood),
                          inlet_dialysate=tuple(rec.inlet_dialysate))
        solver = TransportSolver(self.mesh, velocity, cfg, bd)
        c0 = None if c0_flat is None else ConcentrationField.from_flat(self.mesh, c0_flat)
        fld, result = solver.solve(c0=c0)
        return outlet_concentration(fld, self.mesh, self.geom), fld, result

    def forward_outlet(self, rec: PatientRecord, beta, c0_flat=None):
        """In-process forward solve; returns (outlet, converged flat field)."""
        outlet, fld, _ = self.forward_detailed(rec, beta, c0_flat=c0_flat)
        return outlet, fld.flat()

    def forward_pairs(self, pairs, use_warm=None):
        """Forward solves for [(record, beta), ...]; returns a list aligned
        with ``pairs`` of (outlet array | None, error string | None).

        Results are gathered by submission index and the warm cache is
        updated in pair order, so outputs are independent of scheduling.
        """
        warm = self.warm_start if use_warm is None else use_warm
        tasks = []
        for rec, beta in pairs:
            c0 = self._warm.get(rec.id) if warm else None
            tasks.append((rec.to_dict(), tuple(float(b) for b in np.asarray(beta)), c0))
        if self.jobs == 1 or len(pairs) == 1:
            raw = []
            for (rec, beta), (_, _, c0) in zip(pairs, tasks):
                try:
                    outlet, flat = self.forward_outlet(rec, beta, c0_flat=c0)
                    raw.append((list(outlet), flat, None))
                except Exception as exc:
                    raw.append((None, None, f"{type(exc).__name__}: {exc}"))
        else:
            raw = list(self._ensure_pool().map(_worker_forward, tasks))
        out = []
        for (rec, _), (outlet, flat, err) in zip(pairs, raw):
            if err is None:
                if warm:
                    self._warm[rec.id] = np.asarray(flat)
                out.append((np.asarray(outlet), None))
            else:
                out.append((None, err))
        return out

    def forward_many(self, records, beta, use_warm=None):
        """Per-patient forward solves at one shared beta."""
        beta = np.asarray(beta, dtype=float)
        return self.forward_pairs([(rec, beta) for rec in records], use_warm=use_warm)


def context_from_profile(profile, jobs: int = 1, mesh_res=None,
                         warm_start: bool = True) -> ForwardContext:
    """Build a ForwardContext from a constants profile (see config module)."""
    res = tuple(mesh_res) if mesh_res is not None else profile.mesh_resolution
    return ForwardContext(profile.geometry, res, profile.transport_config(),
                          profile.base_hydraulics(), jobs=jobs, warm_start=warm_start)


# -- cost functionals ----------------------------------------------------------------

def single_patient_cost(beta, patient: PatientRecord, ctx: ForwardContext) -> float:
    """Relative squared misfit sum_i |B_i(beta) - y_i|^2 / |y_i|^2."""
    if patient.observed_outlet is None:
        raise UsageError(f"patient {patient.id} has no observed outlet targets")
    if not patient.calibrated:
        raise UsageError(f"patient {patient.id} is not hydraulically calibrated")
    y = patient.observed_outlet
    if np.any(np.abs(y) < 1e-300):
        raise UsageError(
            "relative normalization undefined: a target component is zero; "
            "use the weighted multi-patient cost with absolute weights instead")
    beta = np.asarray(beta, dtype=float)
    c0 = ctx._warm.get(patient.id) if ctx.warm_start else None
    outlet, flat = ctx.forward_outlet(patient, beta, c0_flat=c0)
    if ctx.warm_start:
        ctx._warm[patient.id] = flat
    return float(np.sum(np.abs(outlet - y) ** 2 / np.abs(y) ** 2))


def bound_penalty(beta, cfg: MultiCostConfig) -> float:
    pen = 0.0
    for b, (lo, hi) in zip(beta, cfg.bounds):
        pen += max(0.0, lo - b) ** 2 + max(0.0, b - hi) ** 2
    return cfg.penalty_scale * pen


def multi_patient_cost(beta, patients, cfg: MultiCostConfig, ctx: ForwardContext) -> float:
    """sum_p ||W (F_p(beta) - y_p)||^2 + lam R(beta) + soft bound penalty.

    Per-patient forward failures contribute ``failure_value`` each; terms are
    summed in patient-id order so the cost is invariant under permutations of
    the input list.
    """
    if not patients:
        raise UsageError("multi-patient cost needs a nonempty patient list")
    beta = np.asarray(beta, dtype=float)
    results = ctx.forward_many(patients, beta)
    terms = []
    for rec, (outlet, err) in zip(patients, results):
        if err is not None:
            terms.append((rec.id, cfg.failure_value))
        else:
            resid = cfg.weights * (outlet - rec.observed_outlet)
            terms.append((rec.id, float(np.dot(resid, resid))))
    # id-sorted summation: permutation invariant, duplicates contribute k times
    total = math.fsum(v for _, v in sorted(terms, key=lambda t: t[0]))
    if cfg.lam > 0:
        d = beta - cfg.prior_point()
        total += cfg.lam * float(np.dot(d, d))
    total += bound_penalty(beta, cfg)
    return total


# -- identification drivers ------------------------------------------------------------

def identify_single(patient: PatientRecord, beta0, ctx: ForwardContext,
                    initial_step: float = 0.25, tol: float = 1e-4,
                    n_max: int = 60, fd_step: float = 1e-3) -> OptimResult:
    """Projected gradient descent on the single-patient relative misfit over
    the box [0, 1]^2."""
    beta0 = np.asarray(beta0, dtype=float)
    if np.any(beta0 < 0.0) or np.any(beta0 > 1.0):
        raise UsageError(f"initial point {beta0} outside the admissible box [0, 1]^2")
    return projected_gradient(lambda b: single_patient_cost(b, patient, ctx),
                              beta0, initial_step=initial_step, tol=tol,
                              n_max=n_max, fd_step=fd_step, box=(0.0, 1.0))


def identify_multi(patients, init, cfg: MultiCostConfig, ctx: ForwardContext,
                   tol: float = 1e-10, max_iter: int = 60,
                   line_tol: float = 1e-6) -> OptimResult:
    """Powell minimization of the multi-patient cost in z = log(beta), which
    enforces positivity; the returned trace lives in beta space."""
    if not patients:
        raise UsageError("identify_multi needs a nonempty patient list")
    init = init.as_beta() if isinstance(init, DiffusionVector) else np.asarray(init, dtype=float)
    if np.any(init <= 0):
        raise UsageError("initial diffusion pair must be positive for the log map")
    for b, (lo, hi) in zip(init, cfg.bounds):
        if not (lo <= b <= hi):
            raise UsageError(f"initial point {init} outside the configured bounds {cfg.bounds}")

    cache: dict = {}

    def objective(z):
        key = (round(float(z[0]), 14), round(float(z[1]), 14))
        if key not in cache:
            cache[key] = multi_patient_cost(np.exp(z), patients, cfg, ctx)
        return cache[key]

    raw = powell_minimize(objective, np.log(init), tol=tol, max_iter=max_iter,
                          line_tol=line_tol)
    beta_trace = [(np.exp(z), v) for z, v in raw.trace]
    best = np.exp(raw.best_point)
    stalls = raw.best_value >= 0.999 * cfg.failure_value * len(patients)
    result = OptimResult(best_point=best, best_value=raw.best_value,
                         trace=beta_trace, n_evals=raw.n_evals,
                         converged=raw.converged and not stalls,
                         stop_reason="stalled" if stalls else raw.stop_reason)
    result.line_evals = getattr(raw, "line_evals", None)
    return result


def landscape_scan(patients, box, n1: int, n2: int, cfg: MultiCostConfig,
                   ctx: ForwardContext) -> GridResult:
    """Exhaustive multi-patient cost scan on a uniform grid (endpoints
    included), with failures recorded as the configured failure value."""
    def objective(b):
        return multi_patient_cost(b, patients, cfg, ctx)

    grid = grid_search(objective, box, n1, n2)
    values = np.where(np.isfinite(grid.values), grid.values, cfg.failure_value)
    return GridResult(beta1_axis=grid.beta1_axis, beta2_axis=grid.beta2_axis,
                      values=values, argmin_point=grid.argmin_point,
                      argmin_index=grid.argmin_index, n_evals=grid.n_evals)


# -- sensitivity study ------------------------------------------------------------------

@dataclass
class SensitivityLevel:
    sigma: float
    per_patient_mean: dict          # id -> mean relative output error
    per_species_mean: np.ndarray    # (5,) mean over patients per species
    cohort_mean: float
    cohort_max: float
    excluded: list


@dataclass
class SensitivityResult:
    beta_star: np.ndarray
    seed: int
    levels: list

    def rows(self):
        out = []
        for lvl in self.levels:
            for sp in range(5):
                out.append((lvl.sigma, f"c{sp + 1}", float(lvl.per_species_mean[sp])))
        return out


def sensitivity_study(patients, ctx: ForwardContext, beta_star, sigmas,
                      seed: int) -> SensitivityResult:
    """Propagate clipped multiplicative coefficient perturbations through the
    full forward solver and summarize relative output errors per noise level,
    per patient and per species.  Patients whose perturbed solve fails are
    excluded from that level and reported."""
    from .cohort import derive_seed, perturb_coefficients

    beta_star = np.asarray(beta_star, dtype=float)
    refs = {}
    ref_out = ctx.forward_many(patients, beta_star, use_warm=False)
    kept = []
    for rec, (outlet, err) in zip(patients, ref_out):
        if err is not None:
            log.warning("patient %s excluded from sensitivity reference: %s", rec.id, err)
            continue
        refs[rec.id] = outlet
        kept.append(rec)

    levels = []
    for k, sigma in enumerate(sigmas):
        level_seed = derive_seed(seed, "sensitivity", k)
        betas = perturb_coefficients(beta_star, float(sigma), len(kept), level_seed)
        outs = ctx.forward_pairs(list(zip(kept, betas)), use_warm=False)
        per_patient = {}
        excluded = []
        species_acc = []
        for rec, (outlet, err) in zip(kept, outs):
            if err is not None:
                excluded.append(rec.id)
                log.warning("patient %s excluded at sigma=%s: %s", rec.id, sigma, err)
                continue
            rel = np.abs(outlet - refs[rec.id]) / np.abs(refs[rec.id])
            per_patient[rec.id] = float(np.mean(rel))
            species_acc.append(rel)
        species_mean = (np.mean(species_acc, axis=0) if species_acc
                        else np.full(5, np.nan))
        vals = list(per_patient.values())
        levels.append(SensitivityLevel(
            sigma=float(sigma), per_patient_mean=per_patient,
            per_species_mean=species_mean,
            cohort_mean=float(np.mean(vals)) if vals else math.nan,
            cohort_max=float(np.max(vals)) if vals else math.nan,
            excluded=excluded))
    return SensitivityResult(beta_star=beta_star, seed=int(seed), levels=levels)
