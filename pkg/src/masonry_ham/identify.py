"""Inverse identification of transport parameters from sensor traces.

The workflow mirrors the laboratory practice this toolkit targets: draw
parameter vectors by stratified (Latin hypercube) sampling of truncated
log-normal marginals, run the forward wall simulation for every
realization, score each simulated trace set against the observed one by
accuracy-normalized least squares, and rank the realizations.  A two-stage
driver identifies thermal parameters first and moisture parameters second
with the thermal optimum held fixed.

Parameter names double as override paths into the parameter bundle:
``"brick.lambda0"``, ``"mortar.w_f"``, ``"interface.alpha_int"`` and so on.
"""

import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import experiment as exp
from .errors import ConfigError, MasonryHamError, ParameterError

log = logging.getLogger(__name__)

#: default coefficient of variation used when a prior does not specify one
DEFAULT_COV = 0.2

#: smallest admissible probability mass between a prior's bounds
MIN_BOUND_MASS = 1e-12

RESULT_COLUMNS_FIXED = ["realization_id", "status", "objective"]


# -------------------------------------------------------------------- priors

@dataclass(frozen=True)
class ParameterPrior:
    """Truncated log-normal marginal for one scalar parameter.

    ``mean`` is the mean of the untruncated log-normal, ``cov`` its
    coefficient of variation; the underlying normal has
    sigma_ln^2 = ln(1 + cov^2) and mu_ln = ln(mean) - sigma_ln^2 / 2.
    The log-normal support keeps every draw strictly positive, and
    ``bounds`` additionally truncates the marginal.
    """

    name: str
    mean: float
    cov: float = DEFAULT_COV
    bounds: tuple = None

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ParameterError("prior needs a non-empty parameter name")
        # config loaders may hand numbers through as strings
        try:
            object.__setattr__(self, "mean", float(self.mean))
            object.__setattr__(self, "cov", float(self.cov))
        except (TypeError, ValueError):
            raise ParameterError(
                f"prior {self.name}: mean/cov must be numbers, got "
                f"{self.mean!r}/{self.cov!r}") from None
        if not self.mean > 0:
            raise ParameterError(
                f"prior {self.name}: mean must be > 0, got {self.mean}")
        if not self.cov > 0:
            raise ParameterError(
                f"prior {self.name}: cov must be > 0, got {self.cov}")
        bounds = self.bounds
        if bounds is None:
            bounds = (self.mean / 10.0, self.mean * 10.0)
        lo, hi = (float(bounds[0]), float(bounds[1]))
        if not (0 < lo < hi):
            raise ParameterError(
                f"prior {self.name}: bounds must satisfy 0 < lo < hi, "
                f"got ({lo}, {hi})")
        if not (lo < self.mean < hi):
            raise ParameterError(
                f"prior {self.name}: mean {self.mean} outside bounds "
                f"({lo}, {hi})")
        object.__setattr__(self, "bounds", (lo, hi))
        p_lo, p_hi = self._cdf(lo), self._cdf(hi)
        if p_hi - p_lo < MIN_BOUND_MASS:
            raise ParameterError(
                f"prior {self.name}: bounds ({lo}, {hi}) carry no "
                "probability mass; strata would be empty")

    @property
    def sigma_ln(self):
        return math.sqrt(math.log1p(self.cov ** 2))

    @property
    def mu_ln(self):
        return math.log(self.mean) - 0.5 * math.log1p(self.cov ** 2)

    def _cdf(self, x):
        return norm.cdf((np.log(x) - self.mu_ln) / self.sigma_ln)

    def _ppf(self, p):
        return np.exp(self.mu_ln + self.sigma_ln * norm.ppf(p))


def priors_from_dicts(entries) -> tuple:
    """Build priors from declarative entries (e.g. a parsed config list).

    Each entry needs ``name`` and ``mean``; ``cov``, ``bounds`` and
    ``distribution`` (only "log-normal") are optional.  A missing ``cov``
    falls back to the package default, which is logged because it is a
    modeling choice, not a measured spread.
    """
    priors = []
    for entry in entries:
        entry = dict(entry)
        dist = entry.pop("distribution", "log-normal")
        if dist != "log-normal":
            raise ConfigError(
                f"prior {entry.get('name')}: unsupported distribution "
                f"{dist!r}; only log-normal marginals are available")
        if "name" not in entry or "mean" not in entry:
            raise ConfigError(f"prior entry {entry} needs name and mean")
        if "cov" not in entry:
            log.warning("prior %s: no cov given, using default %.2g",
                        entry["name"], DEFAULT_COV)
        if "bounds" in entry and entry["bounds"] is not None:
            entry["bounds"] = tuple(float(b) for b in entry["bounds"])
        unknown = set(entry) - {"name", "mean", "cov", "bounds"}
        if unknown:
            raise ConfigError(
                f"prior {entry['name']}: unknown keys {sorted(unknown)}")
        priors.append(ParameterPrior(**entry))
    names = [p.name for p in priors]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate prior names in {names}")
    return tuple(priors)


# ------------------------------------------------------------------ sampling

def lhs_sample(priors, n, seed) -> np.ndarray:
    """Latin hypercube sample of the joint prior, shape (n, len(priors)).

    Every parameter's n values occupy the n equiprobable strata of its
    truncated marginal exactly once; columns are shuffled independently so
    the pairing between parameters is random.  Deterministic given seed.
    """
    priors = tuple(priors)
    if not priors:
        raise ParameterError("lhs_sample needs at least one prior")
    if not (isinstance(n, (int, np.integer)) and n >= 1):
        raise ParameterError(f"sample count must be an integer >= 1, got {n}")
    rng = np.random.default_rng(seed)
    out = np.empty((n, len(priors)))
    for j, prior in enumerate(priors):
        lo, hi = prior.bounds
        p_lo, p_hi = prior._cdf(lo), prior._cdf(hi)
        width = (p_hi - p_lo) / n
        u = p_lo + width * (np.arange(n) + rng.random(n))
        vals = np.clip(prior._ppf(u), lo, hi)
        edges = prior._ppf(p_lo + width * np.arange(n + 1))
        if not np.all(np.diff(edges) > 0):
            raise ParameterError(
                f"prior {prior.name}: {n} strata collapse within bounds "
                f"{prior.bounds}; widen the bounds or lower n")
        out[:, j] = vals[rng.permutation(n)]
    return out


def stratum_index(prior, x, n) -> np.ndarray:
    """Index (0..n-1) of the equiprobable stratum containing each value."""
    lo, hi = prior.bounds
    p_lo, p_hi = prior._cdf(lo), prior._cdf(hi)
    rel = (prior._cdf(np.asarray(x, dtype=float)) - p_lo) / (p_hi - p_lo)
    return np.clip((rel * n).astype(int), 0, n - 1)


# ------------------------------------------------------------ forward model

@dataclass(frozen=True, eq=False)
class ExperimentSpec:
    """Everything needed to run and score one forward wall simulation."""

    mesh: object
    climate: exp.ClimateSeries
    layout: exp.SensorLayout
    base_params: object
    duration: float
    dt: float = 600.0
    output_interval: float = 3600.0
    max_halvings: int = 5
    fields: tuple = ("theta", "phi")

    def __post_init__(self):
        bad = set(self.fields) - {"theta", "phi"}
        if bad or not self.fields:
            raise ParameterError(
                f"score fields must be a non-empty subset of theta/phi, "
                f"got {self.fields}")

    def run(self, overrides=None) -> exp.ExperimentResult:
        params = apply_overrides(self.base_params, overrides or {})
        return exp.run_experiment(
            self.mesh, self.climate, self.layout, params,
            duration=self.duration, dt=self.dt,
            output_interval=self.output_interval,
            max_halvings=self.max_halvings)


def apply_overrides(params, overrides):
    """Return a parameter bundle with dotted-path overrides applied.

    Paths address a phase by name (``brick.lambda0``), the interface law
    (``interface.alpha_int``) or the shared constants
    (``constants.h_v``).  Values go through the bundle's own validation,
    so physically inadmissible combinations raise ParameterError.
    """
    phases = {ph.name: ph for ph in params.phases}
    interface = params.interface
    constants = params.constants
    for path, value in overrides.items():
        head, _, attr = str(path).partition(".")
        if not attr:
            raise ConfigError(
                f"override {path!r} is not of the form group.field")
        if head in phases:
            target = phases[head]
        elif head == "interface":
            target = interface
        elif head == "constants":
            target = constants
        else:
            raise ConfigError(
                f"override {path!r}: unknown group {head!r}; expected one "
                f"of {sorted(phases) + ['interface', 'constants']}")
        if not hasattr(target, attr):
            raise ConfigError(f"override {path!r}: {head} has no "
                              f"parameter {attr!r}")
        if attr == "perfect":
            value = bool(value)
        elif attr != "name":
            value = float(value)
        updated = dataclasses.replace(target, **{attr: value})
        if head in phases:
            phases[head] = updated
        elif head == "interface":
            interface = updated
        else:
            constants = updated
    new_phases = tuple(phases[ph.name] for ph in params.phases)
    return dataclasses.replace(params, phases=new_phases,
                               interface=interface, constants=constants)


# ------------------------------------------------------------------- scoring

@dataclass(frozen=True)
class FitResult:
    """Outcome of one forward realization scored against observations."""

    realization_id: int
    params: dict
    objective: float
    per_sensor: dict = field(default_factory=dict)
    status: str = "ok"


def score_traces(sim, observed, layout, fields=("theta", "phi")):
    """Accuracy-normalized sum of squared residuals over sensors and times.

    Observed samples are sorted by time and resampled onto the simulation
    output grid by linear interpolation, so neither sensor order nor
    sample order in the observation set affects the score.  Returns
    (objective, per-sensor breakdown keyed "field:probe").
    """
    if observed.times.size < 2:
        raise ConfigError("observed traces need at least two samples")
    order = np.argsort(observed.times)
    t_obs = observed.times[order]
    if t_obs[0] > sim.times[0] + 1e-9 or t_obs[-1] < sim.times[-1] - 1e-9:
        raise ConfigError(
            f"observed traces cover [{t_obs[0]:g}, {t_obs[-1]:g}] s but the "
            f"simulation grid spans [{sim.times[0]:g}, {sim.times[-1]:g}] s")
    accuracy = {"theta": layout.theta_accuracy, "phi": layout.phi_accuracy}
    per_sensor = {}
    for field_name in fields:
        sim_traces = getattr(sim, field_name)
        obs_traces = getattr(observed, field_name)
        for probe_name in sorted(obs_traces):
            if probe_name not in sim_traces:
                raise ConfigError(
                    f"observed probe {probe_name!r} has no simulated "
                    f"counterpart; layout probes: {sorted(sim_traces)}")
            obs = np.interp(sim.times, t_obs,
                            obs_traces[probe_name][order])
            r = (sim_traces[probe_name] - obs) / accuracy[field_name]
            per_sensor[f"{field_name}:{probe_name}"] = float(r @ r)
    objective = float(sum(per_sensor.values()))
    return objective, per_sensor


def evaluate_pool(samples, names, spec, observed, *, n_jobs=1):
    """Run and score every realization; failures never abort the pool.

    samples: (n, d) array from lhs_sample; names: the d override paths.
    Realizations are independent; with n_jobs > 1 they run on a thread
    pool and are collected by index, so the result order and content do
    not depend on scheduling.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != len(names):
        raise ParameterError(
            f"samples must be (n, {len(names)}) for names {list(names)}, "
            f"got shape {samples.shape}")

    def one(i):
        overrides = {name: float(v) for name, v in zip(names, samples[i])}
        try:
            sim = spec.run(overrides)
            objective, per_sensor = score_traces(sim, observed, spec.layout,
                                                 spec.fields)
            if not math.isfinite(objective):
                raise MasonryHamError("non-finite objective")
            return FitResult(i, overrides, objective, per_sensor)
        except Exception as e:  # noqa: BLE001 - per-realization isolation
            log.warning("realization %d failed: %s: %s",
                        i, type(e).__name__, e)
            return FitResult(i, overrides, math.inf, {},
                             status=f"failed: {type(e).__name__}: {e}")

    indices = range(samples.shape[0])
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(one, indices))
    return [one(i) for i in indices]


def select_best(results, k=1):
    """Top-k fits sorted ascending by objective, ties broken by id."""
    results = list(results)
    if not results:
        raise ParameterError("select_best needs a non-empty result list")
    if not k >= 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    ranked = sorted(results,
                    key=lambda r: (r.objective, r.realization_id))
    if not math.isfinite(ranked[0].objective):
        log.warning("all %d realizations failed; ranking is vacuous",
                    len(results))
    return ranked[:k]


# ------------------------------------------------------------ two-stage run

@dataclass(frozen=True)
class IdentificationReport:
    """Ranked pools and the combined optimum of a two-stage run."""

    thermal: list
    moisture: list
    best_params: dict
    info: dict


def identify_two_stage(thermal_priors, thermal_spec, thermal_observed,
                       moisture_priors, moisture_spec, moisture_observed,
                       *, n, seed, k=5, n_jobs=1) -> IdentificationReport:
    """Identify thermal parameters first, then moisture with thermal fixed.

    Stage one scores temperature traces only; its optimal overrides are
    baked into the moisture stage's base parameters before stage two
    scores relative-humidity traces.  Stage two draws with seed + 1 so the
    two pools are independent but the whole run stays deterministic.
    """
    thermal_priors = tuple(thermal_priors)
    moisture_priors = tuple(moisture_priors)

    spec1 = dataclasses.replace(thermal_spec, fields=("theta",))
    samples1 = lhs_sample(thermal_priors, n, seed)
    names1 = [p.name for p in thermal_priors]
    pool1 = evaluate_pool(samples1, names1, spec1, thermal_observed,
                          n_jobs=n_jobs)
    best1 = select_best(pool1, 1)[0]

    base2 = apply_overrides(moisture_spec.base_params, best1.params)
    spec2 = dataclasses.replace(moisture_spec, base_params=base2,
                                fields=("phi",))
    samples2 = lhs_sample(moisture_priors, n, seed + 1)
    names2 = [p.name for p in moisture_priors]
    pool2 = evaluate_pool(samples2, names2, spec2, moisture_observed,
                          n_jobs=n_jobs)
    best2 = select_best(pool2, 1)[0]

    n_failed = [sum(not math.isfinite(r.objective) for r in pool)
                for pool in (pool1, pool2)]
    info = {"n": n, "seed": seed,
            "thermal_failed": n_failed[0], "moisture_failed": n_failed[1],
            "thermal_objective": best1.objective,
            "moisture_objective": best2.objective}
    return IdentificationReport(
        thermal=select_best(pool1, min(k, len(pool1))),
        moisture=select_best(pool2, min(k, len(pool2))),
        best_params={**best1.params, **best2.params},
        info=info)


# ----------------------------------------------------------------------- I/O

def write_results_csv(path, results):
    """One row per realization: id, status, objective, then parameters."""
    results = list(results)
    if not results:
        raise ParameterError("no results to write")
    names = sorted(results[0].params)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(RESULT_COLUMNS_FIXED + names) + "\n")
        for r in results:
            row = [str(r.realization_id), r.status.replace(",", ";"),
                   repr(r.objective)]
            row += [repr(r.params[name]) for name in names]
            fh.write(",".join(row) + "\n")


def write_summary_json(path, report: IdentificationReport):
    """Machine-readable summary of a two-stage identification run."""

    def jsonable(x):
        return x if math.isfinite(x) else repr(x)

    def top(pool):
        return [{"realization_id": r.realization_id, "status": r.status,
                 "objective": jsonable(r.objective), "params": r.params,
                 "per_sensor": r.per_sensor} for r in pool]

    info = {key: jsonable(v) if isinstance(v, float) else v
            for key, v in report.info.items()}
    payload = {"best_params": report.best_params, "info": info,
               "thermal_top": top(report.thermal),
               "moisture_top": top(report.moisture)}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
