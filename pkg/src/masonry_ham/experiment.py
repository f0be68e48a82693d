"""Transient simulation of instrumented wall samples under recorded climates.

The wall meshes put the exterior face on the left boundary and the interior
face on the right one; both faces are driven by Dirichlet values linearly
interpolated from a recorded climate history. Sensor probes sample the fields
at fixed points via barycentric interpolation, and jump pairs read the two
sides of a contact interface to report field discontinuities.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import fem_core as fem
from . import material as mat
from .errors import ConfigError, ParameterError
from .fem_core import DofMap, NodalState
from .mesh import Mesh

log = logging.getLogger(__name__)

#: record gaps longer than this are flagged on load and rejected inside a
#: simulation horizon (one day: climate loggers sample far more often)
GAP_THRESHOLD_S = 86400.0

CLIMATE_COLUMNS = ["t_s", "theta_int_C", "phi_int", "theta_ext_C", "phi_ext"]
TRACE_COLUMNS = ["t_s", "probe_name", "theta_C", "phi"]
JUMP_COLUMNS = ["t_s", "pair_name", "dtheta_K", "dphi", "dpc_Pa"]


# ------------------------------------------------------------------- climate

@dataclass
class ClimateSeries:
    """Interior and exterior (temperature [C], relative humidity) histories.

    Values between samples are linearly interpolated; outside the record the
    nearest sample is held. Timestamps must increase strictly and humidities
    lie in (0, 1]. Gaps longer than GAP_THRESHOLD_S are reported by gaps()
    and logged on construction; they invalidate any simulation horizon that
    overlaps them.
    """

    time_s: np.ndarray
    theta_int: np.ndarray
    phi_int: np.ndarray
    theta_ext: np.ndarray
    phi_ext: np.ndarray

    def __post_init__(self):
        self.time_s = np.atleast_1d(np.asarray(self.time_s, dtype=float))
        for name in ("theta_int", "phi_int", "theta_ext", "phi_ext"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if arr.shape != self.time_s.shape:
                raise ConfigError(
                    f"climate column {name} has {arr.size} samples, "
                    f"expected {self.time_s.size}")
            setattr(self, name, arr)
        if self.time_s.size == 0:
            raise ConfigError("climate record is empty")
        if np.any(np.diff(self.time_s) <= 0.0):
            raise ConfigError("climate timestamps must increase strictly")
        for name in ("phi_int", "phi_ext"):
            ph = getattr(self, name)
            if np.any((ph <= 0.0) | (ph > 1.0)):
                raise ParameterError(
                    f"climate {name} values must lie in (0, 1]")
        for t0, t1 in self.gaps():
            log.warning("climate record gap of %.1f h between t=%g s and "
                        "t=%g s", (t1 - t0) / 3600.0, t0, t1)

    def duration(self):
        return float(self.time_s[-1] - self.time_s[0])

    def gaps(self, threshold_s=GAP_THRESHOLD_S):
        """Sampling holes longer than threshold_s as (t_before, t_after)."""
        dt = np.diff(self.time_s)
        idx = np.nonzero(dt > threshold_s)[0]
        return [(float(self.time_s[i]), float(self.time_s[i + 1]))
                for i in idx]

    def interpolate(self, t):
        """(theta_int, phi_int, theta_ext, phi_ext) at time(s) t."""
        return tuple(np.interp(t, self.time_s, getattr(self, name))
                     for name in ("theta_int", "phi_int",
                                  "theta_ext", "phi_ext"))

    @classmethod
    def constant(cls, theta_int, phi_int, theta_ext, phi_ext, duration):
        """Record holding fixed conditions over [0, duration].

        Samples are laid out densely enough (6 h) that the record carries
        no flaggable gaps; interpolation is exact for constant data.
        """
        n = max(2, int(np.ceil(float(duration) / (GAP_THRESHOLD_S / 4.0))) + 1)
        t = np.linspace(0.0, float(duration), n)
        full = lambda v: np.full(n, float(v))
        return cls(t, full(theta_int), full(phi_int), full(theta_ext),
                   full(phi_ext))

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != CLIMATE_COLUMNS:
                raise ConfigError(
                    f"climate CSV header {header} does not match "
                    f"{CLIMATE_COLUMNS}")
            rows = [[float(v) for v in row] for row in reader if row]
        if not rows:
            raise ConfigError(f"climate CSV {path} carries no samples")
        cols = np.asarray(rows, dtype=float).T
        return cls(*cols)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CLIMATE_COLUMNS)
            for row in zip(self.time_s, self.theta_int, self.phi_int,
                           self.theta_ext, self.phi_ext):
                writer.writerow([repr(float(v)) for v in row])


# ------------------------------------------------------------------- sensors

@dataclass(frozen=True)
class Probe:
    """Named sample point; phase restricts lookup to one material side,
    which resolves points on a contact line where the field is two-valued."""

    name: str
    x: float
    y: float
    phase: int = None


@dataclass(frozen=True)
class JumpPair:
    """Two probes flanking one interface segment; jumps are signed
    mortar-side minus brick-side."""

    name: str
    brick: str
    mortar: str


@dataclass(frozen=True)
class SensorLayout:
    """Probe set with optional jump pairs and sensor accuracy metadata.

    The accuracies are the instrument bands used to judge whether a computed
    jump would be observable (theta in K, phi dimensionless).
    """

    probes: tuple
    pairs: tuple = ()
    theta_accuracy: float = 0.1
    phi_accuracy: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "probes", tuple(self.probes))
        object.__setattr__(self, "pairs", tuple(self.pairs))
        names = [p.name for p in self.probes]
        if len(set(names)) != len(names):
            raise ConfigError("probe names must be unique")
        if not self.theta_accuracy > 0 or not self.phi_accuracy > 0:
            raise ParameterError("sensor accuracies must be > 0")
        known = set(names)
        for pair in self.pairs:
            for member in (pair.brick, pair.mortar):
                if member not in known:
                    raise ConfigError(
                        f"jump pair {pair.name!r} references unknown probe "
                        f"{member!r}")

    def probe(self, name):
        for p in self.probes:
            if p.name == name:
                return p
        raise ConfigError(f"no probe named {name!r}")


def locate_point(mesh: Mesh, x, y, phase=None, tol=1e-9):
    """Containing triangle and barycentric weights of a point.

    With several containing triangles (point on an edge or vertex) the most
    interior one wins; a phase restriction discards the other material side
    first. Raises ConfigError when no triangle of the requested phase
    contains the point.
    """
    pts = mesh.nodes[mesh.triangles]            # (T, 3, 2)
    p = np.array([float(x), float(y)])
    a, b, c = pts[:, 0], pts[:, 1], pts[:, 2]

    def cross(u, v):
        return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

    det = cross(b - a, c - a)
    lam = np.stack([cross(b - p, c - p) / det,
                    cross(c - p, a - p) / det,
                    cross(a - p, b - p) / det], axis=1)
    inside = np.all(lam >= -tol, axis=1)
    if phase is not None:
        inside &= mesh.tri_phase == int(phase)
    cand = np.nonzero(inside)[0]
    if cand.size == 0:
        where = f" in phase {phase}" if phase is not None else ""
        raise ConfigError(f"point ({x}, {y}) lies in no mesh triangle{where}")
    best = cand[np.argmax(lam[cand].min(axis=1))]
    w = np.clip(lam[best], 0.0, None)
    return int(best), w / w.sum()


def probe_matrix(mesh: Mesh, layout: SensorLayout):
    """(names, W) with W @ nodal_field giving the probe samples."""
    names = [p.name for p in layout.probes]
    W = np.zeros((len(names), mesh.n_nodes))
    tris = {}
    for i, p in enumerate(layout.probes):
        tri, w = locate_point(mesh, p.x, p.y, p.phase)
        W[i, mesh.triangles[tri]] = w
        tris[p.name] = tri
    _validate_pairs(mesh, layout, tris)
    return names, W


def _validate_pairs(mesh, layout, probe_tris):
    """Each pair must read the two triangles flanking one interface segment."""
    for pair in layout.pairs:
        tb = probe_tris[pair.brick]
        tm = probe_tris[pair.mortar]
        nb = set(mesh.triangles[tb])
        nm = set(mesh.triangles[tm])
        for a1, a2, b1, b2 in mesh.interfaces:
            sa, sb = {int(a1), int(a2)}, {int(b1), int(b2)}
            if (sa <= nb and sb <= nm) or (sb <= nb and sa <= nm):
                break
        else:
            raise ConfigError(
                f"jump pair {pair.name!r}: probes {pair.brick!r} and "
                f"{pair.mortar!r} do not flank a common interface segment")


# ------------------------------------------------------------------- results

@dataclass
class JumpSeries:
    """Field discontinuities of one pair, signed mortar minus brick."""

    name: str
    dtheta: np.ndarray
    dphi: np.ndarray
    dpc: np.ndarray
    exceeds_theta_band: bool
    exceeds_phi_band: bool


@dataclass
class ExperimentResult:
    """Probe traces on the output time grid plus per-pair jump series."""

    times: np.ndarray
    theta: dict
    phi: dict
    jumps: dict = field(default_factory=dict)
    layout: SensorLayout = None
    info: dict = field(default_factory=dict)


# ----------------------------------------------------------------- transient

def run_experiment(mesh: Mesh, climate: ClimateSeries, layout: SensorLayout,
                   params, *, duration, dt=600.0, output_interval=3600.0,
                   initial=None, tol=1e-8, max_iter=25, max_halvings=5,
                   jacobian="picard"):
    """March the sample through [0, duration] under the climate record.

    Boundary driving: exterior record on the left face, interior record on
    the right face, both fields Dirichlet. The initial state is uniform at
    the interior conditions of t=0 unless initial=(theta0, phi0) overrides
    it. The march advances in steps of dt (halved internally on a failed
    step) and samples every probe at multiples of output_interval, always
    including t=0 and t=duration.
    """
    if duration <= 0:
        raise ParameterError(f"duration must be > 0, got {duration}")
    if dt <= 0 or output_interval <= 0:
        raise ParameterError("dt and output_interval must be > 0")
    if climate.time_s[0] > 0.0 or climate.time_s[-1] < duration:
        raise ConfigError(
            f"climate record [{climate.time_s[0]:g}, {climate.time_s[-1]:g}] s "
            f"does not cover the horizon [0, {duration:g}] s")
    for t0, t1 in climate.gaps():
        if t1 > 0.0 and t0 < duration:
            raise ConfigError(
                f"climate record gap of {(t1 - t0) / 3600.0:.1f} h between "
                f"t={t0:g} s and t={t1:g} s lies inside the simulation "
                f"horizon [0, {duration:g}] s")

    left = mesh.boundary_nodes("left")
    right = mesh.boundary_nodes("right")
    if left.size == 0 or right.size == 0:
        raise ConfigError("mesh lacks left/right boundary faces to drive")
    ties = fem.interface_ties(mesh) if params.interface.perfect else ()
    fx = np.union1d(left, right)
    dm = DofMap(mesh.n_nodes, fixed_theta=fx, fixed_phi=fx, ties=ties)
    ext_t = np.isin(dm.fixed_theta, left)
    ext_p = np.isin(dm.fixed_phi, left)

    def bc_values(t):
        th_i, ph_i, th_e, ph_e = climate.interpolate(t)
        return dm.fixed_vector(np.where(ext_t, th_e, th_i),
                               np.where(ext_p, ph_e, ph_i))

    names, W = probe_matrix(mesh, layout)

    if initial is None:
        th0, ph0, _, _ = climate.interpolate(0.0)
    else:
        th0, ph0 = initial
    state = NodalState.uniform(mesh.n_nodes, float(th0), float(ph0))

    out_times = np.arange(0.0, duration, output_interval)
    out_times = np.append(out_times, duration)

    samples_t = [W @ state.theta]
    samples_p = [W @ state.phi]
    info = {"newton_iterations": 0, "sub_steps": 0, "clamp_events": 0,
            "halvings_used": 0, "dt": float(dt),
            "output_interval": float(output_interval)}
    for t_prev, t_next in zip(out_times[:-1], out_times[1:]):
        while state.time < t_next - 1e-9 * max(dt, 1.0):
            step = min(dt, t_next - state.time)
            state, sinfo = fem.step_transient(
                mesh, state, step, params, dm, bc_values, tol=tol,
                max_iter=max_iter, max_halvings=max_halvings,
                jacobian=jacobian)
            info["newton_iterations"] += sinfo["newton_iterations"]
            info["sub_steps"] += sinfo["sub_steps"]
            info["clamp_events"] += sinfo["clamp_events"]
            info["halvings_used"] = max(info["halvings_used"],
                                        sinfo["halvings_used"])
        samples_t.append(W @ state.theta)
        samples_p.append(W @ state.phi)

    th_arr = np.asarray(samples_t)              # (K, P)
    ph_arr = np.asarray(samples_p)
    result = ExperimentResult(
        times=out_times,
        theta={n: th_arr[:, i] for i, n in enumerate(names)},
        phi={n: ph_arr[:, i] for i, n in enumerate(names)},
        layout=layout, info=info)
    result.jumps = extract_jumps(result, layout)
    return result


# ------------------------------------------------------------------ analysis

def extract_jumps(traces: ExperimentResult, layout: SensorLayout):
    """Per-pair field discontinuities, signed mortar minus brick.

    Each series also reports whether it would be observable: whether its
    largest magnitude exceeds the layout's sensor accuracy band.
    """
    jumps = {}
    for pair in layout.pairs:
        for member in (pair.brick, pair.mortar):
            if member not in traces.theta or member not in traces.phi:
                raise ConfigError(
                    f"jump pair {pair.name!r}: traces carry no probe "
                    f"{member!r}")
        dth = traces.theta[pair.mortar] - traces.theta[pair.brick]
        dph = traces.phi[pair.mortar] - traces.phi[pair.brick]
        dpc = (back_calculate_pc(traces.theta[pair.mortar],
                                 traces.phi[pair.mortar])
               - back_calculate_pc(traces.theta[pair.brick],
                                   traces.phi[pair.brick]))
        jumps[pair.name] = JumpSeries(
            name=pair.name, dtheta=dth, dphi=dph, dpc=dpc,
            exceeds_theta_band=bool(np.nanmax(np.abs(dth))
                                    > layout.theta_accuracy),
            exceeds_phi_band=bool(np.nanmax(np.abs(dph))
                                  > layout.phi_accuracy))
    return jumps


def back_calculate_pc(theta_C, phi, constants=mat.DEFAULT_CONSTANTS):
    """Kelvin capillary pressure of sensor traces.

    Samples with phi <= 0 cannot be inverted; they are logged and returned
    as NaN so downstream series keep their time grid.
    """
    th, ph = np.broadcast_arrays(np.asarray(theta_C, dtype=float),
                                 np.asarray(phi, dtype=float))
    out = np.full(ph.shape, np.nan)
    ok = ph > 0.0
    if not np.all(ok):
        log.warning("%d trace samples with phi <= 0 skipped in capillary "
                    "back-calculation", int((~ok).sum()))
    if np.any(ok):
        out[ok] = mat.capillary_pressure(th[ok] + mat.T0_K, ph[ok], constants)
    return out


# ----------------------------------------------------------------- trace I/O

def write_traces_csv(path, result: ExperimentResult):
    names = sorted(result.theta)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for k, t in enumerate(result.times):
            for name in names:
                writer.writerow([repr(float(t)), name,
                                 repr(float(result.theta[name][k])),
                                 repr(float(result.phi[name][k]))])


def read_traces_csv(path):
    """Traces written by write_traces_csv, as an ExperimentResult shell."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_COLUMNS:
            raise ConfigError(
                f"trace CSV header {header} does not match {TRACE_COLUMNS}")
        rows = [(float(t), name, float(th), float(ph))
                for t, name, th, ph in reader]
    if not rows:
        raise ConfigError(f"trace CSV {path} carries no samples")
    times = np.unique([r[0] for r in rows])
    order = {t: i for i, t in enumerate(times)}
    theta, phi = {}, {}
    for t, name, th, ph in rows:
        theta.setdefault(name, np.full(times.size, np.nan))
        phi.setdefault(name, np.full(times.size, np.nan))
        theta[name][order[t]] = th
        phi[name][order[t]] = ph
    for name, arr in theta.items():
        if np.any(np.isnan(arr)):
            raise ConfigError(
                f"trace CSV {path}: probe {name!r} misses samples on the "
                f"shared time grid")
    return ExperimentResult(times=times, theta=theta, phi=phi,
                            info={"source": str(path)})


def write_jumps_csv(path, result: ExperimentResult):
    names = sorted(result.jumps)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(JUMP_COLUMNS)
        for k, t in enumerate(result.times):
            for name in names:
                j = result.jumps[name]
                writer.writerow([repr(float(t)), name,
                                 repr(float(j.dtheta[k])),
                                 repr(float(j.dphi[k])),
                                 repr(float(j.dpc[k]))])
