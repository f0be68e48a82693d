"""Declarative YAML run configuration.

One YAML file describes a run: material overrides, mesh geometry, and a
command-specific section (homogenize / sweep / experiment / identify).
Loading validates aggressively and every error names the offending field,
so a typo dies at startup instead of deep inside a solve.  Parameter
provenance (measured source vs package default vs user override) is
tracked per dotted path and stamped into run manifests.
"""

import dataclasses
import itertools
import logging
import os

import numpy as np
import yaml

from . import experiment as exp
from . import homogenization as hom
from . import identify as ident
from . import material as mat
from . import mesh as msh
from .errors import ConfigError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

TOP_KEYS = {"schema_version", "meta", "materials", "interface", "constants",
            "mesh", "homogenize", "sweep", "experiment", "identify"}

#: dotted parameter paths whose default values come from the measurement
#: campaign this toolkit reproduces; everything else in the default bundle
#: is a literature-typical fallback
MEASURED_PATHS = frozenset(
    f"{phase}.{name}"
    for phase in ("brick", "mortar")
    for name in ("lambda0", "b_tcs", "mu", "w_f", "w80", "A")
) | {"interface.alpha_int", "interface.beta_int"}


def load_config(path):
    """Parse and structurally validate a YAML config file."""
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        # pyyaml error strings carry line/column marks
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a mapping at top level, "
                          f"got {type(cfg).__name__}")
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise ConfigError(f"config {path}: unknown top-level keys "
                          f"{sorted(unknown)}; expected {sorted(TOP_KEYS)}")
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config {path}: schema_version {version} not "
                          f"supported (this build reads {SCHEMA_VERSION})")
    return cfg


def _require_mapping(node, where):
    if not isinstance(node, dict):
        raise ConfigError(f"{where} must be a mapping, "
                          f"got {type(node).__name__}")
    return node


def _known_paths(params):
    paths = []
    for phase in params.phases:
        for f in dataclasses.fields(phase):
            if f.name != "name":
                paths.append(f"{phase.name}.{f.name}")
    for f in dataclasses.fields(params.interface):
        paths.append(f"interface.{f.name}")
    for f in dataclasses.fields(params.constants):
        paths.append(f"constants.{f.name}")
    return paths


def params_from_config(cfg):
    """Build the parameter bundle; returns (params, provenance).

    provenance maps every dotted path to "paper" (value reproduced from
    the measurement campaign), "default" (literature-typical fallback) or
    "user" (overridden in this config).
    """
    overrides = {}
    for section, prefix in (("materials", None), ("interface", "interface"),
                            ("constants", "constants")):
        node = cfg.get(section)
        if node is None:
            continue
        _require_mapping(node, section)
        if prefix is None:
            for phase_name, fields in node.items():
                _require_mapping(fields, f"materials.{phase_name}")
                for key, value in fields.items():
                    overrides[f"{phase_name}.{key}"] = value
        else:
            for key, value in node.items():
                overrides[f"{prefix}.{key}"] = value
    params = ident.apply_overrides(mat.default_params(), overrides)
    provenance = {}
    for path in _known_paths(params):
        if path in overrides:
            provenance[path] = "user"
        elif path in MEASURED_PATHS:
            provenance[path] = "paper"
        else:
            provenance[path] = "default"
    return params, provenance


# ---------------------------------------------------------------------- mesh

_MESH_KINDS = ("puc", "wall", "laminate")


def mesh_from_config(cfg):
    """Generate the mesh described by the config's mesh section."""
    node = cfg.get("mesh")
    if node is None:
        raise ConfigError("config needs a mesh section "
                          "(or pass --mesh with a mesh file)")
    node = dict(_require_mapping(node, "mesh"))
    kind = node.pop("kind", "puc")
    try:
        if kind == "puc":
            return msh.generate_puc(msh.PucSpec(**node))
        if kind == "wall":
            return msh.generate_wall_sample(msh.WallSpec(**node))
        if kind == "laminate":
            return msh.generate_laminate_puc(**node)
    except TypeError as e:
        raise ConfigError(f"mesh section for kind={kind!r}: {e}") from None
    raise ConfigError(f"mesh.kind must be one of {_MESH_KINDS}, got {kind!r}")


# ---------------------------------------------------------- homogenize/sweep

def _load_case(node, where, bc_override=None):
    node = dict(_require_mapping(node, where))
    if bc_override is not None:
        node["bc_kind"] = bc_override
    try:
        for key in ("theta0", "phi0"):
            if key in node:
                node[key] = float(node[key])
        for key in ("grad_theta", "grad_phi"):
            if key in node:
                node[key] = tuple(float(g) for g in node[key])
        return hom.MacroLoadCase(**node)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def load_case_from_config(cfg, bc_override=None):
    node = _require_mapping(cfg.get("homogenize", {}), "homogenize")
    if "load" not in node:
        raise ConfigError("homogenize section needs a load mapping")
    return _load_case(node["load"], "homogenize.load", bc_override)


def _as_list(node, where):
    if not isinstance(node, (list, tuple)) or not node:
        raise ConfigError(f"{where} must be a non-empty list")
    return list(node)


def sweep_cases_from_config(cfg, bc_override=None):
    """Cartesian (load cases, interface sets) grids from the sweep section.

    Load cases are the product of theta0 x phi0 x grad_theta x grad_phi
    lists; interface sets are the product of alpha_int x beta_int lists
    (or a single perfect-contact set).
    """
    if cfg.get("sweep") is None:
        raise ConfigError("config needs a sweep section")
    node = _require_mapping(cfg["sweep"], "sweep")
    known = {"bc_kind", "theta0", "phi0", "grad_theta", "grad_phi",
             "alpha_int", "beta_int", "perfect"}
    unknown = set(node) - known
    if unknown:
        raise ConfigError(f"sweep: unknown keys {sorted(unknown)}")
    bc_kind = bc_override or node.get("bc_kind", "dirichlet")
    grids = {}
    for key, default in (("theta0", [20.0]), ("phi0", [0.5]),
                         ("grad_theta", [[0.0, 0.0]]),
                         ("grad_phi", [[0.0, 0.0]])):
        grids[key] = _as_list(node.get(key, default), f"sweep.{key}")
    cases = []
    for th0, ph0, gt, gp in itertools.product(
            grids["theta0"], grids["phi0"], grids["grad_theta"],
            grids["grad_phi"]):
        cases.append(_load_case(
            {"theta0": th0, "phi0": ph0, "grad_theta": gt, "grad_phi": gp,
             "bc_kind": bc_kind}, "sweep"))
    if node.get("perfect", False):
        isets = [{"perfect": True}]
    else:
        alphas = _as_list(node.get("alpha_int", [1.0e5]), "sweep.alpha_int")
        betas = _as_list(node.get("beta_int", [5.25e-9]), "sweep.beta_int")
        isets = [{"perfect": False, "alpha_int": float(a),
                  "beta_int": float(b)}
                 for a, b in itertools.product(alphas, betas)]
    return cases, isets


# ---------------------------------------------------------------- experiment

def _layout_from_node(node, where):
    node = _require_mapping(node, where)
    probes = []
    for i, p in enumerate(_as_list(node.get("probes"), f"{where}.probes")):
        p = dict(_require_mapping(p, f"{where}.probes[{i}]"))
        try:
            probes.append(exp.Probe(**p))
        except TypeError as e:
            raise ConfigError(f"{where}.probes[{i}]: {e}") from None
    pairs = []
    for i, p in enumerate(node.get("pairs", [])):
        p = dict(_require_mapping(p, f"{where}.pairs[{i}]"))
        try:
            pairs.append(exp.JumpPair(**p))
        except TypeError as e:
            raise ConfigError(f"{where}.pairs[{i}]: {e}") from None
    kw = {}
    for key in ("theta_accuracy", "phi_accuracy"):
        if key in node:
            kw[key] = float(node[key])
    return exp.SensorLayout(probes=tuple(probes), pairs=tuple(pairs), **kw)


_EXPERIMENT_KEYS = {"climate_csv", "climate", "duration_s", "dt_s",
                    "output_interval_s", "max_halvings", "initial",
                    "probes", "pairs", "theta_accuracy", "phi_accuracy"}


def experiment_from_config(cfg, base_dir="."):
    """(climate, layout, run kwargs) from the experiment section."""
    node = cfg.get("experiment")
    if node is None:
        raise ConfigError("config needs an experiment section")
    node = _require_mapping(node, "experiment")
    unknown = set(node) - _EXPERIMENT_KEYS
    if unknown:
        raise ConfigError(f"experiment: unknown keys {sorted(unknown)}")
    if "duration_s" not in node:
        raise ConfigError("experiment needs duration_s")
    climate = _climate_from_node(node, base_dir)
    layout = _layout_from_node(node, "experiment")
    kwargs = {"duration": float(node["duration_s"])}
    for key, name in (("dt_s", "dt"), ("output_interval_s",
                                       "output_interval")):
        if key in node:
            kwargs[name] = float(node[key])
    if "max_halvings" in node:
        kwargs["max_halvings"] = int(node["max_halvings"])
    if "initial" in node:
        init = _require_mapping(node["initial"], "experiment.initial")
        try:
            kwargs["initial"] = (float(init["theta"]), float(init["phi"]))
        except KeyError as e:
            raise ConfigError(
                f"experiment.initial needs theta and phi, missing {e}"
            ) from None
    return climate, layout, kwargs


def _climate_from_node(node, base_dir):
    has_csv, has_inline = "climate_csv" in node, "climate" in node
    if has_csv == has_inline:
        raise ConfigError("experiment needs exactly one of climate_csv "
                          "or climate")
    if has_csv:
        path = os.path.join(base_dir, node["climate_csv"])
        return exp.ClimateSeries.from_csv(path)
    c = _require_mapping(node["climate"], "experiment.climate")
    unknown = set(c) - {"theta_int", "phi_int", "theta_ext", "phi_ext",
                        "duration_s", "time_s"}
    if unknown:
        raise ConfigError(f"experiment.climate: unknown keys "
                          f"{sorted(unknown)}")
    if "time_s" in c:
        try:
            return exp.ClimateSeries(
                np.asarray(c["time_s"], dtype=float),
                np.asarray(c["theta_int"], dtype=float),
                np.asarray(c["phi_int"], dtype=float),
                np.asarray(c["theta_ext"], dtype=float),
                np.asarray(c["phi_ext"], dtype=float))
        except KeyError as e:
            raise ConfigError(f"experiment.climate missing {e}") from None
    try:
        return exp.ClimateSeries.constant(
            float(c["theta_int"]), float(c["phi_int"]),
            float(c["theta_ext"]), float(c["phi_ext"]),
            float(c["duration_s"]))
    except KeyError as e:
        raise ConfigError(f"experiment.climate missing {e}") from None


# ------------------------------------------------------------------ identify

_STAGE_KEYS = _EXPERIMENT_KEYS | {"observed_csv", "priors"}


def _stage_from_node(cfg_stage, where, mesh, params, base_dir):
    node = _require_mapping(cfg_stage, where)
    unknown = set(node) - _STAGE_KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    if "observed_csv" not in node:
        raise ConfigError(f"{where} needs observed_csv")
    observed = exp.read_traces_csv(os.path.join(base_dir,
                                                node["observed_csv"]))
    priors = ident.priors_from_dicts(
        _as_list(node.get("priors"), f"{where}.priors"))
    wrapped = dict(cfg_stage)
    wrapped.pop("observed_csv")
    wrapped.pop("priors")
    climate, layout, kwargs = experiment_from_config(
        {"experiment": wrapped}, base_dir)
    if "initial" in kwargs:
        raise ConfigError(f"{where}: initial state is not configurable "
                          "for identification runs")
    spec = ident.ExperimentSpec(
        mesh, climate, layout, params, duration=kwargs["duration"],
        dt=kwargs.get("dt", 600.0),
        output_interval=kwargs.get("output_interval", 3600.0),
        max_halvings=kwargs.get("max_halvings", 5))
    return priors, spec, observed


def identify_from_config(cfg, mesh, params, base_dir="."):
    """((thermal args), (moisture args), options) for the two-stage run."""
    node = cfg.get("identify")
    if node is None:
        raise ConfigError("config needs an identify section")
    node = _require_mapping(node, "identify")
    unknown = set(node) - {"thermal", "moisture", "n", "seed", "k"}
    if unknown:
        raise ConfigError(f"identify: unknown keys {sorted(unknown)}")
    for stage in ("thermal", "moisture"):
        if stage not in node:
            raise ConfigError(f"identify needs a {stage} stage")
    thermal = _stage_from_node(node["thermal"], "identify.thermal",
                               mesh, params, base_dir)
    moisture = _stage_from_node(node["moisture"], "identify.moisture",
                                mesh, params, base_dir)
    options = {"n": int(node.get("n", 50)), "seed": int(node.get("seed", 0)),
               "k": int(node.get("k", 5))}
    if options["n"] < 1:
        raise ConfigError(f"identify.n must be >= 1, got {options['n']}")
    return thermal, moisture, options
