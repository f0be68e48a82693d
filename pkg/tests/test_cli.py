"""Command-line interface: configs, subcommands, exit codes, manifests."""

import csv
import json

import numpy as np
import pytest

from masonry_ham import cli
from masonry_ham import config as cfgmod
from masonry_ham import experiment as E
from masonry_ham import material as M
from masonry_ham import mesh as MS
from masonry_ham.errors import ConfigError


def run_cli(*argv):
    return cli.main(list(argv))


def write(path, text):
    path.write_text(text)
    return str(path)


# ------------------------------------------------------------------- config

def test_config_loader_rejects_structural_problems(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        cfgmod.load_config(tmp_path / "missing.yaml")
    bad_yaml = write(tmp_path / "broken.yaml", "mesh: {kind: puc\n")
    with pytest.raises(ConfigError, match="line"):
        cfgmod.load_config(bad_yaml)
    not_map = write(tmp_path / "list.yaml", "- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        cfgmod.load_config(not_map)
    unknown = write(tmp_path / "unknown.yaml", "banana: 1\n")
    with pytest.raises(ConfigError, match="banana"):
        cfgmod.load_config(unknown)
    future = write(tmp_path / "future.yaml", "schema_version: 99\n")
    with pytest.raises(ConfigError, match="schema_version"):
        cfgmod.load_config(future)
    empty = write(tmp_path / "empty.yaml", "")
    assert cfgmod.load_config(empty) == {}


def test_params_from_config_tracks_provenance(tmp_path):
    cfg = cfgmod.load_config(write(tmp_path / "p.yaml", """
materials:
  brick: {lambda0: 0.3}
interface: {alpha_int: 2.0e+5}
"""))
    params, provenance = cfgmod.params_from_config(cfg)
    assert params.phases[0].lambda0 == 0.3
    assert params.interface.alpha_int == 2e5
    assert provenance["brick.lambda0"] == "user"
    assert provenance["interface.alpha_int"] == "user"
    assert provenance["mortar.lambda0"] == "paper"
    assert provenance["brick.rho_s"] == "default"
    assert provenance["constants.h_v"] == "default"


def test_params_from_config_names_bad_fields(tmp_path):
    cfg = cfgmod.load_config(write(tmp_path / "p.yaml", """
materials:
  brick: {nonsense: 1.0}
"""))
    with pytest.raises(ConfigError, match="nonsense"):
        cfgmod.params_from_config(cfg)


def test_mesh_from_config_dispatches_on_kind(tmp_path):
    cfg = cfgmod.load_config(write(tmp_path / "m.yaml", """
mesh: {kind: laminate, t_brick: 0.06, t_mortar: 0.02, height: 0.04,
       target: 0.01}
"""))
    mesh = cfgmod.mesh_from_config(cfg)
    assert mesh.phase_names == ("brick", "mortar")
    assert len(mesh.periodic_pairs) > 0
    bad = cfgmod.load_config(write(tmp_path / "bad.yaml",
                                   "mesh: {kind: hexagons}\n"))
    with pytest.raises(ConfigError, match="hexagons"):
        cfgmod.mesh_from_config(bad)
    typo = cfgmod.load_config(write(tmp_path / "typo.yaml",
                                    "mesh: {kind: puc, widht: 1.0}\n"))
    with pytest.raises(ConfigError, match="widht"):
        cfgmod.mesh_from_config(typo)


def test_sweep_cases_form_the_cartesian_grid(tmp_path):
    cfg = cfgmod.load_config(write(tmp_path / "s.yaml", """
sweep:
  theta0: [10.0, 20.0]
  phi0: [0.5]
  grad_phi: [[0.8, 0.0], [0.4, 0.0], [0.2, 0.0]]
  alpha_int: [1.0e+4, 1.0e+5]
  beta_int: [5.25e-9]
"""))
    cases, isets = cfgmod.sweep_cases_from_config(cfg)
    assert len(cases) == 2 * 1 * 1 * 3
    assert len(isets) == 2 * 1
    assert {c.bc_kind for c in cases} == {"dirichlet"}
    cases2, _ = cfgmod.sweep_cases_from_config(cfg, bc_override="periodic")
    assert {c.bc_kind for c in cases2} == {"periodic"}


def test_yaml_numeric_strings_are_coerced(tmp_path):
    # YAML 1.1 reads unsigned-exponent floats as strings; the loader must
    # not let them reach arithmetic
    cfg = cfgmod.load_config(write(tmp_path / "c.yaml", """
interface: {alpha_int: 1e5}
sweep:
  theta0: [20.0]
  alpha_int: [1e4]
  beta_int: [5.25e-9]
"""))
    params, _ = cfgmod.params_from_config(cfg)
    assert params.interface.alpha_int == 1e5
    _, isets = cfgmod.sweep_cases_from_config(cfg)
    assert isets[0]["alpha_int"] == 1e4


# ------------------------------------------------------------ mesh command

MESH_CFG = "mesh: {kind: puc, target: 0.02}\n"


def test_mesh_command_writes_mesh_and_manifest(tmp_path, capsys):
    cfg = write(tmp_path / "mesh.yaml", MESH_CFG)
    out = tmp_path / "out"
    assert run_cli("mesh", "--config", cfg, "--out", str(out)) == 0
    mesh = MS.load_text(out / "mesh.txt")
    MS.validate(mesh)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "mesh"
    assert manifest["status"] == "ok"
    assert manifest["outputs"] == ["mesh.txt"]
    assert manifest["mesh_hash"] == cli.mesh_digest(mesh)
    assert manifest["mesh_stats"]["n_nodes"] == mesh.n_nodes
    assert "nodes" in capsys.readouterr().out


def test_mesh_command_is_deterministic(tmp_path):
    cfg = write(tmp_path / "mesh.yaml", MESH_CFG)
    for sub in ("a", "b"):
        assert run_cli("mesh", "--config", cfg,
                       "--out", str(tmp_path / sub)) == 0
    assert ((tmp_path / "a" / "mesh.txt").read_bytes()
            == (tmp_path / "b" / "mesh.txt").read_bytes())


def test_mesh_command_rejects_degenerate_dimensions(tmp_path, capsys):
    cfg = write(tmp_path / "bad.yaml", "mesh: {kind: puc, brick_w: -1.0}\n")
    assert run_cli("mesh", "--config", cfg,
                   "--out", str(tmp_path / "out")) == 2
    assert "brick_w" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    missing = str(tmp_path / "nope.yaml")
    assert run_cli("mesh", "--config", missing,
                   "--out", str(tmp_path / "out")) == 2
    broken = write(tmp_path / "broken.yaml", "mesh: {kind: puc\n")
    assert run_cli("mesh", "--config", broken,
                   "--out", str(tmp_path / "out")) == 2
    err = capsys.readouterr().err
    assert "line" in err  # yaml diagnostics carry positions


# ------------------------------------------------------ homogenize command

HOMOG_CFG = """
mesh: {kind: laminate, t_brick: 0.06, t_mortar: 0.02, height: 0.04,
       target: 0.008}
interface: {perfect: true}
homogenize:
  load: {theta0: 20.0, phi0: 0.5, grad_theta: [1.0, 0.0],
         grad_phi: [0.0, 0.0], bc_kind: periodic}
"""


def test_homogenize_on_a_uniform_medium_returns_the_local_tangent(tmp_path):
    # single-phase periodic mesh loaded via --mesh: the effective tensor
    # in the CSV must equal the pointwise transport coefficients
    mesh = MS.mesh_rectangles([(0.0, 0.1, 0.0, 0.08, 0)],
                              phase_names=("brick",), target=0.02,
                              periodic=True)
    mesh_path = tmp_path / "uniform.txt"
    MS.save_text(mesh, mesh_path)
    cfg = write(tmp_path / "h.yaml", """
homogenize:
  load: {theta0: 20.0, phi0: 0.5, grad_theta: [0.0, 0.0],
         grad_phi: [0.0, 0.0], bc_kind: periodic}
""")
    out = tmp_path / "out"
    assert run_cli("homogenize", "--config", cfg, "--mesh", str(mesh_path),
                   "--out", str(out), "--perfect-contact") == 0
    row = next(csv.DictReader(open(out / "homogenize.csv", newline="")))
    brick = M.default_params().phases[0]
    k_tt, k_tp, k_pt, k_pp = M.transport_coefficients(
        20.0, 0.5, brick, M.DEFAULT_CONSTANTS)
    for block, kval in (("tt", k_tt), ("tp", k_tp), ("pt", k_pt),
                        ("pp", k_pp)):
        assert float(row[f"KM_{block}_xx"]) == pytest.approx(kval,
                                                             rel=1e-10)
        assert float(row[f"KM_{block}_yy"]) == pytest.approx(kval,
                                                             rel=1e-10)
        assert abs(float(row[f"KM_{block}_xy"])) <= abs(kval) * 1e-10
    assert row["status"] == "ok"


def test_homogenize_bc_flag_overrides_config(tmp_path):
    cfg = write(tmp_path / "h.yaml", HOMOG_CFG)
    out = tmp_path / "out"
    assert run_cli("homogenize", "--config", cfg, "--out", str(out),
                   "--bc", "dirichlet") == 0
    row = next(csv.DictReader(open(out / "homogenize.csv", newline="")))
    assert row["bc_kind"] == "dirichlet"


def test_homogenize_numerical_failure_exits_3(tmp_path, capsys):
    cfg = write(tmp_path / "h.yaml", """
mesh: {kind: laminate, t_brick: 0.06, t_mortar: 0.02, height: 0.04,
       target: 0.01}
homogenize:
  load: {theta0: 20.0, phi0: 0.5, grad_theta: [1.0e+9, 0.0],
         grad_phi: [0.0, 0.0], bc_kind: dirichlet}
""")
    out = tmp_path / "out"
    assert run_cli("homogenize", "--config", cfg, "--out", str(out)) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert "DomainError" in manifest["error"]
    assert "failure" in capsys.readouterr().err


# ----------------------------------------------------------- sweep command

SWEEP_CFG = """
mesh: {kind: laminate, t_brick: 0.06, t_mortar: 0.02, height: 0.04,
       target: 0.008}
sweep:
  theta0: [20.0]
  phi0: [0.5]
  grad_theta: [[25.0, 0.0]]
  grad_phi: [[0.8, 0.0], [0.4, 0.0]]
  alpha_int: [1.0e+4, 1.0e+5]
  beta_int: [5.25e-9]
"""


def test_sweep_command_writes_the_full_grid(tmp_path):
    cfg = write(tmp_path / "s.yaml", SWEEP_CFG)
    out = tmp_path / "out"
    assert run_cli("sweep", "--config", cfg, "--out", str(out)) == 0
    rows = list(csv.DictReader(open(out / "sweep.csv", newline="")))
    assert len(rows) == 2 * 2  # grad_phi grid x alpha grid
    assert all(r["status"] == "ok" for r in rows)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n_cases"] == 4 and manifest["n_failed"] == 0
    sidecar = json.loads((out / "sweep.csv.json").read_text())
    assert sidecar["n_rows"] == 4
    assert sidecar["meta"]["command"] == "sweep"


def test_sweep_reruns_are_byte_identical(tmp_path):
    cfg = write(tmp_path / "s.yaml", SWEEP_CFG)
    for sub in ("a", "b"):
        assert run_cli("sweep", "--config", cfg,
                       "--out", str(tmp_path / sub)) == 0
    assert ((tmp_path / "a" / "sweep.csv").read_bytes()
            == (tmp_path / "b" / "sweep.csv").read_bytes())


def test_sweep_perfect_contact_flag_collapses_interface_grid(tmp_path):
    cfg = write(tmp_path / "s.yaml", SWEEP_CFG)
    out = tmp_path / "out"
    assert run_cli("sweep", "--config", cfg, "--out", str(out),
                   "--perfect-contact") == 0
    rows = list(csv.DictReader(open(out / "sweep.csv", newline="")))
    assert len(rows) == 2
    assert all(r["perfect_contact"] == "True" for r in rows)


# ----------------------------------------------------------- solve command

SOLVE_CFG = """
mesh: {kind: wall, n_cols: 1, n_courses: 2, target: 0.02}
interface: {alpha_int: 1.0e+5, beta_int: 5.25e-9}
experiment:
  climate: {theta_int: 24.5, phi_int: 0.5, theta_ext: -9.5, phi_ext: 0.5,
            duration_s: 86400.0}
  duration_s: 14400.0
  dt_s: 3600.0
  output_interval_s: 7200.0
  probes:
    - {name: center, x: 0.15, y: 0.07}
"""


def test_solve_command_writes_traces_and_manifest(tmp_path):
    cfg = write(tmp_path / "run.yaml", SOLVE_CFG)
    out = tmp_path / "out"
    assert run_cli("solve", "--config", cfg, "--out", str(out)) == 0
    back = E.read_traces_csv(out / "traces.csv")
    assert back.times.tolist() == [0.0, 7200.0, 14400.0]
    assert np.all(np.isfinite(back.theta["center"]))
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert manifest["run_info"]["clamp_events"] == 0
    assert manifest["parameter_provenance"]["interface.alpha_int"] == "user"
    assert manifest["wall_clock_s"] > 0


def test_solve_numerical_failure_exits_3_with_diagnostics(tmp_path, capsys):
    cfg = write(tmp_path / "run.yaml", """
mesh: {kind: wall, n_cols: 1, n_courses: 2, target: 0.02}
experiment:
  climate:
    time_s: [0.0, 1.0, 86400.0]
    theta_int: [20.0, 20.0, 20.0]
    phi_int: [0.3, 0.3, 0.3]
    theta_ext: [20.0, 20.0, 20.0]
    phi_ext: [0.3, 0.98, 0.98]
  duration_s: 14400.0
  dt_s: 3600.0
  max_halvings: 0
  probes: [{name: c, x: 0.15, y: 0.07}]
""")
    out = tmp_path / "out"
    assert run_cli("solve", "--config", cfg, "--out", str(out)) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert "ConvergenceError" in manifest["error"]
    assert "failure" in capsys.readouterr().err


# -------------------------------------------------------- identify command

@pytest.fixture(scope="module")
def identify_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("ident")
    slab = MS.mesh_rectangles(
        [(0.0, 0.05, 0.0, 0.02, 0), (0.05, 0.10, 0.0, 0.02, 1)],
        phase_names=("brick", "mortar"), target=0.01)
    mesh_path = root / "slab.txt"
    MS.save_text(slab, mesh_path)
    prm = M.default_params().with_interface(perfect=False, alpha_int=1e5,
                                            beta_int=5.25e-9)
    layout = E.SensorLayout(
        probes=(E.Probe("b1", 0.01, 0.01), E.Probe("m1", 0.07, 0.01)))
    clim_t = E.ClimateSeries.constant(24.5, 0.5, -9.5, 0.5, 86400.0)
    obs_t = E.run_experiment(slab, clim_t, layout, prm, duration=21600.0,
                             dt=3600.0, output_interval=3600.0)
    E.write_traces_csv(root / "obs_thermal.csv", obs_t)
    t = np.array([0.0, 7200.0, 43200.0])
    clim_m = E.ClimateSeries(t, np.full(3, 20.0), np.full(3, 0.5),
                             np.full(3, 20.0), np.array([0.5, 0.8, 0.8]))
    obs_m = E.run_experiment(slab, clim_m, layout, prm, duration=21600.0,
                             dt=3600.0, output_interval=3600.0,
                             max_halvings=8)
    E.write_traces_csv(root / "obs_moisture.csv", obs_m)
    cfg = write(root / "identify.yaml", """
interface: {alpha_int: 1.0e+5, beta_int: 5.25e-9}
identify:
  n: 3
  seed: 123
  k: 2
  thermal:
    observed_csv: obs_thermal.csv
    climate: {theta_int: 24.5, phi_int: 0.5, theta_ext: -9.5, phi_ext: 0.5,
              duration_s: 86400.0}
    duration_s: 21600.0
    dt_s: 3600.0
    output_interval_s: 3600.0
    probes:
      - {name: b1, x: 0.01, y: 0.01}
      - {name: m1, x: 0.07, y: 0.01}
    priors:
      - {name: brick.lambda0, mean: 0.3, cov: 0.3, bounds: [0.05, 1.0]}
      - {name: interface.alpha_int, mean: 8.0e+4, cov: 0.5,
         bounds: [1.0e+3, 1.0e+7]}
  moisture:
    observed_csv: obs_moisture.csv
    climate:
      time_s: [0.0, 7200.0, 43200.0]
      theta_int: [20.0, 20.0, 20.0]
      phi_int: [0.5, 0.5, 0.5]
      theta_ext: [20.0, 20.0, 20.0]
      phi_ext: [0.5, 0.8, 0.8]
    duration_s: 21600.0
    dt_s: 3600.0
    output_interval_s: 3600.0
    max_halvings: 8
    probes:
      - {name: b1, x: 0.01, y: 0.01}
      - {name: m1, x: 0.07, y: 0.01}
    priors:
      - {name: brick.mu, mean: 15.0, cov: 0.3, bounds: [2.0, 60.0]}
""")
    return root, cfg, str(mesh_path)


def test_identify_command_end_to_end(identify_setup, tmp_path):
    root, cfg, mesh_path = identify_setup
    out = tmp_path / "out"
    assert run_cli("identify", "--config", cfg, "--mesh", mesh_path,
                   "--out", str(out), "--jobs", "2") == 0
    summary = json.loads((out / "summary.json").read_text())
    assert sorted(summary["best_params"]) == [
        "brick.lambda0", "brick.mu", "interface.alpha_int"]
    # the synthetic truth generator used the default parameters, so the
    # best thermal draw must beat the others at matching them
    thermal = list(csv.DictReader(open(out / "thermal_results.csv",
                                       newline="")))
    assert len(thermal) == 2  # k=2
    assert (float(thermal[0]["objective"])
            <= float(thermal[1]["objective"]))
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 123
    assert manifest["identify_info"]["thermal_failed"] == 0


def test_identify_seed_flag_overrides_config(identify_setup, tmp_path):
    root, cfg, mesh_path = identify_setup
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    for out in (out_a, out_b):
        assert run_cli("identify", "--config", cfg, "--mesh", mesh_path,
                       "--out", str(out), "--seed", "7") == 0
    sa = json.loads((out_a / "summary.json").read_text())
    sb = json.loads((out_b / "summary.json").read_text())
    assert sa["best_params"] == sb["best_params"]
    assert sa["info"]["seed"] == 7
    assert ((out_a / "thermal_results.csv").read_bytes()
            == (out_b / "thermal_results.csv").read_bytes())


# -------------------------------------------------------------- misc paths

def test_commands_do_not_mutate_inputs(tmp_path):
    cfg_path = write(tmp_path / "mesh.yaml", MESH_CFG)
    before = open(cfg_path, "rb").read()
    assert run_cli("mesh", "--config", cfg_path,
                   "--out", str(tmp_path / "out")) == 0
    assert open(cfg_path, "rb").read() == before


def test_version_flag_reports_package_version(capsys):
    import masonry_ham
    with pytest.raises(SystemExit) as exc:
        run_cli("--version")
    assert exc.value.code == 0
    assert masonry_ham.__version__ in capsys.readouterr().out
