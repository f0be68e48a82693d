"""Climate records, sensor probing, transient wall runs and jump extraction."""

import csv
import dataclasses
import logging

import numpy as np
import pytest

from masonry_ham import experiment as E
from masonry_ham import material as M
from masonry_ham import mesh as MS
from masonry_ham.errors import ConfigError, ParameterError


# ------------------------------------------------------------------ fixtures

@pytest.fixture(scope="module")
def params():
    return M.default_params()


@pytest.fixture(scope="module")
def slab():
    """Brick|mortar slab, exterior face left, interior face right."""
    return MS.mesh_rectangles(
        [(0.0, 0.05, 0.0, 0.02, 0), (0.05, 0.10, 0.0, 0.02, 1)],
        phase_names=("brick", "mortar"), target=0.01)


@pytest.fixture(scope="module")
def slab_layout():
    return E.SensorLayout(
        probes=(E.Probe("b1", 0.01, 0.01), E.Probe("b2", 0.03, 0.01),
                E.Probe("m1", 0.07, 0.01), E.Probe("m2", 0.09, 0.01),
                E.Probe("ifb", 0.05, 0.01, phase=0),
                E.Probe("ifm", 0.05, 0.01, phase=1)),
        pairs=(E.JumpPair("joint", brick="ifb", mortar="ifm"),))


def decoupled(params):
    """Constant conductivities and no vapor enthalpy coupling."""
    phases = tuple(dataclasses.replace(ph, b_tcs=0.0) for ph in params.phases)
    constants = dataclasses.replace(params.constants, h_v=0.0)
    return dataclasses.replace(params, phases=phases, constants=constants)


# ------------------------------------------------------------------- climate

def test_climate_rejects_non_increasing_timestamps():
    with pytest.raises(ConfigError):
        E.ClimateSeries(np.array([0.0, 10.0, 10.0]), np.zeros(3),
                        np.full(3, 0.5), np.zeros(3), np.full(3, 0.5))


def test_climate_rejects_out_of_range_humidity():
    with pytest.raises(ParameterError):
        E.ClimateSeries(np.array([0.0, 10.0]), np.zeros(2),
                        np.array([0.5, 0.0]), np.zeros(2), np.full(2, 0.5))


def test_climate_rejects_mismatched_columns():
    with pytest.raises(ConfigError):
        E.ClimateSeries(np.array([0.0, 10.0]), np.zeros(3),
                        np.full(2, 0.5), np.zeros(2), np.full(2, 0.5))


def test_climate_flags_long_gaps(caplog):
    t = np.array([0.0, 3600.0, 3600.0 + 25 * 3600.0])
    with caplog.at_level(logging.WARNING, logger="masonry_ham.experiment"):
        clim = E.ClimateSeries(t, np.zeros(3), np.full(3, 0.5), np.zeros(3),
                               np.full(3, 0.5))
    assert clim.gaps() == [(3600.0, 3600.0 + 25 * 3600.0)]
    assert any("gap" in rec.message for rec in caplog.records)


def test_climate_interpolation_is_linear_and_clamped():
    clim = E.ClimateSeries(np.array([0.0, 100.0]), np.array([10.0, 20.0]),
                           np.array([0.4, 0.6]), np.array([-5.0, 5.0]),
                           np.array([0.9, 0.7]))
    th_i, ph_i, th_e, ph_e = clim.interpolate(50.0)
    assert (th_i, ph_i, th_e, ph_e) == (15.0, 0.5, 0.0, 0.8)
    assert clim.interpolate(-10.0)[0] == 10.0
    assert clim.interpolate(1e9)[0] == 20.0


def test_constant_climate_covers_duration_without_gaps():
    clim = E.ClimateSeries.constant(24.5, 0.5, -9.5, 0.8, 60 * 86400.0)
    assert clim.time_s[0] == 0.0
    assert clim.time_s[-1] == 60 * 86400.0
    assert clim.gaps() == []
    assert np.all(clim.theta_int == 24.5) and np.all(clim.phi_ext == 0.8)


def test_climate_csv_round_trip(tmp_path):
    t = np.array([0.0, 3600.0, 7200.0])
    clim = E.ClimateSeries(t, np.array([20.0, 21.5, 22.0]),
                           np.array([0.5, 0.55, 0.6]),
                           np.array([-9.5, -9.0, -8.5]),
                           np.array([0.8, 0.81, 0.82]))
    path = tmp_path / "climate.csv"
    clim.to_csv(path)
    back = E.ClimateSeries.from_csv(path)
    for name in ("time_s", "theta_int", "phi_int", "theta_ext", "phi_ext"):
        assert np.array_equal(getattr(back, name), getattr(clim, name))


def test_climate_csv_rejects_wrong_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time,ti,pi,te,pe\n0,20,0.5,-9,0.8\n")
    with pytest.raises(ConfigError):
        E.ClimateSeries.from_csv(path)


# ------------------------------------------------------------------- sensors

def test_layout_rejects_duplicate_probe_names():
    with pytest.raises(ConfigError):
        E.SensorLayout(probes=(E.Probe("a", 0.0, 0.0),
                               E.Probe("a", 1.0, 1.0)))


def test_layout_rejects_unknown_pair_member():
    with pytest.raises(ConfigError):
        E.SensorLayout(probes=(E.Probe("a", 0.0, 0.0),),
                       pairs=(E.JumpPair("j", brick="a", mortar="b"),))


def test_layout_rejects_non_positive_accuracy():
    with pytest.raises(ParameterError):
        E.SensorLayout(probes=(E.Probe("a", 0.0, 0.0),), theta_accuracy=0.0)


def test_probe_sampling_is_exact_for_affine_fields(slab, slab_layout):
    names, W = E.probe_matrix(slab, slab_layout)
    field = 3.0 + 40.0 * slab.nodes[:, 0] - 7.0 * slab.nodes[:, 1]
    sampled = W @ field
    for name, value in zip(names, sampled):
        p = slab_layout.probe(name)
        assert value == pytest.approx(3.0 + 40.0 * p.x - 7.0 * p.y,
                                      rel=1e-12)


def test_probe_phase_tag_resolves_the_interface_side(slab, slab_layout):
    names, W = E.probe_matrix(slab, slab_layout)
    # nodes inherit the phase of the triangles that use them; interface
    # nodes are duplicated so the assignment is single-valued
    node_phase = np.empty(slab.n_nodes)
    for tri, ph in zip(slab.triangles, slab.tri_phase):
        node_phase[tri] = ph
    sampled = dict(zip(names, W @ node_phase))
    assert sampled["ifb"] == 0.0
    assert sampled["ifm"] == 1.0


def test_probe_outside_the_mesh_is_rejected(slab):
    with pytest.raises(ConfigError):
        E.locate_point(slab, 5.0, 5.0)


def test_pair_away_from_the_interface_is_rejected(slab):
    layout = E.SensorLayout(
        probes=(E.Probe("a", 0.01, 0.01), E.Probe("b", 0.09, 0.01)),
        pairs=(E.JumpPair("far", brick="a", mortar="b"),))
    with pytest.raises(ConfigError):
        E.probe_matrix(slab, layout)


# ------------------------------------------------------------ run validation

def test_run_rejects_non_positive_duration(slab, slab_layout, params):
    clim = E.ClimateSeries.constant(20.0, 0.5, 20.0, 0.5, 3600.0)
    with pytest.raises(ParameterError):
        E.run_experiment(slab, clim, slab_layout, params, duration=0.0)


def test_run_rejects_uncovered_horizon(slab, slab_layout, params):
    clim = E.ClimateSeries.constant(20.0, 0.5, 20.0, 0.5, 3600.0)
    with pytest.raises(ConfigError):
        E.run_experiment(slab, clim, slab_layout, params, duration=7200.0)


def test_run_rejects_gap_inside_horizon(slab, slab_layout, params):
    t = np.array([0.0, 3600.0, 3600.0 + 30 * 3600.0])
    clim = E.ClimateSeries(t, np.full(3, 20.0), np.full(3, 0.5),
                           np.full(3, 20.0), np.full(3, 0.5))
    with pytest.raises(ConfigError, match="gap"):
        E.run_experiment(slab, clim, slab_layout, params,
                         duration=t[-1], dt=1800.0)
    # a horizon that ends before the hole is unaffected
    res = E.run_experiment(slab, clim, slab_layout, params, duration=3600.0,
                           dt=1800.0)
    assert res.times[-1] == 3600.0


# --------------------------------------------------------------- trivial runs

def test_equal_constant_climates_freeze_the_sample(slab, slab_layout, params):
    clim = E.ClimateSeries.constant(15.0, 0.5, 15.0, 0.5, 10 * 3600.0)
    res = E.run_experiment(slab, clim, slab_layout, params,
                           duration=6 * 3600.0, dt=1800.0)
    for name in res.theta:
        assert np.ptp(res.theta[name]) == 0.0
        assert np.ptp(res.phi[name]) == 0.0
        assert np.all(res.theta[name] == 15.0)
    j = res.jumps["joint"]
    assert np.abs(j.dtheta).max() == 0.0
    assert np.abs(j.dphi).max() == 0.0
    # the uniform state is already in balance: no iterations were needed
    assert res.info["newton_iterations"] == 0
    assert res.info["clamp_events"] == 0


def test_output_grid_always_contains_start_and_end(slab, slab_layout,
                                                   params):
    clim = E.ClimateSeries.constant(15.0, 0.5, 15.0, 0.5, 10 * 3600.0)
    res = E.run_experiment(slab, clim, slab_layout, params, duration=5000.0,
                           dt=1000.0, output_interval=3600.0)
    assert res.times[0] == 0.0 and res.times[-1] == 5000.0
    assert np.all(np.diff(res.times) > 0)


# ----------------------------------------------------- steady thermal oracle

@pytest.fixture(scope="module")
def steady_run(slab, slab_layout, params):
    prm = decoupled(params).with_interface(perfect=False, alpha_int=1e5,
                                           beta_int=5.25e-9)
    clim = E.ClimateSeries.constant(24.5, 0.5, -9.5, 0.5, 10 * 86400.0)
    return E.run_experiment(slab, clim, slab_layout, prm,
                            duration=5 * 86400.0, dt=7200.0,
                            output_interval=12 * 3600.0)


def test_steady_heat_flux_matches_the_series_circuit(steady_run):
    q_oracle = 34.0 / (0.05 / 0.25 + 1e-5 + 0.05 / 0.45)
    th = steady_run.theta
    q_brick = 0.25 * (th["b2"][-1] - th["b1"][-1]) / 0.02
    q_mortar = 0.45 * (th["m2"][-1] - th["m1"][-1]) / 0.02
    assert q_brick == pytest.approx(q_oracle, rel=1e-7)
    assert q_mortar == pytest.approx(q_oracle, rel=1e-7)
    # the march genuinely reached steady state
    assert abs(th["b1"][-1] - th["b1"][-2]) <= 1e-9


def test_steady_interface_jump_equals_flux_over_conductance(steady_run):
    q_oracle = 34.0 / (0.05 / 0.25 + 1e-5 + 0.05 / 0.45)
    j = steady_run.jumps["joint"]
    # heat flows toward the exterior (brick side), so the mortar side is
    # the hotter one and the signed jump is positive
    assert j.dtheta[-1] == pytest.approx(q_oracle / 1e5, rel=1e-7)
    assert not j.exceeds_theta_band


def test_perfect_contact_leaves_no_jumps(slab, slab_layout, params):
    prm = params.with_interface(perfect=True)
    clim = E.ClimateSeries.constant(24.5, 0.5, -9.5, 0.5, 2 * 86400.0)
    res = E.run_experiment(slab, clim, slab_layout, prm,
                           duration=12 * 3600.0, dt=3600.0)
    j = res.jumps["joint"]
    assert np.abs(j.dtheta).max() <= 1e-9
    assert np.abs(j.dphi).max() <= 1e-9
    assert np.nanmax(np.abs(j.dpc)) <= 1e-3


# ------------------------------------------------------- moisture step change

def test_humidity_step_jump_stays_inside_the_sensor_band(slab, params):
    layout = E.SensorLayout(
        probes=(E.Probe("ifb", 0.05, 0.01, phase=0),
                E.Probe("ifm", 0.05, 0.01, phase=1)),
        pairs=(E.JumpPair("joint", brick="ifb", mortar="ifm"),))
    prm = params.with_interface(perfect=False, alpha_int=1e5,
                                beta_int=5.25e-9)
    # exterior chamber ramped from 0.3 to 0.95 over two hours, then held
    D = 43200.0
    t = np.array([0.0, 7200.0, D])
    clim = E.ClimateSeries(t, np.full(3, 20.0), np.full(3, 0.3),
                           np.full(3, 20.0), np.array([0.3, 0.95, 0.95]))
    res = E.run_experiment(slab, clim, layout, prm, duration=D, dt=1800.0,
                           output_interval=D / 4, max_halvings=8)
    j = res.jumps["joint"]
    peak = np.abs(j.dphi).max()
    assert 1e-5 < peak < 0.02
    assert not j.exceeds_phi_band
    assert res.info["clamp_events"] == 0


# ---------------------------------------------------- marching consistency

def test_output_sampling_rate_does_not_change_shared_samples(slab,
                                                             slab_layout,
                                                             params):
    prm = params.with_interface(perfect=False, alpha_int=1e5,
                                beta_int=5.25e-9)
    clim = E.ClimateSeries.constant(24.5, 0.5, -9.5, 0.5, 86400.0)
    coarse = E.run_experiment(slab, clim, slab_layout, prm,
                              duration=6 * 3600.0, dt=1800.0,
                              output_interval=3600.0)
    fine = E.run_experiment(slab, clim, slab_layout, prm,
                            duration=6 * 3600.0, dt=1800.0,
                            output_interval=1800.0)
    shared = np.isin(fine.times, coarse.times)
    for name in coarse.theta:
        assert np.array_equal(fine.theta[name][shared], coarse.theta[name])
        assert np.array_equal(fine.phi[name][shared], coarse.phi[name])


def test_long_march_stays_stable_without_halvings(slab, slab_layout, params):
    prm = params.with_interface(perfect=False, alpha_int=1e5,
                                beta_int=5.25e-9)
    clim = E.ClimateSeries.constant(24.5, 0.5, -9.5, 0.5, 10 * 86400.0)
    res = E.run_experiment(slab, clim, slab_layout, prm,
                           duration=10 * 86400.0, dt=3600.0,
                           output_interval=86400.0)
    assert res.info["halvings_used"] == 0
    assert res.info["clamp_events"] == 0
    assert res.info["newton_iterations"] / res.info["sub_steps"] <= 25


def test_masonry_block_run_completes(params):
    wall = MS.generate_wall_sample(MS.WallSpec(target=0.012))
    prm = params.with_interface(perfect=False, alpha_int=1e5,
                                beta_int=5.25e-9)
    clim = E.ClimateSeries.constant(24.5, 0.5, -9.5, 0.5, 2 * 86400.0)
    layout = E.SensorLayout(probes=(E.Probe("center", 0.15, 0.07),))
    res = E.run_experiment(wall, clim, layout, prm, duration=86400.0,
                           dt=3600.0, output_interval=21600.0)
    assert np.all(np.isfinite(res.theta["center"]))
    assert np.all(np.isfinite(res.phi["center"]))
    assert res.info["halvings_used"] == 0
    # the interior point warms monotonically from the uniform start
    assert res.theta["center"][-1] < res.theta["center"][0]


# ------------------------------------------------------------ jump analysis

def _synthetic_result():
    times = np.array([0.0, 3600.0])
    theta = {"pb": np.array([20.0, 20.0]), "pm": np.array([20.5, 20.5])}
    phi = {"pb": np.array([0.5, 0.5]), "pm": np.array([0.6, 0.6])}
    return E.ExperimentResult(times=times, theta=theta, phi=phi)


def test_jump_orientation_is_mortar_minus_brick():
    layout = E.SensorLayout(
        probes=(E.Probe("pb", 0.0, 0.0), E.Probe("pm", 0.0, 0.0)),
        pairs=(E.JumpPair("j", brick="pb", mortar="pm"),))
    jumps = E.extract_jumps(_synthetic_result(), layout)
    j = jumps["j"]
    assert np.allclose(j.dtheta, 0.5)
    assert np.allclose(j.dphi, 0.1)
    assert j.exceeds_theta_band      # 0.5 K > 0.1 K instrument band
    assert j.exceeds_phi_band        # 0.1 > 0.02
    pc = lambda th, ph: M.capillary_pressure(th + 273.15, ph)
    assert np.allclose(j.dpc, pc(20.5, 0.6) - pc(20.0, 0.5))


def test_extract_jumps_requires_both_members():
    layout = E.SensorLayout(
        probes=(E.Probe("pb", 0.0, 0.0), E.Probe("px", 0.0, 0.0)),
        pairs=(E.JumpPair("j", brick="pb", mortar="px"),))
    result = _synthetic_result()
    with pytest.raises(ConfigError):
        E.extract_jumps(result, layout)


def test_identical_traces_give_zero_jumps():
    res = _synthetic_result()
    res.theta["pm"] = res.theta["pb"].copy()
    res.phi["pm"] = res.phi["pb"].copy()
    layout = E.SensorLayout(
        probes=(E.Probe("pb", 0.0, 0.0), E.Probe("pm", 0.0, 0.0)),
        pairs=(E.JumpPair("j", brick="pb", mortar="pm"),))
    j = E.extract_jumps(res, layout)["j"]
    assert np.all(j.dtheta == 0.0) and np.all(j.dphi == 0.0)
    assert np.all(j.dpc == 0.0)


def test_capillary_back_calculation_matches_the_retention_law():
    assert E.back_calculate_pc(20.0, 1.0) == 0.0
    assert E.back_calculate_pc(20.0, 0.5) == pytest.approx(
        M.capillary_pressure(293.15, 0.5), rel=1e-12)


def test_capillary_back_calculation_skips_bad_samples(caplog):
    with caplog.at_level(logging.WARNING, logger="masonry_ham.experiment"):
        out = E.back_calculate_pc(np.array([20.0, 20.0]),
                                  np.array([0.5, -0.1]))
    assert np.isfinite(out[0]) and np.isnan(out[1])
    assert any("skipped" in rec.message for rec in caplog.records)


# ------------------------------------------------------------------ trace I/O

def test_trace_csv_round_trip(tmp_path):
    res = _synthetic_result()
    path = tmp_path / "traces.csv"
    E.write_traces_csv(path, res)
    back = E.read_traces_csv(path)
    assert np.array_equal(back.times, res.times)
    for name in res.theta:
        assert np.array_equal(back.theta[name], res.theta[name])
        assert np.array_equal(back.phi[name], res.phi[name])


def test_trace_csv_rejects_wrong_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time,probe,theta,phi\n0,a,20,0.5\n")
    with pytest.raises(ConfigError):
        E.read_traces_csv(path)


def test_jump_csv_layout(tmp_path):
    layout = E.SensorLayout(
        probes=(E.Probe("pb", 0.0, 0.0), E.Probe("pm", 0.0, 0.0)),
        pairs=(E.JumpPair("j", brick="pb", mortar="pm"),))
    res = _synthetic_result()
    res.layout = layout
    res.jumps = E.extract_jumps(res, layout)
    path = tmp_path / "jumps.csv"
    E.write_jumps_csv(path, res)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == E.JUMP_COLUMNS
    assert len(rows) == 1 + res.times.size
    assert float(rows[1][2]) == pytest.approx(0.5)
    assert float(rows[1][3]) == pytest.approx(0.1)
