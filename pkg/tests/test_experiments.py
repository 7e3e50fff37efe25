import math
from dataclasses import replace

import numpy as np
import pytest

from ptsim import experiments as ex
from ptsim import optics
from ptsim.emission import NoiseParams, prepare_state
from ptsim.qstate import I2, SZ, average_fidelity_from_process, ket, projector, state_fidelity

NOISE_FREE = NoiseParams.noise_free()


def expected(scenario="ENTANGLEMENT", noise=None, **kw):
    return ex.ExperimentConfig(scenario=scenario, noise=noise or NoiseParams(), shot_noise=False,
                               bootstrap_n=0, **kw)


@pytest.fixture(scope="module")
def calibrated_teleport():
    return ex.run_teleport(expected("TELEPORT"))


# angle tables

@pytest.mark.parametrize("label", ["H", "V", "+", "-", "L", "R"])
def test_analyzer_tables(label):
    c = optics.shipped_circuit("fig2_entanglement")
    e = optics.path_qubit_povm(c.with_angles(**ex.stokes_analyzer(label)), 0)
    np.testing.assert_allclose(e, projector(label), atol=1e-12)
    e = optics.path_qubit_povm(c.with_angles(**ex.anti_stokes_analyzer(label)), 1)
    np.testing.assert_allclose(e, projector(label), atol=1e-12)


@pytest.mark.parametrize("label", ["H", "V", "+", "-", "L", "R"])
def test_preparation_table(label):
    a = ex.preparation(label)
    out = optics.jones_qwp(a["QWP1"]) @ optics.jones_hwp(a["HWP2"]) @ ket("V")
    assert abs(np.vdot(ket(label), out)) == pytest.approx(1, abs=1e-12)


# configuration

def test_config_defaults():
    c = ex.ExperimentConfig()
    assert c.input_states == ("H", "V", "+", "-", "L", "R")
    assert c.integration_time == ex.DEFAULT_INTEGRATION[ex.Scenario.ENTANGLEMENT]
    assert replace(c, scenario=ex.Scenario.TELEPORT).integration_time == 180.0


def test_config_rejects_bad_values():
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig(input_states=("H", "Q"))
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig(input_states=())
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig(bell_outcome="XX")
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig(bootstrap_n=10)
    with pytest.raises(ValueError):
        ex.ExperimentConfig(scenario="BOGUS")


def test_load_config(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[noise]\nsbr = inf\np_s = 0.05\n[scenario]\nkind = "teleport"\n'
                 'input_states = ["H", "+"]\n[analysis]\nbootstrap_n = 0\n')
    c = ex.load_config(p)
    assert c.scenario is ex.Scenario.TELEPORT
    assert math.isinf(c.noise.sbr) and c.noise.p_s == 0.05
    assert c.input_states == ("H", "+")


@pytest.mark.parametrize("text", [
    "[noise]\nbogus = 1\n",
    "[scenario]\nkind = \"ENTANGLEMENT\"\nspeed = 3\n",
    "[extra]\n",
    "[noise]\np_s = 2.0\n",
    "not toml = = =",
])
def test_load_config_rejects(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    with pytest.raises(ex.ConfigError):
        ex.load_config(p)


def test_config_relative_circuit_path(tmp_path):
    (tmp_path / "my.oct").write_text(optics.format_circuit(optics.shipped_circuit("fig2_entanglement")))
    p = tmp_path / "c.toml"
    p.write_text('[scenario]\ncircuit_file = "my.oct"\n')
    c = ex.load_config(p)
    assert c.circuit() == optics.shipped_circuit("fig2_entanglement")


# entanglement

def test_entanglement_noise_free():
    r = ex.run_entanglement(expected(noise=NOISE_FREE))
    assert r.scalars["F_e_raw"] == pytest.approx(1, abs=1e-6)
    assert r.scalars["F_e_sub"] == pytest.approx(1, abs=1e-6)
    assert r.scalars["V"] == pytest.approx(1, abs=1e-6)
    assert r.extra["verdict"]["entangled_raw"]
    assert len([c for c in r.counts if c["setting_id"].startswith("ent/")]) == 36


def test_entanglement_calibrated_expected_counts():
    r = ex.run_entanglement(expected())
    assert 0.79 <= r.scalars["F_e_raw"] <= 0.83
    assert r.scalars["F_e_sub"] >= 0.88
    assert r.scalars["F_e_sub"] > r.scalars["F_e_raw"]
    assert 0.71 <= r.scalars["V"] <= 0.78


def test_entanglement_minimal_grid():
    r = ex.run_entanglement(expected(noise=NOISE_FREE, qst_grid="minimal"))
    assert r.scalars["F_e_raw"] == pytest.approx(1, abs=1e-6)
    assert len([c for c in r.counts if c["setting_id"].startswith("ent/")]) == 16


def test_high_sbr_limit_raw_equals_subtracted():
    cfg = ex.ExperimentConfig(noise=NoiseParams(sbr=math.inf), bootstrap_n=100,
                              integration_time_per_setting=10.0)
    r = ex.run_entanglement(cfg)
    diff = abs(r.scalars["F_e_raw"] - r.scalars["F_e_sub"])
    assert diff <= r.errors["F_e_raw"]


def test_entanglement_rejects_circuit_without_detectors(tmp_path):
    p = tmp_path / "bad.oct"
    p.write_text("hwp @ 0\npolarizer @ 0\n")
    with pytest.raises(ValueError):
        ex.run_entanglement(expected(circuit_file=str(p)))


def test_visibility_scan_scenario():
    r = ex.run_visibility_scan(expected("VISIBILITY_SCAN", NOISE_FREE))
    assert r.scalars["V"] == pytest.approx(1, abs=1e-9)
    assert len(r.counts) == 19


# teleportation

def _phonon_output(outcome, inp):
    circuit = optics.shipped_circuit("fig2_teleport")
    state = prepare_state(NOISE_FREE)
    es = optics.arm_povm(circuit.with_angles(**ex.preparation(inp), **ex.bell_analyzer(outcome)), 0)
    rho = (np.kron(es, I2) @ state.rho_single).reshape(4, 2, 4, 2)
    out = np.einsum("iaib->ab", rho)
    return out / np.trace(out)


def test_teleport_h_identity_outcome():
    np.testing.assert_allclose(_phonon_output("HU+VL", "H"), projector("H"), atol=1e-12)
    np.testing.assert_allclose(ex.pauli_correction("HU+VL"), I2)


def test_teleport_minus_outcome_needs_z():
    out = _phonon_output("HU-VL", "+")
    np.testing.assert_allclose(out, projector("-"), atol=1e-12)
    c = ex.pauli_correction("HU-VL")
    np.testing.assert_allclose(c, SZ)
    assert state_fidelity(ket("+"), c @ out @ c.conj().T) == pytest.approx(1, abs=1e-12)


@pytest.mark.parametrize("outcome", list(optics.BELL_SETTINGS))
def test_teleport_noise_free_all_outcomes(outcome):
    r = ex.run_teleport(expected("TELEPORT", NOISE_FREE, bell_outcome=outcome))
    for s in ("H", "V", "+", "-", "L", "R"):
        assert r.scalars[f"F_{s}_raw"] == pytest.approx(1, abs=1e-6)
    assert r.scalars["F_p_raw"] == pytest.approx(1, abs=1e-6)


def test_teleport_subset_of_inputs():
    r = ex.run_teleport(expected("TELEPORT", NOISE_FREE, input_states=("H", "+")))
    assert set(k for k in r.scalars if k.endswith("_raw")) == {"F_H_raw", "F_+_raw", "F_six_raw"}


def test_teleport_calibrated_six_state_bands(calibrated_teleport):
    s = calibrated_teleport.scalars
    assert 0.92 <= s["F_six_sub"] <= 0.96
    assert 0.81 <= s["F_six_raw"] <= 0.85


@pytest.mark.xfail(reason="this model gives F_avg equal to the six-state average, so F_avg in "
                          "[0.89, 0.92] and six-state in [0.92, 0.96] cannot both hold", strict=True)
def test_teleport_calibrated_average_fidelity_band(calibrated_teleport):
    s = calibrated_teleport.scalars
    assert 0.92 <= s["F_six_sub"] <= 0.96
    assert 0.89 <= s["F_avg_sub"] <= 0.92


def test_average_fidelity_identity_in_report(calibrated_teleport):
    s = calibrated_teleport.scalars
    for tag in ("raw", "sub"):
        assert s[f"F_avg_{tag}"] == pytest.approx(average_fidelity_from_process(s[f"F_p_{tag}"]), abs=1e-12)


# Bell statistics

def test_bell_statistics_noise_free():
    cfg = expected("TELEPORT", NOISE_FREE)
    t = ex.bell_outcome_statistics(cfg)
    n = t["trials"]
    sigma = math.sqrt(n * 0.25 * 0.75)
    for k in t["frequencies"].values():
        assert abs(k - n / 4) <= 3 * sigma
    assert t["success_fraction"] == pytest.approx(0.25, abs=1e-12)
    assert ex.bell_outcome_statistics(cfg) == t


# calibration

@pytest.fixture(scope="module")
def calibration():
    return ex.calibrate_noise({"F_e_raw": 0.81, "V": 0.746})


def test_calibrate_to_reported_values(calibration):
    assert calibration.converged
    assert calibration.objective < 1e-4
    assert calibration.observables["F_e_raw"] == pytest.approx(0.81, abs=0.01)


def test_calibration_grid_oracle(calibration):
    # a coarse scan over sbr finds its best point next to the fitted one
    grid = np.geomspace(2, 100, 25)
    obj = []
    for sbr in grid:
        o = ex.analytic_observables(replace(calibration.params, sbr=float(sbr)))
        obj.append((o["F_e_raw"] - 0.81) ** 2 + (o["V"] - 0.746) ** 2)
    best = grid[int(np.argmin(obj))]
    assert abs(np.log(best / calibration.params.sbr)) < np.log(grid[1] / grid[0])
    assert min(obj) >= calibration.objective - 1e-12


def test_calibrate_noise_free_limit():
    r = ex.calibrate_noise({"F_e_raw": 1.0}, free=("sbr",), base=NoiseParams(include_double_pairs=False))
    assert r.params.sbr > 1e5
    assert r.objective < 1e-10


def test_calibrate_infeasible():
    r = ex.calibrate_noise({"F_e_raw": 0.99, "V": 0.3})
    assert not r.converged
    assert set(r.residuals) == {"F_e_raw", "V"}


def test_calibrate_argument_checks():
    with pytest.raises(ValueError):
        ex.calibrate_noise({"F_e_raw": 1.2})
    with pytest.raises(ValueError):
        ex.calibrate_noise({"F_e_raw": 0.8}, free=("sbr", "eta_read", "p_s"))
    with pytest.raises(ValueError):
        ex.calibrate_noise({"F_e_raw": 0.8}, free=("seed",))


def test_sbr_monotonicity():
    vals = [ex.analytic_observables(NoiseParams(sbr=s)) for s in (2, 5, 10, 20, 50)]
    fe = [v["F_e_raw"] for v in vals]
    vis = [v["V"] for v in vals]
    assert all(b > a for a, b in zip(fe, fe[1:]))
    assert all(b > a for a, b in zip(vis, vis[1:]))


def test_calibration_report_rate_target():
    r = ex.run_calibration(ex.ExperimentConfig(scenario="CALIBRATE"))
    assert r.calibration["converged"]
    assert r.scalars["uu_rate"] == pytest.approx(8.0, rel=1e-3)


# reports

def test_report_json_is_deterministic(tmp_path):
    cfg = ex.ExperimentConfig(noise=NoiseParams(), bootstrap_n=100,
                              integration_time_per_setting=5.0, scenario="VISIBILITY_SCAN")
    a = ex.run(replace(cfg, output_dir=str(tmp_path / "a")))
    ex.run(replace(cfg, output_dir=str(tmp_path / "b"), workers=2))
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "a" / "counts.csv").read_bytes() == (tmp_path / "b" / "counts.csv").read_bytes()
    assert a.provenance["seed"] == cfg.noise.seed
    assert len(a.provenance["config_sha256"]) == 64


def test_report_provenance_timeline():
    r = ex.run_visibility_scan(expected("VISIBILITY_SCAN"))
    t = r.provenance["event_timeline_ps"]
    assert t["anti_stokes_detection"] < t["stokes_detection"]
