import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from ptsim import optics
from ptsim.emission import (CSV_FIELDS, CoincidenceProbabilities, CountRecord, Dephasing,
                            NoiseParams, coincidence_probabilities, derived_rng, detector_povms,
                            dual_path_source, emit_pair, phonon_decoherence, prepare_state,
                            probabilities_from_povms, read_counts_csv, sample_counts,
                            write_counts_csv)
from ptsim.experiments import anti_stokes_analyzer, stokes_analyzer
from ptsim.qstate import fully_entangled_fraction, partial_trace
from ptsim.tomography import fit_visibility

ENT = optics.shipped_circuit("fig2_entanglement")
TEL = optics.shipped_circuit("fig2_teleport")


def sector_sum(state):
    return sum(state.weights.values())


def path_state(rho8):
    """Photon-path (x) phonon-path block of the H-polarized photon."""
    idx = [0, 1, 4, 5]
    return rho8[np.ix_(idx, idx)]


# parameters

def test_noise_params_validation():
    with pytest.raises(ValueError):
        NoiseParams(p_s=1.2)
    with pytest.raises(ValueError):
        NoiseParams(eta_read=-0.1)
    with pytest.raises(ValueError):
        NoiseParams(tau_phonon=0)
    with pytest.raises(ValueError):
        NoiseParams(rep_rate=0)
    with pytest.raises(ValueError):
        NoiseParams(sbr=0)
    assert NoiseParams(dephasing_mode="pure_dephasing").dephasing_mode is Dephasing.PURE_DEPHASING


# source

def test_emit_pair_vacuum():
    s = emit_pair(NoiseParams(p_s=0.0))
    assert s.weights["vacuum"] == 1.0 and s.norm_kept == 0.0


def test_emit_pair_weights_without_doubles():
    s = emit_pair(NoiseParams(p_s=0.01, include_double_pairs=False))
    assert (s.weights["vacuum"], s.weights["single"], s.weights["double"]) == pytest.approx((0.99, 0.01, 0))


def test_emit_pair_double_weight():
    assert emit_pair(NoiseParams(p_s=0.1)).weights["double"] == pytest.approx(0.01)


def test_double_pair_error_scales_with_p():
    # the in-pulse error of the entangled state grows linearly in p_s
    def err(p):
        params = NoiseParams.noise_free(p_s=p, include_double_pairs=True)
        es, ea = detector_povms(ENT.with_angles(**stokes_analyzer("H"), **anti_stokes_analyzer("V")))
        pr = probabilities_from_povms(prepare_state(params), es, ea, params)
        es, ea = detector_povms(ENT.with_angles(**stokes_analyzer("H"), **anti_stokes_analyzer("H")))
        good = probabilities_from_povms(prepare_state(params), es, ea, params)
        return pr.true / good.true
    r1, r2 = err(0.01), err(0.02)
    assert r2 / r1 == pytest.approx(2, rel=0.05)


def test_dual_path_noise_free_is_bell_state():
    s = dual_path_source(NoiseParams.noise_free())
    psi = np.array([1, 0, 0, 1]) / np.sqrt(2)
    assert np.vdot(psi, path_state(s.rho_single) @ psi).real == pytest.approx(1, abs=1e-12)
    assert fully_entangled_fraction(path_state(s.rho_single)).value == pytest.approx(1, abs=1e-9)


def test_path_imbalance_schmidt_coefficients():
    s = dual_path_source(NoiseParams(path_imbalance=0.1))
    red = partial_trace(path_state(s.rho_single), [1])
    lam = np.sort(np.linalg.eigvalsh(red))[::-1]
    np.testing.assert_allclose(np.sqrt(lam), [np.sqrt(0.55), np.sqrt(0.45)], atol=1e-12)


def test_norm_kept_sector_arithmetic():
    s = dual_path_source(NoiseParams(p_s=0.01))
    assert s.norm_kept == pytest.approx(2 * 0.01 * 0.99, abs=1e-6)
    assert sector_sum(s) == pytest.approx(1, abs=1e-10)


# decoherence

def test_zero_delay_is_identity():
    s = dual_path_source(NoiseParams())
    for mode in Dephasing:
        t = phonon_decoherence(s, NoiseParams(read_delay=0.0, dephasing_mode=mode))
        np.testing.assert_array_equal(t.rho_single, s.rho_single)
        assert t.weights == s.weights


def test_long_delay_kills_retrieval():
    p = NoiseParams(read_delay=1e4)
    t = prepare_state(p)
    assert t.weights["single"] < 1e-300 + 1e-12
    assert t.weights["lost"] > 0


def test_pure_dephasing_factor():
    p = NoiseParams(read_delay=0.388, tau_phonon=7.0, dephasing_mode=Dephasing.PURE_DEPHASING)
    t = prepare_state(p)
    rho = path_state(t.rho_single)
    assert rho[0, 3].real / 0.5 == pytest.approx(math.exp(-0.388 / 7), abs=1e-12)
    assert round(math.exp(-0.388 / 7), 4) == 0.9461


def test_both_mechanisms():
    p = NoiseParams(read_delay=0.388, dephasing_mode=Dephasing.BOTH)
    t = prepare_state(p)
    assert t.retrieval == pytest.approx(math.exp(-0.388 / 7))
    assert path_state(t.rho_single)[0, 3].real < 0.5


@given(st.floats(0, 0.3), st.floats(0, 50), st.sampled_from(list(Dephasing)), st.booleans())
@settings(max_examples=40, deadline=None)
def test_sector_weights_stay_normalized(p, delay, mode, doubles):
    params = NoiseParams(p_s=p, read_delay=delay, dephasing_mode=mode, include_double_pairs=doubles)
    s = dual_path_source(params)
    assert sector_sum(s) == pytest.approx(1, abs=1e-10)
    t = phonon_decoherence(s, params)
    assert sector_sum(t) == pytest.approx(1, abs=1e-10)
    assert min(t.weights.values()) >= 0


# coincidence probabilities

def _probs(params, stokes, anti, circuit=ENT):
    an = {**stokes_analyzer(stokes), **anti_stokes_analyzer(anti)}
    return coincidence_probabilities(prepare_state(params), circuit, an, params)


def test_uu_probability():
    params = NoiseParams.noise_free(p_s=0.01)
    eta = params.eta_read * params.eta_det_s * params.eta_det_as
    p = _probs(params, "H", "H")
    # half of the kept single-pair mass lands in UU
    assert p.true == pytest.approx(0.5 * dual_path_source(params).norm_kept * eta, rel=1e-12)
    assert p.accidental == 0


def test_orthogonal_branch_is_dark():
    assert _probs(NoiseParams.noise_free(), "H", "V").true == pytest.approx(0, abs=1e-20)


def _scan(params):
    state = prepare_state(params)
    angles = np.arange(0, 181, 10.0)
    counts = []
    for a in angles:
        an = {"HWP3": 0.0, "QWP3": 45.0, "P2": a, **anti_stokes_analyzer("-")}
        pr = coincidence_probabilities(state, ENT, an, params)
        counts.append(pr.true + pr.accidental)
    return angles, np.array(counts)


def test_scan_noise_free_visibility():
    assert fit_visibility(*_scan(NoiseParams.noise_free())).visibility == pytest.approx(1, abs=1e-9)


@pytest.mark.parametrize("sbr", [2.0, 5.0, 13.3, 40.0])
def test_scan_visibility_closed_form(sbr):
    # flat accidentals of UU-signal/sbr on a full fringe of peak UU-signal
    params = NoiseParams.noise_free(sbr=sbr)
    v = fit_visibility(*_scan(params)).visibility
    assert v == pytest.approx(sbr / (sbr + 2), abs=1e-9)


def test_global_phase_invariance():
    params = NoiseParams()
    state = prepare_state(params)
    rotated = replace(state, rho_single=(1j * np.eye(8)) @ state.rho_single @ (-1j * np.eye(8)))
    es, ea = detector_povms(ENT.with_angles(**stokes_analyzer("+"), **anti_stokes_analyzer("L")))
    a = probabilities_from_povms(state, es, ea, params)
    b = probabilities_from_povms(rotated, es, ea, params)
    assert a == b


def test_bell_outcomes_equal():
    from ptsim.experiments import bell_analyzer, preparation
    params = NoiseParams.noise_free()
    state = prepare_state(params)
    for inp in ("H", "+", "L"):
        vals = []
        for outcome in optics.BELL_SETTINGS:
            es = optics.arm_povm(TEL.with_angles(**preparation(inp), **bell_analyzer(outcome)), 0)
            vals.append(np.real(np.trace(np.kron(es, np.eye(2)) @ state.rho_single)))
        np.testing.assert_allclose(vals, np.full(4, sum(vals) / 4), atol=1e-9)


def test_detector_requirement():
    with pytest.raises(ValueError):
        detector_povms(optics.parse_circuit("hwp @ 0\ndetector label=A\n"))


# sampling

def test_zero_probabilities_give_zero_counts():
    r = sample_counts(CoincidenceProbabilities(0, 0, 0, 0), 10, NoiseParams(), "x")
    assert (r.raw, r.delayed, r.singles_s, r.singles_as) == (0, 0, 0, 0)


def test_eight_per_second_rate_band():
    params = NoiseParams()
    p = 8.0 / params.pulses_per_second
    r = sample_counts(CoincidenceProbabilities(p, 0, 0, 0), 100, params, "uu")
    assert abs(r.raw - 800) <= 3 * math.sqrt(800)


def test_sampling_deterministic_and_keyed():
    params = NoiseParams()
    pr = CoincidenceProbabilities(1e-6, 1e-7, 1e-3, 1e-4)
    a = sample_counts(pr, 10, params, "ent/H,H")
    assert a == sample_counts(pr, 10, params, "ent/H,H")
    assert a != sample_counts(pr, 10, params, "ent/H,V")
    assert a != sample_counts(pr, 10, replace(params, seed=1), "ent/H,H")


def test_sampling_order_independent():
    params = NoiseParams()
    pr = CoincidenceProbabilities(1e-6, 1e-7, 1e-3, 1e-4)
    ids = [f"s{i}" for i in range(10)]
    fwd = [sample_counts(pr, 5, params, i) for i in ids]
    rev = [sample_counts(pr, 5, params, i) for i in reversed(ids)][::-1]
    assert fwd == rev


def test_sampling_too_short():
    with pytest.raises(ValueError):
        sample_counts(CoincidenceProbabilities(0, 0, 0, 0), 1e-9, NoiseParams(), "x")


def test_empirical_mean_matches_rate():
    params = NoiseParams()
    pr = CoincidenceProbabilities(2e-7, 5e-8, 0, 0)
    t = 1.0
    raws = np.array([sample_counts(pr, t, replace(params, seed=s), "x").raw for s in range(1000)])
    mean = params.pulses_per_second * t * (pr.true + pr.accidental)
    assert abs(raws.mean() - mean) < 5 * raws.std(ddof=1) / np.sqrt(len(raws))


def test_delayed_matches_accidental_part():
    params = NoiseParams()
    pr = CoincidenceProbabilities(3e-7, 1e-7, 0, 0)
    true_mean = params.pulses_per_second * pr.true
    recs = [sample_counts(pr, 1.0, replace(params, seed=s), "x") for s in range(2000)]
    excess = np.array([r.raw for r in recs]) - true_mean
    delayed = np.array([r.delayed for r in recs])
    assert stats.ttest_ind(excess, delayed).pvalue > 0.001


def test_count_record_invariants():
    with pytest.raises(ValueError):
        CountRecord("x", raw=-1)
    with pytest.raises(ValueError):
        CountRecord("x", t_sec=0)


def test_csv_roundtrip(tmp_path):
    recs = [CountRecord("ent/H,+", {"hwp3": 0.0, "p2": 45.0, "hwp5": 67.5, "qwp2": 45.0}, 10, 2, 300, 40, 30.0),
            CountRecord("ent/V,L", {"hwp3": 0.0, "p2": 90.0, "hwp5": 22.5, "qwp2": 0.0}, 0, 0, 0, 0, 30.0)]
    path = tmp_path / "c.csv"
    write_counts_csv(recs, path)
    assert path.read_text().splitlines()[0] == ",".join(CSV_FIELDS)
    assert read_counts_csv(path) == recs


def test_csv_bad_header(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_counts_csv(path)


def test_derived_rng_streams():
    a = derived_rng(1, "counts", "x").random(3)
    np.testing.assert_array_equal(a, derived_rng(1, "counts", "x").random(3))
    assert not np.array_equal(a, derived_rng(1, "counts", "y").random(3))
