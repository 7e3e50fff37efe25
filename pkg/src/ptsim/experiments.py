"""Scenario harness: source -> optical table -> counts -> reconstruction.

Setting ids encode what was measured so a count table can be re-analyzed
on its own:

* ``ent/<a>,<b>``: entanglement grid, Stokes path qubit in basis ``a``,
  phonon (anti-Stokes) qubit in basis ``b``;
* ``vis/<angle>/-``: polarizer scan of P2 with the anti-Stokes photon
  analyzed along ``|U> - |L>``;
* ``tel/<input>/<outcome>/<b>``: teleportation of ``input`` postselected on
  the Bell outcome ``outcome``, phonon analyzed in basis ``b``.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache, partial
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, optics
from .emission import (CountRecord, NoiseParams, derived_rng, detector_povms, prepare_state,
                       probabilities_from_povms, sample_counts, write_counts_csv)
from .qstate import (PAULI_BASIS, SIX_STATES, average_fidelity_from_process,
                     fully_entangled_fraction, ket, process_fidelity, projector,
                     state_fidelity)
from .tomography import (MINIMAL_LABELS, MeasurementSetting, counts_of,
                         fit_visibility, qpt_mle, qst_mle, setting_from_id,
                         bootstrap_errors)

CLASSICAL_LIMIT = 2 / 3
ENTANGLEMENT_CRITERION = 0.5
ANGLE_GRID = tuple(np.arange(0, 180, 11.25))


class Scenario(enum.Enum):
    ENTANGLEMENT = "ENTANGLEMENT"
    TELEPORT = "TELEPORT"
    VISIBILITY_SCAN = "VISIBILITY_SCAN"
    CALIBRATE = "CALIBRATE"


# Seconds per setting. At the default 8/s UU rate these give error bars of
# the size reported for the measured state (about 0.015 on F_e) and for the
# teleported states (about 0.008).
DEFAULT_INTEGRATION = {
    Scenario.ENTANGLEMENT: 30.0,
    Scenario.VISIBILITY_SCAN: 30.0,
    Scenario.TELEPORT: 180.0,
    Scenario.CALIBRATE: 30.0,
}


class ConfigError(ValueError):
    pass


class NonConvergence(RuntimeError):
    pass


# ---------------------------------------------------------------- angle tables

def _close(a, b, tol=1e-9):
    return np.max(np.abs(a - b)) < tol


def _search(build, target):
    for x in ANGLE_GRID:
        for y in ANGLE_GRID:
            if _close(build(x, y), target):
                return float(x), float(y)
    raise LookupError("no angle pair on the grid realizes the target")


@lru_cache(maxsize=None)
def stokes_analyzer(label: str, circuit_name: str = "fig2_entanglement") -> dict:
    """QWP3/P2 angles projecting the Stokes path qubit on ``label`` (HWP3 at 0)."""
    c = optics.shipped_circuit(circuit_name)
    q, p = _search(lambda q, p: optics.path_qubit_povm(c.with_angles(HWP3=0, QWP3=q, P2=p), 0),
                   projector(label))
    return {"HWP3": 0.0, "QWP3": q, "P2": p}


@lru_cache(maxsize=None)
def anti_stokes_analyzer(label: str, circuit_name: str = "fig2_entanglement") -> dict:
    """QWP2/HWP5 angles projecting the phonon qubit on ``label``."""
    c = optics.shipped_circuit(circuit_name)
    q, h = _search(lambda q, h: optics.path_qubit_povm(c.with_angles(QWP2=q, HWP5=h), 1),
                   projector(label))
    return {"QWP2": q, "HWP5": h}


@lru_cache(maxsize=None)
def preparation(label: str) -> dict:
    """HWP2/QWP1 angles turning |V> into the input state ``label``."""
    v = ket("V")
    h, q = _search(lambda h, q: _dm(optics.jones_qwp(q) @ optics.jones_hwp(h) @ v),
                   projector(label))
    return {"HWP2": h, "QWP1": q}


def _dm(v):
    return np.outer(v, v.conj())


def bell_analyzer(outcome: str) -> dict:
    h, p = optics.BELL_SETTINGS[outcome]
    return {"HWP3": h, "P2": p}


def csv_angles(analyzer: dict) -> dict:
    return {"hwp3": analyzer.get("HWP3", 0.0), "p2": analyzer.get("P2", 0.0),
            "hwp5": analyzer.get("HWP5", 0.0), "qwp2": analyzer.get("QWP2", 0.0)}


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario = Scenario.ENTANGLEMENT
    noise: NoiseParams = field(default_factory=NoiseParams)
    circuit_file: str | None = None
    input_states: tuple = SIX_STATES
    bell_outcome: str = "HU+VL"
    integration_time_per_setting: float | None = None
    scan_step_deg: float = 10.0
    bootstrap_n: int = 200
    subtract_background: bool = True
    shot_noise: bool = True
    qst_grid: str = "full"
    workers: int = 1
    output_dir: str = "ptsim_out"
    target_fe: float = 0.81
    target_vis: float = 0.746
    target_uu_rate: float = 8.0
    free_params: tuple = ("sbr", "eta_read")

    def __post_init__(self):
        if isinstance(self.scenario, str):
            object.__setattr__(self, "scenario", Scenario(self.scenario.upper()))
        object.__setattr__(self, "input_states", tuple(self.input_states))
        object.__setattr__(self, "free_params", tuple(self.free_params))
        bad = [s for s in self.input_states if s not in SIX_STATES]
        if bad:
            raise ConfigError(f"unknown input state label(s): {bad}")
        if not self.input_states:
            raise ConfigError("input_states must not be empty")
        if self.bell_outcome not in optics.BELL_SETTINGS:
            raise ConfigError(f"unknown Bell outcome {self.bell_outcome!r}")
        if self.integration_time_per_setting is not None and self.integration_time_per_setting <= 0:
            raise ConfigError("integration_time_per_setting must be positive")
        if self.qst_grid not in ("full", "minimal"):
            raise ConfigError("qst_grid must be 'full' or 'minimal'")
        if self.bootstrap_n and self.bootstrap_n < 100:
            raise ConfigError("bootstrap_n must be 0 (off) or at least 100")

    @property
    def integration_time(self) -> float:
        if self.integration_time_per_setting is not None:
            return float(self.integration_time_per_setting)
        return DEFAULT_INTEGRATION[self.scenario]

    def circuit(self) -> optics.Circuit:
        if self.circuit_file:
            return optics.load_circuit(self.circuit_file)
        name = "fig2_teleport" if self.scenario is Scenario.TELEPORT else "fig2_entanglement"
        return optics.shipped_circuit(name)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["scenario"] = self.scenario.value
        d["noise"] = self.noise.to_dict()
        d["input_states"] = list(self.input_states)
        d["free_params"] = list(self.free_params)
        return d

    def digest(self) -> str:
        """Hash of everything that affects results (not workers or output_dir)."""
        d = self.to_dict()
        for k in ("workers", "output_dir"):
            d.pop(k)
        blob = json.dumps(_jsonable(d), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {
    "noise": {f.name for f in fields(NoiseParams)},
    "scenario": {"kind", "circuit_file", "input_states", "bell_outcome",
                 "integration_time_per_setting", "scan_step_deg", "output_dir"},
    "analysis": {"bootstrap_n", "subtract_background", "shot_noise", "qst_grid", "workers",
                 "target_fe", "target_vis", "target_uu_rate", "free_params"},
}


def config_from_dict(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    for sec, allowed in _SECTIONS.items():
        extra = set(data.get(sec, {})) - allowed
        if extra:
            raise ConfigError(f"unknown key(s) in [{sec}]: {sorted(extra)}")
    try:
        noise = NoiseParams(**data.get("noise", {}))
        kw = dict(data.get("scenario", {}))
        kw.update(data.get("analysis", {}))
        if "kind" in kw:
            kw["scenario"] = kw.pop("kind")
        if kw.get("circuit_file") and base_dir is not None:
            p = Path(kw["circuit_file"])
            kw["circuit_file"] = str(p if p.is_absolute() else base_dir / p)
        return ExperimentConfig(noise=noise, **kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data, base_dir=path.parent)


# ---------------------------------------------------------------- simulation

def _stokes_povm(circuit, analyzer):
    return optics.arm_povm(circuit.with_angles(**analyzer), 0)


def _as_povm(circuit, analyzer):
    return optics.path_qubit_povm(circuit.with_angles(**analyzer), 1)


def _expected_record(probs, t, params, setting_id, analyzer):
    n = params.pulses_per_second * t
    return CountRecord(setting_id, csv_angles(analyzer), (probs.true + probs.accidental) * n,
                       probs.accidental * n, probs.singles_s * n, probs.singles_as * n, t)


def _record(config, state, es, ea, setting_id, analyzer):
    probs = probabilities_from_povms(state, es, ea, config.noise)
    t = config.integration_time
    if config.shot_noise:
        return sample_counts(probs, t, config.noise, setting_id, csv_angles(analyzer))
    return _expected_record(probs, t, config.noise, setting_id, analyzer)


def grid_labels(config) -> tuple:
    return SIX_STATES if config.qst_grid == "full" else MINIMAL_LABELS


# QWP3 at 45 deg leaves the diagonal polarizations linear, so a P2 scan
# sees the full fringe of the conditional |U> - |L> state.
SCAN_STOKES = {"HWP3": 0.0, "QWP3": 45.0}


def scan_angles(step: float) -> list[float]:
    n = int(round(180 / step))
    return [i * step for i in range(n + 1)]


def simulate_entanglement(config: ExperimentConfig, state=None) -> list[CountRecord]:
    """Tomography grid plus the P2 scan, as count records."""
    circuit = config.circuit()
    state = state or prepare_state(config.noise)
    labels = grid_labels(config)
    records = []
    as_povms = {b: _as_povm(circuit, anti_stokes_analyzer(b)) for b in labels + ("-",)}
    for a in labels:
        sa = stokes_analyzer(a)
        es = _stokes_povm(circuit, sa)
        for b in labels:
            an = {**sa, **anti_stokes_analyzer(b)}
            records.append(_record(config, state, es, as_povms[b], f"ent/{a},{b}", an))
    records += simulate_scan(config, state)
    return records


def simulate_scan(config, state=None) -> list[CountRecord]:
    circuit = config.circuit()
    state = state or prepare_state(config.noise)
    ea = _as_povm(circuit, anti_stokes_analyzer("-"))
    out = []
    for ang in scan_angles(config.scan_step_deg):
        an = {**SCAN_STOKES, "P2": ang, **anti_stokes_analyzer("-")}
        out.append(_record(config, state, _stokes_povm(circuit, an), ea, f"vis/{ang:g}/-", an))
    return out


def simulate_teleport(config: ExperimentConfig, state=None) -> list[CountRecord]:
    circuit = config.circuit()
    state = state or prepare_state(config.noise)
    outcome = config.bell_outcome
    records = []
    for inp in config.input_states:
        base = {**preparation(inp), **bell_analyzer(outcome)}
        es = _stokes_povm(circuit, base)
        for b in SIX_STATES:
            an = {**base, **anti_stokes_analyzer(b)}
            records.append(_record(config, state, es, _as_povm(circuit, an),
                                   f"tel/{inp}/{outcome}/{b}", an))
    return records


def uu_rate(params: NoiseParams, circuit=None) -> float:
    """Mean raw coincidence rate (1/s) in the UU basis of the entanglement table."""
    circuit = circuit or optics.shipped_circuit("fig2_entanglement")
    an = {**stokes_analyzer("H"), **anti_stokes_analyzer("H")}
    p = probabilities_from_povms(prepare_state(params), _stokes_povm(circuit, an),
                                 _as_povm(circuit, an), params)
    return (p.true + p.accidental) * params.pulses_per_second


# ---------------------------------------------------------------- analysis

def _qst(records, subtract, dim, starts=4, seed=0):
    counts, clamped = counts_of(records, subtract)
    settings = [setting_from_id(r.setting_id) for r in records]
    res = qst_mle(counts, settings, dim, starts=starts, seed=seed)
    res.diagnostics["clamped"] = clamped
    return res


def _split(records, prefix):
    return [r for r in records if r.setting_id.startswith(prefix)]


def _scan_fit(records, subtract=False):
    scan = _split(records, "vis/")
    angles = [float(r.setting_id.split("/")[1]) for r in scan]
    counts, _ = counts_of(scan, subtract)
    return fit_visibility(angles, counts)


def entanglement_estimates(records, fef_starts: int = 20):
    grid = _split(records, "ent/")
    out, mats = {}, {}
    for tag, sub in (("raw", False), ("sub", True)):
        res = _qst(grid, sub, 4)
        fef = fully_entangled_fraction(res.estimate, starts=fef_starts)
        out[f"F_e_{tag}"] = fef.value
        mats[tag] = res
    out["V"] = _scan_fit(records).visibility
    out["V_sub"] = _scan_fit(records, True).visibility
    return out, mats


def entanglement_scalars(records, fef_starts: int = 4) -> dict:
    return entanglement_estimates(records, fef_starts)[0]


@lru_cache(maxsize=None)
def _pauli_correction_cached(outcome: str, circuit_text: str):
    circuit = optics.parse_circuit(circuit_text)
    params = NoiseParams.noise_free()
    state = prepare_state(params)
    best, best_score = None, -1.0
    outs = {}
    for inp in SIX_STATES:
        es = _stokes_povm(circuit, {**preparation(inp), **bell_analyzer(outcome)})
        # phonon state conditioned on the Stokes click
        rho = np.kron(es, np.eye(2)) @ state.rho_single
        red = rho.reshape(4, 2, 4, 2)
        ph = np.einsum("iaib->ab", red)
        outs[inp] = ph / np.trace(ph).real
    for p in PAULI_BASIS:
        score = sum(state_fidelity(ket(i), p @ outs[i] @ p.conj().T) for i in SIX_STATES)
        if score > best_score + 1e-9:
            best, best_score = p, score
    return best


def pauli_correction(outcome: str, circuit: optics.Circuit | None = None) -> np.ndarray:
    """Pauli applied in software so the noise-free output equals the input."""
    circuit = circuit or optics.shipped_circuit("fig2_teleport")
    return _pauli_correction_cached(outcome, optics.format_circuit(circuit))


def _corrected_settings(records, correction):
    out = []
    for r in records:
        s = setting_from_id(r.setting_id)
        out.append(MeasurementSetting(s.setting_id, correction @ s.povm @ correction.conj().T, s.labels))
    return out


def teleport_estimates(records, correction):
    """Per-state fidelities, six-state averages and QPT, raw and subtracted."""
    out, mats = {}, {}
    inputs = sorted({r.setting_id.split("/")[1] for r in records}, key=SIX_STATES.index)
    for tag, sub in (("raw", False), ("sub", True)):
        pairs, fids = [], []
        for inp in inputs:
            recs = [r for r in records if r.setting_id.split("/")[1] == inp]
            counts, _ = counts_of(recs, sub)
            res = qst_mle(counts, _corrected_settings(recs, correction), 2)
            f = state_fidelity(ket(inp), res.estimate)
            out[f"F_{inp}_{tag}"] = f
            fids.append(f)
            pairs.append((ket(inp), res))
        out[f"F_six_{tag}"] = float(np.mean(fids))
        if len(inputs) >= 4:
            try:
                qpt = qpt_mle(pairs)
            except ValueError:
                qpt = None
            if qpt is not None:
                fp = process_fidelity(qpt.estimate)
                out[f"F_p_{tag}"] = fp
                out[f"F_avg_{tag}"] = average_fidelity_from_process(min(max(fp, 0.0), 1.0))
                mats[tag] = qpt
    return out, mats


def teleport_scalars(records, correction) -> dict:
    return teleport_estimates(records, correction)[0]


# ---------------------------------------------------------------- reports

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        if np.iscomplexobj(x):
            return optics.matrix_to_json(x)
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, enum.Enum):
        return x.value
    return x


@dataclass
class ExperimentReport:
    scenario: str
    scalars: dict
    errors: dict
    matrices: dict = field(default_factory=dict)
    counts: list = field(default_factory=list)
    calibration: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.__dict__), sort_keys=True, indent=2) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "report.json"
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def _count_rows(records):
    return [{"setting_id": r.setting_id, **r.analyzer, "raw": r.raw, "delayed": r.delayed,
             "singles_s": r.singles_s, "singles_as": r.singles_as, "t_sec": r.t_sec}
            for r in records]


def _provenance(config):
    p = config.noise
    return {
        "seed": p.seed,
        "config_sha256": config.digest(),
        "tool_version": __version__,
        # the phonon is read out before the Stokes photon completes the Bell measurement
        "event_timeline_ps": {"write_pulse": 0.0, "read_pulse": p.read_delay,
                              "anti_stokes_detection": p.read_delay,
                              "stokes_detection": p.read_delay + 1.0},
    }


def _bootstrap(pipeline, records, config):
    if not config.bootstrap_n:
        return {}
    return bootstrap_errors(pipeline, records, config.bootstrap_n,
                            seed=int(derived_rng(config.noise.seed, "bootstrap-root").integers(2**63)),
                            workers=config.workers)


def run_entanglement(config: ExperimentConfig) -> ExperimentReport:
    """Tomography of the photon-phonon state plus the polarizer fringe."""
    detector_povms(config.circuit())
    records = simulate_entanglement(config)
    scalars, mats = entanglement_estimates(records)
    errors = _bootstrap(partial(entanglement_scalars, fef_starts=4), records, config)
    sig = errors.get("F_e_raw", 0.0)
    verdict = {
        "criterion": ENTANGLEMENT_CRITERION,
        "entangled_raw": scalars["F_e_raw"] > ENTANGLEMENT_CRITERION,
        "entangled_sub": scalars["F_e_sub"] > ENTANGLEMENT_CRITERION,
        "sigmas_raw": (scalars["F_e_raw"] - 0.5) / sig if sig > 0 else math.inf,
        "sigmas_sub": ((scalars["F_e_sub"] - 0.5) / errors["F_e_sub"]
                       if errors.get("F_e_sub", 0) > 0 else math.inf),
    }
    scan = _scan_fit(records)
    return ExperimentReport(
        "ENTANGLEMENT", scalars, errors,
        matrices={k: r.estimate for k, r in mats.items()},
        counts=_count_rows(records),
        extra={"verdict": verdict, "uu_rate_per_s": uu_rate(config.noise),
               "scan_fit": scan.__dict__,
               "convergence": {k: {"converged": r.converged, "iterations": r.iterations,
                                   **r.diagnostics} for k, r in mats.items()}},
        provenance=_provenance(config))


def run_visibility_scan(config: ExperimentConfig) -> ExperimentReport:
    records = simulate_scan(config)
    fit = _scan_fit(records)
    errors = _bootstrap(_visibility_only, records, config)
    return ExperimentReport("VISIBILITY_SCAN", {"V": fit.visibility}, errors,
                            counts=_count_rows(records), extra={"scan_fit": fit.__dict__},
                            provenance=_provenance(config))


def _visibility_only(records):
    return {"V": _scan_fit(records).visibility}


def run_teleport(config: ExperimentConfig) -> ExperimentReport:
    """Teleport each input, tomograph the phonon, then fit the process."""
    circuit = config.circuit()
    correction = pauli_correction(config.bell_outcome, circuit)
    records = simulate_teleport(config)
    scalars, mats = teleport_estimates(records, correction)
    errors = _bootstrap(partial(teleport_scalars, correction=correction), records, config)
    extra = {"bell_outcome": config.bell_outcome,
             "correction": correction,
             "bell_statistics": bell_outcome_statistics(config),
             "convergence": {k: {"converged": r.converged, "iterations": r.iterations,
                                 **r.diagnostics} for k, r in mats.items()}}
    if "F_avg_sub" in scalars:
        extra["classical_limit"] = {
            "limit": CLASSICAL_LIMIT,
            "sigmas_sub": ((scalars["F_avg_sub"] - CLASSICAL_LIMIT) / errors["F_avg_sub"]
                           if errors.get("F_avg_sub", 0) > 0 else math.inf),
            "sigmas_raw": ((scalars["F_avg_raw"] - CLASSICAL_LIMIT) / errors["F_avg_raw"]
                           if errors.get("F_avg_raw", 0) > 0 else math.inf),
        }
    return ExperimentReport("TELEPORT", scalars, errors,
                            matrices={f"chi_{k}": r.estimate.chi for k, r in mats.items()},
                            counts=_count_rows(records), extra=extra,
                            provenance=_provenance(config))


def bell_outcome_statistics(config: ExperimentConfig, trials: int = 100_000) -> dict:
    """Outcome frequencies of the four Bell projections over postselected trials."""
    circuit = optics.shipped_circuit("fig2_teleport") if config.circuit_file is None else config.circuit()
    state = prepare_state(config.noise)
    probs = {}
    for inp in config.input_states:
        for outcome in optics.BELL_SETTINGS:
            es = _stokes_povm(circuit, {**preparation(inp), **bell_analyzer(outcome)})
            probs[outcome] = probs.get(outcome, 0.0) + float(
                np.real(np.trace(np.kron(es, np.eye(2)) @ state.rho_single)))
    names = list(optics.BELL_SETTINGS)
    p = np.array([probs[n] for n in names])
    total = p.sum()
    rng = derived_rng(config.noise.seed, "bell-statistics")
    draws = rng.multinomial(trials, p / total)
    return {"trials": trials,
            "frequencies": {n: int(k) for n, k in zip(names, draws)},
            "probabilities": {n: float(v / total) for n, v in zip(names, p)},
            "success_fraction": float(probs[config.bell_outcome] / total)}


# ---------------------------------------------------------------- calibration

def analytic_observables(params: NoiseParams, fef_starts: int = 4) -> dict:
    """Noise-averaged raw F_e and fringe visibility from exact probabilities.

    Expected counts are linear in the measured projectors, so linear
    inversion of the 36 expected rates recovers the effective state exactly.
    """
    circuit = optics.shipped_circuit("fig2_entanglement")
    state = prepare_state(params)
    rows, rates = [], []
    for a in SIX_STATES:
        sa = stokes_analyzer(a)
        es = _stokes_povm(circuit, sa)
        for b in SIX_STATES:
            ea = _as_povm(circuit, anti_stokes_analyzer(b))
            p = probabilities_from_povms(state, es, ea, params)
            op = np.kron(projector(a), projector(b))
            rows.append(op.conj().ravel())
            rates.append(p.true + p.accidental)
    rates = np.array(rates)
    x, *_ = np.linalg.lstsq(np.array(rows), rates.astype(complex), rcond=None)
    rho = x.reshape(4, 4)
    rho = (rho + rho.conj().T) / 2
    rho = rho / np.trace(rho).real
    ea = _as_povm(circuit, anti_stokes_analyzer("-"))
    angles = scan_angles(10.0)
    scan = []
    for ang in angles:
        an = {**SCAN_STOKES, "P2": ang}
        p = probabilities_from_povms(state, _stokes_povm(circuit, an), ea, params)
        scan.append(p.true + p.accidental)
    return {"F_e_raw": fully_entangled_fraction(rho, starts=fef_starts).value,
            "V": fit_visibility(angles, scan).visibility,
            "uu_rate": uu_rate(params, circuit)}


_BOUNDS = {"sbr": (1e-2, 1e6), "eta_read": (1e-9, 1.0), "p_s": (1e-5, 0.5),
           "tau_phonon": (0.01, 1e4), "stokes_background": (0.0, 0.999)}
_LOG = {"sbr", "eta_read", "p_s", "tau_phonon"}


@dataclass
class CalibrationResult:
    params: NoiseParams
    observables: dict
    residuals: dict
    objective: float
    iterations: int
    converged: bool


def calibrate_noise(targets: dict, free=("sbr", "eta_read"), base: NoiseParams | None = None,
                    max_iter: int = 200, tol: float = 1e-4) -> CalibrationResult:
    """Coordinate descent on the free parameters to match target observables.

    ``targets`` may hold ``F_e_raw``, ``V`` and ``uu_rate`` (coincidences per
    second). The rate residual is relative. Converged means the summed squared
    residual is below ``tol``.
    """
    if len(free) > 2:
        raise ValueError("at most two free parameters")
    for k in ("F_e_raw", "V"):
        if k in targets and not 0 <= targets[k] <= 1:
            raise ValueError(f"target {k} outside [0, 1]")
    params = base or NoiseParams()
    for name in free:
        if name not in _BOUNDS:
            raise ValueError(f"cannot calibrate {name!r}")

    def residuals(p):
        obs = analytic_observables(p)
        res = {}
        for k, t in targets.items():
            res[k] = (obs[k] - t) / t if k == "uu_rate" else obs[k] - t
        return obs, res

    def objective(p):
        return sum(v * v for v in residuals(p)[1].values())

    cur = objective(params)
    it = 0
    while it < max_iter:
        it += 1
        before = cur
        for name in free:
            lo, hi = _BOUNDS[name]
            log = name in _LOG

            def f(u, name=name, log=log):
                return objective(replace(params, **{name: float(np.exp(u) if log else u)}))

            a, b = (np.log(lo), np.log(hi)) if log else (lo, hi)
            if it > 1:
                # later sweeps refine around the current value
                u = getattr(params, name)
                u, w = (np.log(u), np.log(4.0)) if log else (u, 0.1 * (hi - lo))
                a, b = max(a, u - w), min(b, u + w)
            r = minimize_scalar(f, bounds=(a, b), method="bounded", options={"xatol": 1e-7})
            if r.fun < cur:
                params = replace(params, **{name: float(np.exp(r.x) if log else r.x)})
                cur = r.fun
        # stop once a full sweep no longer improves the objective noticeably
        if before - cur <= max(1e-6 * before, 1e-4 * tol) or cur < 1e-14:
            break
    obs, res = residuals(params)
    return CalibrationResult(params, obs, res, cur, it, cur < tol)


def run_calibration(config: ExperimentConfig) -> ExperimentReport:
    targets = {"F_e_raw": config.target_fe, "V": config.target_vis}
    if "eta_read" in config.free_params and config.target_uu_rate:
        targets["uu_rate"] = config.target_uu_rate
    cal = calibrate_noise(targets, config.free_params, config.noise)
    return ExperimentReport(
        "CALIBRATE", dict(cal.observables), {k: 0.0 for k in cal.observables},
        calibration={"targets": targets, "free": list(config.free_params),
                     "fitted": {k: getattr(cal.params, k) for k in config.free_params},
                     "params": cal.params.to_dict(), "observables": dict(cal.observables),
                     "residuals": cal.residuals,
                     "objective": cal.objective, "iterations": cal.iterations,
                     "converged": cal.converged},
        provenance=_provenance(config))


RUNNERS = {
    Scenario.ENTANGLEMENT: run_entanglement,
    Scenario.TELEPORT: run_teleport,
    Scenario.VISIBILITY_SCAN: run_visibility_scan,
    Scenario.CALIBRATE: run_calibration,
}


def run(config: ExperimentConfig, write: bool = True) -> ExperimentReport:
    report = RUNNERS[config.scenario](config)
    if write:
        report.write(config.output_dir)
        if report.counts:
            write_counts_csv(_records_from_rows(report.counts), Path(config.output_dir) / "counts.csv")
    return report


def _records_from_rows(rows):
    out = []
    for r in rows:
        out.append(CountRecord(r["setting_id"], {k: r[k] for k in ("hwp3", "p2", "hwp5", "qwp2")},
                               r["raw"], r["delayed"], r["singles_s"], r["singles_as"], r["t_sec"]))
    return out


def campaign(config: ExperimentConfig) -> dict:
    """Entanglement and teleportation runs on one set of noise parameters."""
    ent = run_entanglement(replace(config, scenario=Scenario.ENTANGLEMENT, circuit_file=None))
    tel = run_teleport(replace(config, scenario=Scenario.TELEPORT, circuit_file=None))
    return {"entanglement": ent, "teleport": tel}
