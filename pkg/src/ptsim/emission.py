"""Source, phonon decoherence, detection and Poissonian count sampling.

The joint state lives on three qubits ordered ``(photon path, photon
polarization, phonon path)``; index ``4*path_t + 2*pol_t + path_n``. The
photon is emitted H-polarized, the pump-side optics of the circuit set its
final polarization.

Coincidences come in two flavours:

* in-pulse ("true") coincidences, from single pairs and from double pairs
  in which the detected Stokes and anti-Stokes photons may belong to
  different pairs. Double pairs are not removed by the delayed window.
* accidental coincidences between photons of different pulses, modeled as a
  product of detector marginals with overall strength ``1/sbr`` relative to
  the UU-basis signal. The delayed-window channel samples exactly this part.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import optics


class Dephasing(enum.Enum):
    AMPLITUDE_DAMPING = "AMPLITUDE_DAMPING"
    PURE_DEPHASING = "PURE_DEPHASING"
    BOTH = "BOTH"


@dataclass(frozen=True)
class NoiseParams:
    """Physical imperfection knobs.

    ``stokes_background`` is the fraction of Stokes-detector singles that are
    uncorrelated with the phonon (fluorescence, leakage, dark counts) at the
    entanglement-verification setting. It does not pass through the analyzer
    optics, so postselecting analyzers raise the relative accidental rate.
    ``path_imbalance`` skews the two source paths to amplitudes
    sqrt((1 +- eps)/2).
    """
    p_s: float = 0.0811
    eta_read: float = 5.1e-4
    eta_det_s: float = 0.05
    eta_det_as: float = 0.05
    tau_phonon: float = 7.0          # ps
    read_delay: float = 0.388        # ps
    rep_rate: float = 76.0           # MHz
    sbr: float = 13.3
    dephasing_mode: Dephasing = Dephasing.AMPLITUDE_DAMPING
    include_double_pairs: bool = True
    seed: int = 20160101
    tau_dephase: float | None = None
    path_imbalance: float = 0.0
    stokes_background: float = 0.95

    def __post_init__(self):
        if isinstance(self.dephasing_mode, str):
            object.__setattr__(self, "dephasing_mode", Dephasing(self.dephasing_mode.upper()))
        if not 0 <= self.p_s < 1:
            raise ValueError(f"p_s must lie in [0, 1), got {self.p_s}")
        for name in ("eta_read", "eta_det_s", "eta_det_as"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.tau_phonon <= 0:
            raise ValueError("tau_phonon must be positive")
        if self.tau_dephase is not None and self.tau_dephase <= 0:
            raise ValueError("tau_dephase must be positive")
        if self.read_delay < 0:
            raise ValueError("read_delay must be nonnegative")
        if self.rep_rate <= 0:
            raise ValueError("rep_rate must be positive")
        if not self.sbr > 0:
            raise ValueError("sbr must be positive")
        if not -1 < self.path_imbalance < 1:
            raise ValueError("path_imbalance must lie in (-1, 1)")
        if not 0 <= self.stokes_background < 1:
            raise ValueError("stokes_background must lie in [0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def noise_free(cls, **overrides) -> "NoiseParams":
        base = dict(sbr=math.inf, include_double_pairs=False, read_delay=0.0,
                    stokes_background=0.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dephasing_mode"] = self.dephasing_mode.value
        return d

    @property
    def pulses_per_second(self) -> float:
        return self.rep_rate * 1e6


def _idx(path_t, pol_t, path_n):
    return 4 * path_t + 2 * pol_t + path_n


def _pure(vec):
    return np.outer(vec, vec.conj())


@dataclass(frozen=True)
class JointState:
    """Photon-phonon state split into emission sectors.

    ``weights`` holds the probability of each sector per pulse: ``vacuum``,
    ``single`` and ``double`` (retrievable pairs) and ``lost`` (pairs whose
    phonon decayed before the read pulse). ``rho_single`` and ``rho_double``
    are unit-trace states of the coincidence-relevant part of each sector.
    ``retrieval`` is the surviving fraction after amplitude damping.
    """
    rho_single: np.ndarray
    rho_double: np.ndarray
    weights: dict
    retrieval: float = 1.0

    def __post_init__(self):
        total = sum(self.weights.values())
        if abs(total - 1) > 1e-10:
            raise ValueError(f"sector weights sum to {total}")

    @property
    def norm_kept(self) -> float:
        return self.weights["single"]

    def emitted(self, sector: str) -> float:
        """Weight of a sector before any phonon loss."""
        return self.weights[sector] / self.retrieval if self.retrieval > 0 else (
            self.weights[sector] + self.weights["lost"])


def _vacuum_weight(single, double):
    return 1.0 - single - double


def emit_pair(params: NoiseParams, path: str = "U") -> JointState:
    """One path of the source: vacuum, a correlated pair, or two pairs."""
    p = params.p_s
    k = "UL".index(path)
    v = np.zeros(8, dtype=complex)
    v[_idx(k, 0, k)] = 1
    rho = _pure(v)
    double = p * p if params.include_double_pairs else 0.0
    weights = {"vacuum": _vacuum_weight(p, double), "single": p, "double": double, "lost": 0.0}
    return JointState(rho, rho.copy(), weights)


def dual_path_source(params: NoiseParams) -> JointState:
    """Both paths pumped coherently; a single pair is path-entangled.

    Each path emits independently with probability ``p_s``; exactly one
    pair leaves ``(|U>_t|U>_n + |L>_t|L>_n)/sqrt2``. With a pair in each path
    the detected Stokes and anti-Stokes photons carry no path correlation
    once both cross-pair combinations are counted, which gives the maximally
    mixed path state.
    """
    p, eps = params.p_s, params.path_imbalance
    v = np.zeros(8, dtype=complex)
    v[_idx(0, 0, 0)] = np.sqrt((1 + eps) / 2)
    v[_idx(1, 0, 1)] = np.sqrt((1 - eps) / 2)
    rho1 = _pure(v)
    h = np.array([[1, 0], [0, 0]], dtype=complex)
    rho2 = np.kron(np.kron(np.eye(2) / 2, h), np.eye(2) / 2).astype(complex)
    single = 2 * p * (1 - p)
    double = p * p if params.include_double_pairs else 0.0
    weights = {"vacuum": _vacuum_weight(single, double), "single": single,
               "double": double, "lost": 0.0}
    return JointState(rho1, rho2, weights)


def phonon_decoherence(state: JointState, params: NoiseParams) -> JointState:
    """Decay and dephasing of the phonon between write and read pulses."""
    mode = params.dephasing_mode
    weights = dict(state.weights)
    retrieval = state.retrieval
    rho1 = state.rho_single.copy()
    if mode in (Dephasing.AMPLITUDE_DAMPING, Dephasing.BOTH):
        s = math.exp(-params.read_delay / params.tau_phonon)
        for sector in ("single", "double"):
            lost = weights[sector] * (1 - s)
            weights[sector] -= lost
            weights["lost"] += lost
        retrieval *= s
    if mode in (Dephasing.PURE_DEPHASING, Dephasing.BOTH):
        tau = params.tau_dephase or params.tau_phonon
        d = math.exp(-params.read_delay / tau)
        n = np.arange(8) % 2
        rho1 = rho1 * np.where(n[:, None] == n[None, :], 1.0, d)
    return JointState(rho1, state.rho_double, weights, retrieval)


def prepare_state(params: NoiseParams) -> JointState:
    return phonon_decoherence(dual_path_source(params), params)


@dataclass(frozen=True)
class CoincidenceProbabilities:
    """Per-pulse probabilities for one analyzer setting."""
    true: float
    accidental: float
    singles_s: float
    singles_as: float


_UU = np.zeros((8, 8), dtype=complex)
for _pol in (0, 1):
    _UU[_idx(0, _pol, 0), _idx(0, _pol, 0)] = 1


def _expect(op, rho):
    return float(np.real(np.einsum("ij,ji->", op, rho)))


def probabilities_from_povms(state: JointState, stokes_povm, as_povm,
                             params: NoiseParams) -> CoincidenceProbabilities:
    """Coincidence model for explicit detector POVMs.

    ``stokes_povm`` acts on the photon's (path, polarization) space,
    ``as_povm`` on the phonon path qubit.
    """
    es = np.asarray(stokes_povm, dtype=complex)
    ea = np.asarray(as_povm, dtype=complex)
    joint = np.kron(es, ea)
    ms_op = np.kron(es, np.eye(2))
    ma_op = np.kron(np.eye(4), ea)
    w1, w2 = state.weights["single"], state.weights["double"]
    eta = params.eta_read * params.eta_det_s * params.eta_det_as
    # two photons on each side of a double pair: four detectable combinations
    true = eta * (w1 * _expect(joint, state.rho_single) + 4 * w2 * _expect(joint, state.rho_double))

    w1e, w2e = state.emitted("single"), state.emitted("double")
    stokes_sig = params.eta_det_s * (w1e * _expect(ms_op, state.rho_single)
                                     + 2 * w2e * _expect(ms_op, state.rho_double))
    stokes_ref = params.eta_det_s * (w1e + 2 * w2e) * 0.5
    f = params.stokes_background
    stokes_noise = stokes_ref * f / (1 - f)
    singles_s = stokes_sig + stokes_noise
    singles_as = params.eta_read * params.eta_det_as * (
        w1 * _expect(ma_op, state.rho_single) + 2 * w2 * _expect(ma_op, state.rho_double))

    if math.isinf(params.sbr) or eta == 0:
        acc = 0.0
    else:
        s_uu = eta * (w1 * _expect(_UU, state.rho_single) + 4 * w2 * _expect(_UU, state.rho_double))
        ref_s = stokes_ref + stokes_noise
        ref_as = params.eta_read * params.eta_det_as * (w1 + 2 * w2) * 0.5
        acc = s_uu / params.sbr * (singles_s / ref_s) * (singles_as / ref_as) if ref_as > 0 else 0.0
    return CoincidenceProbabilities(max(true, 0.0), max(acc, 0.0),
                                    max(singles_s, 0.0), max(singles_as, 0.0))


def detector_povms(circuit: optics.Circuit) -> tuple[np.ndarray, np.ndarray]:
    """(Stokes POVM on path x pol, anti-Stokes POVM on the phonon path qubit)."""
    _, arms = circuit.sections()
    n_det = [sum(el.kind is optics.Kind.DETECTOR for el in arm) for arm in arms]
    if len(arms) != 2 or n_det != [1, 1]:
        raise ValueError("pipeline must end in one Stokes and one anti-Stokes detector")
    return optics.arm_povm(circuit, 0), optics.path_qubit_povm(circuit, 1)


def coincidence_probabilities(state: JointState, circuit: optics.Circuit,
                              analyzer: dict, params: NoiseParams) -> CoincidenceProbabilities:
    """Probabilities for the circuit with labelled element angles overridden."""
    es, ea = detector_povms(circuit.with_angles(**analyzer))
    return probabilities_from_povms(state, es, ea, params)


# ---------------------------------------------------------------- sampling

CSV_FIELDS = ("setting_id", "hwp3", "p2", "hwp5", "qwp2", "raw", "delayed",
              "singles_s", "singles_as", "t_sec")


@dataclass(frozen=True)
class CountRecord:
    setting_id: str
    analyzer: dict = field(default_factory=dict)
    raw: int = 0
    delayed: int = 0
    singles_s: int = 0
    singles_as: int = 0
    t_sec: float = 1.0

    def __post_init__(self):
        if min(self.raw, self.delayed, self.singles_s, self.singles_as) < 0:
            raise ValueError("counts must be nonnegative")
        if not self.t_sec > 0:
            raise ValueError("integration time must be positive")


def derived_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; stable across runs."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        digest = hashlib.sha256(str(k).encode()).digest()
        words.append(int.from_bytes(digest[:8], "little"))
    return np.random.default_rng(np.random.SeedSequence(words))


def sample_counts(probs: CoincidenceProbabilities, integration_time: float,
                  params: NoiseParams, setting_id: str, analyzer: dict | None = None) -> CountRecord:
    """Draw Poissonian counts; the stream depends only on (seed, setting_id)."""
    pulses = params.pulses_per_second * integration_time
    if pulses < 1:
        raise ValueError("integration window shorter than one pulse")
    rng = derived_rng(params.seed, "counts", setting_id)
    raw = rng.poisson(pulses * (probs.true + probs.accidental))
    delayed = rng.poisson(pulses * probs.accidental)
    ss = rng.poisson(pulses * probs.singles_s)
    sa = rng.poisson(pulses * probs.singles_as)
    return CountRecord(setting_id, dict(analyzer or {}), int(raw), int(delayed),
                       int(ss), int(sa), float(integration_time))


def write_counts_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            a = r.analyzer
            w.writerow([r.setting_id] + [repr(float(a.get(k, 0.0))) for k in ("hwp3", "p2", "hwp5", "qwp2")]
                       + [r.raw, r.delayed, r.singles_s, r.singles_as, repr(float(r.t_sec))])


def _count(text: str):
    # expected-count tables carry fractional values
    x = float(text)
    return int(x) if x.is_integer() and "." not in text else x


def read_counts_csv(path) -> list[CountRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        for row in reader:
            out.append(CountRecord(
                row["setting_id"], {k: float(row[k]) for k in ("hwp3", "p2", "hwp5", "qwp2")},
                _count(row["raw"]), _count(row["delayed"]), _count(row["singles_s"]),
                _count(row["singles_as"]), float(row["t_sec"])))
    return out


def with_seed(params: NoiseParams, seed: int) -> NoiseParams:
    return replace(params, seed=seed)
