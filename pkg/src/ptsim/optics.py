"""Optical-table description language and Jones-calculus compiler.

A circuit file is line oriented::

    <element> [@ <angle_deg>] [path=<U|L>] [label=<id>] [# comment]

Elements act on the 4-dimensional mode space of one photon, ordered
``path (x) polarization`` with ``U=0, L=1`` and ``H=0, V=1``.

Layout conventions:

* Elements before the first ``dichroic`` form a shared prefix that acts on
  both emitted photons (the pump-side semicircle plates fix the polarization
  each path imprints on the Stokes and anti-Stokes photons).
* After that, each ``detector`` closes one arm. The first arm is the Stokes
  arm, the second the anti-Stokes arm.
* ``calcite merge`` recombines ``|U,H>`` and ``|L,V>`` into the output port,
  which is relabeled as path U. The other two components leave through the
  rejected port (path L). The merge carries a fixed pi phase on the L
  component, matching the interferometer lock under which HWP3 at 0 deg and
  P2 at 45 deg herald ``(|H U> + |V L>)/sqrt2``.
"""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

UNITARY_TOL = 1e-12

P_U = np.diag([1, 0]).astype(complex)
P_L = np.diag([0, 1]).astype(complex)
I2 = np.eye(2, dtype=complex)
I4 = np.eye(4, dtype=complex)


class Kind(enum.Enum):
    HWP = "hwp"
    QWP = "qwp"
    POLARIZER = "polarizer"
    CALCITE_SPLIT = "calcite split"
    CALCITE_MERGE = "calcite merge"
    SEMICIRCLE_HWP = "semihwp"
    DICHROIC = "dichroic"
    DETECTOR = "detector"


ANGLED = {Kind.HWP, Kind.QWP, Kind.POLARIZER, Kind.SEMICIRCLE_HWP}
_KEYWORDS = {k.value: k for k in Kind}


class Path_(enum.Enum):
    UPPER = "U"
    LOWER = "L"
    BOTH = "BOTH"


# ---------------------------------------------------------------- Jones calculus

def fix_phase(m: np.ndarray) -> np.ndarray:
    """Rotate the global phase so the first nonzero entry is real and >= 0."""
    m = np.asarray(m, dtype=complex)
    flat = m.ravel()
    nz = np.flatnonzero(np.abs(flat) > 1e-14)
    if nz.size == 0:
        return m
    z = flat[nz[0]]
    return m * (abs(z) / z)


def _rot(theta_rad: float) -> np.ndarray:
    c, s = np.cos(theta_rad), np.sin(theta_rad)
    return np.array([[c, -s], [s, c]], dtype=complex)


def jones_hwp(theta: float) -> np.ndarray:
    """Half-wave plate with fast axis at ``theta`` degrees from H."""
    t = np.deg2rad(2 * theta)
    m = np.array([[np.cos(t), np.sin(t)], [np.sin(t), -np.cos(t)]], dtype=complex)
    return fix_phase(m)


def jones_qwp(theta: float) -> np.ndarray:
    """Quarter-wave plate with fast axis at ``theta`` degrees from H."""
    r = np.deg2rad(theta)
    m = _rot(r) @ np.diag([1, 1j]) @ _rot(-r)
    return fix_phase(m)


def polarizer_projector(theta: float) -> np.ndarray:
    """Projector onto cos(theta)|H> + sin(theta)|V>."""
    r = np.deg2rad(theta)
    v = np.array([np.cos(r), np.sin(r)], dtype=complex)
    return np.outer(v, v.conj())


# ---------------------------------------------------------------- circuit model

@dataclass(frozen=True)
class OpticalElement:
    kind: Kind
    angle: float | None = None
    path: Path_ = Path_.BOTH
    label: str = ""
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Circuit:
    elements: tuple
    paths: tuple = ("U", "L")
    polarizations: tuple = ("H", "V")

    def __len__(self):
        return len(self.elements)

    def find(self, label: str) -> int:
        for i, el in enumerate(self.elements):
            if el.label == label:
                return i
        raise KeyError(f"no element labelled {label!r}")

    def with_angles(self, **angles) -> "Circuit":
        """Copy with the angles of labelled elements replaced."""
        els = list(self.elements)
        for label, angle in angles.items():
            i = self.find(label)
            els[i] = replace(els[i], angle=normalize_angle(angle))
        return replace(self, elements=tuple(els))

    def sections(self) -> tuple[list, list[list]]:
        """Split into (shared prefix, arms). Each dichroic opens a new arm."""
        prefix, arms = [], []
        for el in self.elements:
            if el.kind is Kind.DICHROIC:
                arms.append([])
            (arms[-1] if arms else prefix).append(el)
        return prefix, arms


def normalize_angle(a: float) -> float:
    a = float(a) % 180.0
    # keep a clean zero and avoid 180.0 from rounding of tiny negatives
    if abs(a - 180.0) < 1e-12 or abs(a) < 1e-12:
        return 0.0
    return a


class CircuitError(ValueError):
    """Syntax or semantic error in a circuit description."""

    def __init__(self, message, line=0, column=0, expected=()):
        self.line = line
        self.column = column
        self.expected = tuple(expected)
        self.message = message
        loc = f"{line}:{column}: " if line else ""
        exp = f" (expected one of: {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{loc}{message}{exp}")


# ---------------------------------------------------------------- parser

_TOKEN = re.compile(r"\s*(?:(?P<at>@)|(?P<kv>(?P<key>[A-Za-z_]+)=(?P<val>[^\s#]*))"
                    r"|(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?(?![\w.]))"
                    r"|(?P<word>[A-Za-z_][A-Za-z0-9_]*)|(?P<bad>\S+))")
_LABEL = re.compile(r"[A-Za-z_][A-Za-z0-9_\-]*$")


def _tokenize(text: str, lineno: int):
    pos = 0
    toks = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            break
        col = m.start() + len(m.group(0)) - len(m.group(0).lstrip()) + 1
        kind = m.lastgroup if m.lastgroup not in ("key", "val") else "kv"
        if m.group("kv") is not None:
            kind = "kv"
        toks.append((kind, m, col))
        pos = m.end()
    return toks


def _parse_line(text: str, lineno: int) -> OpticalElement | None:
    code = text.split("#", 1)[0]
    if not code.strip():
        return None
    toks = _tokenize(code, lineno)
    i = 0

    def err(msg, col, expected=()):
        raise CircuitError(msg, lineno, col, expected)

    kind_tok, m, col = toks[i]
    if kind_tok != "word":
        err(f"unexpected {m.group(0).strip()!r}", col, sorted(_KEYWORDS))
    word = m.group("word").lower()
    if word == "calcite":
        i += 1
        if i >= len(toks) or toks[i][0] != "word" or toks[i][1].group("word").lower() not in ("split", "merge"):
            c = toks[i][2] if i < len(toks) else len(code) + 1
            err("incomplete calcite element", c, ["split", "merge"])
        word = "calcite " + toks[i][1].group("word").lower()
    if word not in _KEYWORDS:
        err(f"unknown element {word!r}", col, sorted(_KEYWORDS))
    kind = _KEYWORDS[word]
    i += 1

    angle = None
    path = Path_.BOTH
    label = ""
    seen = set()
    while i < len(toks):
        tk, m, col = toks[i]
        if tk == "at":
            if "angle" in seen:
                err("angle given twice", col)
            i += 1
            if i >= len(toks) or toks[i][0] != "num":
                c = toks[i][2] if i < len(toks) else len(code) + 1
                got = toks[i][1].group(0).strip() if i < len(toks) else "end of line"
                err(f"expected angle in decimal degrees, got {got!r}", c, ["<decimal degrees>"])
            if kind not in ANGLED:
                err(f"element '{kind.value}' does not take an angle", col)
            angle = normalize_angle(float(toks[i][1].group("num")))
            seen.add("angle")
        elif tk == "kv":
            key, val = m.group("key").lower(), m.group("val")
            if key in seen:
                err(f"{key}= given twice", col)
            seen.add(key)
            if key == "path":
                if val not in ("U", "L"):
                    err(f"invalid path {val!r}", col, ["U", "L"])
                path = Path_(val)
            elif key == "label":
                if not _LABEL.match(val):
                    err(f"invalid label {val!r}", col, ["<identifier>"])
                label = val
            else:
                err(f"unknown attribute {key!r}", col, ["path=", "label="])
        else:
            err(f"unexpected {m.group(0).strip()!r}", col, ["@", "path=", "label=", "#"])
        i += 1

    if kind in ANGLED and angle is None:
        raise CircuitError(f"element '{kind.value}' requires an angle", lineno, len(code.rstrip()) + 1, ["@"])
    if kind is Kind.SEMICIRCLE_HWP and path is Path_.BOTH:
        raise CircuitError("semihwp must select path=U or path=L", lineno, 1)
    return OpticalElement(kind, angle, path, label, lineno)


def _check_semantics(elements) -> None:
    labels = set()
    for el in elements:
        if el.kind is Kind.DETECTOR and el.label:
            if el.label in labels:
                raise CircuitError(f"duplicate detector label {el.label!r}", el.line, 1)
            labels.add(el.label)

    circuit = Circuit(tuple(elements))
    prefix, arms = circuit.sections()
    has_split = any(el.kind is Kind.CALCITE_SPLIT for el in elements)
    if not has_split:
        return
    groups = arms if arms else [prefix]
    if arms and any(el.kind is Kind.CALCITE_SPLIT for arm in arms for el in arm):
        groups = arms
    problems = []
    last_line = elements[-1].line if elements else 0
    for arm in groups:
        open_paths = {"U", "L"}
        for el in arm:
            if el.kind is Kind.CALCITE_MERGE:
                open_paths.clear()
            elif el.kind is Kind.DETECTOR:
                if el.path is Path_.BOTH:
                    open_paths.clear()
                else:
                    open_paths.discard(el.path.value)
        problems += [f"unterminated path {p}" for p in sorted(open_paths)]
    if problems:
        raise CircuitError("; ".join(problems), last_line, 1)
    for arm in arms:
        if sum(el.kind is Kind.DETECTOR for el in arm) > 1:
            raise CircuitError("more than one detector on an arm", arm[-1].line, 1)


def parse_circuit(source: str) -> Circuit:
    """Parse circuit text. Raises :class:`CircuitError` with position info."""
    elements = []
    for lineno, text in enumerate(source.splitlines(), start=1):
        el = _parse_line(text, lineno)
        if el is not None:
            elements.append(el)
    _check_semantics(elements)
    return Circuit(tuple(elements))


def load_circuit(path) -> Circuit:
    return parse_circuit(Path(path).read_text(encoding="utf-8"))


def format_element(el: OpticalElement) -> str:
    parts = [el.kind.value]
    if el.angle is not None:
        parts.append(f"@ {el.angle!r}")
    if el.path is not Path_.BOTH:
        parts.append(f"path={el.path.value}")
    if el.label:
        parts.append(f"label={el.label}")
    return " ".join(parts)


def format_circuit(circuit: Circuit) -> str:
    return "".join(format_element(el) + "\n" for el in circuit.elements)


SHIPPED = Path(__file__).parent / "circuits"


def shipped_circuit(name: str) -> Circuit:
    """Load one of the bundled circuits (``fig2_entanglement``, ``fig2_teleport``)."""
    return load_circuit(SHIPPED / f"{name}.oct")


# ---------------------------------------------------------------- compiler

@dataclass(frozen=True)
class ModeTransform:
    operator: np.ndarray
    projector: bool
    labels: tuple = ()
    metadata: dict = field(default_factory=dict)


_MERGE = np.zeros((4, 4), dtype=complex)
# index = 2*path + pol ; columns are inputs
_MERGE[0, 0] = 1      # |U,H> -> |out,H>
_MERGE[1, 3] = -1     # |L,V> -> -|out,V>
_MERGE[3, 1] = 1      # |U,V> -> rejected port
_MERGE[2, 2] = 1      # |L,H> -> rejected port


def _on_path(path: Path_, op2: np.ndarray, other: np.ndarray = I2) -> np.ndarray:
    if path is Path_.BOTH:
        return np.kron(I2, op2)
    if path is Path_.UPPER:
        return np.kron(P_U, op2) + np.kron(P_L, other)
    return np.kron(P_U, other) + np.kron(P_L, op2)


def lower(el: OpticalElement, merged: bool = False) -> ModeTransform:
    """Lower one element to its 4x4 operator on path (x) polarization.

    ``merged`` tells a detector that its arm has been recombined by a
    calcite, so it only sees the output port.
    """
    meta = {"kind": el.kind.value}
    if el.kind is Kind.HWP or el.kind is Kind.SEMICIRCLE_HWP:
        op, proj = _on_path(el.path, jones_hwp(el.angle)), False
    elif el.kind is Kind.QWP:
        op, proj = _on_path(el.path, jones_qwp(el.angle)), False
    elif el.kind is Kind.POLARIZER:
        p = polarizer_projector(el.angle)
        op = _on_path(el.path, p, other=np.zeros((2, 2))) if el.path is not Path_.BOTH else np.kron(I2, p)
        proj = True
    elif el.kind is Kind.CALCITE_MERGE:
        op, proj = _MERGE.copy(), False
    elif el.kind is Kind.DETECTOR:
        # after a merge the output port is path U; a bare detector sees both paths
        if el.path is Path_.BOTH:
            op = np.kron(P_U, I2) if merged else I4.copy()
        else:
            op = np.kron(P_U if el.path is Path_.UPPER else P_L, I2)
        proj = True
    elif el.kind is Kind.DICHROIC:
        op, proj = I4.copy(), False
        meta["routing"] = "wavelength"
    else:  # CALCITE_SPLIT: the dual-path mode space already exists
        op, proj = I4.copy(), False
        meta["routing"] = "path split"
    if not proj:
        op = fix_phase(op)
    return ModeTransform(op, proj, (el.label or el.kind.value,), meta)


def compile_elements(elements, fold: bool = True) -> list[ModeTransform]:
    """Lower a sequence of elements, folding adjacent unitaries if ``fold``."""
    transforms = []
    merged = False
    for el in elements:
        if el.kind is Kind.DICHROIC:
            merged = False
        elif el.kind is Kind.CALCITE_MERGE:
            merged = True
        transforms.append(lower(el, merged))
        if el.kind is Kind.DETECTOR:
            merged = False
    if not fold:
        return transforms
    folded: list[ModeTransform] = []
    for t in transforms:
        if folded and not t.projector and not folded[-1].projector:
            prev = folded[-1]
            folded[-1] = ModeTransform(t.operator @ prev.operator, False,
                                       prev.labels + t.labels, {"kind": "folded"})
        else:
            folded.append(t)
    return folded


def compile(circuit: Circuit, fold: bool = True) -> list[ModeTransform]:
    """Compile a whole circuit into its ordered list of mode transforms."""
    return compile_elements(circuit.elements, fold=fold)


def compose(transforms) -> np.ndarray:
    """Total (generally non-unitary) operator of a transform sequence."""
    k = I4.copy()
    for t in transforms:
        k = t.operator @ k
    return k


def arm_operator(circuit: Circuit, arm: int) -> np.ndarray:
    """Kraus operator from emission to detector for the given arm."""
    prefix, arms = circuit.sections()
    if arm >= len(arms):
        raise ValueError(f"circuit has {len(arms)} arm(s), arm {arm} requested")
    return compose(compile_elements(prefix + arms[arm]))


def arm_povm(circuit: Circuit, arm: int) -> np.ndarray:
    """POVM element K^dag K on the photon's path (x) polarization space."""
    k = arm_operator(circuit, arm)
    return k.conj().T @ k


def path_qubit_povm(circuit: Circuit, arm: int, pol: int = 0) -> np.ndarray:
    """POVM on the path qubit of a photon emitted with fixed polarization."""
    e = arm_povm(circuit, arm)
    idx = [0 * 2 + pol, 1 * 2 + pol]
    return e[np.ix_(idx, idx)]


# ---------------------------------------------------------------- Bell analyzer

_BELL_BOX = "hwp @ {h} label=HWP3\ncalcite merge label=C2\npolarizer @ {p} label=P2\ndetector label=APD2\n"

BELL_SETTINGS = {
    "HU+VL": (0.0, 45.0),
    "HU-VL": (0.0, 135.0),
    "VU-HL": (45.0, 45.0),
    "VU+HL": (45.0, 135.0),
}


def bell_projector(hwp3_angle: float, p2_angle: float) -> np.ndarray:
    """Projector realized by HWP3, calcite C2, polarizer P2 and APD2."""
    circ = parse_circuit(_BELL_BOX.format(h=float(hwp3_angle), p=float(p2_angle)))
    k = compose(compile(circ))
    return k.conj().T @ k


def mode_ket(path: str, pol: str) -> np.ndarray:
    """Basis ket of the 4-dim mode space, e.g. ``mode_ket('U', 'H')``."""
    v = np.zeros(4, dtype=complex)
    v[2 * "UL".index(path) + "HV".index(pol)] = 1
    return v


def bell_state(name: str) -> np.ndarray:
    """Bell state in path (x) polarization ordering, named as ``'HU+VL'``."""
    a, sign, b = name[:2], name[2], name[3:]
    va = mode_ket(a[1], a[0])
    vb = mode_ket(b[1], b[0])
    return (va + (1 if sign == "+" else -1) * vb) / np.sqrt(2)


# ---------------------------------------------------------------- serialization

def matrix_to_json(m) -> list:
    m = np.asarray(m, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in m]


def dump_matrices(circuit: Circuit, fold: bool = True) -> str:
    out = []
    for t in compile(circuit, fold=fold):
        out.append({"labels": list(t.labels), "projector": t.projector,
                    "matrix": matrix_to_json(t.operator)})
    return json.dumps(out, indent=1)
