"""Few-qubit states, channels and fidelity measures.

States and operators are plain complex numpy arrays. Composite systems use
``np.kron`` ordering throughout: the left factor is the most significant
subsystem, so ``kron(a, b)`` indexes as ``a_index * dim(b) + b_index``.

Single-qubit basis labels follow the optical convention used by the rest of
the package::

    H = |0>, V = |1>, + = (H + V)/sqrt2, - = (H - V)/sqrt2,
    L = (H + iV)/sqrt2, R = (H - iV)/sqrt2

For dual-rail path qubits ``U`` plays the role of ``H`` and ``L``-path of ``V``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce

import numpy as np
from scipy.optimize import minimize

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-10
POSITIVITY_TOL = 1e-8
NORM_TOL = 1e-12

I2 = np.eye(2, dtype=complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)

#: Operator basis of the process matrix, in order: I, X, -i*sigma_y, Z.
PAULI_BASIS = (I2, SX, -1j * SY, SZ)
PAULI_LABELS = ("I", "X", "Y", "Z")

_S = 1 / np.sqrt(2)
BASIS_STATES = {
    "H": np.array([1, 0], dtype=complex),
    "V": np.array([0, 1], dtype=complex),
    "+": np.array([_S, _S], dtype=complex),
    "-": np.array([_S, -_S], dtype=complex),
    "L": np.array([_S, 1j * _S], dtype=complex),
    "R": np.array([_S, -1j * _S], dtype=complex),
}
SIX_STATES = ("H", "V", "+", "-", "L", "R")
ORTHOGONAL_LABEL = {"H": "V", "V": "H", "+": "-", "-": "+", "L": "R", "R": "L"}

PHI_PLUS = np.array([_S, 0, 0, _S], dtype=complex)


class PhysicalityError(ValueError):
    """A matrix violates the invariants required by an operation."""


def ket(label: str) -> np.ndarray:
    """Return the single-qubit basis state for one of ``H V + - L R``."""
    try:
        return BASIS_STATES[label].copy()
    except KeyError:
        raise ValueError(f"unknown basis label {label!r}") from None


def dm(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex).ravel()
    return np.outer(psi, psi.conj())


def projector(label: str) -> np.ndarray:
    return dm(ket(label))


def tensor(*ops) -> np.ndarray:
    """Kronecker product of states or operators, left factor most significant."""
    if not ops:
        raise ValueError("tensor() needs at least one operand")
    arrays = [np.asarray(o, dtype=complex) for o in ops]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("tensor operands must be finite")
    return reduce(np.kron, arrays)


def _num_qubits(dim: int) -> int:
    n = int(round(np.log2(dim)))
    if 2**n != dim:
        raise ValueError(f"dimension {dim} is not a power of two")
    return n


def partial_trace(rho, keep) -> np.ndarray:
    """Reduced density matrix over the qubits listed in ``keep``.

    Qubits are numbered from 0 (most significant). The kept qubits retain
    their relative order.
    """
    rho = np.asarray(rho, dtype=complex)
    n = _num_qubits(rho.shape[0])
    keep = sorted(set(int(k) for k in np.atleast_1d(keep)))
    if not keep:
        raise ValueError("keep must name at least one subsystem")
    if keep[0] < 0 or keep[-1] >= n:
        raise ValueError(f"subsystem index out of range for {n} qubits: {keep}")
    traced = [q for q in range(n) if q not in keep]
    t = rho.reshape([2] * (2 * n))
    # trace highest index first so remaining axis numbers stay valid
    for q in sorted(traced, reverse=True):
        m = t.ndim // 2
        t = np.trace(t, axis1=q, axis2=q + m)
    d = 2 ** len(keep)
    return t.reshape(d, d)


def is_hermitian(a, tol=HERMITIAN_TOL) -> bool:
    a = np.asarray(a)
    return bool(np.max(np.abs(a - a.conj().T), initial=0.0) <= tol)


def check_density_matrix(rho, tol_herm=HERMITIAN_TOL, tol_trace=TRACE_TOL,
                         tol_pos=POSITIVITY_TOL) -> np.ndarray:
    """Validate the density-matrix invariants and return ``rho`` as an array."""
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise PhysicalityError(f"density matrix must be square, got {rho.shape}")
    if not is_hermitian(rho, tol_herm):
        raise PhysicalityError("density matrix is not Hermitian")
    tr = np.trace(rho).real
    if abs(tr - 1) > tol_trace:
        raise PhysicalityError(f"density matrix trace {tr} != 1")
    lam = np.linalg.eigvalsh((rho + rho.conj().T) / 2)
    if lam[0] < -tol_pos:
        raise PhysicalityError(f"density matrix has negative eigenvalue {lam[0]}")
    return rho


def normalize_state(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex).ravel()
    nrm = np.linalg.norm(psi)
    if nrm == 0:
        raise ValueError("cannot normalize the zero vector")
    return psi / nrm


def state_fidelity(phi, rho) -> float:
    """Overlap <phi|rho|phi> of a pure reference with a density matrix."""
    phi = np.asarray(phi, dtype=complex).ravel()
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (phi.size, phi.size):
        raise ValueError(f"dimension mismatch: state {phi.size}, matrix {rho.shape}")
    if abs(np.vdot(phi, phi).real - 1) > 1e-12:
        raise ValueError("reference state is not normalized")
    f = np.vdot(phi, rho @ phi)
    if abs(f.imag) > 1e-10:
        raise PhysicalityError(f"fidelity has imaginary part {f.imag}")
    return float(f.real)


def trace_distance(rho, sigma) -> float:
    d = np.asarray(rho) - np.asarray(sigma)
    return float(0.5 * np.sum(np.abs(np.linalg.eigvalsh((d + d.conj().T) / 2))))


def werner(p: float) -> np.ndarray:
    """p |Phi+><Phi+| + (1 - p) I/4."""
    return p * dm(PHI_PLUS) + (1 - p) * np.eye(4) / 4


def u3(theta: float, phi: float, lam: float) -> np.ndarray:
    """General single-qubit unitary modulo global phase."""
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -np.exp(1j * lam) * s],
                     [np.exp(1j * phi) * s, np.exp(1j * (phi + lam)) * c]])


def haar_unitaries(n: int, rng: np.random.Generator, dim: int = 2) -> np.ndarray:
    """``n`` Haar-random unitaries as an array of shape (n, dim, dim)."""
    z = (rng.standard_normal((n, dim, dim)) + 1j * rng.standard_normal((n, dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r, axis1=1, axis2=2)
    return q * (d / np.abs(d))[:, None, :]


def _fef_overlap(params, rho) -> float:
    # (U x I)|Phi+> = vec(U)/sqrt2 in row-major order
    phi = u3(*params).reshape(4) / np.sqrt(2)
    return float(np.vdot(phi, rho @ phi).real)


@dataclass(frozen=True)
class EntangledFraction:
    value: float
    state: np.ndarray


def fully_entangled_fraction(rho, starts: int = 20, tol: float = 1e-9,
                             seed: int = 0) -> EntangledFraction:
    """Maximum overlap of a two-qubit state with any maximally entangled state.

    Every maximally entangled state is ``(U x I)|Phi+>`` for a single-qubit
    unitary U, so the search runs a multi-start Nelder-Mead over the three
    Euler angles of U. Returns the value and the maximizing state.
    """
    rho = check_density_matrix(rho)
    if rho.shape != (4, 4):
        raise ValueError("fully_entangled_fraction needs a two-qubit state")
    rng = np.random.default_rng(seed)
    inits = [np.zeros(3)] + [rng.uniform(0, 2 * np.pi, 3) for _ in range(starts - 1)]
    best_val, best_x = -np.inf, None
    for x0 in inits:
        res = minimize(lambda x: -_fef_overlap(x, rho), x0, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": tol, "maxiter": 4000})
        if -res.fun > best_val:
            best_val, best_x = -res.fun, res.x
    state = np.kron(u3(*best_x), I2) @ PHI_PLUS
    return EntangledFraction(float(min(max(best_val, 0.0), 1.0)), state)


def fef_sampling_oracle(rho, n: int = 100_000, seed: int = 1,
                        batch: int = 20_000) -> float:
    """Independent lower bound on the fully entangled fraction.

    Evaluates the overlap for ``n`` Haar-random local unitaries and returns
    the largest value seen.
    """
    rho = np.asarray(rho, dtype=complex)
    rng = np.random.default_rng(seed)
    best = -np.inf
    done = 0
    while done < n:
        m = min(batch, n - done)
        us = haar_unitaries(m, rng)
        # (U x I)|Phi+> = vec(U)/sqrt2 in row-major order
        phis = us.reshape(m, 4) / np.sqrt(2)
        vals = np.einsum("ki,ij,kj->k", phis.conj(), rho, phis).real
        best = max(best, float(vals.max()))
        done += m
    return best


@dataclass(frozen=True)
class ProcessMatrix:
    """Single-qubit process in the basis ``PAULI_BASIS``.

    ``chi`` need not be trace preserving; postselected processes are
    represented with their success probability folded into the matrix.
    """
    chi: np.ndarray
    labels: tuple = field(default=PAULI_LABELS)

    def __post_init__(self):
        chi = np.asarray(self.chi, dtype=complex)
        if chi.shape != (4, 4):
            raise ValueError(f"chi must be 4x4, got {chi.shape}")
        if not is_hermitian(chi):
            raise PhysicalityError("chi is not Hermitian")
        if np.linalg.eigvalsh((chi + chi.conj().T) / 2)[0] < -POSITIVITY_TOL:
            raise PhysicalityError("chi is not positive semidefinite")
        object.__setattr__(self, "chi", chi)

    @classmethod
    def from_kraus(cls, kraus) -> "ProcessMatrix":
        """Build chi from Kraus operators by expanding each in the basis."""
        chi = np.zeros((4, 4), dtype=complex)
        for k in kraus:
            # E_m are orthogonal with Tr(E_m^dag E_n) = 2 delta_mn
            c = np.array([np.trace(e.conj().T @ k) / 2 for e in PAULI_BASIS])
            chi += np.outer(c, c.conj())
        return cls(chi)

    @classmethod
    def from_unitary(cls, u) -> "ProcessMatrix":
        return cls.from_kraus([np.asarray(u, dtype=complex)])

    def normalized(self) -> "ProcessMatrix":
        return ProcessMatrix(self.chi / np.trace(self.chi).real)

    def tp_residual(self) -> float:
        """Frobenius norm of sum_mn chi_mn E_n^dag E_m - I."""
        s = sum(self.chi[m, n] * PAULI_BASIS[n].conj().T @ PAULI_BASIS[m]
                for m in range(4) for n in range(4))
        return float(np.linalg.norm(s - I2))


CHI_IDENTITY = ProcessMatrix(np.diag([1, 0, 0, 0]).astype(complex))


@dataclass(frozen=True)
class ChannelOutput:
    rho: np.ndarray
    norm: float


def apply_channel(chi: ProcessMatrix, rho_in) -> ChannelOutput:
    """Evaluate sum_mn chi_mn E_m rho E_n^dag.

    The result is renormalized to unit trace; ``norm`` is the trace before
    renormalization (the success probability of a postselected process).
    """
    if not isinstance(chi, ProcessMatrix):
        chi = ProcessMatrix(chi)
    rho_in = np.asarray(rho_in, dtype=complex)
    if rho_in.shape != (2, 2):
        raise ValueError("apply_channel acts on single-qubit states")
    out = np.zeros((2, 2), dtype=complex)
    for m in range(4):
        for n in range(4):
            if chi.chi[m, n] != 0:
                out += chi.chi[m, n] * PAULI_BASIS[m] @ rho_in @ PAULI_BASIS[n].conj().T
    norm = float(np.trace(out).real)
    if norm <= 0:
        raise PhysicalityError("channel output has zero trace")
    return ChannelOutput(out / norm, norm)


def process_fidelity(chi: ProcessMatrix, chi_ref: ProcessMatrix = CHI_IDENTITY) -> float:
    """Tr(chi chi_ref) for trace-normalized process matrices."""
    a = chi.chi if isinstance(chi, ProcessMatrix) else np.asarray(chi)
    b = chi_ref.chi if isinstance(chi_ref, ProcessMatrix) else np.asarray(chi_ref)
    f = np.trace(a @ b)
    if abs(f.imag) > 1e-10:
        raise PhysicalityError(f"process fidelity has imaginary part {f.imag}")
    return float(f.real)


def average_fidelity_from_process(f_p: float) -> float:
    """Average state fidelity of a qubit channel with process fidelity ``f_p``."""
    if not 0.0 <= f_p <= 1.0:
        raise ValueError(f"process fidelity {f_p} outside [0, 1]")
    return (2 * f_p + 1) / 3
