"""Background subtraction, maximum-likelihood tomography, fringe fits, bootstrap.

All likelihoods are exact Poisson. The overall count scale (source
brightness times integration time) is a nuisance parameter that is profiled
out, so only the relative rates ``Tr(sigma F_k)`` matter and scaling all
counts by a common factor leaves the estimate unchanged.
"""
from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from .emission import CountRecord, derived_rng
from .qstate import (I2, PAULI_BASIS, SX, SY, SZ, ProcessMatrix, check_density_matrix,
                     projector)

GRAD_TOL = 1e-8
MAX_ITER = 100_000


# ---------------------------------------------------------------- settings

@dataclass(frozen=True)
class MeasurementSetting:
    setting_id: str
    povm: np.ndarray
    labels: tuple

    def __post_init__(self):
        p = np.asarray(self.povm, dtype=complex)
        if np.max(np.abs(p @ p - p)) > 1e-10:
            raise ValueError(f"setting {self.setting_id!r}: POVM element is not a projector")
        object.__setattr__(self, "povm", p)


def local_setting(setting_id: str, labels) -> MeasurementSetting:
    """Product projector for one basis label per qubit."""
    op = np.array([[1.0 + 0j]])
    for lab in labels:
        op = np.kron(op, projector(lab))
    return MeasurementSetting(setting_id, op, tuple(labels))


def setting_from_id(setting_id: str) -> MeasurementSetting:
    """Rebuild a setting from an id of the form ``<tag>/.../<a>,<b>``.

    The last ``/``-separated field lists the basis labels measured on each
    qubit, e.g. ``ent/H,+`` or ``tel/H/HU+VL/R``.
    """
    labels = setting_id.rsplit("/", 1)[-1].split(",")
    return local_setting(setting_id, labels)


def grid_settings(n_qubits: int, labels=("H", "V", "+", "-", "L", "R"), tag: str = "ent"):
    return [local_setting(f"{tag}/{','.join(c)}", c)
            for c in itertools.product(labels, repeat=n_qubits)]


# 16-setting minimal grid: four states per qubit
MINIMAL_LABELS = ("H", "V", "+", "L")


# ---------------------------------------------------------------- background

@dataclass(frozen=True)
class Corrected:
    value: float
    clamped: bool


def subtract_background(raw: CountRecord) -> Corrected:
    """Raw minus delayed-window coincidences, clamped at zero."""
    v = raw.raw - raw.delayed
    return Corrected(float(max(v, 0)), v < 0)


def counts_of(records, subtract: bool = False) -> tuple[np.ndarray, int]:
    """Count vector from records and the number of clamped settings."""
    if not subtract:
        return np.array([r.raw for r in records], dtype=float), 0
    cs = [subtract_background(r) for r in records]
    return np.array([c.value for c in cs]), sum(c.clamped for c in cs)


# ---------------------------------------------------------------- MLE engine

def _unpack(x, d):
    t = np.zeros((d, d), dtype=complex)
    t[np.diag_indices(d)] = x[:d]
    lo = np.tril_indices(d, -1)
    m = len(lo[0])
    t[lo] = x[d:d + m] + 1j * x[d + m:]
    return t


def _pack_grad(a, d):
    # gradient of Tr(A dT) wrt the real parameters of lower-triangular T
    at = a.T
    lo = np.tril_indices(d, -1)
    return np.concatenate([2 * at[np.diag_indices(d)].real,
                           2 * at[lo].real, -2 * at[lo].imag])


def _pack(t, d):
    lo = np.tril_indices(d, -1)
    return np.concatenate([t[np.diag_indices(d)].real, t[lo].real, t[lo].imag])


@dataclass
class _Fit:
    sigma: np.ndarray
    nll: float
    iterations: int
    grad_norm: float


def _objective(x, d, ops, w, ftot):
    t = _unpack(x, d)
    sigma = t.conj().T @ t
    q = np.einsum("kij,ji->k", ops, sigma).real
    q = np.maximum(q, 1e-300)
    qtot = np.einsum("ij,ji->", ftot, sigma).real
    f = -np.dot(w, np.log(q)) + np.log(qtot)
    g = -np.einsum("k,kij->ij", w / q, ops) + ftot / qtot
    return f, _pack_grad(g @ t.conj().T, d)


def mle_psd(ops, counts, starts: int = 4, seed: int = 0, init=None) -> _Fit:
    """Maximize the profile Poisson likelihood over PSD ``sigma = T^dag T``.

    ``ops`` are Hermitian PSD effect operators with ``E[n_k] ~ Tr(sigma F_k)``.
    Returns sigma normalized to unit trace.
    """
    ops = np.asarray(ops, dtype=complex)
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    ntot = counts.sum()
    if ntot <= 0:
        raise ValueError("all counts are zero")
    d = ops.shape[1]
    w = counts / ntot
    ftot = ops.sum(axis=0)
    # relative weights below 1e-12 are round-off from expected-count tables;
    # dropping them keeps the log terms finite at rank-deficient optima
    keep = w > 1e-12
    ops_k, w = ops[keep], w[keep]
    rng = np.random.default_rng(seed)
    x0s = []
    if init is not None:
        x0s.append(_pack(np.linalg.cholesky(init + 1e-3 * np.eye(d)).conj().T, d))
    x0s.append(_pack(np.eye(d, dtype=complex) / np.sqrt(d), d))
    while len(x0s) < starts:
        z = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        x0s.append(_pack(np.tril(z), d))
    best = None
    for x0 in x0s[:max(starts, 1)]:
        res = minimize(_objective, x0, args=(d, ops_k, w, ftot), jac=True, method="L-BFGS-B",
                       options={"maxiter": MAX_ITER, "gtol": 1e-12, "ftol": 1e-15, "maxcor": 30})
        if best is None or res.fun < best.fun:
            best = res
    # the objective is invariant under T -> cT; measure and polish at unit trace
    x = best.x / np.sqrt(np.sum(best.x ** 2))
    nit = int(best.nit)
    fun, grad = _objective(x, d, ops_k, w, ftot)
    if np.linalg.norm(grad) >= GRAD_TOL:
        with np.errstate(all="ignore"):
            pol = minimize(_objective, x, args=(d, ops_k, w, ftot), jac=True, method="BFGS",
                           options={"gtol": GRAD_TOL / 10, "maxiter": 2000})
        nit += int(pol.nit)
        if np.all(np.isfinite(pol.x)) and pol.fun <= fun + 1e-14:
            x = pol.x / np.sqrt(np.sum(pol.x ** 2))
            fun, grad = _objective(x, d, ops_k, w, ftot)
    t = _unpack(x, d)
    sigma = t.conj().T @ t
    sigma = sigma / np.trace(sigma).real
    return _Fit((sigma + sigma.conj().T) / 2, float(fun), nit, float(np.linalg.norm(grad)))


def _poisson_loglik(counts, ops, sigma):
    q = np.einsum("kij,ji->k", ops, sigma).real
    lam = counts.sum() * q / q.sum()
    lam = np.maximum(lam, 1e-300)
    return float(np.sum(counts * np.log(lam) - lam - gammaln(counts + 1)))


@dataclass
class TomographyResult:
    estimate: object
    log_likelihood: float
    iterations: int
    converged: bool
    error_bars: dict = field(default_factory=dict)
    counts: np.ndarray | None = None
    settings: list | None = None
    diagnostics: dict = field(default_factory=dict)


def _pauli_strings(n):
    names = "IXYZ"
    mats = (I2, SX, SY, SZ)
    for combo in itertools.product(range(4), repeat=n):
        op = np.array([[1.0 + 0j]])
        for c in combo:
            op = np.kron(op, mats[c])
        yield "".join(names[c] for c in combo), op


def missing_directions(ops, dim: int) -> list[str]:
    """Pauli directions not fixed by the span of the measurement operators."""
    ops = np.asarray(ops, dtype=complex)
    basis = np.array([np.concatenate([o.ravel().real, o.ravel().imag]) for o in ops])
    n = int(round(np.log2(dim)))
    rank = np.linalg.matrix_rank(basis, tol=1e-9)
    if rank >= dim * dim:
        return []
    _, _, vt = np.linalg.svd(basis)
    span = vt[:rank]
    missing = []
    for name, p in _pauli_strings(n):
        v = np.concatenate([p.ravel().real, p.ravel().imag])
        if np.linalg.norm(v - span.T @ (span @ v)) > 1e-6:
            missing.append(name)
    return missing


def qst_mle(counts, settings, dim: int, starts: int = 4, seed: int = 0) -> TomographyResult:
    """Maximum-likelihood density matrix from counts on projective settings."""
    if dim not in (2, 4):
        raise ValueError("qst_mle supports one or two qubits")
    counts = np.asarray(counts, dtype=float)
    if len(counts) != len(settings):
        raise ValueError("one count per setting is required")
    ops = np.array([s.povm for s in settings])
    if ops.shape[1:] != (dim, dim):
        raise ValueError(f"settings act on dimension {ops.shape[1]}, expected {dim}")
    miss = missing_directions(ops, dim)
    if miss:
        raise ValueError(f"settings are not informationally complete; missing {', '.join(miss)}")
    if counts.sum() <= 0:
        raise ValueError("all counts are zero")
    fit = mle_psd(ops, counts, starts=starts, seed=seed)
    rho = check_density_matrix(fit.sigma)
    return TomographyResult(rho, _poisson_loglik(counts, ops, rho), fit.iterations,
                            fit.grad_norm < GRAD_TOL,
                            counts=counts, settings=list(settings),
                            diagnostics={"grad_norm": fit.grad_norm})


def _chi_effects(rho_in, povm):
    # B[m, n] = Tr(E_n^dag M E_m rho); counts ~ Tr(chi B^T)
    b = np.empty((4, 4), dtype=complex)
    for m in range(4):
        for n in range(4):
            b[m, n] = np.trace(PAULI_BASIS[n].conj().T @ povm @ PAULI_BASIS[m] @ rho_in)
    return b.T


def qpt_mle(io_pairs, starts: int = 4, seed: int = 0) -> TomographyResult:
    """Maximum-likelihood process matrix from input states and output tomography data.

    Each pair is ``(input_state, TomographyResult)`` where the result carries
    the counts and settings of its output tomography. One brightness
    parameter is shared by all inputs, so chi is fit trace-nonincreasing; the
    estimate is normalized to ``Tr(chi) = 1`` and its trace-preservation
    residual reported.
    """
    ops, counts, inputs = [], [], []
    for psi, res in io_pairs:
        psi = np.asarray(psi, dtype=complex).ravel()
        rho_in = np.outer(psi, psi.conj())
        inputs.append(np.concatenate([rho_in.ravel().real, rho_in.ravel().imag]))
        if res.counts is None or res.settings is None:
            raise ValueError("output tomography result carries no count data")
        for n, s in zip(res.counts, res.settings):
            ops.append(_chi_effects(rho_in, s.povm))
            counts.append(n)
    if np.linalg.matrix_rank(np.array(inputs), tol=1e-9) < 4:
        raise ValueError("fewer than 4 linearly independent input states")
    ops = np.array(ops)
    counts = np.array(counts, dtype=float)
    fit = mle_psd(ops, counts, starts=starts, seed=seed)
    chi = ProcessMatrix(fit.sigma)
    return TomographyResult(chi, _poisson_loglik(counts, ops, fit.sigma), fit.iterations,
                            fit.grad_norm < GRAD_TOL,
                            counts=counts, diagnostics={"grad_norm": fit.grad_norm,
                                                        "tp_residual": chi.tp_residual()})


# ---------------------------------------------------------------- visibility

@dataclass(frozen=True)
class VisibilityFit:
    visibility: float
    amplitude: float
    phase: float          # degrees
    offset: float
    residual: float
    degenerate: bool = False


def fit_visibility(angles, counts) -> VisibilityFit:
    """Least-squares fit of C(theta) = offset + amplitude * cos(2 theta - phase).

    The visibility is amplitude / offset, i.e. (max - min) / (max + min) of
    the fitted fringe, clipped to [0, 1].
    """
    th = np.deg2rad(np.asarray(angles, dtype=float))
    y = np.asarray(counts, dtype=float)
    if th.size < 8:
        raise ValueError("need at least 8 scan points")
    if np.ptp(np.asarray(angles, dtype=float)) < 180 - 1e-9:
        raise ValueError("scan must span at least 180 degrees")
    a = np.column_stack([np.ones_like(th), np.cos(2 * th), np.sin(2 * th)])
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    c0, c, s = coef
    amp = float(np.hypot(c, s))
    resid = float(np.sum((a @ coef - y) ** 2))
    phase = float(np.rad2deg(np.arctan2(s, c)))
    if c0 <= 0 or np.ptp(y) == 0:
        return VisibilityFit(0.0, amp, phase, float(c0), resid, degenerate=True)
    return VisibilityFit(float(min(max(amp / c0, 0.0), 1.0)), amp, phase, float(c0), resid)


# ---------------------------------------------------------------- bootstrap

def resample_records(records, rng) -> list[CountRecord]:
    """Replace raw and delayed counts by independent Poisson draws."""
    out = []
    for r in records:
        out.append(CountRecord(r.setting_id, r.analyzer, int(rng.poisson(r.raw)),
                               int(rng.poisson(r.delayed)), r.singles_s, r.singles_as, r.t_sec))
    return out


def _one_resample(args):
    pipeline, records, seed, k = args
    return pipeline(resample_records(records, derived_rng(seed, "bootstrap", k)))


def bootstrap_errors(pipeline, counts, n_resamples: int = 200, seed: int = 0,
                     workers: int = 1) -> dict:
    """Standard deviation of each scalar returned by ``pipeline(records)``.

    Resample ``k`` draws from its own stream derived from ``(seed, k)``, so
    the result does not depend on ``workers``.
    """
    if n_resamples < 100:
        raise ValueError("n_resamples must be at least 100")
    first = pipeline(list(counts))
    if pipeline(list(counts)) != first:
        raise ValueError("pipeline is not reproducible: two runs on the same data differ")
    jobs = [(pipeline, list(counts), seed, k) for k in range(n_resamples)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_one_resample, jobs, chunksize=max(1, n_resamples // (4 * workers))))
    else:
        results = [_one_resample(j) for j in jobs]
    keys = sorted(first)
    return {k: float(np.std([r[k] for r in results], ddof=1)) for k in keys}
