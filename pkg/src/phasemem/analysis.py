"""Density-matrix entropies, scaling-law fits and embedding phase statistics.

All entropies are in nats.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import ContractError, DensityMatrixError, InputError

TOL = 1e-10
PARALLEL = "parallel"


# ---------------------------------------------------------------------------
# Hermitian eigensolver
# ---------------------------------------------------------------------------


def jacobi_eigvalsh(A, tol=1e-15, max_sweeps=64):
    """Eigenvalues (ascending) of a Hermitian matrix by cyclic complex Jacobi.

    Each (p, q) step first removes the phase of ``A[p, q]`` with a diagonal
    unitary, then zeroes it with a real plane rotation.
    """
    A = np.array(A, dtype=np.complex128)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"square matrix required, got shape {A.shape}")
    scale = max(np.abs(A).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt((np.abs(A - np.diag(np.diag(A))) ** 2).sum())
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                b = abs(apq)
                if b <= tol * scale * 1e-3:
                    continue
                phase = apq / b
                tau = (A[q, q].real - A[p, p].real) / (2 * b)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + math.sqrt(1 + tau * tau))
                c = 1 / math.sqrt(1 + t * t)
                s = t * c
                U = np.array([[c, s], [-s * np.conj(phase), c * np.conj(phase)]])
                idx = [p, q]
                A[:, idx] = A[:, idx] @ U
                A[idx, :] = U.conj().T @ A[idx, :]
                A[p, q] = A[q, p] = 0.0
    return np.sort(np.diag(A).real)


# ---------------------------------------------------------------------------
# density matrices
# ---------------------------------------------------------------------------


class DensityMatrix:
    """Hermitian, unit-trace, positive semidefinite complex matrix (validated)."""

    def __init__(self, rho, tol=TOL):
        rho = np.array(rho, dtype=np.complex128)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise DensityMatrixError(f"density matrix must be square, got shape {rho.shape}")
        herm = np.abs(rho - rho.conj().T).max()
        if herm > tol:
            raise DensityMatrixError(f"not Hermitian: max |rho - rho^H| = {herm:.3g}")
        tr = np.trace(rho)
        if abs(tr - 1) > tol:
            raise DensityMatrixError(f"trace is {tr.real:.12g}, expected 1")
        self.rho = rho
        self.eigenvalues = jacobi_eigvalsh(rho)
        if self.eigenvalues.min() < -tol:
            raise DensityMatrixError(f"negative eigenvalue {self.eigenvalues.min():.3g}")

    @property
    def n(self):
        return self.rho.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.rho if dtype is None else self.rho.astype(dtype)


def _as_density(rho):
    return rho if isinstance(rho, DensityMatrix) else DensityMatrix(rho)


def _entropy(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def shannon_diag(rho):
    """-sum_t rho_tt ln rho_tt (0 ln 0 = 0)."""
    return _entropy(np.diag(_as_density(rho).rho).real)


def von_neumann(rho):
    """-Tr(rho ln rho) from the eigenvalues, clamped into [0, 1]."""
    return _entropy(_as_density(rho).eigenvalues)


def decoherence_gap(rho):
    """H(diag rho) - S_VN(rho): the entropy lost by discarding off-diagonal coherences."""
    rho = _as_density(rho)
    return shannon_diag(rho) - von_neumann(rho)


def to_bits(nats):
    return nats / math.log(2)


def example_state(p):
    """(1-p)|psi><psi| + p 1/3 with psi = (1, e^{i pi/3}, e^{i 2pi/3}) / sqrt(3)."""
    if not 0.0 <= p <= 1.0:
        raise InputError(f"mixing fraction must lie in [0, 1], got {p}")
    psi = np.exp(1j * np.pi * np.arange(3) / 3) / np.sqrt(3)
    return DensityMatrix((1 - p) * np.outer(psi, psi.conj()) + p * np.eye(3) / 3)


def example_eigenvalues(p):
    return np.array([1 - 2 * p / 3, p / 3, p / 3])


def floor_bound(e_real, d_eff):
    """Lower bound E_real - ln(d_eff) on the complex-valued loss floor, clamped at 0."""
    if d_eff < 1:
        raise InputError(f"d_eff must be >= 1, got {d_eff}")
    return max(0.0, e_real - math.log(d_eff))


# ---------------------------------------------------------------------------
# scaling fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    """Least-squares line through (log10 N, log10 y)."""

    slope: float
    intercept: float
    residual_stderr: float = 0.0
    slope_stderr: float = 0.0
    sigma_log: tuple = ()
    weights: tuple = ()
    space: str = "loss"
    log_n: tuple = field(default=(), repr=False)
    log_y: tuple = field(default=(), repr=False)

    def predict_log(self, log_n):
        return self.slope * np.asarray(log_n) + self.intercept

    def predict(self, n):
        return 10 ** self.predict_log(np.log10(n))

    def to_dict(self):
        return {
            "space": self.space,
            "slope": self.slope,
            "intercept": self.intercept,
            "slope_stderr": self.slope_stderr,
            "residual_stderr": self.residual_stderr,
            "sigma_log10": list(self.sigma_log),
            "n_points": len(self.log_n),
        }


def sigma_log10(y, sigma_y):
    """First-order propagation of a standard deviation into log10 space."""
    return np.asarray(sigma_y, dtype=np.float64) / (np.asarray(y, dtype=np.float64) * math.log(10))


def fit_power_law(points, space="loss"):
    """Unweighted OLS of log10 y on log10 N over ``(N, y, sigma_y)`` points."""
    pts = [tuple(p) + (0.0,) * (3 - len(p)) for p in points]
    if len(pts) < 2:
        raise InputError("a power-law fit needs at least 2 points")
    n, y, s = (np.array(c, dtype=np.float64) for c in zip(*pts))
    if (n <= 0).any() or (y <= 0).any():
        raise InputError("parameter counts and metric values must be positive")
    if (s < 0).any():
        raise InputError("standard deviations must be nonnegative")
    order = np.lexsort((y, n))  # canonical order: results independent of input order
    n, y, s = n[order], y[order], s[order]
    x, ly = np.log10(n), np.log10(y)
    xm, ym = x.mean(), ly.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx == 0:
        raise InputError("all points share one parameter count; slope undefined")
    slope = float(((x - xm) * (ly - ym)).sum() / sxx)
    intercept = float(ym - slope * xm)
    dof = len(x) - 2
    if dof > 0:
        resid = ly - (slope * x + intercept)
        rse = float(math.sqrt((resid ** 2).sum() / dof))
        slope_se = rse / math.sqrt(sxx)
    else:
        rse = slope_se = 0.0
    return FitResult(slope, intercept, rse, slope_se, tuple(sigma_log10(y, s)), tuple([1.0] * len(x)),
                     space, tuple(x), tuple(ly))


@dataclass(frozen=True)
class Crossover:
    log10_n: float
    log10_y: float

    @property
    def n(self):
        return 10 ** self.log10_n

    @property
    def y(self):
        return 10 ** self.log10_y


def fit_crossover(a, b):
    """Intersection of two fitted lines in log10 space, or ``"parallel"``."""
    if a.space != b.space:
        raise ContractError(f"cannot intersect fits from different spaces ({a.space} vs {b.space})")
    dslope = a.slope - b.slope
    if abs(dslope) < 1e-12:
        return PARALLEL
    x = (b.intercept - a.intercept) / dslope
    return Crossover(x, a.slope * x + a.intercept)


def anchored_fit(slope, anchor_n, anchor_y, space="loss"):
    """Line of a given slope through one (N, y) anchor."""
    return FitResult(slope, math.log10(anchor_y) - slope * math.log10(anchor_n), space=space)


def read_scaling_csv(path):
    """CSV with columns params, metric, std, label -> {label: [(N, y, sigma)]}."""
    groups = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"params", "metric", "std", "label"} - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            groups.setdefault(row["label"], []).append(
                (float(row["params"]), float(row["metric"]), float(row["std"] or 0.0)))
    return groups


def scaling_report(groups, space="loss"):
    """Fit every label; intersect the first two labels when there are at least two."""
    fits = {label: fit_power_law(pts, space) for label, pts in groups.items()}
    report = {"space": space, "fits": {k: f.to_dict() for k, f in fits.items()}, "crossover": None}
    labels = list(fits)
    if len(labels) >= 2:
        cross = fit_crossover(fits[labels[0]], fits[labels[1]])
        report["crossover"] = cross if cross == PARALLEL else {
            "between": labels[:2], "log10_params": cross.log10_n, "params": cross.n,
            "log10_metric": cross.log10_y, "metric": cross.y,
        }
    return report


# ---------------------------------------------------------------------------
# embedding phase structure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairRecord:
    word_a: tuple
    word_b: tuple
    label: str
    phase_diff: float = float("nan")
    coherence: float = float("nan")
    text_a: str = ""
    text_b: str = ""


@dataclass
class PhaseReport:
    records: list
    by_label: dict
    skipped: int = 0


def _embedding_matrix(E):
    if hasattr(E, "detach"):
        E = E.detach().cpu().double().numpy()
    E = np.asarray(E)
    if np.iscomplexobj(E):
        return E
    if E.ndim == 3 and E.shape[-1] == 2:
        return E[..., 0] + 1j * E[..., 1]
    raise InputError(f"expected a complex embedding table, got shape {E.shape}")


def normalized_overlap(z1, z2):
    """<z1|z2> / (|z1| |z2|) as a complex number, or ``None`` if either norm is 0."""
    n1, n2 = np.linalg.norm(z1), np.linalg.norm(z2)
    if n1 == 0 or n2 == 0:
        return None
    return complex(np.vdot(z1, z2) / (n1 * n2))


def phase_coherence(E, pairs):
    """Annotate each pair with the phase and magnitude of its normalized overlap.

    Multi-token words use the mean of their token embeddings.  Pairs touching a
    zero-norm embedding are skipped and counted.
    """
    table = _embedding_matrix(E)
    V = table.shape[0]
    out, skipped = [], 0
    groups = {}
    for rec in pairs:
        ids = list(rec.word_a) + list(rec.word_b)
        if not ids or min(ids) < 0 or max(ids) >= V:
            raise InputError(f"pair {rec.text_a or rec.word_a}/{rec.text_b or rec.word_b} has token ids outside [0, {V})")
        c = normalized_overlap(table[list(rec.word_a)].mean(0), table[list(rec.word_b)].mean(0))
        if c is None:
            skipped += 1
            continue
        done = replace(rec, phase_diff=math.atan2(c.imag, c.real), coherence=abs(c))
        out.append(done)
        groups.setdefault(rec.label, []).append(done)
    by_label = {}
    for label, recs in groups.items():
        ph = np.array([r.phase_diff for r in recs])
        by_label[label] = {
            "n": len(recs),
            "mean_phase": float(math.atan2(np.sin(ph).mean(), np.cos(ph).mean())),
            "mean_coherence": float(np.mean([r.coherence for r in recs])),
        }
    return PhaseReport(out, by_label, skipped)


def read_pairs(path, tokenize):
    """UTF-8 lines ``word_a<TAB>word_b<TAB>label``; blank and '#' lines ignored."""
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise InputError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        a, b, label = (p.strip() for p in parts)
        records.append(PairRecord(tuple(tokenize(a)), tuple(tokenize(b)), label, text_a=a, text_b=b))
    return records


def write_pairs_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["word_a", "word_b", "label", "phase_diff_rad", "coherence"])
        for r in records:
            w.writerow([r.text_a, r.text_b, r.label, f"{r.phase_diff:.9f}", f"{r.coherence:.9f}"])
