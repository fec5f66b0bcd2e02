"""Low eigenvalues and eigenvalue counting for assembled forms.

Counting uses Sylvester's law of inertia: the number of eigenvalues of
``A v = lam B v`` below ``lam`` equals the number of negative pivots in a
symmetric factorization of ``A - lam B``.  SuperLU with a symmetric ordering
and no row pivoting gives such a factorization; if it pivots anyway the
count falls back to a dense spectrum or a nudged shift.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .operator import AssembledForm

DENSE_LIMIT = 2000
MULTIPLICITY_GAP = 1e-7


class EigenError(RuntimeError):
    def __init__(self, message: str, residuals: np.ndarray | None = None):
        super().__init__(message)
        self.residuals = residuals


def tie_band(lam: float, rel: float = 1e-9) -> float:
    """Eigenvalues within ``rel (1 + |lam|)`` above ``lam`` count as ``<= lam``."""
    return rel * (1.0 + abs(lam))


@dataclass
class Spectrum:
    eigenvalues: np.ndarray
    residuals: np.ndarray
    vectors: np.ndarray | None = field(default=None, repr=False)
    method: str = "dense"
    tol: float = 1e-10
    iterations: int = 0

    def __len__(self):
        return len(self.eigenvalues)

    def multiplicities(self, gap: float = MULTIPLICITY_GAP) -> list[tuple[float, int]]:
        """Clusters ``(value, multiplicity)`` by relative gap."""
        out: list[list] = []
        for lam in self.eigenvalues:
            if out and abs(lam - out[-1][0]) <= gap * max(1.0, abs(lam)):
                out[-1][1] += 1
            else:
                out.append([float(lam), 1])
        return [(v, m) for v, m in out]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "eigenvalue", "residual"])
            for i, (lam, r) in enumerate(zip(self.eigenvalues, self.residuals), start=1):
                w.writerow([i, repr(float(lam)), repr(float(r))])
        return path


def _residuals(A, mass: np.ndarray, vals: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    av = A @ vecs
    bv = mass[:, None] * vecs
    norms = np.sqrt(np.einsum("ij,ij->j", vecs, bv))
    return np.linalg.norm(av - bv * vals[None, :], axis=0) / norms / np.maximum(1.0, np.abs(vals))


def _b_normalize(vecs: np.ndarray, mass: np.ndarray) -> np.ndarray:
    return vecs / np.sqrt(np.einsum("ij,ij->j", vecs, mass[:, None] * vecs))[None, :]


def eigen_smallest(form: AssembledForm, k: int, tol: float = 1e-10, vectors: bool = True,
                   maxiter: int | None = None) -> Spectrum:
    """``k`` smallest eigenpairs of ``A v = lam M v``; eigenvectors are ``M``-orthonormal.

    Dense LAPACK below ``DENSE_LIMIT`` unknowns, otherwise ARPACK in
    shift-invert mode below a lower bound of the spectrum with a fixed start vector.
    """
    n = form.size
    if k < 1:
        raise EigenError("k must be at least 1")
    if k > n:
        raise EigenError(f"k={k} exceeds the dimension {n}")
    A = form.matrix
    mass = form.mass
    if n <= DENSE_LIMIT or k >= n - 1:
        vals, vecs = sla.eigh(A.toarray(), np.diag(mass) if not form.is_standard else None,
                              subset_by_index=(0, k - 1))
        vecs = _b_normalize(vecs, mass)
        res = _residuals(A, mass, vals, vecs)
        return Spectrum(vals, res, vecs if vectors else None, "dense", tol, 0)

    # Gershgorin-type lower bound: stiffness is PSD, so lam >= min(V / M)
    sigma = float(np.min(form.potential / mass)) - 1.0
    v0 = np.cos(np.arange(n) * 0.618)  # fixed start vector
    M = None if form.is_standard else sp.diags(mass).tocsc()
    try:
        vals, vecs = spla.eigsh(A.tocsc(), k=k, M=M, sigma=sigma, which="LM", v0=v0, tol=tol * 1e-2,
                                maxiter=maxiter)
    except spla.ArpackNoConvergence as exc:
        vals = exc.eigenvalues
        res = _residuals(A, mass, vals, exc.eigenvectors) if len(vals) else np.array([])
        raise EigenError("eigensolver did not converge", res) from exc
    order = np.argsort(vals)
    vals, vecs = vals[order], _b_normalize(vecs[:, order], mass)
    res = _residuals(A, mass, vals, vecs)
    if np.any(res > max(tol, 1e-8) * 1e2):
        raise EigenError("residuals above tolerance", res)
    return Spectrum(vals, res, vecs if vectors else None, "shift-invert", tol, 0)


# --- counting -------------------------------------------------------------------------

def _negative_pivots(A: sp.csc_matrix, mass: np.ndarray, lam: float) -> int | None:
    shifted = (A - sp.diags(lam * mass)).tocsc()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            lu = spla.splu(
                shifted,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError:
            # exactly singular: lam is an eigenvalue, nudge below it
            return None
    if not np.array_equal(lu.perm_r, lu.perm_c):
        return None
    diag = lu.U.diagonal()
    if np.any(diag == 0) or not np.all(np.isfinite(diag)):
        return None
    return int(np.sum(diag < 0))


def count_below(form: AssembledForm, lam: float, dense_eigs: np.ndarray | None = None,
                tol_band: float = 1e-9) -> int:
    """Number of eigenvalues ``<= lam`` (within the tie band)."""
    target = lam + tie_band(lam, tol_band)
    if dense_eigs is not None:
        return int(np.searchsorted(dense_eigs, target, side="right"))
    A = form.matrix.tocsc()
    got = _negative_pivots(A, form.mass, target)
    if got is not None:
        return got
    # fallback: full dense spectrum for moderate sizes, else nearby shift
    if form.size <= 4 * DENSE_LIMIT:
        return int(np.searchsorted(_all_eigenvalues(form), target, side="right"))
    got = _negative_pivots(A, form.mass, target * (1 + 1e-12) + 1e-12)
    if got is None:
        raise EigenError(f"inertia count failed at lambda={lam}")
    return got


def _all_eigenvalues(form: AssembledForm) -> np.ndarray:
    A = form.to_dense()
    if form.is_standard:
        return sla.eigh(A, eigvals_only=True)
    return sla.eigh(A, np.diag(form.mass), eigvals_only=True)


@dataclass
class CountingCurve:
    lambdas: np.ndarray
    counts: np.ndarray
    tol_band: float = 1e-9
    method: str = "slicing"

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "count"])
            for lam, c in zip(self.lambdas, self.counts):
                w.writerow([repr(float(lam)), int(c)])
        return path


def counting(form: AssembledForm, lambda_grid, tol_band: float = 1e-9, method: str = "auto") -> CountingCurve:
    """``N(lam) = #{k : lam_k <= lam}`` on a sorted grid.

    ``method`` is ``dense`` (full spectrum), ``slicing`` (inertia), or ``auto``.
    """
    grid = np.asarray(lambda_grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) < 0):
        raise EigenError("lambda grid must be sorted")
    if method == "auto":
        method = "dense" if form.size <= DENSE_LIMIT else "slicing"
    if method == "dense":
        eigs = _all_eigenvalues(form)
        counts = [count_below(form, lam, eigs, tol_band) for lam in grid]
    elif method == "slicing":
        counts = []
        for lam in grid:
            done = counts and counts[-1] >= form.size
            counts.append(form.size if done else count_below(form, lam, tol_band=tol_band))
    else:
        raise EigenError(f"unknown counting method {method!r}")
    counts = np.maximum.accumulate(np.asarray(counts, dtype=np.int64))
    return CountingCurve(grid, counts, tol_band, method)


# --- min-max probe ---------------------------------------------------------------------

@dataclass
class MinmaxReport:
    k: int
    eigenvalues: np.ndarray
    rayleigh_span: np.ndarray
    span_error: float
    random_sup_min: float
    trials: int
    ok: bool


def rayleigh_sup(form: AssembledForm, basis: np.ndarray) -> float:
    """Largest Rayleigh quotient on ``span(basis)``: top eigenvalue of the projected pencil."""
    A = form.to_dense()
    a = basis.T @ A @ basis
    b = basis.T @ (form.mass[:, None] * basis)
    return float(sla.eigh(a, b, eigvals_only=True)[-1])


def minmax_verify(form: AssembledForm, k: int, trials: int = 50, seed: int = 0) -> MinmaxReport:
    if form.size > 400:
        raise EigenError("minmax_verify is meant for small instances (dimension <= 400)")
    spec = eigen_smallest(form, k)
    vecs = spec.vectors
    A = form.to_dense()
    ray = np.array([v @ A @ v / (v @ (form.mass * v)) for v in vecs.T])
    err = float(np.max(np.abs(ray - spec.eigenvalues)))
    rng = np.random.default_rng(seed)
    sups = [rayleigh_sup(form, rng.standard_normal((form.size, k))) for _ in range(trials)]
    lam_k = float(spec.eigenvalues[-1])
    best = float(min(sups))
    ok = err <= 1e-8 * max(1.0, abs(lam_k)) and best >= lam_k - 1e-8 * max(1.0, abs(lam_k))
    return MinmaxReport(k, spec.eigenvalues, ray, err, best, trials, ok)


def fd_dirichlet_eigenvalues(dim: int, sites: int, h: float, lam_max: float) -> np.ndarray:
    """Closed-form FD Dirichlet spectrum of a cube with ``sites`` interior points per axis, up to ``lam_max``."""
    m = np.arange(1, sites + 1)
    one = 4.0 / h**2 * np.sin(m * math.pi / (2 * (sites + 1))) ** 2
    one = one[one <= lam_max]
    vals = one
    for _ in range(dim - 1):
        vals = (vals[:, None] + one[None, :]).ravel()
        vals = vals[vals <= lam_max]
    return np.sort(vals)


def fd_neumann_eigenvalues(dim: int, sites: int, h: float, lam_max: float) -> np.ndarray:
    """Closed-form spectrum of the cell-centred Neumann graph Laplacian."""
    m = np.arange(sites)
    one = 4.0 / h**2 * np.sin(m * math.pi / (2 * sites)) ** 2
    one = one[one <= lam_max]
    vals = one
    for _ in range(dim - 1):
        vals = (vals[:, None] + one[None, :]).ravel()
        vals = vals[vals <= lam_max]
    return np.sort(vals)
