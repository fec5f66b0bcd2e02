"""Integrated density of states: Monte-Carlo estimation, Weyl and Lifschitz fits, additivity checks."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .eigensolve import counting, eigen_smallest
from .field import Box, Field, Grid, Mollifier, mollify, sample_white_noise, zero_field
from .operator import assemble_direct, ims_localization_error, ims_partition

DEFAULT_LAMBDAS = np.linspace(-30.0, 60.0, 120)
BOOTSTRAP_RESAMPLES = 1000


class IdsError(RuntimeError):
    pass


class FitError(IdsError):
    pass


# --- realizations ----------------------------------------------------------------------

@dataclass(frozen=True)
class Realization:
    """Recipe for the potential ``xi_eps`` and constant ``c_eps`` on a torus."""

    grid: Grid
    epsilon: float | None = None
    potential: str = "white"

    def build(self, seed: int) -> tuple[Field, float]:
        if self.potential == "zero":
            return zero_field(self.grid), 0.0
        if self.potential != "white":
            raise IdsError(f"unknown potential {self.potential!r}")
        from .renorm import gradient_variance_sum

        moll = Mollifier(self.epsilon)
        xi = mollify(sample_white_noise(self.grid, seed), moll)
        return xi, gradient_variance_sum(self.grid, moll)


def torus_for(L_max: float, epsilon: float | None, h: float | None = None, dim: int = 2) -> Grid:
    """Smallest power-of-two lattice of side ``L_max`` with spacing at most ``h`` (default ``eps/2``)."""
    if h is None:
        if epsilon is None:
            raise IdsError("need epsilon or h")
        h = epsilon / 2
    n = 2 ** max(1, math.ceil(math.log2(L_max / h - 1e-9)))
    return Grid(dim, float(L_max), n)


def _boxes(L: float, grid: Grid, tiled: bool) -> list[Box]:
    d = grid.dim
    if not tiled:
        return [Box.cube(d, L)]
    per = int(round(grid.side_length / L))
    return [Box(tuple(i * L for i in idx), (L,) * d) for idx in np.ndindex(*(per,) * d)]


# --- IDS curves -------------------------------------------------------------------------

@dataclass
class IdsCurve:
    lambdas: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n_seeds: int
    L: float
    bc: str
    epsilon: float | None
    dim: int = 2
    per_seed: np.ndarray | None = field(default=None, repr=False)
    partial: bool = False

    @property
    def volume(self) -> float:
        return self.L**self.dim

    @property
    def halfwidth(self) -> np.ndarray:
        return 1.96 * self.stderr

    def rows(self):
        for lam, m, s in zip(self.lambdas, self.mean, self.stderr):
            yield [self.bc, repr(float(self.L)), "" if self.epsilon is None else repr(float(self.epsilon)),
                   repr(float(lam)), repr(float(m)), repr(float(s)), self.n_seeds]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            w.writerows(self.rows())
        return path

    @classmethod
    def from_csv(cls, path: str | Path, dim: int = 2) -> IdsCurve:
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        missing = set(CSV_HEADER) - set(rows[0] if rows else CSV_HEADER)
        if missing:
            raise IdsError(f"missing columns {sorted(missing)}")
        if not rows:
            return cls(np.array([]), np.array([]), np.array([]), 0, float("nan"), "", None, dim)
        eps = rows[0]["epsilon"]
        return cls(
            np.array([float(r["lambda"]) for r in rows]),
            np.array([float(r["mean_count_per_volume"]) for r in rows]),
            np.array([float(r["stderr"]) for r in rows]),
            int(rows[0]["n_seeds"]),
            float(rows[0]["L"]),
            rows[0]["bc"],
            float(eps) if eps else None,
            dim,
        )


CSV_HEADER = ["bc", "L", "epsilon", "lambda", "mean_count_per_volume", "stderr", "n_seeds"]


def bootstrap_stderr(samples: np.ndarray, resamples: int = BOOTSTRAP_RESAMPLES, seed: int = 0) -> np.ndarray:
    """Bootstrap standard error of the mean over the first axis."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    if n < 2:
        return np.zeros(samples.shape[1:])
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(resamples, n))
    means = samples[idx].mean(axis=1)
    return means.std(axis=0, ddof=1)


def _seed_counts(args) -> tuple[int, dict, bool]:
    real, seed, bc, L_list, lambdas, tiled = args
    xi, c = real.build(seed)
    out = {}
    partial = False
    for L in L_list:
        per_box = []
        for box in _boxes(L, real.grid, tiled):
            form = assemble_direct(xi, c, bc, box)
            try:
                per_box.append(counting(form, lambdas).counts)
            except Exception:  # noqa: BLE001 - recorded as a partial result
                partial = True
        out[L] = np.mean(per_box, axis=0) / L**real.grid.dim if per_box else None
    return seed, out, partial


def _map(func, items, jobs: int):
    if jobs <= 1:
        return [func(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items))


def estimate_ids(
    bc: str,
    L_list,
    epsilon: float | None,
    seeds,
    lambda_grid=DEFAULT_LAMBDAS,
    *,
    torus: Grid | None = None,
    potential: str = "white",
    tiled: bool = False,
    jobs: int = 1,
    min_seeds: int = 8,
) -> list[IdsCurve]:
    """Per-volume mean counting curves ``N^bc(Q_L, lam) / L^d`` averaged over seeds.

    Boxes ``[0, L]^d`` are nested inside one torus per seed, by default of side
    ``2 max(L_list)`` so the noise does not wrap around any box; with ``tiled``
    each curve averages over all disjoint tiles of the torus.
    """
    seeds = list(seeds)
    if len(seeds) < min_seeds:
        raise IdsError(f"need at least {min_seeds} seeds")
    L_list = sorted(float(L) for L in L_list)
    if bc == "neumann" and any(abs(L - round(L)) > 1e-12 for L in L_list):
        raise IdsError("Neumann IDS uses integer box sides")
    lambdas = np.asarray(lambda_grid, dtype=float)
    if torus is None:
        torus = torus_for(2 * L_list[-1], epsilon)
    if torus.side_length < L_list[-1] - 1e-12:
        raise IdsError("largest box exceeds the torus")
    real = Realization(torus, epsilon, potential)
    results = _map(_seed_counts, [(real, s, bc, L_list, lambdas, tiled) for s in seeds], jobs)
    results.sort(key=lambda r: seeds.index(r[0]))
    curves = []
    for L in L_list:
        rows = [r[1][L] for r in results if r[1][L] is not None]
        partial = any(r[2] for r in results) or len(rows) < len(seeds)
        if not rows:
            raise IdsError(f"no successful realizations for L={L}")
        per_seed = np.array(rows)
        curves.append(
            IdsCurve(lambdas, per_seed.mean(axis=0), bootstrap_stderr(per_seed), len(rows), L, bc, epsilon,
                     torus.dim, per_seed, partial)
        )
    return curves


# --- Weyl law ---------------------------------------------------------------------------

def weyl_constant(dim: int) -> float:
    """``|B(0,1)| / (2 pi)^d``."""
    ball = math.pi ** (dim / 2) / math.gamma(dim / 2 + 1)
    return ball / (2 * math.pi) ** dim


@dataclass
class WeylFit:
    target: float
    raw_ratio: float
    lambda_top: float
    leading: float
    boundary: float
    window: tuple[float, float]

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def weyl_fit(curve: IdsCurve, window: tuple[float, float] | None = None, min_count: int = 50) -> WeylFit:
    """Raw ``lam^{-d/2} N(lam)`` at the top of the grid and a two-term fit ``a lam^{d/2} + b lam^{(d-1)/2}``."""
    d = curve.dim
    lam, n = curve.lambdas, curve.mean
    if lam.size == 0 or n[-1] * curve.volume < min_count or lam[-1] <= 0:
        raise FitError("curve does not reach the high-lambda regime")
    if window is None:
        window = (lam[-1] / 4, lam[-1])
    sel = (lam >= window[0]) & (lam <= window[1]) & (lam > 0)
    if sel.sum() < 3:
        raise FitError("fewer than three points in the Weyl window")
    x = lam[sel]
    A = np.column_stack([x ** (d / 2), x ** ((d - 1) / 2)])
    (a, b), *_ = np.linalg.lstsq(A, n[sel], rcond=None)
    return WeylFit(weyl_constant(d), float(n[-1] / lam[-1] ** (d / 2)), float(lam[-1]), float(a), float(b),
                   (float(window[0]), float(window[1])))


def free_dirichlet_curve(dim: int, L: float, n_per_side: int, lambdas) -> np.ndarray:
    """Per-volume FD Dirichlet count of the free Laplacian on a cube of side ``L``."""
    from .eigensolve import fd_dirichlet_eigenvalues

    h = L / n_per_side
    lambdas = np.asarray(lambdas, dtype=float)
    eigs = fd_dirichlet_eigenvalues(dim, n_per_side - 1, h, float(lambdas.max()) + 1.0)
    return np.searchsorted(eigs, lambdas + 1e-9 * (1 + np.abs(lambdas)), side="right") / L**dim


# --- Lifschitz tail ---------------------------------------------------------------------

@dataclass
class TailFit:
    window: tuple[float, float]
    alpha: float
    C: float
    offset: float
    r2: float
    points: int

    def to_json(self) -> dict:
        return {"window": list(self.window), "alpha": self.alpha, "C": self.C, "offset": self.offset,
                "r2": self.r2, "points": self.points}


def _tail_regression(lam: np.ndarray, y: np.ndarray, alpha: float):
    x = -((-lam) ** alpha)
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return coef, float(resid @ resid)


def fit_tail(lam, values, window: tuple[float, float] | None = None,
             alpha_range: tuple[float, float] = (0.1, 4.0)) -> TailFit:
    """Fit ``log values = b - C (-lam)^alpha`` over the positive entries with ``lam < 0`` in ``window``."""
    lam = np.asarray(lam, dtype=float)
    values = np.asarray(values, dtype=float)
    sel = lam < 0
    if window is not None:
        sel &= (lam >= window[0]) & (lam <= window[1])
    if sel.any() and not np.any(values[sel] > 0):
        raise FitError("all counts vanish in the tail window")
    sel &= values > 0
    if sel.sum() < 4:
        raise FitError("tail fit needs at least four points with positive counts")
    lam, y = lam[sel], np.log(values[sel])
    grid = np.linspace(*alpha_range, 391)
    ssr = [_tail_regression(lam, y, a)[1] for a in grid]
    i = int(np.argmin(ssr))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    opt = minimize_scalar(lambda a: _tail_regression(lam, y, a)[1], bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-8})
    alpha = float(opt.x) if opt.fun <= ssr[i] else float(grid[i])
    (b, C), s = _tail_regression(lam, y, alpha)
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - s / tss if tss > 0 else 1.0
    win = window if window is not None else (float(lam.min()), float(lam.max()))
    return TailFit((float(win[0]), float(win[1])), alpha, float(C), float(b), r2, int(lam.size))


def lifschitz_fit(curve: IdsCurve, window: tuple[float, float] | None = None) -> TailFit:
    return fit_tail(curve.lambdas, curve.mean, window)


@dataclass
class TailComparison:
    ids_fit: TailFit | None
    principal_fit: TailFit | None
    gap: float
    degenerate: bool
    window: tuple[float, float]

    def to_json(self) -> dict:
        return {
            "ids_fit": self.ids_fit.to_json() if self.ids_fit else None,
            "principal_fit": self.principal_fit.to_json() if self.principal_fit else None,
            "gap": self.gap,
            "degenerate": self.degenerate,
            "window": list(self.window),
        }


def empirical_cdf(samples, lam) -> np.ndarray:
    s = np.sort(np.asarray(samples, dtype=float))
    return np.searchsorted(s, np.asarray(lam, dtype=float), side="right") / s.size


def tail_vs_principal(curve: IdsCurve | None, principal_samples, window: tuple[float, float] | None = None,
                      min_samples: int = 200, lam_grid=None) -> TailComparison:
    """Exponent of ``log N(lam)`` against that of ``log P(lambda_1 <= lam)`` over a shared window."""
    samples = np.asarray(principal_samples, dtype=float)
    if samples.size < min_samples:
        raise IdsError(f"need at least {min_samples} principal samples")
    spread = float(np.ptp(samples))
    if spread <= 1e-12 * max(1.0, float(np.abs(samples).max())):
        w = window or (float(samples.min()), float(samples.min()))
        return TailComparison(None, None, float("nan"), True, w)
    if lam_grid is None:
        lam_grid = curve.lambdas if curve is not None else np.linspace(samples.min(), np.quantile(samples, 0.2), 40)
    lam_grid = np.asarray(lam_grid, dtype=float)
    if window is None:
        window = (float(samples.min()), float(min(np.quantile(samples, 0.25), 0.0)))
    p = empirical_cdf(samples, lam_grid)
    pf = fit_tail(lam_grid, p, window)
    if curve is None:
        return TailComparison(None, pf, float("nan"), False, window)
    cf = fit_tail(curve.lambdas, curve.mean, window)
    return TailComparison(cf, pf, abs(cf.alpha - pf.alpha), False, window)


def principal_samples(real: Realization, box: Box, seeds, bc: str = "dirichlet", jobs: int = 1) -> np.ndarray:
    return np.array(_map(_principal, [(real, box, s, bc) for s in seeds], jobs))


def _principal(args) -> float:
    real, box, seed, bc = args
    xi, c = real.build(seed)
    return float(eigen_smallest(assemble_direct(xi, c, bc, box), 1, vectors=False).eigenvalues[0])


# --- additivity and bracketing -------------------------------------------------------------

def tile_boxes(box: Box, tiling) -> list[Box]:
    tiling = tuple(int(t) for t in tiling)
    if len(tiling) != box.dim or min(tiling) < 1:
        raise IdsError("tiling must give a positive count per axis")
    sides = [s / t for s, t in zip(box.side, tiling)]
    return [Box(tuple(o + i * s for o, i, s in zip(box.origin, idx, sides)), tuple(sides))
            for idx in np.ndindex(*tiling)]


@dataclass
class AdditivityReport:
    lambdas: np.ndarray
    dirichlet_whole: np.ndarray
    dirichlet_tiles: np.ndarray
    neumann_whole: np.ndarray
    neumann_tiles: np.ndarray
    cover_whole: np.ndarray | None = None
    cover_tiles: np.ndarray | None = None
    ims_shift: float | None = None

    @property
    def super_violations(self) -> int:
        return int(np.sum(self.dirichlet_whole < self.dirichlet_tiles))

    @property
    def sub_violations(self) -> int:
        return int(np.sum(self.neumann_whole > self.neumann_tiles))

    @property
    def bracket_violations(self) -> int:
        return int(np.sum(self.dirichlet_whole > self.neumann_whole))

    @property
    def cover_violations(self) -> int:
        if self.cover_whole is None:
            return 0
        return int(np.sum(self.cover_whole > self.cover_tiles))

    def to_json(self) -> dict:
        return {
            "lambdas": self.lambdas.tolist(),
            "super_additivity_violations": self.super_violations,
            "sub_additivity_violations": self.sub_violations,
            "bracketing_violations": self.bracket_violations,
            "cover_violations": self.cover_violations,
            "ims_shift": self.ims_shift,
        }


def _count(xi, c, bc, box, lambdas):
    return counting(assemble_direct(xi, c, bc, box), lambdas).counts


def additivity_check(
    box: Box,
    tiling,
    lambda_grid,
    xi: Field,
    c: float,
    overlap: float | None = None,
) -> AdditivityReport:
    """Dirichlet super-additivity, Neumann sub-additivity and, with ``overlap``, the IMS cover bound.

    The cover bound compares ``N^D(box, lam)`` with the sum over tiles enlarged
    by ``overlap`` on each side at ``lam + A``, ``A`` being the discrete IMS
    constant of the partition; enlarged tiles must fit inside the torus.
    """
    lambdas = np.asarray(lambda_grid, dtype=float)
    tiles = tile_boxes(box, tiling)
    for t in tiles:
        t.index_bounds(xi.grid)
    dw = _count(xi, c, "dirichlet", box, lambdas)
    nw = _count(xi, c, "neumann", box, lambdas)
    dt = sum(_count(xi, c, "dirichlet", t, lambdas) for t in tiles)
    nt = sum(_count(xi, c, "neumann", t, lambdas) for t in tiles)
    rep = AdditivityReport(lambdas, dw, dt, nw, nt)
    if overlap is not None:
        side = tiles[0].side[0]
        if any(abs(s - side) > 1e-12 for t in tiles for s in t.side):
            raise IdsError("the cover bound needs cubic tiles")
        whole = assemble_direct(xi, c, "dirichlet", box)
        part = ims_partition(box, side, overlap, sites=whole.site_coordinates())
        A = ims_localization_error(whole, part)
        grown = [Box(tuple(o - overlap for o in t.origin), tuple(s + 2 * overlap for s in t.side)) for t in tiles]
        for g in grown:
            g.index_bounds(xi.grid)
        rep.cover_whole = dw
        rep.cover_tiles = sum(_count(xi, c, "dirichlet", g, lambdas + A) for g in grown)
        rep.ims_shift = A
    return rep


def nested_monotonicity(xi: Field, c: float, inner: Box, outer: Box, lambda_grid) -> int:
    """Violations of ``N^D(inner) <= N^D(outer)``."""
    if not outer.contains(inner):
        raise IdsError("inner box is not contained in the outer one")
    lambdas = np.asarray(lambda_grid, dtype=float)
    return int(np.sum(_count(xi, c, "dirichlet", inner, lambdas) > _count(xi, c, "dirichlet", outer, lambdas)))


def write_fit_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


__all__ = [
    "IdsCurve", "Realization", "estimate_ids", "weyl_fit", "weyl_constant", "lifschitz_fit", "fit_tail",
    "tail_vs_principal", "additivity_check", "nested_monotonicity", "TailFit", "WeylFit", "AdditivityReport",
    "bootstrap_stderr", "free_dirichlet_curve", "principal_samples", "tile_boxes", "torus_for",
]
