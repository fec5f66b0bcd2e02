"""Littlewood-Paley blocks, Besov and Hoelder norms, cut-off Green kernels.

The dyadic partition is built from one smooth radial step ``theta``:

    theta(r) = 1                       for r <= 3/4
    theta(r) = 1 - s((r - 3/4)/(7/12)) for 3/4 < r < 4/3
    theta(r) = 0                       for r >= 4/3

with ``s(t) = f(t) / (f(t) + f(1 - t))`` and ``f(t) = exp(-1/t)``.  The low
block is ``chi_low = theta`` and the annular profile is
``chi(r) = theta(r/2) - theta(r)``, supported in ``[3/4, 8/3]``.  The sum
``chi_low + sum_{j=0}^{J} chi(2^{-j} .)`` telescopes to ``theta(2^{-J-1} .)``,
which is exactly one on a finite lattice once ``J`` is large enough.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .field import (
    Box,
    Field,
    FieldMeta,
    Grid,
    apply_multiplier,
    derivative_multiplier,
)

LOW_EDGE = 3.0 / 4.0
HIGH_EDGE = 4.0 / 3.0


def smooth_step(t: np.ndarray) -> np.ndarray:
    """C-infinity step from 0 (t <= 0) to 1 (t >= 1)."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
        out = a / (a + b)
    return out


def theta(r: np.ndarray) -> np.ndarray:
    return 1.0 - smooth_step((np.asarray(r, dtype=float) - LOW_EDGE) / (HIGH_EDGE - LOW_EDGE))


@dataclass(frozen=True)
class DyadicPartition:
    def low(self, k: np.ndarray) -> np.ndarray:
        return theta(k)

    def annulus(self, k: np.ndarray) -> np.ndarray:
        return theta(np.asarray(k) / 2.0) - theta(k)

    def block(self, k: np.ndarray, j: int) -> np.ndarray:
        if j == -1:
            return self.low(k)
        return self.annulus(np.asarray(k) * 2.0**-j)

    def top_level(self, grid: Grid) -> int:
        """Largest ``j`` whose annulus meets the lattice; blocks up to it resum to the identity."""
        kmax = grid.max_frequency()
        return max(-1, math.ceil(math.log2(kmax / LOW_EDGE)) - 1)


PARTITION = DyadicPartition()


def lp_block(f: Field, j: int, partition: DyadicPartition = PARTITION) -> Field:
    """Frequency-annulus projection ``Delta_j f``.

    Levels beyond the lattice return the zero field flagged ``above_nyquist``.
    """
    if j < -1:
        raise ValueError("LP levels start at -1")
    grid = f.grid
    phys = f.to_physical()
    if j > partition.top_level(grid):
        meta = FieldMeta(kind="derived", seed=f.meta.seed, epsilon=f.meta.epsilon, flags=("above_nyquist",))
        return Field(grid, np.zeros(grid.shape), "physical", meta)
    mult = partition.block(grid.wavenumber_norm(), j)
    return Field(grid, apply_multiplier(phys.values, grid, mult), "physical",
                 FieldMeta(kind="derived", seed=f.meta.seed, epsilon=f.meta.epsilon))


def lp_blocks(f: Field, partition: DyadicPartition = PARTITION) -> dict[int, np.ndarray]:
    """All nonzero blocks from one forward transform."""
    grid = f.grid
    coef = sfft.rfftn(f.to_physical().values)
    k = grid.wavenumber_norm()
    return {
        j: sfft.irfftn(coef * partition.block(k, j), s=grid.shape)
        for j in range(-1, partition.top_level(grid) + 1)
    }


@dataclass(frozen=True)
class BesovParams:
    p: float = math.inf
    q: float = math.inf
    r: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if not (1 <= self.p <= math.inf and 1 <= self.q <= math.inf):
            raise ValueError("p and q must lie in [1, inf]")
        if self.sigma < 0:
            raise ValueError("weight exponent must be nonnegative")


def _weight(grid: Grid, sigma: float) -> np.ndarray | float:
    if sigma == 0:
        return 1.0
    centre = grid.side_length / 2
    r2 = sum((x - centre) ** 2 for x in grid.coordinates())
    return (1.0 + r2) ** (-sigma / 2)


def lp_norm(values: np.ndarray, cell_volume: float, p: float) -> float:
    if p == math.inf:
        return float(np.max(np.abs(values))) if values.size else 0.0
    return float((np.sum(np.abs(values) ** p) * cell_volume) ** (1.0 / p))


def _lq(seq: np.ndarray, q: float) -> float:
    if q == math.inf:
        return float(np.max(seq)) if seq.size else 0.0
    return float(np.sum(seq**q) ** (1.0 / q))


def besov_profile(f: Field, params: BesovParams) -> dict[int, float]:
    """Per-level terms ``2^{rj} ||w_sigma Delta_j f||_{L^p}``."""
    w = _weight(f.grid, params.sigma)
    return {
        j: 2.0 ** (params.r * j) * lp_norm(w * block, f.grid.cell_volume, params.p)
        for j, block in lp_blocks(f).items()
    }


def besov_norm(f: Field, params: BesovParams) -> float:
    """Weighted Besov norm with the standard ``2^{+rj}`` level factor."""
    terms = np.array(list(besov_profile(f, params).values()))
    return _lq(terms, params.q)



@dataclass(frozen=True)
class GrowthSlope:
    levels: tuple[int, ...]
    mean_norms: tuple[float, ...]
    slope: float


def lp_growth_slope(fields, levels=None, p: float = math.inf) -> GrowthSlope:
    """Slope of ``log2 mean ||Delta_j f||_{L^p}`` against ``j``, averaging over ``fields``.

    Default levels skip the two lowest blocks and the two nearest the lattice cut-off.
    """
    fields = list(fields)
    if not fields:
        raise ValueError("need at least one field")
    grid = fields[0].grid
    if levels is None:
        levels = range(2, PARTITION.top_level(grid) - 1)
    levels = tuple(int(j) for j in levels)
    if len(levels) < 2:
        raise ValueError("need at least two levels for a slope")
    acc = np.zeros(len(levels))
    for f in fields:
        blocks = lp_blocks(f)
        acc += [lp_norm(blocks[j], grid.cell_volume, p) for j in levels]
    acc /= len(fields)
    slope = float(np.polyfit(levels, np.log2(acc), 1)[0])
    return GrowthSlope(levels, tuple(float(a) for a in acc), slope)

# --- Hoelder norms ---------------------------------------------------------------

def dyadic_offsets(dim: int, max_steps: int) -> list[tuple[int, ...]]:
    """Offsets ``2^m v`` for axis and diagonal directions ``v``, in lattice units."""
    dirs: list[tuple[int, ...]] = []
    for i in range(dim):
        dirs.append(tuple(1 if a == i else 0 for a in range(dim)))
    for i in range(dim):
        for j in range(i + 1, dim):
            for s in (1, -1):
                v = [0] * dim
                v[i], v[j] = 1, s
                dirs.append(tuple(v))
    if dim == 3:
        for s1 in (1, -1):
            for s2 in (1, -1):
                dirs.append((1, s1, s2))
    out = []
    m = 0
    while 2**m <= max_steps:
        out += [tuple(2**m * c for c in v) for v in dirs]
        m += 1
    return out


def _pair_views(values: np.ndarray, offset: tuple[int, ...]):
    a_sl, b_sl = [], []
    for o, size in zip(offset, values.shape):
        if abs(o) >= size:
            return None
        if o >= 0:
            a_sl.append(slice(0, size - o))
            b_sl.append(slice(o, size))
        else:
            a_sl.append(slice(-o, size))
            b_sl.append(slice(0, size + o))
    return values[tuple(a_sl)], values[tuple(b_sl)]


def holder_seminorm(values: np.ndarray, h: float, delta: float, radius: float = 1.0) -> float:
    """``sup |g(x) - g(y)| / |x - y|^delta`` over dyadic offsets with ``|x - y| <= radius``."""
    steps = int(math.floor(radius / h + 1e-9))
    best = 0.0
    for off in dyadic_offsets(values.ndim, max(steps, 1)):
        dist = h * math.sqrt(sum(o * o for o in off))
        if dist > radius * (1 + 1e-12):
            continue
        views = _pair_views(values, off)
        if views is None:
            continue
        a, b = views
        if a.size == 0:
            continue
        best = max(best, float(np.max(np.abs(a - b))) / dist**delta)
    return best


def holder_norm(f: Field, delta: float, box: Box | None = None) -> float:
    """Sup norm plus dyadic-offset Hoelder seminorm on the closed box sites."""
    if not 0 < delta < 1:
        raise ValueError("Hoelder exponent must lie in (0, 1)")
    phys = f.to_physical().values
    if box is not None:
        phys = phys[box.site_slices(f.grid, "closed")]
    return float(np.max(np.abs(phys))) + holder_seminorm(phys, f.grid.h, delta)


# --- Green kernels -------------------------------------------------------------

class GreenKernel:
    """Fourier multiplier ``(1 - chi_low(2^{-N} k)) |2 pi k|^{-2}`` on one lattice."""

    def __init__(self, grid: Grid, level: int, partition: DyadicPartition = PARTITION):
        if level < 0:
            raise ValueError("cut-off level must be >= 0")
        self.grid = grid
        self.level = level
        self.partition = partition

    @cached_property
    def multiplier(self) -> np.ndarray:
        k = self.grid.wavenumber_norm()
        out = np.zeros_like(k)
        nz = k > 0
        out[nz] = (1.0 - self.partition.low(k[nz] * 2.0**-self.level)) / (2 * np.pi * k[nz]) ** 2
        out.setflags(write=False)
        return out

    @cached_property
    def low_pass(self) -> np.ndarray:
        return self.partition.low(self.grid.wavenumber_norm() * 2.0**-self.level)

    def is_trivial(self) -> bool:
        """True when the cut-off removes every lattice frequency."""
        return not np.any(self.multiplier)


def max_green_level(grid: Grid) -> int:
    """Largest level whose multiplier is not identically zero on the lattice."""
    kmax = grid.max_frequency()
    return max(0, math.ceil(math.log2(kmax / LOW_EDGE)) - 1)


def green_apply(f: Field, kernel: GreenKernel, derivative: tuple[int, ...] | None = None) -> Field:
    """``d^m G_N * f`` by Fourier multiplication."""
    grid = f.grid
    if kernel.grid != grid:
        raise ValueError("kernel tabulated on a different grid")
    derivative = derivative or (0,) * grid.dim
    if sum(derivative) > 2:
        raise ValueError("derivatives of order > 2 are not supported")
    mult = kernel.multiplier * derivative_multiplier(grid, tuple(derivative))
    if sum(derivative) % 2 == 0:
        mult = mult.real
    values = apply_multiplier(f.to_physical().values, grid, mult)
    return Field(grid, values, "physical", FieldMeta(kind="derived", seed=f.meta.seed, epsilon=f.meta.epsilon))


@dataclass(frozen=True)
class SmoothingRate:
    levels: tuple[int, ...]
    norms: tuple[float, ...]
    slope: float
    target: float
    flagged: bool


def green_smoothing_rate(
    g: Field,
    levels,
    delta_minus: float,
    delta: float,
    box: Box | None = None,
) -> SmoothingRate:
    """Least-squares slope of ``log2 ||G_N * g||_{C^{delta_-}}`` against ``N``.

    ``target`` is the predicted ``-(delta - delta_minus)``.  Identically zero
    norms leave the rate undefined and the result flagged.
    """
    levels = tuple(int(n) for n in levels)
    if len(levels) < 3:
        raise ValueError("need at least three cut-off levels for a rate fit")
    top = max_green_level(g.grid)
    if max(levels) > top:
        raise ValueError(f"level {max(levels)} beyond the lattice (max {top})")
    norms = tuple(holder_norm(green_apply(g, GreenKernel(g.grid, n)), delta_minus, box) for n in levels)
    target = -(delta - delta_minus)
    positive = [(n, v) for n, v in zip(levels, norms) if v > 0]
    if len(positive) < 3:
        return SmoothingRate(levels, norms, math.nan, target, True)
    x = np.array([n for n, _ in positive], dtype=float)
    y = np.log2([v for _, v in positive])
    slope = float(np.polyfit(x, y, 1)[0])
    return SmoothingRate(levels, norms, slope, target, False)


# --- wavelet estimator ------------------------------------------------------------

class UnsupportedParameters(ValueError):
    pass


def wavelet_besov_norm(f: Field, params: BesovParams, wavelet: str = "db4") -> float:
    """Besov norm from periodic Daubechies coefficients.

    Wavelets of lattice spacing ``2^{-m}`` (in units of the side length) have
    sup-normalized amplitude ``2^{md/2} <f, psi>`` and carry frequencies of
    order ``2^{m-1} / L``, i.e. LP level ``j = m - 1 - log2 L``; level ``m``
    contributes ``2^{jr}`` times the ``L^p`` size of its coefficient sum.  The decomposition
    runs down to a single scaling coefficient (the mean).
    """
    import warnings

    import pywt

    grid = f.grid
    w = pywt.Wavelet(wavelet)
    moments = w.vanishing_moments_psi
    d, p, r = grid.dim, params.p, params.r
    inv_p = 0.0 if p == math.inf else 1.0 / p
    if moments < 4 or not moments > max(r, 2 * d * inv_p + d / 2 - r):
        raise UnsupportedParameters(
            f"{wavelet} has {moments} vanishing moments; too few for (p={p}, r={r}) in d={d}"
        )
    values = f.to_physical().values
    depth = int(math.log2(grid.n))
    with warnings.catch_warnings():
        # coarse periodized levels wrap the filter; still an orthonormal basis
        warnings.simplefilter("ignore", UserWarning)
        coeffs = pywt.wavedecn(values, w, mode="periodization", level=depth)
    scale = grid.cell_volume**0.5 / grid.side_length ** (d / 2)

    def term(m: int, arrays: list[np.ndarray]) -> float:
        c = np.concatenate([a.ravel() for a in arrays]) * scale * 2.0 ** (m * d / 2)
        if params.sigma:
            weights = []
            for a in arrays:
                spacing = grid.side_length / a.shape[0]
                centres = [(np.arange(a.shape[0]) + 0.5) * spacing - grid.side_length / 2] * d
                mesh = np.meshgrid(*centres, indexing="ij")
                weights.append(((1 + sum(x**2 for x in mesh)) ** (-params.sigma / 2)).ravel())
            c = c * np.concatenate(weights)
        if p == math.inf:
            size = float(np.max(np.abs(c)))
        else:
            size = float(np.sum(np.abs(c) ** p) ** (1 / p)) * (grid.side_length ** d * 2.0 ** (-m * d)) ** inv_p
        return 2.0 ** ((m - 1 - math.log2(grid.side_length)) * r) * size

    terms = [term(0, [coeffs[0]])]
    for m, detail in enumerate(coeffs[1:]):
        terms.append(term(m, list(detail.values())))
    return _lq(np.array(terms), params.q)


NORM_REPORT_HEADER = ["field_id", "p", "q", "r", "sigma", "estimator", "value"]


def write_norm_report(path: str | Path, rows) -> Path:
    """Rows of ``(field_id, params, estimator, value)`` as CSV."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(NORM_REPORT_HEADER)
        for field_id, params, estimator, value in rows:
            w.writerow([field_id, params.p, params.q, params.r, params.sigma, estimator, repr(float(value))])
    return path
