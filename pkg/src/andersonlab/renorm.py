"""Renormalization constants and the stochastic objects built from mollified noise.

Naming follows the construction of the exponential transform:

* ``grad_xi``    -- ``grad G_0 * xi_eps``
* ``tau``        -- ``|grad G_0 * xi_eps|^2 - c_eps`` (d = 2)
* ``tau1..tau4`` -- the d = 3 hierarchy
* ``X``          -- ``xi_eps + tau`` (d = 2) or ``xi_eps + tau1 + 2 tau2 + tau3`` (d = 3)
* ``W[N]``       -- ``G_N * X``
* ``Y``          -- ``F(W_N) (xi_eps - c_eps + |grad W_N|^2 + Delta W_N)``
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .field import (
    Box,
    Field,
    FieldMeta,
    Grid,
    Mollifier,
    check_resolution,
    derivative_multiplier,
    laplacian_multiplier,
    mollify,
    sample_white_noise,
    spectral_gradient,
)
from .harmonic import GreenKernel, holder_norm, max_green_level, smooth_step


class RenormError(RuntimeError):
    pass


class ConsistencyError(RenormError):
    pass


class SaturationError(RenormError):
    def __init__(self, message: str, min_norm: float):
        super().__init__(message)
        self.min_norm = min_norm


class CutoffWindowError(RenormError):
    """Raw exponential used while ``W`` leaves the window where it equals ``F``."""


# --- the cut-off F -----------------------------------------------------------------

@dataclass(frozen=True)
class CutoffF:
    """``F(x) = -exp(2x) psi(x)``; ``psi`` is 1 on ``[-2, 2]`` and vanishes outside ``[-3, 3]``."""

    plateau: float = 2.0
    support_radius: float = 3.0

    def psi(self, x: np.ndarray) -> np.ndarray:
        width = self.support_radius - self.plateau
        return smooth_step((self.support_radius - np.abs(x)) / width)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        inside = np.abs(x) < self.support_radius
        out[inside] = -np.exp(2 * x[inside]) * self.psi(x[inside])
        return out


def raw_exponential(x: np.ndarray) -> np.ndarray:
    return -np.exp(2 * np.asarray(x, dtype=float))


# --- renormalization constants ---------------------------------------------------

@dataclass(frozen=True)
class RenormSpec:
    dim: int
    epsilon: float
    method: str = "fourier_sum"
    samples: int = 0
    seed_base: int = 0

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise RenormError("renormalization is defined for d = 2 and d = 3")
        if self.method not in ("fourier_sum", "monte_carlo"):
            raise RenormError(f"unknown method {self.method!r}")
        if self.method == "monte_carlo" and self.samples < 2:
            raise RenormError("monte_carlo needs at least two samples")

    @property
    def mollifier(self) -> Mollifier:
        return Mollifier(self.epsilon)


@dataclass(frozen=True)
class RenormResult:
    value: float
    stderr: float
    method: str
    samples: int = 0
    parts: tuple[float, ...] = ()
    part_stderrs: tuple[float, ...] = ()


def _grad_green_multipliers(grid: Grid, mollifier: Mollifier | None) -> list[np.ndarray]:
    g0 = GreenKernel(grid, 0).multiplier
    rho = mollifier.fourier(grid.wavenumber_norm()) if mollifier else 1.0
    out = []
    for axis in range(grid.dim):
        order = tuple(1 if a == axis else 0 for a in range(grid.dim))
        out.append(derivative_multiplier(grid, order) * g0 * rho)
    return out


def gradient_variance_sum(grid: Grid, mollifier: Mollifier) -> float:
    """Exact ``E |grad G_0 * xi_eps|^2(0)`` for lattice white noise: ``L^{-d} sum_k |m(k)|^2``."""
    w = grid.half_lattice_weights()
    total = sum(np.sum(w * np.abs(m) ** 2) for m in _grad_green_multipliers(grid, mollifier))
    return float(total / grid.volume)


def _grad_sq(values: np.ndarray, grid: Grid, mults: list[np.ndarray]) -> np.ndarray:
    coef = sfft.rfftn(values)
    return sum(sfft.irfftn(coef * m, s=grid.shape) ** 2 for m in mults)


def _mc_mean(samples: np.ndarray) -> tuple[float, float]:
    return float(np.mean(samples)), float(np.std(samples, ddof=1) / math.sqrt(samples.size))


def renorm_constant(spec: RenormSpec, grid: Grid) -> RenormResult:
    """``c_eps`` for lattice white noise on ``grid``.

    d = 2: ``E |grad G_0 * xi_eps|^2(0)``.  d = 3 adds ``E |grad G_0 * tau1|^2(0)``,
    which is only ever estimated by Monte Carlo.  Monte-Carlo estimates use the
    spatial mean of each sample (unbiased by stationarity).
    """
    if grid.dim != spec.dim:
        raise RenormError("spec and grid dimensions differ")
    if grid.topology != "torus":
        raise RenormError("renormalization constants are computed on a torus")
    moll = spec.mollifier
    check_resolution(grid, moll.epsilon)
    first_exact = gradient_variance_sum(grid, moll)
    mults = _grad_green_multipliers(grid, moll)

    if spec.dim == 2:
        if spec.method == "fourier_sum":
            return RenormResult(first_exact, 0.0, "fourier_sum", parts=(first_exact,), part_stderrs=(0.0,))
        vals = np.empty(spec.samples)
        for i in range(spec.samples):
            xi = sample_white_noise(grid, spec.seed_base + i).values
            vals[i] = np.mean(_grad_sq(xi, grid, mults))
        mean, se = _mc_mean(vals)
        return RenormResult(mean, se, "monte_carlo", spec.samples, (mean,), (se,))

    # d = 3: the second contribution needs tau1, whose centring uses the first
    samples = spec.samples if spec.samples >= 2 else 64
    mults_plain = _grad_green_multipliers(grid, None)
    first = np.empty(samples)
    second = np.empty(samples)
    for i in range(samples):
        xi = sample_white_noise(grid, spec.seed_base + i).values
        g2 = _grad_sq(xi, grid, mults)
        first[i] = np.mean(g2)
        tau1 = g2 - first_exact
        second[i] = np.mean(_grad_sq(tau1, grid, mults_plain))
    m2, se2 = _mc_mean(second)
    if spec.method == "fourier_sum":
        return RenormResult(first_exact + m2, se2, "fourier_sum", samples, (first_exact, m2), (0.0, se2))
    m1, se1 = _mc_mean(first)
    return RenormResult(m1 + m2, math.hypot(se1, se2), "monte_carlo", samples, (m1, m2), (se1, se2))


def check_consistency(a: RenormResult, b: RenormResult, sigmas: float = 5.0) -> float:
    """Return the discrepancy in combined standard errors; raise beyond ``sigmas``."""
    se = math.hypot(a.stderr, b.stderr)
    diff = abs(a.value - b.value)
    if se == 0:
        if diff > 1e-12 * max(1.0, abs(a.value)):
            raise ConsistencyError(f"exact values differ by {diff}")
        return 0.0
    z = diff / se
    if z > sigmas:
        raise ConsistencyError(f"{a.method} and {b.method} disagree by {z:.1f} standard errors")
    return z


# --- stochastic packs --------------------------------------------------------------

@dataclass(eq=False)
class StochasticPack:
    xi_eps: Field
    c_eps: float
    X: Field
    W: dict[int, Field]
    taus: dict[str, Field]
    epsilon: float
    seed: int | None
    c_parts: tuple[float, ...] = ()
    M: int | None = None
    level_norms: dict[int, float] = field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return self.X.grid

    @property
    def dim(self) -> int:
        return self.grid.dim

    def manifest(self, method: str = "fourier_sum") -> dict:
        return {
            "seed": self.seed,
            "d": self.dim,
            "epsilon": self.epsilon,
            "c_eps": self.c_eps,
            "method": method,
            "M": self.M,
            "norms": {str(k): v for k, v in sorted(self.level_norms.items())},
        }

    def write_manifest(self, path: str | Path, method: str = "fourier_sum") -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.manifest(method), indent=2, sort_keys=True) + "\n")
        return path


def _derived(grid: Grid, values: np.ndarray, seed, eps) -> Field:
    return Field(grid, values, "physical", FieldMeta(kind="derived", seed=seed, epsilon=eps))


def _check_levels(grid: Grid, n_max: int) -> None:
    top = max_green_level(grid)
    if n_max > top:
        raise RenormError(f"G_N with N={n_max} exceeds the lattice (largest nontrivial level {top})")


def _w_levels(X: Field, n_max: int) -> dict[int, Field]:
    grid = X.grid
    coef = sfft.rfftn(X.values)
    return {
        n: _derived(grid, sfft.irfftn(coef * GreenKernel(grid, n).multiplier, s=grid.shape), X.meta.seed, X.meta.epsilon)
        for n in range(n_max + 1)
    }


def build_pack_2d(xi: Field, mollifier: Mollifier, n_max: int, c_eps: float | None = None) -> StochasticPack:
    grid = xi.grid
    if grid.dim != 2:
        raise RenormError("build_pack_2d needs a two-dimensional field")
    _check_levels(grid, n_max)
    xi_eps = mollify(xi.to_physical(), mollifier)
    if c_eps is None:
        c_eps = gradient_variance_sum(grid, mollifier)
    mults = _grad_green_multipliers(grid, None)
    grad_sq = _grad_sq(xi_eps.values, grid, mults)
    seed, eps = xi.meta.seed, mollifier.epsilon
    tau = _derived(grid, grad_sq - c_eps, seed, eps)
    X = _derived(grid, xi_eps.values + tau.values, seed, eps)
    return StochasticPack(xi_eps, c_eps, X, _w_levels(X, n_max), {"tau": tau}, eps, seed, (c_eps,))


def build_pack_3d(
    xi: Field,
    mollifier: Mollifier,
    n_max: int,
    c_first: float | None = None,
    c_second: float | None = None,
    samples: int = 64,
    seed_base: int = 0,
) -> StochasticPack:
    grid = xi.grid
    if grid.dim != 3:
        raise RenormError("build_pack_3d needs a three-dimensional field")
    _check_levels(grid, n_max)
    eps = mollifier.epsilon
    if c_first is None:
        c_first = gradient_variance_sum(grid, mollifier)
    if c_second is None:
        res = renorm_constant(RenormSpec(3, eps, "fourier_sum", samples, seed_base), grid)
        c_second = res.parts[1]
    xi_eps = mollify(xi.to_physical(), mollifier)
    mults = _grad_green_multipliers(grid, None)

    def grad(values):
        coef = sfft.rfftn(values)
        return [sfft.irfftn(coef * m, s=grid.shape) for m in mults]

    g_xi = grad(xi_eps.values)
    tau1 = sum(g**2 for g in g_xi) - c_first
    g_t1 = grad(tau1)
    tau2 = sum(a * b for a, b in zip(g_xi, g_t1))
    tau3 = sum(g**2 for g in g_t1) - c_second
    g_t2 = grad(tau2)
    tau4 = sum(a * b for a, b in zip(g_xi, g_t2))
    seed = xi.meta.seed
    taus = {name: _derived(grid, v, seed, eps) for name, v in
            (("tau1", tau1), ("tau2", tau2), ("tau3", tau3), ("tau4", tau4))}
    X = _derived(grid, xi_eps.values + tau1 + 2 * tau2 + tau3, seed, eps)
    c_eps = c_first + c_second
    return StochasticPack(xi_eps, c_eps, X, _w_levels(X, n_max), taus, eps, seed, (c_first, c_second))


def transform_residual(pack: StochasticPack, W: Field) -> np.ndarray:
    """``xi_eps - c_eps + |grad W|^2 + Delta W`` evaluated spectrally."""
    grid = pack.grid
    coef = sfft.rfftn(W.to_physical().values)
    grads = [sfft.irfftn(coef * derivative_multiplier(grid, tuple(1 if a == ax else 0 for a in range(grid.dim))),
                         s=grid.shape) for ax in range(grid.dim)]
    lap = sfft.irfftn(coef * laplacian_multiplier(grid), s=grid.shape)
    return pack.xi_eps.values - pack.c_eps + sum(g**2 for g in grads) + lap


def build_Y(pack: StochasticPack, F: CutoffF | None, N: int, use_cutoff: bool = True) -> Field:
    if N not in pack.W:
        raise RenormError(f"pack has no level {N}")
    W = pack.W[N]
    if use_cutoff:
        factor = (F or CutoffF())(W.values)
    else:
        if np.max(np.abs(W.values)) > 2:
            raise CutoffWindowError(f"||W_{N}||_inf = {np.max(np.abs(W.values)):.3f} exceeds 2")
        factor = raw_exponential(W.values)
    return _derived(pack.grid, factor * transform_residual(pack, W), pack.seed, pack.epsilon)


def select_M(pack: StochasticPack, delta_minus: float, gamma: float, box: Box | None = None) -> int:
    """Smallest level from which every computable ``||W_n||_{C^{delta_-}(box)}`` is at most ``gamma``."""
    levels = sorted(pack.W)
    norms = {n: holder_norm(pack.W[n], delta_minus, box) for n in levels}
    pack.level_norms.update(norms)
    if math.isinf(gamma):
        pack.M = 0
        return 0
    if norms[levels[-1]] > gamma:
        raise SaturationError(
            f"||W_n|| > {gamma} up to the last computable level {levels[-1]}", min(norms.values())
        )
    M = levels[-1]
    for n in reversed(levels):
        if norms[n] > gamma:
            break
        M = n
    pack.M = M
    return M


def green_zero_apply(values: np.ndarray, grid: Grid) -> np.ndarray:
    return sfft.irfftn(sfft.rfftn(values) * GreenKernel(grid, 0).multiplier, s=grid.shape)


# --- boundary pairing ------------------------------------------------------------------

def _face_weights(count: int) -> np.ndarray:
    w = np.ones(count)
    w[0] = w[-1] = 0.5
    return w


def boundary_flux(phi: np.ndarray, f: np.ndarray, grid: Grid, box: Box) -> float:
    """``int_{dU} phi d_n f dS`` with central differences and the trapezoid rule.

    ``phi`` and ``f`` are full torus arrays; the box must keep one layer of
    sites clear of the torus edge on each side.
    """
    bounds = box.index_bounds(grid)
    for lo, hi in bounds:
        if lo < 1 or hi > grid.n - 2:
            raise RenormError("box touches the torus edge")
    h = grid.h
    d = grid.dim
    total = 0.0
    for axis in range(d):
        for side, sign in ((0, -1.0), (1, 1.0)):
            idx = bounds[axis][side]
            sl_face, sl_plus, sl_minus = [], [], []
            weights = []
            for a in range(d):
                if a == axis:
                    sl_face.append(idx)
                    sl_plus.append(idx + 1)
                    sl_minus.append(idx - 1)
                else:
                    lo, hi = bounds[a]
                    sl_face.append(slice(lo, hi + 1))
                    sl_plus.append(slice(lo, hi + 1))
                    sl_minus.append(slice(lo, hi + 1))
                    weights.append(_face_weights(hi - lo + 1))
            dn = sign * (f[tuple(sl_plus)] - f[tuple(sl_minus)]) / (2 * h)
            integrand = phi[tuple(sl_face)] * dn
            for w in weights:
                integrand = np.tensordot(w, integrand, axes=([0], [0]))
            total += float(integrand) * h ** (d - 1)
    return total


def bulk_green_terms(phi: np.ndarray, f: np.ndarray, grid: Grid, box: Box) -> tuple[float, float]:
    """``(int_U grad phi . grad f, int_U phi Delta f)`` with spectral derivatives, trapezoid in space."""
    fphi = Field(grid, phi)
    ff = Field(grid, f)
    gp = spectral_gradient(fphi)
    gf = spectral_gradient(ff)
    lap = sfft.irfftn(sfft.rfftn(f) * laplacian_multiplier(grid), s=grid.shape)
    sl = box.site_slices(grid, "closed")
    bounds = box.index_bounds(grid)
    weights = [_face_weights(hi - lo + 1) for lo, hi in bounds]

    def integrate(arr):
        arr = arr[sl]
        for w in weights:
            arr = np.tensordot(w, arr, axes=([0], [0]))
        return float(arr) * grid.cell_volume

    return integrate(sum(a * b for a, b in zip(gp, gf))), integrate(phi * lap)


def boundary_pairing(phi: Field, xi_eps: Field, box: Box) -> float:
    """``int_{dU} phi grad(G_0 * xi_eps) . dS`` on a box inside the torus."""
    grid = xi_eps.grid
    if xi_eps.meta.epsilon:
        check_resolution(grid, xi_eps.meta.epsilon)
    potential = green_zero_apply(xi_eps.to_physical().values, grid)
    return boundary_flux(phi.to_physical().values, potential, grid, box)
