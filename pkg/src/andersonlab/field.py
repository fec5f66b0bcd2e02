"""Lattices, scalar fields on them, Gaussian noise sampling and mollification.

Fourier conventions follow ``F f(k) = int f(x) exp(-2 pi i x.k) dx`` with
physical frequencies ``k = m / L``.  On a torus of side ``L`` with ``n`` sites
per axis the discrete coefficients are ``h^d * DFT(values)``, so that
``f(x) = L^{-d} sum_k F f(k) exp(2 pi i k.x)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from scipy.special import gamma as gamma_fn


class FieldError(ValueError):
    pass


class ResolutionError(FieldError):
    """Raised when a mollifier is too narrow for the lattice."""


@dataclass(frozen=True)
class Grid:
    dim: int
    side_length: float
    n: int
    topology: str = "torus"

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise FieldError(f"dimension must be 1, 2 or 3, got {self.dim}")
        if self.n < 2 or self.n & (self.n - 1):
            raise FieldError(f"points per side must be a power of two >= 2, got {self.n}")
        if not self.side_length > 0:
            raise FieldError("side length must be positive")
        if self.topology not in ("torus", "box"):
            raise FieldError(f"unknown topology {self.topology!r}")

    @property
    def h(self) -> float:
        return self.side_length / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def volume(self) -> float:
        return self.side_length**self.dim

    def coordinates(self) -> list[np.ndarray]:
        """Broadcastable site coordinates ``x = h * m``."""
        x = self.h * np.arange(self.n)
        out = []
        for axis in range(self.dim):
            shape = [1] * self.dim
            shape[axis] = self.n
            out.append(x.reshape(shape))
        return out

    def wavenumbers(self) -> list[np.ndarray]:
        """Broadcastable frequencies in the ``rfftn`` half-lattice layout."""
        out = []
        for axis in range(self.dim):
            if axis == self.dim - 1:
                k = sfft.rfftfreq(self.n, d=self.h)
            else:
                k = sfft.fftfreq(self.n, d=self.h)
            shape = [1] * self.dim
            shape[axis] = k.size
            out.append(k.reshape(shape))
        return out

    def wavenumber_norm(self) -> np.ndarray:
        ks = self.wavenumbers()
        sq = sum(k**2 for k in ks)
        return np.sqrt(np.broadcast_to(sq, self.spectral_shape))

    @property
    def spectral_shape(self) -> tuple[int, ...]:
        return (self.n,) * (self.dim - 1) + (self.n // 2 + 1,)

    def nyquist_mask(self, axis: int) -> np.ndarray:
        """Boolean mask of the Nyquist plane along ``axis``."""
        idx = self.n // 2
        mask = np.zeros(self.spectral_shape, dtype=bool)
        sl = [slice(None)] * self.dim
        sl[axis] = idx
        mask[tuple(sl)] = True
        return mask

    def half_lattice_weights(self) -> np.ndarray:
        """Multiplicity of each rfft coefficient in the full lattice sum."""
        w = np.full(self.spectral_shape, 2.0)
        w[..., 0] = 1.0
        if self.n % 2 == 0:
            w[..., -1] = 1.0
        return w

    def max_frequency(self) -> float:
        return math.sqrt(self.dim) * self.n / (2 * self.side_length)

    def to_json(self) -> dict:
        return {"d": self.dim, "L": self.side_length, "n": self.n, "topology": self.topology}


@dataclass(frozen=True)
class FieldMeta:
    kind: str = "derived"
    seed: int | None = None
    epsilon: float = 0.0
    alpha: float | None = None
    flags: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class Field:
    grid: Grid
    values: np.ndarray
    space: str = "physical"
    meta: FieldMeta = field(default_factory=FieldMeta)

    def __post_init__(self):
        if self.space not in ("physical", "fourier"):
            raise FieldError(f"unknown space {self.space!r}")
        expected = self.grid.shape if self.space == "physical" else self.grid.spectral_shape
        if tuple(self.values.shape) != expected:
            raise FieldError(f"values shape {self.values.shape} does not match {expected}")
        vals = np.array(self.values, copy=True)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def to_fourier(self) -> Field:
        if self.space == "fourier":
            return self
        coef = sfft.rfftn(self.values) * self.grid.cell_volume
        return Field(self.grid, coef, "fourier", self.meta)

    def to_physical(self) -> Field:
        if self.space == "physical":
            return self
        vals = sfft.irfftn(self.values / self.grid.cell_volume, s=self.grid.shape)
        return Field(self.grid, vals, "physical", self.meta)

    def with_values(self, values: np.ndarray, **meta_changes) -> Field:
        meta = replace(self.meta, **meta_changes) if meta_changes else self.meta
        return Field(self.grid, values, self.space, meta)

    def shifted(self, offset: tuple[int, ...]) -> Field:
        """Translate by whole lattice sites (periodic)."""
        phys = self.to_physical()
        return phys.with_values(np.roll(phys.values, offset, axis=tuple(range(self.grid.dim))))

    def l2_norm_sq(self) -> float:
        phys = self.to_physical()
        return float(np.sum(phys.values**2) * self.grid.cell_volume)


def fourier_energy(field: Field) -> float:
    """``L^{-d} sum_k |F f(k)|^2`` over the full lattice (Parseval partner of ``l2_norm_sq``)."""
    coef = field.to_fourier().values
    w = field.grid.half_lattice_weights()
    return float(np.sum(w * np.abs(coef) ** 2) / field.grid.volume)


def apply_multiplier(values: np.ndarray, grid: Grid, multiplier: np.ndarray) -> np.ndarray:
    """Real-space result of multiplying the spectrum of ``values`` by ``multiplier``."""
    return sfft.irfftn(sfft.rfftn(values) * multiplier, s=grid.shape)


def derivative_multiplier(grid: Grid, order: tuple[int, ...]) -> np.ndarray:
    """``(2 pi i k)^m`` with the Nyquist plane removed along odd-order axes."""
    if len(order) != grid.dim:
        raise FieldError("multi-index length must equal the dimension")
    mult = np.ones(grid.spectral_shape, dtype=complex)
    for axis, (m, k) in enumerate(zip(order, grid.wavenumbers())):
        if m == 0:
            continue
        mult = mult * (2j * np.pi * k) ** m
        if m % 2 == 1:
            mult = np.where(grid.nyquist_mask(axis), 0.0, mult)
    return mult


def laplacian_multiplier(grid: Grid) -> np.ndarray:
    return -((2 * np.pi * grid.wavenumber_norm()) ** 2)


def spectral_gradient(f: Field) -> list[np.ndarray]:
    grid = f.grid
    coef = sfft.rfftn(f.to_physical().values)
    out = []
    for axis in range(grid.dim):
        order = tuple(1 if a == axis else 0 for a in range(grid.dim))
        out.append(sfft.irfftn(coef * derivative_multiplier(grid, order), s=grid.shape))
    return out


def spectral_laplacian(f: Field) -> np.ndarray:
    return apply_multiplier(f.to_physical().values, f.grid, laplacian_multiplier(f.grid))


# --- noise -----------------------------------------------------------------

def _standard_normals(seed: int, count: int, start: int = 0) -> np.ndarray:
    """Box-Muller normals, site ``i`` consuming Philox words ``2i`` and ``2i+1``."""
    if not 0 <= seed < 2**64:
        raise FieldError("seed must be a 64-bit unsigned integer")
    bitgen = np.random.Philox(key=seed)
    if start:
        # each Philox counter step yields four 64-bit words
        first_word = 2 * start
        bitgen.advance(first_word // 4)
        skip = first_word % 4
    else:
        skip = 0
    raw = bitgen.random_raw(2 * count + skip)[skip:]
    u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def sample_white_noise(grid: Grid, seed: int) -> Field:
    """I.i.d. ``N(0, h^{-d})`` values per site, a function of ``(seed, site)`` only."""
    if grid.topology != "torus":
        raise FieldError("noise is sampled on a torus")
    z = _standard_normals(seed, grid.size).reshape(grid.shape)
    values = z / math.sqrt(grid.cell_volume)
    return Field(grid, values, "physical", FieldMeta(kind="white", seed=seed, epsilon=0.0))


def riesz_spectral_constant(dim: int, alpha: float) -> float:
    """Fourier transform constant: ``F[|x|^{-alpha}](k) = C |k|^{alpha-d}``."""
    return math.pi ** (alpha - dim / 2) * gamma_fn((dim - alpha) / 2) / gamma_fn(alpha / 2)


def riesz_spectral_density(grid: Grid, alpha: float, c: float = 1.0) -> np.ndarray:
    k = grid.wavenumber_norm()
    dens = np.zeros_like(k)
    nz = k > 0
    dens[nz] = c * riesz_spectral_constant(grid.dim, alpha) * k[nz] ** (alpha - grid.dim)
    return dens


def sample_riesz_noise(grid: Grid, alpha: float, c: float, seed: int) -> Field:
    """Stationary Gaussian field with covariance ``c |x|^{-alpha}`` (zero mode removed).

    Colours the white noise of the same seed with the square root of the
    spectral density, so a shared seed gives coupled realizations.
    """
    if grid.topology != "torus":
        raise FieldError("noise is sampled on a torus")
    if not 0 < alpha < min(grid.dim, 4):
        raise FieldError(f"alpha must lie in (0, {min(grid.dim, 4)}), got {alpha}")
    if not c > 0:
        raise FieldError("covariance prefactor must be positive")
    white = sample_white_noise(grid, seed)
    mult = np.sqrt(riesz_spectral_density(grid, alpha, c))
    values = apply_multiplier(white.values, grid, mult)
    return Field(grid, values, "physical", FieldMeta(kind="riesz", seed=seed, alpha=alpha))


def zero_field(grid: Grid, kind: str = "zero") -> Field:
    return Field(grid, np.zeros(grid.shape), "physical", FieldMeta(kind=kind))


def coarsen(f: Field, factor: int = 2) -> Field:
    """Block average onto a grid with ``n / factor`` sites per side.

    Applied to lattice white noise this yields lattice white noise of the
    coarser spacing (variance ``h^{-d}`` is preserved exactly), which lets
    one realization be studied at several resolutions.
    """
    grid = f.grid
    if grid.n % factor:
        raise FieldError("factor must divide the number of sites")
    coarse = Grid(grid.dim, grid.side_length, grid.n // factor, grid.topology)
    v = f.to_physical().values
    shape = []
    for _ in range(grid.dim):
        shape += [coarse.n, factor]
    v = v.reshape(shape).mean(axis=tuple(range(1, 2 * grid.dim, 2)))
    return Field(coarse, v, "physical", f.meta)


# --- mollification -----------------------------------------------------------

@dataclass(frozen=True)
class Mollifier:
    """Isotropic Gaussian ``rho(x) = (4/pi)^{d/2} exp(-4|x|^2)`` rescaled by ``epsilon``.

    Its transform ``rho_hat(k) = exp(-pi^2 |k|^2 / 4)`` keeps frequencies up
    to roughly ``1/epsilon``.
    """

    epsilon: float
    profile: str = "gaussian"

    # spatial standard scale of the unit profile
    SCALE = 0.5

    def __post_init__(self):
        if self.profile != "gaussian":
            raise FieldError(f"unsupported mollifier profile {self.profile!r}")
        if not self.epsilon > 0:
            raise FieldError("epsilon must be positive")

    def fourier(self, k: np.ndarray) -> np.ndarray:
        """``rho_hat(epsilon k)``."""
        return np.exp(-((np.pi * self.SCALE * self.epsilon) * k) ** 2)

    def kernel(self, r_sq: np.ndarray, dim: int) -> np.ndarray:
        """``rho_epsilon`` at squared distance ``r_sq``."""
        s = self.SCALE * self.epsilon
        return (np.pi * s * s) ** (-dim / 2) * np.exp(-r_sq / (s * s))


def check_resolution(grid: Grid, epsilon: float) -> None:
    if epsilon < 2 * grid.h * (1 - 1e-12):
        raise ResolutionError(f"epsilon={epsilon} is below 2h={2 * grid.h}; mollifier unresolved")


def mollify(f: Field, mollifier: Mollifier) -> Field:
    if f.space != "physical":
        raise FieldError("mollify expects a physical-space field")
    check_resolution(f.grid, mollifier.epsilon)
    mult = mollifier.fourier(f.grid.wavenumber_norm())
    values = apply_multiplier(f.values, f.grid, mult)
    return Field(f.grid, values, "physical", replace(f.meta, epsilon=mollifier.epsilon))


# --- boxes -------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``origin + [0, side]`` in length units."""

    origin: tuple[float, ...]
    side: tuple[float, ...]

    def __post_init__(self):
        origin = tuple(float(o) for o in np.atleast_1d(self.origin))
        side = np.atleast_1d(self.side).astype(float)
        if side.size == 1 and len(origin) > 1:
            side = np.repeat(side, len(origin))
        if side.size != len(origin):
            raise FieldError("origin and side lengths differ")
        if np.any(side <= 0):
            raise FieldError("box sides must be positive")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "side", tuple(float(s) for s in side))

    @classmethod
    def cube(cls, dim: int, side: float, origin: float = 0.0) -> Box:
        return cls((float(origin),) * dim, (float(side),) * dim)

    @property
    def dim(self) -> int:
        return len(self.origin)

    @property
    def volume(self) -> float:
        return float(np.prod(self.side))

    @property
    def perimeter(self) -> float:
        """Surface measure of the boundary."""
        total = 0.0
        for axis in range(self.dim):
            total += 2 * float(np.prod([s for a, s in enumerate(self.side) if a != axis]))
        return total

    def index_bounds(self, grid: Grid) -> tuple[tuple[int, int], ...]:
        """Lattice index of each face, ``(lo, hi)`` per axis."""
        if self.dim != grid.dim:
            raise FieldError("box and grid dimensions differ")
        bounds = []
        for o, s in zip(self.origin, self.side):
            lo, hi = o / grid.h, (o + s) / grid.h
            if abs(lo - round(lo)) > 1e-9 or abs(hi - round(hi)) > 1e-9:
                raise FieldError(f"box faces {o}, {o + s} are not on the lattice (h={grid.h})")
            lo, hi = int(round(lo)), int(round(hi))
            if hi - lo < 1:
                raise FieldError("box has no extent on this lattice")
            if lo < 0 or hi > grid.n:
                raise FieldError("box exceeds the sampled torus")
            bounds.append((lo, hi))
        return tuple(bounds)

    def site_slices(self, grid: Grid, bc: str) -> tuple[slice, ...]:
        """Sites carrying unknowns: open interior for Dirichlet, ``[lo, hi)`` for Neumann."""
        out = []
        for lo, hi in self.index_bounds(grid):
            if bc == "dirichlet":
                out.append(slice(lo + 1, hi))
            elif bc == "neumann":
                out.append(slice(lo, hi))
            elif bc == "closed":
                if hi >= grid.n:
                    raise FieldError("closed box needs the far face inside the torus")
                out.append(slice(lo, hi + 1))
            else:
                raise FieldError(f"unknown boundary condition {bc!r}")
        return tuple(out)

    def contains(self, other: Box) -> bool:
        return all(
            o1 <= o2 + 1e-12 and o2 + s2 <= o1 + s1 + 1e-12
            for o1, s1, o2, s2 in zip(self.origin, self.side, other.origin, other.side)
        )

    def to_json(self) -> dict:
        return {"origin": list(self.origin), "side": list(self.side)}


def restrict(f: Field, box: Box, bc: str = "closed") -> np.ndarray:
    return f.to_physical().values[box.site_slices(f.grid, bc)]


# --- serialization -------------------------------------------------------------

def save_field(f: Field, stem: str | Path) -> tuple[Path, Path]:
    """Write ``stem.bin`` (little-endian float64) and the ``stem.json`` header."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    data = f.values
    if f.space == "fourier":
        data = np.stack([data.real, data.imag], axis=-1)
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    bin_path.write_bytes(np.ascontiguousarray(data, dtype="<f8").tobytes())
    header = {
        "d": f.grid.dim,
        "n": f.grid.n,
        "L": f.grid.side_length,
        "space": f.space,
        "kind": f.meta.kind,
        "seed": f.meta.seed,
        "epsilon": f.meta.epsilon,
    }
    if f.meta.alpha is not None:
        header["alpha"] = f.meta.alpha
    json_path.write_text(json.dumps(header, sort_keys=True) + "\n")
    return bin_path, json_path


def load_field(stem: str | Path) -> Field:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    grid = Grid(header["d"], header["L"], header["n"])
    raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    if header["space"] == "fourier":
        raw = raw.reshape(grid.spectral_shape + (2,))
        values = raw[..., 0] + 1j * raw[..., 1]
    else:
        values = raw.reshape(grid.shape)
    meta = FieldMeta(
        kind=header["kind"], seed=header["seed"], epsilon=header["epsilon"], alpha=header.get("alpha")
    )
    return Field(grid, values, header["space"], meta)
