"""Finite-difference quadratic forms for the direct and exponentially transformed Hamiltonians.

Site conventions on a box ``[a, b]`` (faces on the lattice):

* Dirichlet unknowns sit on the open interior ``a < x < b``; edges to the
  faces carry the boundary value zero.
* Neumann unknowns sit on ``[a, b)``, one per cell, coupled only by the edges
  between them (the mirror-ghost scheme).

With these choices the Dirichlet form of a box is the restriction of the form
of any larger box, the Neumann form dominates the sum over a partition of the
sites, and the Neumann form restricted to vectors vanishing on the low faces
is below the Dirichlet one.  These give the bracketing inequalities exactly.

Forms are stored per unit cell volume: ``E(u, v) = h^d u^T A v``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .field import Box, Field, FieldError, Grid, spectral_gradient
from .harmonic import smooth_step

BCS = ("dirichlet", "neumann")


class AssemblyError(ValueError):
    pass


# --- helpers ------------------------------------------------------------------------

def _wrapped_window(values: np.ndarray, grid: Grid, box: Box, pad_lo: int, pad_hi: int) -> np.ndarray:
    """Values on indices ``lo - pad_lo .. hi + pad_hi`` per axis, wrapping periodically."""
    out = values
    for axis, (lo, hi) in enumerate(box.index_bounds(grid)):
        idx = np.arange(lo - pad_lo, hi + pad_hi + 1) % grid.n
        out = np.take(out, idx, axis=axis)
    return out


def _closed_values(f: Field, box: Box) -> np.ndarray:
    return _wrapped_window(f.to_physical().values, f.grid, box, 0, 0)


def _unknown_window(bc: str, dim: int):
    if bc == "dirichlet":
        return (slice(1, -1),) * dim
    return (slice(0, -1),) * dim


def _check(grid: Grid, box: Box, bc: str) -> None:
    if bc not in BCS:
        raise AssemblyError(f"unknown boundary condition {bc!r}")
    try:
        bounds = box.index_bounds(grid)
    except FieldError as exc:
        raise AssemblyError(str(exc)) from exc
    if grid.topology != "torus":
        raise AssemblyError("fields must live on a torus covering the box")
    if bc == "dirichlet" and any(hi - lo < 2 for lo, hi in bounds):
        raise AssemblyError("Dirichlet box needs at least one interior site per axis")


def _stiffness(log_w: np.ndarray, bc: str, h: float) -> tuple[sp.csr_matrix, list]:
    """Weighted graph Laplacian on the unknown sites.

    ``log_w`` holds ``W`` on the closed box; the edge weight is ``exp(W_i + W_j)``.
    Returns the matrix (divided by ``h^2``) and the edge list used to build it.
    """
    d = log_w.ndim
    inner = log_w[_unknown_window(bc, d)]
    shape = inner.shape
    size = int(np.prod(shape))
    idx = np.arange(size).reshape(shape)
    rows, cols, vals = [], [], []
    diag = np.zeros(size)
    edges = []
    for axis in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        i, j = idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()
        w = np.exp(inner[tuple(lo)] + inner[tuple(hi)]).ravel()
        edges.append((i, j, w))
        rows += [i, j]
        cols += [j, i]
        vals += [-w, -w]
        np.add.at(diag, i, w)
        np.add.at(diag, j, w)
        if bc == "dirichlet":
            # edges from the first and last interior layers to the faces
            for face, layer in ((0, 0), (-1, -1)):
                sel_in = [slice(None)] * d
                sel_in[axis] = slice(layer, layer + 1) if layer == 0 else slice(-1, None)
                full = [slice(1, -1)] * d
                full[axis] = face
                wb = np.exp(inner[tuple(sel_in)].squeeze(axis) + log_w[tuple(full)])
                np.add.at(diag, idx[tuple(sel_in)].ravel(), wb.ravel())
    rows.append(np.arange(size))
    cols.append(np.arange(size))
    vals.append(diag)
    mat = sp.csr_matrix(
        (np.concatenate(vals) / h**2, (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    )
    mat.sum_duplicates()
    return mat, edges


# --- assembled forms ----------------------------------------------------------------

@dataclass(eq=False)
class AssembledForm:
    stiffness: sp.csr_matrix
    potential: np.ndarray
    mass: np.ndarray
    bc: str
    box: Box
    grid: Grid
    site_shape: tuple[int, ...]
    edges: list = field(default_factory=list, repr=False)
    kind: str = "direct"

    def __post_init__(self):
        if np.any(self.mass <= 0):
            raise AssemblyError("mass must be strictly positive")

    @property
    def size(self) -> int:
        return int(self.potential.size)

    @property
    def matrix(self) -> sp.csr_matrix:
        return (self.stiffness + sp.diags(self.potential)).tocsr()

    @property
    def mass_matrix(self) -> sp.dia_matrix:
        return sp.diags(self.mass)

    @property
    def is_standard(self) -> bool:
        return bool(np.all(self.mass == 1.0))

    def energy(self, u: np.ndarray, v: np.ndarray | None = None) -> float:
        u = np.ravel(u)
        v = u if v is None else np.ravel(v)
        return float(u @ (self.matrix @ v)) * self.grid.cell_volume

    def energy_sum(self, u: np.ndarray) -> float:
        """Quadratic form evaluated edge by edge, independent of the matrix."""
        u = np.ravel(u)
        h = self.grid.h
        total = float(np.sum(self.potential * u * u))
        stiff_diag = self.stiffness.diagonal() * h**2
        interior = np.zeros(self.size)
        for i, j, w in self.edges:
            total += float(np.sum(w * (u[i] - u[j]) ** 2)) / h**2
            np.add.at(interior, i, w)
            np.add.at(interior, j, w)
        # Dirichlet face edges are whatever the diagonal holds beyond interior edges
        total += float(np.sum((stiff_diag - interior) * u * u)) / h**2
        return total * self.grid.cell_volume

    def norm_sq(self, u: np.ndarray) -> float:
        u = np.ravel(u)
        return float(np.sum(self.mass * u * u)) * self.grid.cell_volume

    def shifted(self, c: float) -> AssembledForm:
        """Form plus ``c`` times the mass."""
        return AssembledForm(self.stiffness, self.potential + c * self.mass, self.mass, self.bc,
                             self.box, self.grid, self.site_shape, self.edges, self.kind)

    def site_indices(self) -> tuple[np.ndarray, ...]:
        """Torus lattice indices of the unknowns (unwrapped)."""
        off = 1 if self.bc == "dirichlet" else 0
        axes = [np.arange(lo + off, lo + off + m) for (lo, _), m in zip(self.box.index_bounds(self.grid), self.site_shape)]
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def site_coordinates(self) -> tuple[np.ndarray, ...]:
        return tuple(i * self.grid.h for i in self.site_indices())

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def export(self, stem: str | Path) -> tuple[Path, Path]:
        """Coordinate text ``row col value`` (row-major, sorted) plus a JSON header."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        txt = stem.with_suffix(".coo")
        with txt.open("w") as fh:
            for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                fh.write(f"{r} {c} {v:.17g}\n")
        header = {
            "kind": self.kind,
            "bc": self.bc,
            "size": self.size,
            "nnz": int(coo.nnz),
            "site_shape": list(self.site_shape),
            "box": self.box.to_json(),
            "grid": self.grid.to_json(),
            "cell_volume": self.grid.cell_volume,
            "mass": "identity" if self.is_standard else "diagonal",
        }
        if not self.is_standard:
            header["mass_diagonal"] = [float(m) for m in self.mass]
        hdr = stem.with_suffix(".json")
        hdr.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
        return txt, hdr


def assemble_direct(potential: Field | None, c: float, bc: str, box: Box, grid: Grid | None = None) -> AssembledForm:
    """``-Laplace - potential + c`` on ``box``; ``potential`` is usually ``xi_eps``."""
    grid = potential.grid if potential is not None else grid
    if grid is None:
        raise AssemblyError("need a potential or a grid")
    _check(grid, box, bc)
    shape_closed = tuple(hi - lo + 1 for lo, hi in box.index_bounds(grid))
    stiff, edges = _stiffness(np.zeros(shape_closed), bc, grid.h)
    n = stiff.shape[0]
    if potential is None:
        diag = np.full(n, float(c))
    else:
        vals = _closed_values(potential, box)[_unknown_window(bc, grid.dim)]
        diag = -vals.ravel() + c
    site_shape = tuple(s - (2 if bc == "dirichlet" else 1) for s in shape_closed)
    return AssembledForm(stiff, diag, np.ones(n), bc, box, grid, site_shape, edges, "direct")


def normal_derivative_faces(W: Field, box: Box) -> np.ndarray:
    """``d_n W`` at every Neumann unknown lying on a face, summed over the faces it touches."""
    grid = W.grid
    grads = spectral_gradient(W.to_physical())
    closed = [_wrapped_window(g, grid, box, 0, 0) for g in grads]
    d = grid.dim
    win = _unknown_window("neumann", d)
    out = np.zeros(tuple(s - 1 for s in closed[0].shape))
    for axis in range(d):
        g = closed[axis][win]
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[axis] = 0
        hi[axis] = -1
        out[tuple(lo)] -= g[tuple(lo)]
        out[tuple(hi)] += g[tuple(hi)]
    return out


def assemble_transformed(
    W: Field,
    Y: Field,
    bc: str,
    box: Box,
    boundary_term: bool | np.ndarray = False,
) -> AssembledForm:
    """Form ``int e^{2W} |grad v|^2 + int Y v^2`` with norm ``int e^{2W} v^2``.

    With ``Y = -e^{2W}(zeta + |grad W|^2 + Delta W)`` this is the direct form with
    potential ``zeta`` written in ``v = e^{-W} u``.  For Neumann boxes the
    transform leaves ``int_{dU} e^{2W} d_n W v^2``; pass ``boundary_term=True``
    to include it (normal derivatives taken spectrally) or an array of
    ``d_n W`` values on the unknown sites.
    """
    grid = W.grid
    _check(grid, box, bc)
    w_closed = _closed_values(W, box)
    if not np.all(np.isfinite(w_closed)):
        raise AssemblyError("W has non-finite values on the box")
    stiff, edges = _stiffness(w_closed, bc, grid.h)
    win = _unknown_window(bc, grid.dim)
    w_sites = w_closed[win]
    diag = _closed_values(Y, box)[win].ravel().astype(float)
    mass = np.exp(2 * w_sites).ravel()
    if bc == "neumann" and boundary_term is not False and boundary_term is not None:
        dn = normal_derivative_faces(W, box) if boundary_term is True else np.asarray(boundary_term)
        diag = diag + mass * dn.ravel() / grid.h
    return AssembledForm(stiff, diag, mass, bc, box, grid, w_sites.shape, edges, "transformed")


# --- bracketing constants ------------------------------------------------------------------

@dataclass(frozen=True)
class BracketParams:
    theta: float
    s: float
    w_sup: float
    z_norm: float
    c_ip: float

    def __post_init__(self):
        vals = (self.theta, self.s, self.w_sup, self.z_norm, self.c_ip)
        if not all(math.isfinite(v) for v in vals):
            raise AssemblyError("bracket parameters must be finite")
        if self.theta <= 0:
            raise AssemblyError("theta must be positive")
        if not 0 < self.s < 1:
            raise AssemblyError("s must lie in (0, 1)")
        if min(self.w_sup, self.z_norm, self.c_ip) < 0:
            raise AssemblyError("norms and constants must be nonnegative")


def bracket_shift(p: BracketParams, sign: int) -> float:
    """``A_+`` (sign=+1) or ``A_-`` (sign=-1)."""
    t, s = p.theta, p.s
    r = s / (1 - s)
    denom = 1 + sign * t
    if denom <= 0:
        # theta >= 1 on the lower branch: the first factor of Lambda_- vanishes or flips
        return math.inf if p.z_norm > 0 else t
    base = t / denom
    return t + base ** (-r) * p.c_ip ** (2 / (1 - s)) * math.exp((2 + sign * 2 * r) * p.w_sup) * p.z_norm ** (1 / (1 - s))


def bracket_lambda(p: BracketParams, lam: float) -> tuple[float, float]:
    """Spectral parameters ``(Lambda_-, Lambda_+)`` bracketing the transformed form."""
    if p.theta == 0:
        raise ZeroDivisionError("theta = 0")
    if not math.isfinite(lam):
        raise AssemblyError("lambda must be finite")
    lo_factor = (1 - p.theta) * math.exp(-4 * p.w_sup)
    hi = (1 + p.theta) * math.exp(4 * p.w_sup) * (lam + bracket_shift(p, +1))
    if lo_factor == 0:
        return 0.0, hi
    return lo_factor * (lam - bracket_shift(p, -1)), hi


# --- IMS partitions ---------------------------------------------------------------

def _edge_profiles(coords: np.ndarray, start: float, side: float, tile: float, overlap: float):
    """1D family with ``sum eta_k^2 = 1`` on ``[start, start + side]``; transitions have width ``2 overlap``."""
    count = max(1, int(math.ceil(side / tile - 1e-9)))
    cuts = [start + k * tile for k in range(1, count)]
    if count > 1 and start + side - cuts[-1] < overlap - 1e-12:
        raise AssemblyError("last tile is shorter than the overlap")
    t = coords - start
    profiles = []
    for k in range(count):
        eta = np.ones_like(coords, dtype=float)
        if k > 0:
            c = cuts[k - 1] - start
            eta *= np.sin(0.5 * math.pi * smooth_step((t - c + overlap) / (2 * overlap)))
        if k < count - 1:
            c = cuts[k] - start
            eta *= np.cos(0.5 * math.pi * smooth_step((t - c + overlap) / (2 * overlap)))
        profiles.append(eta)
    return profiles


@dataclass(eq=False)
class ImsPartition:
    etas: list[np.ndarray]
    tile_L: float
    overlap_l: float
    K: float
    sites: tuple[np.ndarray, ...]

    def square_sum(self) -> np.ndarray:
        return sum(e**2 for e in self.etas)

    def gradient_sup(self, h: float) -> float:
        """Max over sites of ``sum_k |grad eta_k|^2`` by one-sided differences."""
        total = np.zeros(self.etas[0].shape)
        for eta in self.etas:
            for axis in range(eta.ndim):
                g = np.diff(eta, axis=axis) / h
                pad = [(0, 0)] * eta.ndim
                pad[axis] = (0, 1)
                total += np.pad(g, pad) ** 2
        return float(total.max())


def ims_partition(box: Box, tile_L: float, overlap_l: float, sites: tuple[np.ndarray, ...] | None = None,
                  grid: Grid | None = None) -> ImsPartition:
    """Smooth tiling partition of unity on ``box``.

    Tiles have length ``tile_L``; neighbours overlap on ``2 overlap_l``.  Values
    are produced on ``sites`` (coordinate arrays), or on the closed box sites of
    ``grid``.  ``K`` is the measured ``l^2 sup sum |grad eta_k|^2``.
    """
    if overlap_l <= 0 or tile_L <= 2 * overlap_l:
        raise AssemblyError("need tile_L > 2 overlap_l > 0")
    if sites is None:
        if grid is None:
            raise AssemblyError("need sites or a grid")
        axes = [lo * grid.h + np.arange(hi - lo + 1) * grid.h for lo, hi in box.index_bounds(grid)]
        sites = tuple(np.meshgrid(*axes, indexing="ij"))
    per_axis = [
        _edge_profiles(sites[a], box.origin[a], box.side[a], tile_L, overlap_l) for a in range(box.dim)
    ]
    etas = []
    for combo in np.ndindex(*[len(p) for p in per_axis]):
        eta = np.ones(sites[0].shape)
        for a, k in enumerate(combo):
            eta = eta * per_axis[a][k]
        etas.append(eta)
    part = ImsPartition(etas, tile_L, overlap_l, 0.0, sites)
    if grid is not None and len(etas) > 1:
        part.K = part.gradient_sup(grid.h) * overlap_l**2
    return part


def ims_localization_error(form: AssembledForm, part: ImsPartition) -> float:
    """Discrete IMS constant ``A`` with ``E(u) >= sum_k [E(eta_k u) - A ||eta_k u||^2]``.

    From ``sum_k E(eta_k u) = E(u) + sum_edges w_ij g_ij u_i u_j / h^2`` with
    ``g_ij = sum_k (eta_k(i) - eta_k(j))^2``.
    """
    h = form.grid.h
    flat = [np.ravel(e) for e in part.etas]
    acc = np.zeros(form.size)
    for i, j, w in form.edges:
        g = sum((e[i] - e[j]) ** 2 for e in flat)
        np.add.at(acc, i, w * g)
        np.add.at(acc, j, w * g)
    return float(np.max(acc / (2 * h**2 * form.mass)))


def ims_check(form: AssembledForm, part: ImsPartition, u: np.ndarray, A: float | None = None) -> tuple[float, float]:
    """``(E(u), sum_k [E(eta_k u) - A ||eta_k u||^2])``; the first should dominate."""
    if A is None:
        A = ims_localization_error(form, part)
    u = np.ravel(u)
    rhs = 0.0
    for eta in part.etas:
        v = np.ravel(eta) * u
        rhs += form.energy(v) - A * form.norm_sq(v)
    return form.energy(u), rhs


def form_sites_partition(form: AssembledForm, tile_L: float, overlap_l: float) -> ImsPartition:
    """Partition evaluated on the unknown sites of ``form``."""
    part = ims_partition(form.box, tile_L, overlap_l, sites=form.site_coordinates())
    return part
