import json
import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from andersonlab.field import Box, Field, Grid, Mollifier, mollify, sample_white_noise, spectral_gradient
from andersonlab.field import laplacian_multiplier
from andersonlab.operator import (
    AssemblyError,
    BracketParams,
    assemble_direct,
    assemble_transformed,
    bracket_lambda,
    form_sites_partition,
    ims_check,
    ims_localization_error,
    ims_partition,
)


def smooth(grid, coeffs):
    # sum of periodic modes a cos(2 pi (k.x)/L + phase)
    x = grid.coordinates()
    out = np.zeros(grid.shape)
    for amp, k, phase in coeffs:
        out = out + amp * np.cos(sum(2 * np.pi * ki * xi / grid.side_length for ki, xi in zip(k, x)) + phase)
    return Field(grid, out)


def brute_force_dense(pot, bc):
    """Independent double loop over lattice neighbours on a 2D closed-box array ``pot``."""
    n0, n1 = pot.shape
    if bc == "dirichlet":
        sites = [(i, j) for i in range(1, n0 - 1) for j in range(1, n1 - 1)]
    else:
        sites = [(i, j) for i in range(n0 - 1) for j in range(n1 - 1)]
    index = {s: k for k, s in enumerate(sites)}
    A = np.zeros((len(sites), len(sites)))
    for (i, j), k in index.items():
        A[k, k] -= pot[i, j]
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nb = (i + di, j + dj)
            if nb in index:
                A[k, k] += 1
                A[k, index[nb]] -= 1
            elif bc == "dirichlet":
                A[k, k] += 1  # neighbour is a face site with value zero
    return A


class TestDirect:
    def test_one_dimensional_spectrum(self):
        g = Grid(1, 1.0, 64)
        form = assemble_direct(None, 0.0, "dirichlet", Box((0.0,), 1.0), grid=g)
        h = g.h
        m = np.arange(1, 64)
        expected = 4 / h**2 * np.sin(m * np.pi * h / 2) ** 2
        assert np.allclose(np.linalg.eigvalsh(form.to_dense()), expected, rtol=1e-12)

    def test_neumann_kernel(self):
        g = Grid(2, 1.0, 32)
        form = assemble_direct(None, 0.0, "neumann", Box((0.25, 0.25), 0.5), grid=g)
        vals, vecs = np.linalg.eigh(form.to_dense())
        assert abs(vals[0]) <= 1e-10
        v = vecs[:, 0]
        assert np.allclose(v, v[0], atol=1e-10)

    @pytest.mark.parametrize("bc", ["dirichlet", "neumann"])
    def test_sparse_matches_brute_force(self, bc):
        g = Grid(2, 1.0, 8)
        xi = sample_white_noise(g, 3)
        box = Box((0.0, 0.0), 0.75)
        form = assemble_direct(xi, 0.0, bc, box)
        lo = [b[0] for b in box.index_bounds(g)]
        pot = xi.values[lo[0]:lo[0] + 7, lo[1]:lo[1] + 7]
        h2 = g.h**2
        # brute force works in units of h^-2 for the Laplacian part
        A = brute_force_dense(pot * h2, bc) / h2
        assert np.array_equal(form.to_dense() == 0, A == 0)
        assert np.allclose(form.to_dense(), A, rtol=1e-14, atol=1e-12)

    def test_potential_and_constant(self):
        g = Grid(2, 1.0, 16)
        xi = sample_white_noise(g, 1)
        box = Box((0.25, 0.25), 0.5)
        a = assemble_direct(xi, 2.5, "dirichlet", box)
        b = assemble_direct(xi, 0.0, "dirichlet", box)
        assert np.allclose(a.potential - b.potential, 2.5)
        i, j = a.site_indices()
        assert np.allclose(b.potential, -xi.values[i, j].ravel())

    def test_box_outside_torus(self):
        g = Grid(2, 1.0, 16)
        with pytest.raises(AssemblyError):
            assemble_direct(sample_white_noise(g, 0), 0.0, "dirichlet", Box((0.75, 0.0), 0.5))
        with pytest.raises(AssemblyError):
            assemble_direct(sample_white_noise(g, 0), 0.0, "robin", Box((0.0, 0.0), 0.5))

    def test_neumann_below_dirichlet(self):
        g = Grid(2, 1.0, 32)
        xi = mollify(sample_white_noise(g, 2), Mollifier(0.0625))
        box = Box((0.25, 0.25), 0.5)
        ev_d = np.linalg.eigvalsh(assemble_direct(xi, 0.0, "dirichlet", box).to_dense())
        ev_n = np.linalg.eigvalsh(assemble_direct(xi, 0.0, "neumann", box).to_dense())
        k = min(ev_d.size, ev_n.size)
        assert np.all(ev_n[:k] <= ev_d[:k] + 1e-9)

    def test_dirichlet_zero_extension(self):
        g = Grid(2, 1.0, 32)
        xi = sample_white_noise(g, 7)
        small = assemble_direct(xi, 1.0, "dirichlet", Box((0.25, 0.25), 0.25))
        big = assemble_direct(xi, 1.0, "dirichlet", Box((0.125, 0.125), 0.625))
        rng = np.random.default_rng(0)
        u = rng.normal(size=small.size)
        si, sj = small.site_indices()
        bi, bj = big.site_indices()
        lookup = {(a, b): k for k, (a, b) in enumerate(zip(bi.ravel(), bj.ravel()))}
        ext = np.zeros(big.size)
        for k, (a, b) in enumerate(zip(si.ravel(), sj.ravel())):
            ext[lookup[(a, b)]] = u[k]
        assert big.energy(ext) == pytest.approx(small.energy(u), rel=1e-13)


class TestTransformed:
    def test_identity_transform(self):
        g = Grid(2, 1.0, 32)
        zeta = sample_white_noise(g, 0)
        box = Box((0.25, 0.25), 0.5)
        for bc in ("dirichlet", "neumann"):
            t = assemble_transformed(Field(g, np.zeros(g.shape)), zeta, bc, box)
            d = assemble_direct(Field(g, -zeta.values), 0.0, bc, box)
            assert (t.matrix != d.matrix).nnz == 0
            assert t.is_standard

    @pytest.mark.parametrize("bc", ["dirichlet", "neumann"])
    def test_constant_shift(self, bc):
        g = Grid(2, 1.0, 16)
        zeta = mollify(sample_white_noise(g, 1), Mollifier(0.125))
        box = Box((0.25, 0.25), 0.5)
        c = 0.7
        W = Field(g, np.full(g.shape, c))
        Y = Field(g, -math.exp(2 * c) * zeta.values)
        t = assemble_transformed(W, Y, bc, box)
        direct = assemble_direct(zeta, 0.0, bc, box)
        gen = sla.eigh(t.to_dense(), np.diag(t.mass), eigvals_only=True)
        ref = np.linalg.eigvalsh(direct.to_dense())
        assert np.allclose(gen, ref, rtol=1e-11, atol=1e-9)

    def test_nonfinite_rejected(self):
        g = Grid(2, 1.0, 16)
        W = np.zeros(g.shape)
        W[5, 5] = np.inf
        with pytest.raises(AssemblyError):
            assemble_transformed(Field(g, W), Field(g, np.zeros(g.shape)), "dirichlet", Box((0.25, 0.25), 0.5))

    @settings(max_examples=15, deadline=None)
    @given(scale=st.floats(-50, 50), seed=st.integers(0, 100))
    def test_edge_weights_positive(self, scale, seed):
        g = Grid(2, 1.0, 16)
        W = Field(g, scale * np.tanh(sample_white_noise(g, seed).values))
        form = assemble_transformed(W, Field(g, np.zeros(g.shape)), "neumann", Box((0.0, 0.0), 0.5))
        assert all(np.all(w > 0) for _, _, w in form.edges)

    def test_refinement_order(self):
        # Dirichlet smooth u: E_direct(u) - E_transf(e^{-w} u) vanishes as h -> 0
        rng = np.random.default_rng(11)
        zeta_modes = [(1.5, (1, 0), 0.2), (0.8, (1, 2), 1.0), (0.5, (0, 3), -0.4)]
        w_modes = [(0.3, (1, 1), 0.5), (0.2, (2, 0), 1.3)]
        coeffs = [rng.normal(size=(3, 3)) for _ in range(10)]
        box = Box((0.5, 0.5), 1.0)
        errs = {c: [] for c in range(10)}
        hs = []
        for n in (32, 64, 128, 256):
            g = Grid(2, 2.0, n)
            zeta, w = smooth(g, zeta_modes), smooth(g, w_modes)
            grads = spectral_gradient(w)
            lap = np.fft.irfftn(np.fft.rfftn(w.values) * laplacian_multiplier(g), s=g.shape, axes=(0, 1))
            Y = Field(g, -np.exp(2 * w.values) * (zeta.values + sum(a**2 for a in grads) + lap))
            direct = assemble_direct(zeta, 0.0, "dirichlet", box)
            transf = assemble_transformed(w, Y, "dirichlet", box)
            x, y = (c - 0.5 for c in direct.site_coordinates())
            i, j = direct.site_indices()
            w_sites = w.values[i, j]
            for c, a in enumerate(coeffs):
                u = sum(a[p, q] * np.sin((p + 1) * np.pi * x) * np.sin((q + 1) * np.pi * y)
                        for p in range(3) for q in range(3))
                ed = direct.energy(u)
                et = transf.energy(np.exp(-w_sites) * u)
                errs[c].append(abs(ed - et) / abs(ed))
            hs.append(g.h)
        for c in range(10):
            order = np.polyfit(np.log(hs), np.log(errs[c]), 1)[0]
            assert order >= 0.9

    def test_neumann_boundary_term(self):
        g = Grid(2, 1.0, 32)
        w = smooth(g, [(0.3, (1, 0), 0.0)])
        box = Box((0.25, 0.25), 0.5)
        zero = Field(g, np.zeros(g.shape))
        plain = assemble_transformed(w, zero, "neumann", box)
        with_term = assemble_transformed(w, zero, "neumann", box, boundary_term=True)
        diff = (with_term.potential - plain.potential).reshape(plain.site_shape)
        assert np.allclose(diff[1:-1, 1:-1], 0)
        # low x-face at x = 1/4: W = 0 and d_n W = -dW/dx = 0.6 pi; mass e^{2W} = 1
        assert np.allclose(diff[0, 1:-1], 0.6 * np.pi / g.h, rtol=1e-10)


class TestFormEvaluation:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000), bc=st.sampled_from(["dirichlet", "neumann"]))
    def test_symmetry_and_edge_sum(self, seed, bc):
        g = Grid(2, 1.0, 16)
        rng = np.random.default_rng(seed)
        W = Field(g, 0.3 * rng.normal(size=g.shape))
        Y = Field(g, rng.normal(size=g.shape))
        form = assemble_transformed(W, Y, bc, Box((0.25, 0.0), 0.5))
        u, v = rng.normal(size=(2, form.size))
        assert form.energy(u, v) == pytest.approx(form.energy(v, u), rel=1e-12, abs=1e-12)
        assert form.energy(u) == pytest.approx(form.energy_sum(u), rel=1e-12)
        assert abs(form.stiffness - form.stiffness.T).max() == 0

    def test_export(self, tmp_path):
        g = Grid(2, 1.0, 8)
        form = assemble_direct(sample_white_noise(g, 0), 1.0, "neumann", Box((0.0, 0.0), 0.5))
        txt, hdr = form.export(tmp_path / "A")
        txt2, _ = form.export(tmp_path / "B")
        assert txt.read_bytes() == txt2.read_bytes()
        rows = np.loadtxt(txt)
        assert np.all(np.diff(rows[:, 0] * form.size + rows[:, 1]) > 0)
        A = np.zeros((form.size, form.size))
        A[rows[:, 0].astype(int), rows[:, 1].astype(int)] = rows[:, 2]
        assert np.array_equal(A, form.to_dense())
        header = json.loads(hdr.read_text())
        assert header["size"] == form.size and header["bc"] == "neumann" and header["mass"] == "identity"


def bracket_oracle(theta, s, w, z, c_ip, lam):
    import sympy as sp

    th, S, Wn, Z, C, L = (sp.nsimplify(v) for v in (theta, s, w, z, c_ip, lam))
    r = S / (1 - S)
    A = {sgn: th + (th / (1 + sgn * th)) ** (-r) * C ** (2 / (1 - S)) * sp.exp((2 + sgn * 2 * r) * Wn)
         * Z ** (1 / (1 - S)) for sgn in (1, -1)}
    lo = (1 - th) * sp.exp(-4 * Wn) * (L - A[-1])
    hi = (1 + th) * sp.exp(4 * Wn) * (L + A[1])
    return float(sp.N(lo, 30)), float(sp.N(hi, 30))


class TestBracket:
    def test_theta_one(self):
        assert bracket_lambda(BracketParams(1.0, 0.5, 0.0, 0.0, 1.0), 5.0) == (0.0, 12.0)

    def test_free_limit(self):
        for theta in (1e-3, 1e-6, 1e-9):
            lo, hi = bracket_lambda(BracketParams(theta, 0.5, 0.0, 0.0, 1.0), 3.0)
            assert abs(lo - 3.0) <= 10 * theta and abs(hi - 3.0) <= 10 * theta

    def test_theta_zero(self):
        p = BracketParams(1.0, 0.5, 0.0, 0.0, 1.0)
        object.__setattr__(p, "theta", 0.0)
        with pytest.raises(ZeroDivisionError):
            bracket_lambda(p, 1.0)
        with pytest.raises(AssemblyError):
            BracketParams(0.0, 0.5, 0.0, 0.0, 1.0)

    @pytest.mark.parametrize("theta,s,w,z,c,lam", [
        (0.25, 0.5, 0.1, 2.0, 1.3, 10.0),
        (0.5, 0.3, 0.0, 0.7, 0.9, -4.0),
        (0.1, 0.75, 0.4, 1.1, 2.0, 50.0),
        (0.9, 0.2, 0.05, 3.0, 0.5, 0.0),
    ])
    def test_symbolic_oracle(self, theta, s, w, z, c, lam):
        got = bracket_lambda(BracketParams(theta, s, w, z, c), lam)
        expected = bracket_oracle(theta, s, w, z, c, lam)
        assert got == pytest.approx(expected, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(theta=st.floats(0.01, 0.99), s=st.floats(0.05, 0.95), w=st.floats(0, 1), z=st.floats(0, 3),
           c=st.floats(0, 3), lam=st.floats(0, 100))
    def test_ordered_for_nonnegative_lambda(self, theta, s, w, z, c, lam):
        lo, hi = bracket_lambda(BracketParams(theta, s, w, z, c), lam)
        assert lo <= hi


class TestIms:
    def test_single_tile(self):
        g = Grid(2, 1.0, 32)
        part = ims_partition(Box((0.0, 0.0), 0.5), 0.5, 0.1, grid=g)
        assert len(part.etas) == 1 and np.all(part.etas[0] == 1.0)

    def test_two_by_two_unity(self):
        g = Grid(2, 4.0, 64)
        L = 1.0
        part = ims_partition(Box((0.0, 0.0), 2 * L), L, 0.2, grid=g)
        assert len(part.etas) == 4
        assert np.max(np.abs(part.square_sum() - 1)) <= 1e-10
        assert part.gradient_sup(g.h) <= part.K / 0.2**2 * (1 + 1e-12)

    def test_geometry_violation(self):
        with pytest.raises(AssemblyError):
            ims_partition(Box((0.0, 0.0), 1.0), 0.5, 0.25, grid=Grid(2, 1.0, 32))

    @pytest.mark.parametrize("bc", ["dirichlet", "neumann"])
    def test_ims_inequality(self, bc):
        g = Grid(2, 2.0, 64)
        xi = mollify(sample_white_noise(g, 4), Mollifier(0.125))
        form = assemble_direct(xi, 0.0, bc, Box((0.0, 0.0), 1.0))
        part = form_sites_partition(form, 0.5, 0.1)
        assert np.max(np.abs(part.square_sum() - 1)) <= 1e-10
        A = ims_localization_error(form, part)
        rng = np.random.default_rng(1)
        for _ in range(20):
            u = rng.normal(size=form.size)
            lhs, rhs = ims_check(form, part, u, A)
            assert lhs >= rhs - 1e-9 * abs(lhs)
