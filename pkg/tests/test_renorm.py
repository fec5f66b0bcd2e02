import json
import math

import numpy as np
import pytest
from scipy import stats

from andersonlab.field import Box, Field, FieldMeta, Grid, Mollifier, mollify, sample_white_noise, spectral_gradient
from andersonlab.harmonic import max_green_level
from andersonlab.renorm import (
    ConsistencyError,
    CutoffF,
    CutoffWindowError,
    RenormError,
    RenormResult,
    RenormSpec,
    SaturationError,
    boundary_flux,
    boundary_pairing,
    build_pack_2d,
    build_pack_3d,
    build_Y,
    bulk_green_terms,
    check_consistency,
    gradient_variance_sum,
    green_zero_apply,
    raw_exponential,
    renorm_constant,
    select_M,
    transform_residual,
)


def zero_field(grid):
    return Field(grid, np.zeros(grid.shape))


def subsample(f, factor, meta_eps=None):
    g = f.grid
    coarse = Grid(g.dim, g.side_length, g.n // factor)
    sl = (slice(None, None, factor),) * g.dim
    return Field(coarse, f.values[sl].copy(), "physical", FieldMeta(kind="white", epsilon=meta_eps or 0.0))


class TestCutoff:
    def test_equals_exponential_on_window(self):
        x = np.linspace(-2, 2, 2001)
        assert np.array_equal(CutoffF()(x), raw_exponential(x))

    def test_compact_support_and_smooth(self):
        F = CutoffF()
        x = np.linspace(-5, 5, 100001)
        y = F(x)
        assert np.all(y[np.abs(x) >= 3] == 0)
        # bounded difference quotients up to second order
        d1 = np.diff(y) / np.diff(x)
        d2 = np.diff(d1) / np.diff(x)[1:]
        assert np.max(np.abs(d1)) < 1e3 and np.max(np.abs(d2)) < 1e5


class TestRenormConstant:
    def test_fully_smoothed(self):
        g = Grid(2, 1.0, 64)
        assert renorm_constant(RenormSpec(2, 0.5), g).value <= 0.2

    def test_monotone_in_inverse_epsilon(self):
        g = Grid(2, 1.0, 256)
        values = [gradient_variance_sum(g, Mollifier(2.0**-j)) for j in np.arange(1, 7, 0.25)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    @pytest.mark.slow
    def test_monte_carlo_matches_fourier_sum(self):
        g = Grid(2, 1.0, 256)
        exact = renorm_constant(RenormSpec(2, 2.0**-4), g)
        mc = renorm_constant(RenormSpec(2, 2.0**-4, "monte_carlo", samples=4096), g)
        assert mc.stderr > 0
        assert abs(mc.value - exact.value) <= 3 * mc.stderr
        check_consistency(exact, mc)

    def test_log_slope(self):
        g = Grid(2, 1.0, 256)
        eps = 2.0 ** -np.arange(2, 7)
        c = [renorm_constant(RenormSpec(2, e), g).value for e in eps]
        slope = np.polyfit(np.log(1 / eps), c, 1)[0]
        assert slope == pytest.approx(1 / (2 * np.pi), rel=0.10)

    def test_three_dimensional_parts(self):
        g = Grid(3, 1.0, 16)
        res = renorm_constant(RenormSpec(3, 0.125, "monte_carlo", samples=512), g)
        assert len(res.parts) == 2 and all(se >= 0 for se in res.part_stderrs)
        assert res.part_stderrs[1] <= 0.02 * res.parts[1]
        exact = renorm_constant(RenormSpec(3, 0.125, "fourier_sum", samples=512), g)
        assert exact.parts[0] == pytest.approx(gradient_variance_sum(g, Mollifier(0.125)))
        check_consistency(exact, res)

    def test_consistency_error(self):
        a = RenormResult(1.0, 0.01, "fourier_sum")
        b = RenormResult(1.2, 0.01, "monte_carlo")
        with pytest.raises(ConsistencyError):
            check_consistency(a, b)
        assert check_consistency(a, RenormResult(1.01, 0.01, "monte_carlo")) < 5

    def test_rejects_unresolved_and_bad_spec(self):
        with pytest.raises(Exception):
            renorm_constant(RenormSpec(2, 0.01), Grid(2, 1.0, 64))
        with pytest.raises(RenormError):
            RenormSpec(4, 0.1)
        with pytest.raises(RenormError):
            RenormSpec(2, 0.1, "monte_carlo", samples=1)


class TestPack2d:
    def test_zero_noise(self):
        g = Grid(2, 1.0, 64)
        m = Mollifier(0.125)
        pack = build_pack_2d(zero_field(g), m, 3)
        c = gradient_variance_sum(g, m)
        assert np.allclose(pack.taus["tau"].values, -c, atol=1e-14)
        assert np.allclose(pack.X.values, -c, atol=1e-14)
        for W in pack.W.values():
            assert np.max(np.abs(W.values)) <= 1e-14

    def test_x_identity_exact(self):
        g = Grid(2, 1.0, 64)
        pack = build_pack_2d(sample_white_noise(g, 5), Mollifier(0.0625), 4)
        assert np.array_equal(pack.X.values, pack.xi_eps.values + pack.taus["tau"].values)
        again = build_pack_2d(sample_white_noise(g, 5), Mollifier(0.0625), 4)
        assert np.array_equal(again.X.values, pack.X.values)

    def test_tau_centred(self):
        g = Grid(2, 1.0, 64)
        m = Mollifier(0.125)
        c = gradient_variance_sum(g, m)
        means = np.array([build_pack_2d(sample_white_noise(g, s), m, 0, c).taus["tau"].values.mean()
                          for s in range(256)])
        se = means.std(ddof=1) / math.sqrt(means.size)
        assert abs(means.mean()) <= 3 * se

    def test_finite_difference_gradient_order(self):
        # band-limited G_0 * xi_eps from a fine grid, subsampled: FD |grad|^2 vs spectral |grad|^2
        fine = Grid(2, 1.0, 256)
        xi_eps = mollify(sample_white_noise(fine, 8), Mollifier(0.25))
        u_fine = Field(fine, green_zero_apply(xi_eps.values, fine))
        errs, hs = [], []
        for factor in (8, 4, 2):
            u = subsample(u_fine, factor)
            h = u.grid.h
            spec = sum(gr**2 for gr in spectral_gradient(u))
            fd = sum(((np.roll(u.values, -1, a) - np.roll(u.values, 1, a)) / (2 * h)) ** 2 for a in range(2))
            errs.append(np.max(np.abs(fd - spec)))
            hs.append(h)
        order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert order >= 1.8

    def test_nyquist_violation(self):
        g = Grid(2, 1.0, 32)
        with pytest.raises(RenormError):
            build_pack_2d(sample_white_noise(g, 0), Mollifier(0.0625), max_green_level(g) + 1)

    def test_manifest(self, tmp_path):
        g = Grid(2, 1.0, 32)
        pack = build_pack_2d(sample_white_noise(g, 2), Mollifier(0.0625), 3)
        select_M(pack, 0.3, math.inf)
        data = json.loads(pack.write_manifest(tmp_path / "pack.json").read_text())
        assert set(data) == {"seed", "d", "epsilon", "c_eps", "method", "M", "norms"}
        assert data["seed"] == 2 and data["M"] == 0 and set(data["norms"]) == {"0", "1", "2", "3"}


class TestPack3d:
    def test_zero_noise(self):
        g = Grid(3, 1.0, 16)
        m = Mollifier(0.125)
        pack = build_pack_3d(zero_field(g), m, 2, c_second=0.3)
        c1 = gradient_variance_sum(g, m)
        assert np.allclose(pack.taus["tau1"].values, -c1, atol=1e-14)
        assert not np.any(pack.taus["tau2"].values)
        assert not np.any(pack.taus["tau4"].values)
        assert pack.c_eps == pytest.approx(c1 + 0.3)

    def test_x_identity_exact(self):
        g = Grid(3, 1.0, 16)
        pack = build_pack_3d(sample_white_noise(g, 1), Mollifier(0.125), 2, c_second=0.3)
        t = pack.taus
        expected = pack.xi_eps.values + t["tau1"].values + 2 * t["tau2"].values + t["tau3"].values
        assert np.array_equal(pack.X.values, expected)

    @pytest.mark.slow
    def test_tau3_centred(self):
        # c_second is itself a Monte-Carlo estimate (seeds disjoint from the test seeds)
        g = Grid(3, 1.0, 16)
        m = Mollifier(0.125)
        res = renorm_constant(RenormSpec(3, 0.125, "fourier_sum", samples=2048, seed_base=10_000), g)
        c1, c2 = res.parts
        means = np.array([build_pack_3d(sample_white_noise(g, s), m, 0, c1, c2).taus["tau3"].values.mean()
                          for s in range(128)])
        se = math.hypot(means.std(ddof=1) / math.sqrt(means.size), res.part_stderrs[1])
        assert abs(means.mean()) <= 3 * se

    def test_wrong_dimension(self):
        with pytest.raises(RenormError):
            build_pack_3d(sample_white_noise(Grid(2, 1.0, 16), 0), Mollifier(0.125), 0, 1.0, 1.0)
        with pytest.raises(RenormError):
            build_pack_2d(sample_white_noise(Grid(3, 1.0, 16), 0), Mollifier(0.125), 0)


class TestBuildY:
    def test_zero_noise(self):
        g = Grid(2, 1.0, 64)
        pack = build_pack_2d(zero_field(g), Mollifier(0.125), 3)
        for N in range(4):
            Y = build_Y(pack, CutoffF(), N)
            assert np.allclose(Y.values, pack.c_eps, atol=1e-12)

    def test_cutoff_variants_agree_above_M(self):
        g = Grid(2, 1.0, 64)
        pack = build_pack_2d(sample_white_noise(g, 3), Mollifier(0.0625), max_green_level(g))
        M = select_M(pack, 0.3, 1.0)
        for N in range(M, max_green_level(g) + 1):
            a = build_Y(pack, CutoffF(), N).values
            b = build_Y(pack, None, N, use_cutoff=False).values
            assert np.max(np.abs(a - b)) <= 1e-12

    def test_reinversion(self):
        g = Grid(2, 1.0, 64)
        pack = build_pack_2d(sample_white_noise(g, 4), Mollifier(0.0625), 4)
        W = pack.W[4]
        Y = build_Y(pack, CutoffF(), 4, use_cutoff=False)
        back = -np.exp(-2 * W.values) * Y.values
        assert np.max(np.abs(back - transform_residual(pack, W))) <= 1e-9

    def test_guard(self):
        g = Grid(2, 1.0, 64)
        pack = build_pack_2d(Field(g, 2000 * sample_white_noise(g, 0).values), Mollifier(0.0625), 0)
        assert np.max(np.abs(pack.W[0].values)) > 2
        with pytest.raises(CutoffWindowError):
            build_Y(pack, None, 0, use_cutoff=False)
        build_Y(pack, CutoffF(), 0)
        with pytest.raises(RenormError):
            build_Y(pack, CutoffF(), 5)


class TestSelectM:
    def test_trivial_cases(self):
        g = Grid(2, 1.0, 64)
        assert select_M(build_pack_2d(zero_field(g), Mollifier(0.125), 3), 0.3, 1.0) == 0
        pack = build_pack_2d(sample_white_noise(g, 0), Mollifier(0.0625), 3)
        assert select_M(pack, 0.3, math.inf) == 0

    def test_saturation(self):
        g = Grid(2, 1.0, 64)
        pack = build_pack_2d(sample_white_noise(g, 0), Mollifier(0.0625), 2)
        with pytest.raises(SaturationError) as info:
            select_M(pack, 0.3, 1e-9)
        assert info.value.min_norm > 1e-9

    @pytest.mark.slow
    def test_monotone_in_gamma(self):
        g = Grid(2, 1.0, 64)
        top = max_green_level(g)

        def level(pack, gamma):
            try:
                return select_M(pack, 0.3, gamma)
            except SaturationError:
                return math.inf

        for s in range(64):
            pack = build_pack_2d(sample_white_noise(g, s), Mollifier(0.0625), top)
            assert level(pack, 0.5) >= level(pack, 1.0)


class TestBoundaryPairing:
    def test_zero_phi(self):
        g = Grid(2, 1.0, 64)
        xi = mollify(sample_white_noise(g, 0), Mollifier(0.0625))
        assert boundary_pairing(zero_field(g), xi, Box((0.25, 0.25), 0.5)) == 0.0

    def test_divergence_theorem_on_quadratic(self):
        g = Grid(2, 2.0, 64)
        x, y = (np.broadcast_to(c, g.shape) for c in g.coordinates())
        f = (x - 1.1) ** 2 + (y - 0.9) ** 2
        box = Box((0.5, 0.5), 1.0)
        flux = boundary_flux(np.ones(g.shape), f, g, box)
        assert flux == pytest.approx(2 * 2 * box.volume, abs=g.h)

    def test_box_touching_edge(self):
        g = Grid(2, 1.0, 32)
        with pytest.raises(RenormError):
            boundary_pairing(Field(g, np.ones(g.shape)), mollify(sample_white_noise(g, 0), Mollifier(0.125)),
                             Box((0.0, 0.25), 0.5))

    def test_integration_by_parts_order(self):
        fine = Grid(2, 1.0, 512)
        eps = 0.125
        xi_eps = mollify(sample_white_noise(fine, 6), Mollifier(eps))
        box = Box((0.25, 0.25), 0.5)
        hs, res = [], []
        for factor in (8, 4, 2):
            xi = subsample(xi_eps, factor, eps)
            g = xi.grid
            x, y = (np.broadcast_to(c, g.shape) for c in g.coordinates())
            phi = np.cos(2 * np.pi * x) * np.sin(2 * np.pi * y) + 1.5
            u = green_zero_apply(xi.values, g)
            grad_term, lap_term = bulk_green_terms(phi, u, g, box)
            b = boundary_pairing(Field(g, phi), xi, box)
            scale = abs(grad_term) + abs(lap_term) + abs(b)
            hs.append(g.h)
            res.append(abs(b - (grad_term + lap_term)) / scale)
        order = np.polyfit(np.log(hs), np.log(res), 1)[0]
        assert order >= 0.9


def test_gaussian_fourth_moment():
    g = Grid(2, 1.0, 32)
    m = Mollifier(0.125)
    x, y = (np.broadcast_to(c, g.shape) for c in g.coordinates())
    phi = np.exp(-20 * ((x - 0.5) ** 2 + (y - 0.4) ** 2))
    pair = np.array([np.sum(mollify(sample_white_noise(g, s), m).values * phi) * g.cell_volume
                     for s in range(10_000)])
    kurt = stats.kurtosis(pair, fisher=False)
    assert 2.7 <= kurt <= 3.3
