"""Generative model: prior sampling, rendering, noise."""

import numpy as np
import pytest

from tilecat.catalogs import Catalog, CheckerboardConfig, Source, SourceKind, mag_to_flux
from tilecat.errors import ConfigError
from tilecat.rng import numpy_stream
from tilecat.simulator import (
    ImageGrid,
    ParetoFlux,
    PriorConfig,
    RenderConfig,
    ShapePrior,
    ancestral_sample,
    render_mean,
    render_semisynthetic,
    sample_catalog,
    sample_catalog_arrays,
    sample_image,
    shape_from_unconstrained,
    shape_to_unconstrained,
)


def make_prior(mu=0.01, star_fraction=1.0):
    flux = ParetoFlux(alpha=0.7, min_flux=0.5, max_flux=20.0)
    return PriorConfig(
        mu=mu, star_fraction=star_fraction, star_flux=flux, galaxy_flux=flux
    )


def make_render(**kw):
    base = dict(background=200.0, psf_sigma=1.1, psf_radius=4.0, gain=100.0)
    base.update(kw)
    return RenderConfig(**base)


def make_cb(**kw):
    base = dict(
        tile_side=4, ranks=4, max_per_tile=1, object_radius=4.0,
        image_radius=4, context_radius=2, flux_threshold=24.0,
    )
    base.update(kw)
    return CheckerboardConfig(**base)


class TestShapeTransforms:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        t = rng.standard_normal((50, 6)) * 2
        back = shape_to_unconstrained(shape_from_unconstrained(t))
        assert np.allclose(back, t, atol=1e-9)

    def test_ranges(self):
        rng = np.random.default_rng(1)
        raw = shape_from_unconstrained(rng.standard_normal((200, 6)) * 3)
        assert np.all((raw[:, 0] > 0) & (raw[:, 0] < 1))      # bulge fraction
        assert np.all(raw[:, 1] > 0) and np.all(raw[:, 2] > 0)  # scales
        assert np.all((raw[:, 3] > 0) & (raw[:, 3] < 1))      # ellipticity
        assert np.all((raw[:, 4] > 0) & (raw[:, 4] < np.pi))  # angle
        assert np.all((raw[:, 5] > 0) & (raw[:, 5] < 1))      # axis adjustment


class TestParetoFlux:
    def test_bounds_and_cdf(self):
        pf = ParetoFlux(alpha=0.98, min_flux=0.25, max_flux=30.0)
        rng = np.random.default_rng(2)
        x = pf.sample(20000, rng)
        assert x.min() >= 0.25 and x.max() <= 30.0
        # analytic CDF oracle at the median of the truncated Pareto
        a = pf.alpha
        lo, hi = pf.min_flux**-a, pf.max_flux**-a
        median = (lo - 0.5 * (lo - hi)) ** (-1 / a)
        frac = (x <= median).mean()
        assert abs(frac - 0.5) < 3 * 0.5 / np.sqrt(len(x))

    def test_from_magnitudes(self):
        pf = ParetoFlux.from_magnitudes(0.98, faint_mag=24.0, bright_mag=18.0)
        assert pf.min_flux == pytest.approx(float(mag_to_flux(24.0)))
        assert pf.max_flux == pytest.approx(float(mag_to_flux(18.0)))


class TestSampleCatalog:
    def test_poisson_mean(self):
        # Monte Carlo oracle: mean count within 3 SE of mu*H*W
        prior = make_prior(mu=0.01)
        rng = numpy_stream(11)
        arrays = sample_catalog_arrays(prior, (16, 16), 10_000, rng)
        lam = 0.01 * 256
        se = np.sqrt(lam / 10_000)
        assert abs(arrays["counts"].mean() - lam) < 3 * se

    def test_positions_uniform(self):
        prior = make_prior(mu=0.05)
        arrays = sample_catalog_arrays(prior, (8, 8), 2000, numpy_stream(12))
        rows = arrays["row"]
        assert rows.min() >= 0 and rows.max() < 8
        assert abs(rows.mean() - 4.0) < 3 * 8 / np.sqrt(12 * len(rows))

    def test_kind_fraction(self):
        prior = make_prior(mu=0.05, star_fraction=0.48)
        arrays = sample_catalog_arrays(prior, (16, 16), 2000, numpy_stream(13))
        stars = (arrays["kind"] == 0).mean()
        assert abs(stars - 0.48) < 3 * 0.5 / np.sqrt(len(arrays["kind"]))
        # galaxies carry shapes, stars carry zero rows
        gal = arrays["kind"] == 1
        assert np.all(arrays["shape"][gal, 1] > 0)
        assert not arrays["shape"][~gal].any()

    def test_single_draw_object_types(self):
        cat = sample_catalog(make_prior(mu=0.05, star_fraction=0.5), (16, 16), numpy_stream(14))
        for s in cat.sources:
            assert (s.shape is None) == (s.kind == SourceKind.STAR)


class TestRenderMean:
    def test_empty_catalog_is_background(self):
        mean = render_mean(Catalog((), (8, 8)), make_render())
        assert np.all(mean == 200.0)

    def test_hard_support_cutoff(self):
        render = make_render(psf_radius=3.0)
        cat = Catalog((Source(8.5, 8.5, SourceKind.STAR, 5.0),), (17, 17))
        excess = render_mean(cat, render) - 200.0
        ctr_r = np.abs(np.arange(17) + 0.5 - 8.5)
        dist = np.maximum(ctr_r[:, None], ctr_r[None, :])
        assert np.all(excess[dist > 3.0] == 0.0)
        assert np.all(excess[dist < 3.0] > 0.0)

    def test_superposition(self):
        render = make_render()
        one = Catalog((Source(8.3, 7.6, SourceKind.STAR, 5.0),), (16, 16))
        two = Catalog(
            (Source(8.3, 7.6, SourceKind.STAR, 5.0), Source(8.3, 7.6, SourceKind.STAR, 5.0)),
            (16, 16),
        )
        e1 = render_mean(one, render) - 200.0
        e2 = render_mean(two, render) - 200.0
        assert np.allclose(e2, 2 * e1, rtol=1e-12)

    def test_linearity(self):
        render = make_render()
        c1 = Catalog((Source(4.2, 5.1, SourceKind.STAR, 3.0),), (16, 16))
        c2 = Catalog((Source(10.7, 11.9, SourceKind.STAR, 7.0),), (16, 16))
        both = Catalog(c1.sources + c2.sources, (16, 16))
        lhs = render_mean(both, render) - 200.0
        rhs = (render_mean(c1, render) - 200.0) + (render_mean(c2, render) - 200.0)
        assert np.allclose(lhs, rhs, rtol=1e-12)

    def test_star_flux_conservation(self):
        render = make_render(psf_radius=4.0, gain=137.0)
        cat = Catalog((Source(8.37, 7.91, SourceKind.STAR, 2.5),), (16, 16))
        excess = render_mean(cat, render) - 200.0
        assert abs(excess.sum() - 2.5 * 137.0) / (2.5 * 137.0) < 1e-6

    def test_galaxy_flux_conservation_and_support(self):
        render = make_render(psf_radius=5.0, gain=50.0)
        shape = (0.4, 1.0, 0.5, 0.3, 1.2, 0.7)
        cat = Catalog((Source(10.6, 9.2, SourceKind.GALAXY, 4.0, shape),), (21, 21))
        excess = render_mean(cat, render) - 200.0
        assert abs(excess.sum() - 4.0 * 50.0) / (4.0 * 50.0) < 1e-6
        ctr_r = np.abs(np.arange(21) + 0.5 - 10.6)
        ctr_c = np.abs(np.arange(21) + 0.5 - 9.2)
        dist = np.maximum(ctr_r[:, None], ctr_c[None, :])
        assert np.all(excess[dist > 5.0] == 0.0)

    def test_out_of_bounds_rejected(self):
        cat = Catalog((Source(1.0, 1.0, SourceKind.STAR, 1.0),), (8, 8))
        bad = Catalog.__new__(Catalog)
        object.__setattr__(bad, "sources", (Source(1.0, 1.0, SourceKind.STAR, 1.0),))
        object.__setattr__(bad, "image_dims", (0, 0))
        with pytest.raises(ConfigError):
            render_mean(bad, make_render())


class TestSampleImage:
    def test_zero_mean_poisson_is_zero(self):
        img = sample_image(np.zeros((4, 4)), "poisson", numpy_stream(20))
        assert np.all(img.pixels == 0)

    def test_poisson_moments(self):
        lam = np.array([[3.0, 50.0], [200.0, 0.5]])
        rng = numpy_stream(21)
        draws = np.stack([sample_image(lam, "poisson", rng).pixels for _ in range(10_000)])
        mean, var = draws.mean(axis=0), draws.var(axis=0)
        se_mean = np.sqrt(lam / 10_000)
        assert np.all(np.abs(mean - lam) < 5 * se_mean)
        se_var = lam * np.sqrt(2.0 / 10_000 + 1.0 / (lam * 10_000))
        assert np.all(np.abs(var - lam) < 5 * se_var)

    def test_gaussian_approx_clt(self):
        lam = np.full((50, 50), 1e4)
        img = sample_image(lam, "gaussian_approx", numpy_stream(22))
        se = np.sqrt(1e4 / lam.size)
        assert abs(img.pixels.mean() - 1e4) < 3 * se

    def test_negative_mean_rejected(self):
        with pytest.raises(ConfigError):
            sample_image(np.array([[-1.0]]), "poisson", numpy_stream(23))


class TestAncestralSample:
    def test_determinism(self):
        prior, render, cb = make_prior(mu=0.01), make_render(), make_cb()
        a = ancestral_sample(prior, render, (16, 16), 3, seed=99, config=cb)
        b = ancestral_sample(prior, render, (16, 16), 3, seed=99, config=cb)
        for (ta, ia), (tb, ib) in zip(a, b):
            assert np.array_equal(ia.pixels, ib.pixels)
            assert np.array_equal(ta.pos, tb.pos)
            assert np.array_equal(ta.present, tb.present)

    def test_prefix_stability(self):
        # image i is identical no matter how many images follow it
        prior, render, cb = make_prior(mu=0.01), make_render(), make_cb()
        a = ancestral_sample(prior, render, (16, 16), 2, seed=7, config=cb)
        b = ancestral_sample(prior, render, (16, 16), 5, seed=7, config=cb)
        assert np.array_equal(a[1][1].pixels, b[1][1].pixels)

    def test_nuisance_rendered_but_not_slotted(self):
        # threshold excludes everything -> empty tiles, image still has sources
        prior = make_prior(mu=0.02)
        render = make_render(background=10.0)
        cb = make_cb(flux_threshold=0.0)  # min flux astronomically high
        out = ancestral_sample(prior, render, (16, 16), 4, seed=3, config=cb)
        some_sources = False
        for tiled, image in out:
            assert tiled.counts.sum() == 0
            if len(tiled.nuisance) > 0:
                some_sources = True
                assert image.pixels.sum() > 10.0 * 256  # excess photons present
        assert some_sources

    def test_tile_counts_thinning_small(self):
        # per-tile counts ~ Poisson(mu*T^2): mean check at modest n here;
        # the full chi-square test lives in the acceptance suite
        prior = make_prior(mu=0.02)
        cb = make_cb(tile_side=4, flux_threshold=999.0, max_per_tile=6)
        arrays = sample_catalog_arrays(prior, (16, 16), 3000, numpy_stream(31))
        th = np.floor(arrays["row"] / 4).astype(int)
        tw = np.floor(arrays["col"] / 4).astype(int)
        tid = arrays["draw_id"] * 16 + th * 4 + tw
        counts = np.bincount(tid, minlength=3000 * 16)
        lam = 0.02 * 16
        assert abs(counts.mean() - lam) < 3 * np.sqrt(lam / counts.size)


class TestSemisynthetic:
    def test_same_seed_identical(self):
        cat = Catalog((Source(5.5, 5.5, SourceKind.STAR, 3.0),), (12, 12))
        render = make_render()
        a = render_semisynthetic(cat, render, numpy_stream(42))
        b = render_semisynthetic(cat, render, numpy_stream(42))
        assert np.array_equal(a.pixels, b.pixels)

    def test_empty_catalog_noise_only(self):
        render = make_render(background=100.0)
        img = render_semisynthetic(Catalog((), (8, 8)), render, numpy_stream(43))
        assert abs(img.pixels.mean() - 100.0) < 5 * np.sqrt(100.0 / 64)
