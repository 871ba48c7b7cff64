"""Generative model: marked spatial Poisson prior and image rendering.

Key choices (all desk-scale stand-ins where the underlying survey details are
unavailable):

* PSF: circular Gaussian of width ``psf_sigma`` multiplied by the smooth taper
  (1 - (d/R)^2)^2 with d the L-infinity offset, forcing an exactly-zero profile
  beyond radius R. Star stamps are normalized over the full support window and
  scaled by flux * gain, so an interior star conserves flux to float precision.
* Galaxies: six-parameter bulge-and-disk profile (bulge fraction, disk scale,
  bulge scale, ellipticity, position angle, axis-ratio adjustment), evaluated on
  a pixel-aligned oversampled subgrid, convolved with the PSF sampled on the
  same subgrid, tapered to zero at radius R, then normalized like stars. The
  pixel-aligned subgrid keeps rendering exactly equivariant under 90-degree
  rotations and flips.
* Fluxes: truncated Pareto per kind, bounds given as fluxes; galaxy shape
  priors are Gaussians on transformed coordinates (logit/log per component).
* Pixel noise: Poisson(lambda) or its Normal(lambda, lambda) approximation.

All sampling goes through counter-based streams (see rng.py); ancestral
sampling derives one stream per image index so outputs are order-deterministic
and prefix-stable in n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from . import rng as rngmod
from .catalogs import (
    DEFAULT_ZERO_POINT,
    SHAPE_DIM,
    Catalog,
    CheckerboardConfig,
    Source,
    SourceKind,
    TiledCatalog,
    mag_to_flux,
    tile_catalog,
)
from .errors import ConfigError

__all__ = [
    "ParetoFlux",
    "ShapePrior",
    "PriorConfig",
    "RenderConfig",
    "ImageGrid",
    "sample_catalog",
    "sample_catalog_arrays",
    "render_mean",
    "sample_image",
    "ancestral_sample",
    "render_semisynthetic",
    "shape_to_unconstrained",
    "shape_from_unconstrained",
]

# transformed coordinate t <-> raw shape component:
#   logit-type: raw = hi * sigmoid(t); log-type: raw = exp(t)
_SHAPE_KIND = ("logit", "log", "log", "logit", "logit", "logit")
_SHAPE_HI = (1.0, None, None, 1.0, math.pi, 1.0)


def shape_to_unconstrained(shape: np.ndarray) -> np.ndarray:
    """Map raw shape values (..., 6) to unbounded coordinates."""
    shape = np.asarray(shape, dtype=np.float64)
    out = np.empty_like(shape)
    for i, kind in enumerate(_SHAPE_KIND):
        if kind == "log":
            out[..., i] = np.log(shape[..., i])
        else:
            p = np.clip(shape[..., i] / _SHAPE_HI[i], 1e-12, 1 - 1e-12)
            out[..., i] = np.log(p) - np.log1p(-p)
    return out


def shape_from_unconstrained(t: np.ndarray) -> np.ndarray:
    """Inverse of shape_to_unconstrained."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    for i, kind in enumerate(_SHAPE_KIND):
        if kind == "log":
            out[..., i] = np.exp(t[..., i])
        else:
            out[..., i] = _SHAPE_HI[i] / (1.0 + np.exp(-t[..., i]))
    return out


@dataclass(frozen=True)
class ParetoFlux:
    """Truncated Pareto flux prior: density proportional to f^-(alpha+1) on
    [min_flux, max_flux]."""

    alpha: float
    min_flux: float
    max_flux: float

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("Pareto shape alpha must be positive")
        if not 0 < self.min_flux < self.max_flux:
            raise ConfigError("need 0 < min_flux < max_flux")

    @classmethod
    def from_magnitudes(
        cls, alpha: float, faint_mag: float, bright_mag: float,
        zero_point: float = DEFAULT_ZERO_POINT,
    ) -> "ParetoFlux":
        return cls(
            alpha=alpha,
            min_flux=float(mag_to_flux(faint_mag, zero_point)),
            max_flux=float(mag_to_flux(bright_mag, zero_point)),
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(n)
        a = self.alpha
        lo, hi = self.min_flux ** -a, self.max_flux ** -a
        return (lo - u * (lo - hi)) ** (-1.0 / a)


@dataclass(frozen=True)
class ShapePrior:
    """Independent Gaussians on the transformed shape coordinates."""

    mean: tuple[float, ...] = (-0.8, -0.2, -1.0, -0.5, 0.0, 0.5)
    sd: tuple[float, ...] = (0.6, 0.4, 0.4, 0.8, 1.4, 0.8)

    def __post_init__(self):
        if len(self.mean) != SHAPE_DIM or len(self.sd) != SHAPE_DIM:
            raise ConfigError(f"shape prior needs {SHAPE_DIM} components")
        if any(s <= 0 for s in self.sd):
            raise ConfigError("shape prior sds must be positive")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        t = rng.standard_normal((n, SHAPE_DIM)) * np.array(self.sd) + np.array(self.mean)
        return shape_from_unconstrained(t)


@dataclass(frozen=True)
class PriorConfig:
    """Marked spatial Poisson process over the image rectangle."""

    mu: float  # objects per pixel^2
    star_fraction: float
    star_flux: ParetoFlux
    galaxy_flux: ParetoFlux
    shape_prior: ShapePrior = field(default_factory=ShapePrior)

    def __post_init__(self):
        if self.mu <= 0:
            raise ConfigError("mu must be positive")
        if not 0.0 <= self.star_fraction <= 1.0:
            raise ConfigError("star_fraction must be in [0, 1]")


@dataclass(frozen=True)
class RenderConfig:
    """Rendering and noise settings."""

    background: float
    psf_sigma: float
    psf_radius: float  # hard L-infinity support cutoff R, pixels
    gain: float = 1.0
    noise_model: str = "poisson"
    zero_point: float = DEFAULT_ZERO_POINT
    oversample: int = 3  # odd subpixel sampling factor for galaxy profiles

    def __post_init__(self):
        if np.any(np.asarray(self.background) < 0):
            raise ConfigError("background must be nonnegative")
        if self.psf_sigma <= 0 or self.psf_radius <= 0 or self.gain <= 0:
            raise ConfigError("psf_sigma, psf_radius, gain must be positive")
        if self.noise_model not in ("poisson", "gaussian_approx"):
            raise ConfigError(f"unknown noise model {self.noise_model!r}")
        if self.oversample < 1 or self.oversample % 2 == 0:
            raise ConfigError("oversample must be odd and >= 1")


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Observed (or rendered) pixel grid plus its provenance."""

    pixels: np.ndarray  # (H, W) float32 photoelectron counts
    render: RenderConfig
    seed: int | None = None

    @property
    def dims(self) -> tuple[int, int]:
        return self.pixels.shape


# ---------------------------------------------------------------------------
# Prior sampling
# ---------------------------------------------------------------------------

def sample_catalog_arrays(
    prior: PriorConfig,
    dims: tuple[int, int],
    n_draws: int,
    rng: np.random.Generator,
) -> dict:
    """Vectorized prior draws for statistics at scale.

    Returns flat arrays over all objects of all draws: draw_id, row, col, kind,
    flux, shape (n, 6; zero rows for stars), plus per-draw counts.
    """
    h, w = dims
    counts = rng.poisson(prior.mu * h * w, size=n_draws)
    total = int(counts.sum())
    draw_id = np.repeat(np.arange(n_draws), counts)
    rows = rng.random(total) * h
    cols = rng.random(total) * w
    kinds = (rng.random(total) >= prior.star_fraction).astype(np.int8)  # 1 = galaxy
    flux = np.empty(total, dtype=np.float64)
    stars = kinds == 0
    flux[stars] = prior.star_flux.sample(int(stars.sum()), rng)
    flux[~stars] = prior.galaxy_flux.sample(int((~stars).sum()), rng)
    shapes = np.zeros((total, SHAPE_DIM), dtype=np.float64)
    n_gal = int((~stars).sum())
    if n_gal:
        shapes[~stars] = prior.shape_prior.sample(n_gal, rng)
    return {
        "draw_id": draw_id,
        "row": rows,
        "col": cols,
        "kind": kinds,
        "flux": flux,
        "shape": shapes,
        "counts": counts,
    }


def _catalog_from_arrays(arrays: dict, sel: np.ndarray, dims) -> Catalog:
    sources = []
    for i in np.nonzero(sel)[0]:
        kind = SourceKind(int(arrays["kind"][i]))
        sources.append(
            Source(
                row=float(arrays["row"][i]),
                col=float(arrays["col"][i]),
                kind=kind,
                flux=float(arrays["flux"][i]),
                shape=tuple(arrays["shape"][i]) if kind == SourceKind.GALAXY else None,
            )
        )
    return Catalog(tuple(sources), dims)


def sample_catalog(
    prior: PriorConfig, dims: tuple[int, int], rng: np.random.Generator
) -> Catalog:
    """One draw from the marked Poisson prior."""
    arrays = sample_catalog_arrays(prior, dims, 1, rng)
    return _catalog_from_arrays(arrays, np.ones(len(arrays["row"]), dtype=bool), dims)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _taper(d_over_r: np.ndarray) -> np.ndarray:
    inside = d_over_r < 1.0
    return np.where(inside, (1.0 - np.minimum(d_over_r, 1.0) ** 2) ** 2, 0.0)


def _support_range(u: float, radius: float) -> tuple[int, int]:
    """Index range [lo, hi] of pixels whose centers are within radius of u."""
    lo = math.ceil(u - 0.5 - radius)
    hi = math.floor(u - 0.5 + radius)
    return lo, hi


def _psf_profile(dr: np.ndarray, dc: np.ndarray, render: RenderConfig) -> np.ndarray:
    rr = dr * dr + dc * dc
    dinf = np.maximum(np.abs(dr), np.abs(dc))
    return np.exp(-rr / (2.0 * render.psf_sigma**2)) * _taper(dinf / render.psf_radius)


def _star_stamp(u: np.ndarray, render: RenderConfig) -> tuple[np.ndarray, int, int]:
    """(stamp normalized to unit sum, row_lo, col_lo)."""
    r = render.psf_radius
    rlo, rhi = _support_range(u[0], r)
    clo, chi = _support_range(u[1], r)
    pr = np.arange(rlo, rhi + 1) + 0.5 - u[0]
    pc = np.arange(clo, chi + 1) + 0.5 - u[1]
    stamp = _psf_profile(pr[:, None], pc[None, :], render)
    total = stamp.sum()
    if total <= 0:
        raise ConfigError("degenerate PSF stamp; check psf_sigma and psf_radius")
    return stamp / total, rlo, clo


def _galaxy_profile(dr, dc, shape: np.ndarray) -> np.ndarray:
    bulge_frac, disk_scale, bulge_scale, ellip, angle, axis_adj = shape
    ca, sa = math.cos(angle), math.sin(angle)
    a = ca * dr + sa * dc
    b = -sa * dr + ca * dc
    q_disk = max(1.0 - ellip, 1e-3)
    q_bulge = max(1.0 - ellip * axis_adj, 1e-3)
    r_disk = np.sqrt(a * a + (b / q_disk) ** 2)
    r_bulge2 = a * a + (b / q_bulge) ** 2
    bulge = np.exp(-r_bulge2 / (2.0 * bulge_scale**2))
    disk = np.exp(-r_disk / disk_scale)
    return bulge_frac * bulge + (1.0 - bulge_frac) * disk


def _galaxy_stamp(
    u: np.ndarray, shape: np.ndarray, render: RenderConfig
) -> tuple[np.ndarray, int, int]:
    """PSF-convolved bulge-and-disk stamp, normalized to unit sum.

    The profile and the PSF are sampled on the same pixel-aligned subgrid at
    ``oversample`` points per pixel axis; the convolution is cut to the
    L-infinity support radius and renormalized.
    """
    os_, r = render.oversample, render.psf_radius
    rlo, rhi = _support_range(u[0], r)
    clo, chi = _support_range(u[1], r)
    nr, nc = (rhi - rlo + 1), (chi - clo + 1)
    # subpixel sample offsets relative to the source position
    sub = (np.arange(os_) + 0.5) / os_
    gr = (rlo + np.add.outer(np.arange(nr), sub).ravel()) - u[0]
    gc = (clo + np.add.outer(np.arange(nc), sub).ravel()) - u[1]
    prof = _galaxy_profile(gr[:, None], gc[None, :], shape)
    # PSF kernel on the same subgrid pitch, symmetric support
    kr = int(math.ceil(r * os_))
    ko = np.arange(-kr, kr + 1) / os_
    kern = _psf_profile(ko[:, None], ko[None, :], render)
    conv = fftconvolve(prof, kern, mode="same")
    conv *= _taper(np.maximum(np.abs(gr[:, None]), np.abs(gc[None, :])) / r)
    stamp = conv.reshape(nr, os_, nc, os_).mean(axis=(1, 3))
    stamp = np.maximum(stamp, 0.0)
    total = stamp.sum()
    if total <= 0:
        raise ConfigError("degenerate galaxy stamp; check shape priors")
    return stamp / total, rlo, clo


def render_mean(catalog: Catalog, render: RenderConfig) -> np.ndarray:
    """Expected photoelectron counts: background plus per-source stamps."""
    h, w = catalog.image_dims
    mean = np.full((h, w), 0.0, dtype=np.float64)
    mean += np.asarray(render.background, dtype=np.float64)
    for s in catalog.sources:
        if not (0 <= s.row < h and 0 <= s.col < w):
            raise ConfigError(f"source at ({s.row}, {s.col}) out of bounds")
        u = np.array([s.row, s.col])
        if s.kind == SourceKind.STAR:
            stamp, rlo, clo = _star_stamp(u, render)
        else:
            stamp, rlo, clo = _galaxy_stamp(u, np.asarray(s.shape), render)
        amp = s.flux * render.gain
        r0, r1 = max(rlo, 0), min(rlo + stamp.shape[0], h)
        c0, c1 = max(clo, 0), min(clo + stamp.shape[1], w)
        if r0 < r1 and c0 < c1:
            mean[r0:r1, c0:c1] += amp * stamp[r0 - rlo : r1 - rlo, c0 - clo : c1 - clo]
    return mean


def sample_image(
    mean: np.ndarray,
    noise_model: str,
    rng: np.random.Generator,
    render: RenderConfig | None = None,
    seed: int | None = None,
) -> ImageGrid:
    """Per-pixel independent noise around the expected intensity."""
    mean = np.asarray(mean, dtype=np.float64)
    if np.any(mean < 0):
        raise ConfigError("negative expected intensity")
    if noise_model == "poisson":
        pixels = rng.poisson(mean).astype(np.float32)
    elif noise_model == "gaussian_approx":
        pixels = (mean + rng.standard_normal(mean.shape) * np.sqrt(mean)).astype(np.float32)
    else:
        raise ConfigError(f"unknown noise model {noise_model!r}")
    if render is None:
        render = RenderConfig(background=0.0, psf_sigma=1.0, psf_radius=1.0,
                              noise_model=noise_model)
    return ImageGrid(pixels=pixels, render=render, seed=seed)


def ancestral_sample(
    prior: PriorConfig,
    render: RenderConfig,
    dims: tuple[int, int],
    n: int,
    seed: int,
    config: CheckerboardConfig,
) -> list[tuple[TiledCatalog, ImageGrid]]:
    """n independent joint draws (catalog, image); catalogs come back tiled with
    nuisance objects rendered into the images but excluded from slots.

    Image i uses the derived stream (seed, i), so outputs are deterministic by
    index regardless of n or parallelism.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    out = []
    for i in range(n):
        stream = rngmod.numpy_stream(seed, i)
        catalog = sample_catalog(prior, dims, stream)
        tiled = tile_catalog(catalog, config)
        mean = render_mean(catalog, render)
        image = sample_image(mean, render.noise_model, stream, render=render, seed=seed)
        out.append((tiled, image))
    return out


def render_semisynthetic(
    catalog: Catalog, render: RenderConfig, rng: np.random.Generator
) -> ImageGrid:
    """Noisy image conditioned on an externally supplied catalog."""
    mean = render_mean(catalog, render)
    return sample_image(mean, render.noise_model, rng, render=render)
