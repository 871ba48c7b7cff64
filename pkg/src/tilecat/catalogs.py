"""Catalog domain types, the tiling bijection, ranks, and masked encodings.

Conventions used everywhere downstream:

* Positions are continuous (row, col) pixel coordinates; pixel (i, j) covers the
  unit square [i, i+1) x [j, j+1) with center (i + 0.5, j + 0.5). A position in
  [0, H) x [0, W) is in bounds.
* Tile (h, w) with 1-based indices covers rows [(h-1)*T, h*T) and the analogous
  column range. Internal arrays are 0-based; the 1-based convention appears only
  in the tile-index API (`rank_of`, `rank_partition`).
* Brightness: magnitude = zero_point - 2.5*log10(flux), so brighter means a
  smaller magnitude. Flux is in linear units ("nanomaggies" by convention).
* Within a tile, slots are stored brightest-first; absent slots hold zeros and a
  presence flag of False, and presence flags always form a prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError

__all__ = [
    "DEFAULT_ZERO_POINT",
    "SHAPE_DIM",
    "SourceKind",
    "Source",
    "Catalog",
    "CheckerboardConfig",
    "TiledCatalog",
    "MaskedCatalog",
    "MaskedContext",
    "ConditioningState",
    "mag_to_flux",
    "flux_to_mag",
    "tile_catalog",
    "untile_catalog",
    "rank_of",
    "rank_grid",
    "rank_partition",
    "encode_masked",
    "context_channel_count",
    "flux_feature",
]

DEFAULT_ZERO_POINT = 22.5
SHAPE_DIM = 6

# Per-slot context features: (row offset / T, col offset / T, flux feature).
SLOT_FEATURE_DIM = 3


def mag_to_flux(mag, zero_point: float = DEFAULT_ZERO_POINT):
    return 10.0 ** ((zero_point - np.asarray(mag, dtype=np.float64)) / 2.5)


def flux_to_mag(flux, zero_point: float = DEFAULT_ZERO_POINT):
    return zero_point - 2.5 * np.log10(np.asarray(flux, dtype=np.float64))


class SourceKind(IntEnum):
    STAR = 0
    GALAXY = 1


@dataclass(frozen=True)
class Source:
    """One object: position, kind, flux, and (for galaxies) a 6-vector shape."""

    row: float
    col: float
    kind: SourceKind
    flux: float
    shape: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.flux > 0:
            raise ConfigError(f"flux must be positive, got {self.flux}")
        if self.kind == SourceKind.STAR:
            if self.shape is not None:
                raise ConfigError("stars carry no shape vector")
        else:
            if self.shape is None or len(self.shape) != SHAPE_DIM:
                raise ConfigError(f"galaxies need a {SHAPE_DIM}-vector shape")
            object.__setattr__(self, "shape", tuple(float(v) for v in self.shape))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.row, self.col], dtype=np.float64)

    def magnitude(self, zero_point: float = DEFAULT_ZERO_POINT) -> float:
        return float(flux_to_mag(self.flux, zero_point))


@dataclass(frozen=True)
class Catalog:
    """A set of sources in an H x W image. Order carries no meaning."""

    sources: tuple[Source, ...]
    image_dims: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        h, w = self.image_dims
        object.__setattr__(self, "image_dims", (int(h), int(w)))
        for s in self.sources:
            if not (0 <= s.row < h and 0 <= s.col < w):
                raise ConfigError(
                    f"source at ({s.row}, {s.col}) outside image {self.image_dims}"
                )

    def __len__(self) -> int:
        return len(self.sources)

    def positions(self) -> np.ndarray:
        """(n, 2) array of (row, col)."""
        if not self.sources:
            return np.zeros((0, 2), dtype=np.float64)
        return np.array([[s.row, s.col] for s in self.sources], dtype=np.float64)

    def fluxes(self) -> np.ndarray:
        return np.array([s.flux for s in self.sources], dtype=np.float64)

    def kinds(self) -> np.ndarray:
        return np.array([int(s.kind) for s in self.sources], dtype=np.int8)

    def shapes(self) -> np.ndarray:
        """(n, 6) array; zero rows for stars."""
        out = np.zeros((len(self.sources), SHAPE_DIM), dtype=np.float64)
        for i, s in enumerate(self.sources):
            if s.shape is not None:
                out[i] = s.shape
        return out


@dataclass(frozen=True)
class CheckerboardConfig:
    """Tiling and conditioning geometry.

    ranks (K) must be a perfect square; same-rank tiles then differ by a multiple
    of sqrt(K) in each grid coordinate. ``image_radius`` is the allowed influence
    radius of image pixels on a tile's outputs (pixels, L-infinity, measured from
    the tile's anchor pixel); ``context_radius`` the analogous radius for
    cross-tile conditioning (tiles). ``flux_threshold`` is a magnitude: sources
    at or brighter than it are objects of interest, the rest are nuisance.
    """

    tile_side: int
    ranks: int
    max_per_tile: int
    object_radius: float
    image_radius: int
    context_radius: int
    flux_threshold: float
    zero_point: float = DEFAULT_ZERO_POINT

    def __post_init__(self):
        if self.tile_side < 1:
            raise ConfigError("tile_side must be >= 1")
        if self.max_per_tile < 1:
            raise ConfigError("max_per_tile must be >= 1")
        s = math.isqrt(self.ranks)
        if self.ranks < 1 or s * s != self.ranks:
            raise ConfigError(f"ranks must be a perfect square, got {self.ranks}")
        if self.object_radius < 0 or self.image_radius < 0 or self.context_radius < 0:
            raise ConfigError("radii must be nonnegative")

    @property
    def sqrt_ranks(self) -> int:
        return math.isqrt(self.ranks)

    @property
    def min_flux(self) -> float:
        """Flux of the faintest object of interest."""
        return float(mag_to_flux(self.flux_threshold, self.zero_point))

    @classmethod
    def structure_matched(
        cls,
        tile_side: int,
        object_radius: float,
        max_per_tile: int,
        flux_threshold: float,
        zero_point: float = DEFAULT_ZERO_POINT,
    ) -> "CheckerboardConfig":
        """Smallest configuration under which same-rank tiles are conditionally
        independent given the image and earlier ranks: sqrt(K) = ceil(2R/T + 1),
        r_X = ceil(R), r_N = ceil(2R/T)."""
        s = math.ceil(2.0 * object_radius / tile_side + 1.0)
        return cls(
            tile_side=tile_side,
            ranks=s * s,
            max_per_tile=max_per_tile,
            object_radius=object_radius,
            image_radius=math.ceil(object_radius),
            context_radius=math.ceil(2.0 * object_radius / tile_side),
            flux_threshold=flux_threshold,
            zero_point=zero_point,
        )

    def grid_dims(self, image_dims: tuple[int, int]) -> tuple[int, int]:
        h, w = image_dims
        if h % self.tile_side or w % self.tile_side:
            raise DimensionError(
                f"image dims {image_dims} not divisible by tile side {self.tile_side}"
            )
        return h // self.tile_side, w // self.tile_side


def rank_of(h: int, w: int, ranks: int) -> int:
    """Checkerboard rank of tile (h, w), 1-based tile indices, 0-based rank."""
    s = math.isqrt(ranks)
    if s * s != ranks:
        raise ConfigError(f"ranks must be a perfect square, got {ranks}")
    if h < 1 or w < 1:
        raise ConfigError("tile indices are 1-based")
    return ((h - 1) % s) * s + ((w - 1) % s)


def rank_grid(grid_dims: tuple[int, int], ranks: int) -> np.ndarray:
    """(H', W') array of ranks, 0-based tile indices internally."""
    s = math.isqrt(ranks)
    if s * s != ranks:
        raise ConfigError(f"ranks must be a perfect square, got {ranks}")
    hh, ww = grid_dims
    rows = np.arange(hh) % s
    cols = np.arange(ww) % s
    return (rows[:, None] * s + cols[None, :]).astype(np.int64)


def rank_partition(grid_dims: tuple[int, int], ranks: int) -> list[frozenset]:
    """Tile-index sets C_0..C_{K-1} (1-based (h, w) tuples)."""
    grid = rank_grid(grid_dims, ranks)
    out = []
    for k in range(ranks):
        hs, ws = np.nonzero(grid == k)
        out.append(frozenset((int(h) + 1, int(w) + 1) for h, w in zip(hs, ws)))
    return out


@dataclass(frozen=True, eq=False)
class TiledCatalog:
    """Objects of interest arranged on the (H', W') tile grid with M slots per
    tile, plus the nuisance side list (below threshold or beyond the cap).

    ``pos`` holds absolute pixel coordinates; absent slots are all-zero with
    presence False. Slots are brightest-first.
    """

    tile_side: int
    image_dims: tuple[int, int]
    pos: np.ndarray       # (H', W', M, 2) float64
    flux: np.ndarray      # (H', W', M) float64
    kind: np.ndarray      # (H', W', M) int8
    shape: np.ndarray     # (H', W', M, 6) float64
    present: np.ndarray   # (H', W', M) bool
    nuisance: Catalog

    @property
    def grid_dims(self) -> tuple[int, int]:
        return self.pos.shape[0], self.pos.shape[1]

    @property
    def max_per_tile(self) -> int:
        return self.pos.shape[2]

    @property
    def counts(self) -> np.ndarray:
        return self.present.sum(axis=2).astype(np.int64)

    @classmethod
    def empty(
        cls, image_dims: tuple[int, int], tile_side: int, max_per_tile: int
    ) -> "TiledCatalog":
        h, w = image_dims
        if h % tile_side or w % tile_side:
            raise DimensionError(
                f"image dims {image_dims} not divisible by tile side {tile_side}"
            )
        hh, ww = h // tile_side, w // tile_side
        m = max_per_tile
        return cls(
            tile_side=tile_side,
            image_dims=(h, w),
            pos=np.zeros((hh, ww, m, 2)),
            flux=np.zeros((hh, ww, m)),
            kind=np.zeros((hh, ww, m), dtype=np.int8),
            shape=np.zeros((hh, ww, m, SHAPE_DIM)),
            present=np.zeros((hh, ww, m), dtype=bool),
            nuisance=Catalog((), image_dims),
        )

    def validate(self) -> None:
        """Check the structural invariants; raises ConfigError on violation."""
        t = self.tile_side
        hh, ww, m = self.present.shape
        cnt = self.present.sum(axis=2)
        # prefix property: presence never follows absence within a tile
        order = np.arange(m)[None, None, :]
        if not np.all(self.present == (order < cnt[:, :, None])):
            raise ConfigError("presence flags must form a per-tile prefix")
        th, tw = np.nonzero(cnt > 0)
        for h, w in zip(th, tw):
            for i in range(int(cnt[h, w])):
                r, c = self.pos[h, w, i]
                if not (h * t <= r < (h + 1) * t and w * t <= c < (w + 1) * t):
                    raise ConfigError(
                        f"slot position ({r}, {c}) outside tile ({h + 1}, {w + 1})"
                    )
        if not np.all(self.flux[self.present] > 0):
            raise ConfigError("present slots must have positive flux")


def tile_catalog(catalog: Catalog, config: CheckerboardConfig) -> TiledCatalog:
    """Assign sources to tiles; keep per tile the at-most-M brightest sources at
    or above the flux threshold as objects of interest, the rest as nuisance."""
    hh, ww = config.grid_dims(catalog.image_dims)
    t, m = config.tile_side, config.max_per_tile
    tiled = TiledCatalog.empty(catalog.image_dims, t, m)
    if not catalog.sources:
        return tiled

    pos = catalog.positions()
    flux = catalog.fluxes()
    tiles_h = np.floor(pos[:, 0] / t).astype(np.int64)
    tiles_w = np.floor(pos[:, 1] / t).astype(np.int64)
    interesting = flux >= config.min_flux

    nuisance: list[Source] = [s for s, ok in zip(catalog.sources, interesting) if not ok]
    # group candidate indices per tile, brightest first
    cand = np.nonzero(interesting)[0]
    order = cand[np.lexsort((-flux[cand], tiles_w[cand], tiles_h[cand]))]
    i = 0
    while i < len(order):
        j = i
        h, w = tiles_h[order[i]], tiles_w[order[i]]
        while j < len(order) and tiles_h[order[j]] == h and tiles_w[order[j]] == w:
            j += 1
        group = order[i:j]
        for slot, idx in enumerate(group[:m]):
            s = catalog.sources[idx]
            tiled.pos[h, w, slot] = (s.row, s.col)
            tiled.flux[h, w, slot] = s.flux
            tiled.kind[h, w, slot] = int(s.kind)
            if s.shape is not None:
                tiled.shape[h, w, slot] = s.shape
            tiled.present[h, w, slot] = True
        nuisance.extend(catalog.sources[idx] for idx in group[m:])
        i = j
    return replace(tiled, nuisance=Catalog(tuple(nuisance), catalog.image_dims))


def untile_catalog(
    tiled: TiledCatalog, config: CheckerboardConfig | None = None
) -> Catalog:
    """Flatten the objects of interest back to a Catalog (nuisance excluded)."""
    if config is not None and config.tile_side != tiled.tile_side:
        raise ConfigError("config tile side disagrees with the tiled catalog")
    sources = []
    hh, ww, m = tiled.present.shape
    th, tw, ti = np.nonzero(tiled.present)
    for h, w, i in zip(th, tw, ti):
        kind = SourceKind(int(tiled.kind[h, w, i]))
        shape = tuple(tiled.shape[h, w, i]) if kind == SourceKind.GALAXY else None
        sources.append(
            Source(
                row=float(tiled.pos[h, w, i, 0]),
                col=float(tiled.pos[h, w, i, 1]),
                kind=kind,
                flux=float(tiled.flux[h, w, i]),
                shape=shape,
            )
        )
    return Catalog(tuple(sources), tiled.image_dims)


# ---------------------------------------------------------------------------
# Masked context encodings
# ---------------------------------------------------------------------------

def context_channel_count(max_per_tile: int) -> tuple[int, int]:
    """(data channels, mask channels) of one context encoding."""
    return 1 + SLOT_FEATURE_DIM * max_per_tile, 1 + max_per_tile


def flux_feature(flux, config: CheckerboardConfig):
    """Brightness feature: 0 at the interest threshold, ~1 five magnitudes
    brighter. Kept bounded so context channels stay O(1)."""
    mag = flux_to_mag(np.maximum(flux, 1e-30), config.zero_point)
    return (config.flux_threshold - mag) / 5.0


@dataclass(frozen=True)
class ConditioningState:
    """Which tiles and slots the networks may condition on.

    ``cross_tiles`` marks earlier-rank tiles whose full contents are context for
    the cross-tile pathway; ``within_slots`` marks already-processed slots of the
    current rank's own tiles for the within-tile pathway.
    """

    cross_tiles: np.ndarray   # (H', W') bool
    within_slots: np.ndarray  # (H', W', M) bool

    @classmethod
    def empty(cls, grid_dims: tuple[int, int], max_per_tile: int) -> "ConditioningState":
        hh, ww = grid_dims
        return cls(
            cross_tiles=np.zeros((hh, ww), dtype=bool),
            within_slots=np.zeros((hh, ww, max_per_tile), dtype=bool),
        )

    @classmethod
    def prerank(
        cls, config: CheckerboardConfig, grid_dims: tuple[int, int], k: int
    ) -> "ConditioningState":
        """Context for rank k: all tiles of rank < k, no within-tile slots."""
        grid = rank_grid(grid_dims, config.ranks)
        return cls(
            cross_tiles=grid < k,
            within_slots=np.zeros((*grid_dims, config.max_per_tile), dtype=bool),
        )

    @classmethod
    def for_slot(
        cls,
        config: CheckerboardConfig,
        grid_dims: tuple[int, int],
        k: int,
        visible_slots: Iterable[int],
    ) -> "ConditioningState":
        """Context for predicting one slot of rank-k tiles: earlier ranks plus
        the given already-known slot indices within each rank-k tile."""
        grid = rank_grid(grid_dims, config.ranks)
        within = np.zeros((*grid_dims, config.max_per_tile), dtype=bool)
        idx = sorted(set(int(i) for i in visible_slots))
        if idx:
            if idx[0] < 0 or idx[-1] >= config.max_per_tile:
                raise ConfigError(f"slot indices {idx} out of range")
            within[grid == k] = np.isin(
                np.arange(config.max_per_tile), idx
            )
        return cls(cross_tiles=grid < k, within_slots=within)


@dataclass(frozen=True, eq=False)
class MaskedCatalog:
    """Fixed-size context tensor plus its binary mask.

    data: (1 + 3M, H', W') float32 — per-tile count feature then, per slot,
    (row offset / T, col offset / T, flux feature). mask: (1 + M, H', W')
    float32 — tile-visibility flag then per-slot flags. Construction re-zeroes
    data wherever the mask is zero, so data * (1 - expanded mask) == 0 always.
    """

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.data.shape[1:] != self.mask.shape[1:]:
            raise ConfigError("data and mask spatial dims must agree")
        m = (self.mask.shape[0] - 1)
        if self.data.shape[0] != 1 + SLOT_FEATURE_DIM * m:
            raise ConfigError("data/mask channel counts inconsistent")
        data = np.array(self.data, dtype=np.float32)
        mask = (np.asarray(self.mask) != 0).astype(np.float32)
        data *= self.expanded_mask(mask)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    @staticmethod
    def expanded_mask(mask: np.ndarray) -> np.ndarray:
        """Broadcast mask channels onto the data channel layout."""
        m = mask.shape[0] - 1
        return np.concatenate(
            [mask[:1]] + [np.repeat(mask[1 + i : 2 + i], SLOT_FEATURE_DIM, axis=0) for i in range(m)],
            axis=0,
        )

    def stacked(self) -> np.ndarray:
        """Concatenated (data, mask) tensor, the only form fed to networks."""
        return np.concatenate([self.data, self.mask], axis=0)


@dataclass(frozen=True, eq=False)
class MaskedContext:
    """The encoding pair consumed by the neighborhood network."""

    cross: MaskedCatalog
    within: MaskedCatalog


def _encode_one(
    tiled: TiledCatalog,
    tile_visible: np.ndarray,
    slot_visible: np.ndarray,
    config: CheckerboardConfig,
    include_counts: bool,
    include_positions: bool,
    include_fluxes: bool,
) -> MaskedCatalog:
    hh, ww = tiled.grid_dims
    m = tiled.max_per_tile
    t = float(config.tile_side)
    vis = slot_visible & tiled.present & tile_visible[:, :, None]

    data = np.zeros((1 + SLOT_FEATURE_DIM * m, hh, ww), dtype=np.float32)
    mask = np.zeros((1 + m, hh, ww), dtype=np.float32)

    if include_counts:
        counts = (tiled.present & tile_visible[:, :, None]).sum(axis=2)
        data[0] = counts / m
        mask[0] = tile_visible
    slot_flags = np.zeros((m, hh, ww), dtype=np.float32)
    if include_positions or include_fluxes:
        # canonical set encoding: visible slots are packed into the leading
        # channel blocks in decreasing-flux order, so the encoding depends
        # only on the set of visible objects (storage order breaks flux ties)
        keys = np.where(vis, tiled.flux, -np.inf)
        order = np.argsort(-keys, axis=2, kind="stable")
        vis_g = np.take_along_axis(vis, order, axis=2)
        origin_r = (np.arange(hh) * config.tile_side)[:, None, None]
        origin_c = (np.arange(ww) * config.tile_side)[None, :, None]
        off_r = np.take_along_axis((tiled.pos[..., 0] - origin_r) / t, order, axis=2)
        off_c = np.take_along_axis((tiled.pos[..., 1] - origin_c) / t, order, axis=2)
        ff = np.take_along_axis(
            flux_feature(np.where(tiled.present, tiled.flux, 1.0), config),
            order, axis=2,
        )
        for j in range(m):
            v = vis_g[:, :, j]
            base = 1 + SLOT_FEATURE_DIM * j
            if include_positions:
                data[base + 0][v] = off_r[:, :, j][v]
                data[base + 1][v] = off_c[:, :, j][v]
            if include_fluxes:
                data[base + 2][v] = ff[:, :, j][v]
            slot_flags[j] = v
    mask[1:] = slot_flags
    return MaskedCatalog(data=data, mask=mask)


def encode_masked(
    tiled: TiledCatalog,
    visible: ConditioningState,
    feature_set: str = "minimal",
    config: CheckerboardConfig | None = None,
) -> MaskedContext:
    """Encode the conditioning state as the (cross-tile, within-tile) pair.

    minimal: cross-tile tiles contribute per-tile counts only; within-tile slots
    contribute positions only. rich: additionally fluxes on both pathways and
    positions on the cross-tile pathway. Channel layout is fixed; disabled
    features stay zero with zero mask.
    """
    if feature_set not in ("minimal", "rich"):
        raise ConfigError(f"unknown feature_set {feature_set!r}")
    if config is None:
        raise ConfigError("encode_masked requires the checkerboard config")
    rich = feature_set == "rich"
    all_slots = np.ones_like(tiled.present)
    cross = _encode_one(
        tiled,
        visible.cross_tiles,
        all_slots,
        config,
        include_counts=True,
        include_positions=rich,
        include_fluxes=rich,
    )
    within = _encode_one(
        tiled,
        visible.within_slots.any(axis=2),
        visible.within_slots,
        config,
        include_counts=False,
        include_positions=True,
        include_fluxes=rich,
    )
    return MaskedContext(cross=cross, within=within)
