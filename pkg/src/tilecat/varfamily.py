"""The variational family: per-slot conditional densities, within-tile
permutation marginalization, rank-factorized log-density, and sampling.

Density conventions (fixed across the package so log-probabilities are
comparable between models):

* position measured in pixel^2 within the tile rectangle (compound
  categorical-uniform over a G x G sub-cell grid, uniform within the chosen
  sub-cell, so a slot's position density is softmax(c) * (G/T)^2);
* flux measured as log-flux (Gaussian);
* galaxy shape measured in transformed coordinates (diagonal Gaussian; see
  simulator.shape_to_unconstrained);
* presence and kind are Bernoulli masses.

An absent slot contributes only log(1 - sigmoid(detect_logit)).

The within-rank density of a tile with M slots is the uniform mixture over all
M! slot orderings of the chain of slot conditionals, where the conditional of
a slot depends on which other slots are visible as context. Callers therefore
supply one parameter grid per visible-subset (2^M - 1 network passes); the
permutation sum reuses those grids.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .catalogs import SHAPE_DIM, CheckerboardConfig, TiledCatalog, rank_grid
from .errors import ConfigError
from .simulator import ImageGrid, shape_from_unconstrained, shape_to_unconstrained

__all__ = [
    "TileDistParams",
    "TileBatch",
    "slot_log_prob",
    "slot_log_prob_grid",
    "rank_log_prob",
    "catalog_log_prob",
    "sample_posterior",
    "sample_posterior_batch",
    "mode_catalog",
    "mode_catalog_batch",
    "encode_context_batch",
    "proper_subsets",
    "params_for_subset",
    "image_to_tensor",
]

_LOG_2PI = math.log(2.0 * math.pi)
_LOGSD_CLAMP = 12.0  # generous; only guards pathological weights


def subcell_grid_default(tile_side: int) -> int:
    return 2 * tile_side


def param_count(subcell_grid: int) -> int:
    """detect 1 + subcell G^2 + flux 2 + kind 1 + shape 12."""
    return subcell_grid * subcell_grid + 4 + 2 * SHAPE_DIM


@dataclass(frozen=True, eq=False)
class TileDistParams:
    """Distribution parameters for one slot over every tile: raw tensor of
    shape (B, P, H', W') with the slicing fixed by the sub-cell grid size."""

    raw: torch.Tensor
    subcell_grid: int
    tile_side: int

    def __post_init__(self):
        g2 = self.subcell_grid * self.subcell_grid
        if self.raw.shape[1] != param_count(self.subcell_grid):
            raise ConfigError(
                f"expected {param_count(self.subcell_grid)} parameter channels, "
                f"got {self.raw.shape[1]}"
            )
        object.__setattr__(self, "_g2", g2)

    @property
    def detect_logit(self) -> torch.Tensor:
        return self.raw[:, 0]

    @property
    def subcell_logits(self) -> torch.Tensor:
        return self.raw[:, 1 : 1 + self._g2]

    @property
    def flux_mean(self) -> torch.Tensor:
        return self.raw[:, 1 + self._g2]

    @property
    def flux_logsd(self) -> torch.Tensor:
        return self.raw[:, 2 + self._g2].clamp(-_LOGSD_CLAMP, _LOGSD_CLAMP)

    @property
    def type_logit(self) -> torch.Tensor:
        return self.raw[:, 3 + self._g2]

    @property
    def shape_mean(self) -> torch.Tensor:
        return self.raw[:, 4 + self._g2 : 4 + self._g2 + SHAPE_DIM]

    @property
    def shape_logsd(self) -> torch.Tensor:
        lo = 4 + self._g2 + SHAPE_DIM
        return self.raw[:, lo : lo + SHAPE_DIM].clamp(-_LOGSD_CLAMP, _LOGSD_CLAMP)


@dataclass(eq=False)
class TileBatch:
    """A batch of tiled catalogs as torch tensors.

    offsets are within-tile positions in [0, T); logflux is log-flux; shape_t
    holds transformed shape coordinates; absent slots are zeros with present
    False. Unlike TiledCatalog, presence need not form a prefix (sampling can
    produce gaps); converters compact and sort on the way out.
    """

    offsets: torch.Tensor  # (B, H', W', M, 2)
    logflux: torch.Tensor  # (B, H', W', M)
    kind: torch.Tensor     # (B, H', W', M) long
    shape_t: torch.Tensor  # (B, H', W', M, 6)
    present: torch.Tensor  # (B, H', W', M) bool
    tile_side: int

    @property
    def batch_size(self) -> int:
        return self.offsets.shape[0]

    @property
    def grid_dims(self) -> tuple[int, int]:
        return self.offsets.shape[1], self.offsets.shape[2]

    @property
    def max_per_tile(self) -> int:
        return self.offsets.shape[3]

    @classmethod
    def empty(
        cls, batch_size: int, grid_dims: tuple[int, int], max_per_tile: int,
        tile_side: int, dtype=torch.float32,
    ) -> "TileBatch":
        hh, ww = grid_dims
        m = max_per_tile
        return cls(
            offsets=torch.zeros(batch_size, hh, ww, m, 2, dtype=dtype),
            logflux=torch.zeros(batch_size, hh, ww, m, dtype=dtype),
            kind=torch.zeros(batch_size, hh, ww, m, dtype=torch.long),
            shape_t=torch.zeros(batch_size, hh, ww, m, SHAPE_DIM, dtype=dtype),
            present=torch.zeros(batch_size, hh, ww, m, dtype=torch.bool),
            tile_side=tile_side,
        )

    @classmethod
    def from_tiled(cls, tiles: list[TiledCatalog], dtype=torch.float32) -> "TileBatch":
        if not tiles:
            raise ConfigError("from_tiled needs at least one catalog")
        t = tiles[0].tile_side
        hh, ww = tiles[0].grid_dims
        m = tiles[0].max_per_tile
        pos = np.stack([tc.pos for tc in tiles])
        present = np.stack([tc.present for tc in tiles])
        flux = np.stack([tc.flux for tc in tiles])
        kind = np.stack([tc.kind for tc in tiles])
        shape = np.stack([tc.shape for tc in tiles])

        origins = np.zeros((hh, ww, 1, 2))
        origins[..., 0, 0] = (np.arange(hh) * t)[:, None]
        origins[..., 0, 1] = (np.arange(ww) * t)[None, :]
        offsets = np.where(present[..., None], pos - origins, 0.0)
        logflux = np.where(present, np.log(np.where(present, flux, 1.0)), 0.0)
        gal = present & (kind == 1)
        shape_t = np.zeros_like(shape)
        if gal.any():
            shape_t[gal] = shape_to_unconstrained(shape[gal])
        return cls(
            offsets=torch.as_tensor(offsets, dtype=dtype),
            logflux=torch.as_tensor(logflux, dtype=dtype),
            kind=torch.as_tensor(kind.astype(np.int64)),
            shape_t=torch.as_tensor(shape_t, dtype=dtype),
            present=torch.as_tensor(present),
            tile_side=t,
        )

    def to_tiled(self, index: int, image_dims: tuple[int, int]) -> TiledCatalog:
        """Extract one catalog, compacting slots to the canonical layout
        (presence prefix, brightest first)."""
        hh, ww = self.grid_dims
        m = self.max_per_tile
        t = self.tile_side
        out = TiledCatalog.empty(image_dims, t, m)
        present = self.present[index].detach().cpu().numpy()
        offsets = self.offsets[index].detach().double().cpu().numpy()
        logflux = self.logflux[index].detach().double().cpu().numpy()
        kind = self.kind[index].detach().cpu().numpy()
        shape_t = self.shape_t[index].detach().double().cpu().numpy()
        for h in range(hh):
            for w in range(ww):
                slots = np.nonzero(present[h, w])[0]
                if slots.size == 0:
                    continue
                flux = np.exp(logflux[h, w, slots])
                order = slots[np.argsort(-flux)]
                for dst, src in enumerate(order):
                    out.pos[h, w, dst] = offsets[h, w, src] + (h * t, w * t)
                    out.flux[h, w, dst] = math.exp(logflux[h, w, src])
                    out.kind[h, w, dst] = int(kind[h, w, src])
                    if kind[h, w, src] == 1:
                        out.shape[h, w, dst] = shape_from_unconstrained(shape_t[h, w, src])
                    out.present[h, w, dst] = True
        return out

    def clone(self) -> "TileBatch":
        return TileBatch(
            offsets=self.offsets.clone(),
            logflux=self.logflux.clone(),
            kind=self.kind.clone(),
            shape_t=self.shape_t.clone(),
            present=self.present.clone(),
            tile_side=self.tile_side,
        )


def image_to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """ImageGrid or array -> (1, 1, H, W) tensor."""
    pixels = image.pixels if isinstance(image, ImageGrid) else np.asarray(image)
    return torch.as_tensor(pixels, dtype=dtype)[None, None]


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

def _gauss_lp(x, mean, logsd):
    sd = torch.exp(logsd)
    return -0.5 * ((x - mean) / sd) ** 2 - logsd - 0.5 * _LOG_2PI


def slot_log_prob_grid(
    params: TileDistParams, batch: TileBatch, slot: int
) -> torch.Tensor:
    """Per-tile log-density (B, H', W') of the given slot's observation under
    the slot conditional with these parameters. Finite at every tile."""
    g = params.subcell_grid
    t = float(params.tile_side)
    present = batch.present[..., slot]
    off = batch.offsets[..., slot, :]

    cell_rc = torch.clamp((off * (g / t)).long(), 0, g - 1)
    cell = cell_rc[..., 0] * g + cell_rc[..., 1]  # (B, H', W')
    logsm = F.log_softmax(params.subcell_logits, dim=1)
    pos_lp = torch.gather(logsm, 1, cell.unsqueeze(1)).squeeze(1)
    pos_lp = pos_lp + 2.0 * math.log(g / t)

    flux_lp = _gauss_lp(batch.logflux[..., slot], params.flux_mean, params.flux_logsd)

    galaxy = batch.kind[..., slot] == 1
    kind_lp = torch.where(
        galaxy, F.logsigmoid(params.type_logit), F.logsigmoid(-params.type_logit)
    )
    shape_lp = _gauss_lp(
        batch.shape_t[..., slot, :].movedim(-1, 1),
        params.shape_mean,
        params.shape_logsd,
    ).sum(dim=1)
    shape_lp = torch.where(galaxy, shape_lp, torch.zeros_like(shape_lp))

    present_lp = F.logsigmoid(params.detect_logit) + pos_lp + flux_lp + kind_lp + shape_lp
    absent_lp = F.logsigmoid(-params.detect_logit)
    return torch.where(present, present_lp, absent_lp)


def slot_log_prob(
    params: np.ndarray,
    observed,
    tile_origin: tuple[float, float],
    config: CheckerboardConfig,
    subcell_grid: int | None = None,
) -> float:
    """Scalar convenience form: one slot's parameter vector (P,), one Source or
    None, for the tile whose top-left pixel corner is tile_origin."""
    g = subcell_grid or subcell_grid_default(config.tile_side)
    raw = torch.as_tensor(np.asarray(params, dtype=np.float64))[None, :, None, None]
    tdp = TileDistParams(raw=raw, subcell_grid=g, tile_side=config.tile_side)
    batch = TileBatch.empty(1, (1, 1), 1, config.tile_side, dtype=torch.float64)
    if observed is not None:
        t = config.tile_side
        orow = observed.row - tile_origin[0]
        ocol = observed.col - tile_origin[1]
        if not (0 <= orow < t and 0 <= ocol < t):
            raise ConfigError("observed position outside the tile")
        batch.present[0, 0, 0, 0] = True
        batch.offsets[0, 0, 0, 0] = torch.tensor([orow, ocol], dtype=torch.float64)
        batch.logflux[0, 0, 0, 0] = math.log(observed.flux)
        batch.kind[0, 0, 0, 0] = int(observed.kind)
        if observed.shape is not None:
            batch.shape_t[0, 0, 0, 0] = torch.as_tensor(
                shape_to_unconstrained(np.asarray(observed.shape))
            )
    return float(slot_log_prob_grid(tdp, batch, 0)[0, 0, 0])


def proper_subsets(m: int) -> list[frozenset]:
    """All strict subsets of {0..m-1}, smallest first."""
    out = []
    for size in range(m):
        out.extend(frozenset(c) for c in itertools.combinations(range(m), size))
    return out


def rank_log_prob(
    params_by_subset, batch: TileBatch, k: int, config: CheckerboardConfig
) -> torch.Tensor:
    """Log-density (B,) of the rank-k tiles: per tile, the log of the uniform
    average over all M! slot orderings of the slot-conditional chain, summed
    over the rank's tiles.

    ``params_by_subset`` maps frozenset visible-slot subsets (the conditioning
    context within the tile) to TileDistParams; for M=1 a bare TileDistParams
    is accepted.
    """
    m = config.max_per_tile
    if m > 6:
        raise ConfigError(
            "max_per_tile > 6 is unsupported: the within-tile density "
            "enumerates M! orderings; use a matching-based bound instead"
        )
    if isinstance(params_by_subset, TileDistParams):
        params_by_subset = {frozenset(): params_by_subset}

    # one slot-density grid per (visible subset, slot) pair, shared across
    # permutations
    table: dict[tuple[frozenset, int], torch.Tensor] = {}

    def lp(subset: frozenset, slot: int) -> torch.Tensor:
        key = (subset, slot)
        if key not in table:
            table[key] = slot_log_prob_grid(params_by_subset[subset], batch, slot)
        return table[key]

    perm_lps = []
    for sigma in itertools.permutations(range(m)):
        total = None
        for i, slot in enumerate(sigma):
            term = lp(frozenset(sigma[:i]), slot)
            total = term if total is None else total + term
        perm_lps.append(total)
    tile_lp = torch.logsumexp(torch.stack(perm_lps), dim=0) - math.log(
        math.factorial(m)
    )

    grid = torch.as_tensor(rank_grid(batch.grid_dims, config.ranks))
    mask = (grid == k).to(tile_lp.dtype)
    return (tile_lp * mask).sum(dim=(1, 2))


# ---------------------------------------------------------------------------
# Context encoding (torch, batched; mirrors catalogs.encode_masked)
# ---------------------------------------------------------------------------

def _flux_feature_t(logflux: torch.Tensor, config: CheckerboardConfig) -> torch.Tensor:
    mag = config.zero_point - 2.5 * logflux / math.log(10.0)
    return (config.flux_threshold - mag) / 5.0


def _encode_one_t(
    batch: TileBatch,
    tile_visible: torch.Tensor,   # (H', W') or (B, H', W') bool
    slot_visible: torch.Tensor,   # (B, H', W', M) bool
    config: CheckerboardConfig,
    include_counts: bool,
    include_positions: bool,
    include_fluxes: bool,
    dtype,
) -> torch.Tensor:
    b = batch.batch_size
    hh, ww = batch.grid_dims
    m = batch.max_per_tile
    if tile_visible.dim() == 2:
        tile_visible = tile_visible.unsqueeze(0).expand(b, hh, ww)
    vis = slot_visible & batch.present & tile_visible.unsqueeze(-1)

    data = torch.zeros(b, 1 + 3 * m, hh, ww, dtype=dtype)
    mask = torch.zeros(b, 1 + m, hh, ww, dtype=dtype)
    if include_counts:
        counts = (batch.present & tile_visible.unsqueeze(-1)).sum(dim=-1)
        data[:, 0] = counts.to(dtype) / m
        mask[:, 0] = tile_visible.to(dtype)
    if include_positions or include_fluxes:
        # canonical set encoding: pack visible slots into the leading channel
        # blocks brightest first (matches catalogs._encode_one)
        keys = torch.where(
            vis, -batch.logflux.double(), torch.full_like(batch.logflux, torch.inf, dtype=torch.float64)
        )
        order = torch.argsort(keys, dim=-1, stable=True)
        vis_g = torch.gather(vis, -1, order).to(dtype)
        if include_positions:
            off = torch.gather(
                batch.offsets.to(dtype), 3, order.unsqueeze(-1).expand(-1, -1, -1, -1, 2)
            ) / batch.tile_side
            data[:, 1 : 1 + 3 * m : 3] = (off[..., 0] * vis_g).movedim(-1, 1)
            data[:, 2 : 2 + 3 * m : 3] = (off[..., 1] * vis_g).movedim(-1, 1)
        if include_fluxes:
            ff = _flux_feature_t(torch.gather(batch.logflux, -1, order).to(dtype), config)
            data[:, 3 : 3 + 3 * m : 3] = (ff * vis_g).movedim(-1, 1)
        mask[:, 1:] = vis_g.movedim(-1, 1)
    return torch.cat([data, mask], dim=1)


def encode_context_batch(
    batch: TileBatch,
    config: CheckerboardConfig,
    k: int,
    visible_slots,
    feature_set: str = "minimal",
    dtype=torch.float32,
    within_source: "TileBatch | None" = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(cross, within) stacked data+mask tensors for predicting rank-k slots
    with the given within-tile visible subset. ``within_source`` lets callers
    take the within-tile context from a different batch than the cross-tile
    context (used when replacing contexts with sampled ones)."""
    if feature_set not in ("minimal", "rich"):
        raise ConfigError(f"unknown feature_set {feature_set!r}")
    rich = feature_set == "rich"
    wsrc = within_source if within_source is not None else batch
    hh, ww = batch.grid_dims
    m = batch.max_per_tile
    grid = torch.as_tensor(rank_grid((hh, ww), config.ranks))

    cross = _encode_one_t(
        batch,
        grid < k,
        torch.ones_like(batch.present),
        config,
        include_counts=True,
        include_positions=rich,
        include_fluxes=rich,
        dtype=dtype,
    )
    slot_sel = torch.zeros(1, 1, 1, m, dtype=torch.bool)
    for i in visible_slots:
        slot_sel[..., int(i)] = True
    within = _encode_one_t(
        wsrc,
        grid == k,
        slot_sel.expand_as(wsrc.present),
        config,
        include_counts=False,
        include_positions=True,
        include_fluxes=rich,
        dtype=dtype,
    )
    return cross, within


def params_for_subset(
    net,
    feats: torch.Tensor,
    batch: TileBatch,
    config: CheckerboardConfig,
    k: int,
    subset,
    feature_set: str,
    within_source: "TileBatch | None" = None,
) -> TileDistParams:
    """One neighborhood+head pass for rank k with the given visible subset."""
    dtype = feats.dtype
    cross, within = encode_context_batch(
        batch, config, k, subset, feature_set, dtype=dtype, within_source=within_source
    )
    nbhd = net.neighborhood_forward(cross, within)
    raw = net.head_forward(feats, nbhd)
    return TileDistParams(raw=raw, subcell_grid=net.config.subcell, tile_side=config.tile_side)


def catalog_log_prob(
    net,
    images: torch.Tensor,
    batch: TileBatch,
    config: CheckerboardConfig,
    feature_set: str = "minimal",
    context_override: TileBatch | None = None,
    feats: torch.Tensor | None = None,
    per_rank: bool = False,
) -> torch.Tensor:
    """Joint variational log-density (B,) of the batch's catalogs.

    Sums rank_log_prob over ranks with parameters produced by the network
    conditioned on the image and the masked earlier-rank catalog. If
    ``context_override`` is given, cross-tile conditioning contexts come from
    it (the scored rank's own within-tile slot contexts stay with ``batch``).
    With ``per_rank`` the unsummed (K, B) rank terms come back instead.
    """
    if feats is None:
        wanted = next(net.parameters()).dtype
        feats = net.backbone_forward(net.normalize(images.to(wanted)))
    m = config.max_per_tile
    ctx = context_override if context_override is not None else batch
    terms = []
    for k in range(config.ranks):
        params_by_subset = {
            subset: params_for_subset(
                net, feats, ctx, config, k, subset, feature_set, within_source=batch
            )
            for subset in proper_subsets(m)
        }
        terms.append(rank_log_prob(params_by_subset, batch, k, config))
    stacked = torch.stack(terms)
    return stacked if per_rank else stacked.sum(dim=0)


# ---------------------------------------------------------------------------
# Sampling and mode decoding
# ---------------------------------------------------------------------------

def _sample_slot_values(
    params: TileDistParams, generator, config: CheckerboardConfig, dtype
):
    """Draw one slot's values for every tile. Returns dict of tensors."""
    g = params.subcell_grid
    t = float(config.tile_side)
    detect_p = torch.sigmoid(params.detect_logit.to(dtype))
    pres = torch.bernoulli(detect_p, generator=generator).bool()

    logits = params.subcell_logits.movedim(1, -1).reshape(-1, g * g)
    cell = torch.multinomial(
        torch.softmax(logits.double(), dim=-1), 1, generator=generator
    ).reshape(detect_p.shape)
    cell_r = torch.div(cell, g, rounding_mode="floor")
    cell_c = cell % g
    jitter = torch.rand((*detect_p.shape, 2), generator=generator, dtype=dtype)
    off_r = (cell_r.to(dtype) + jitter[..., 0]) * (t / g)
    off_c = (cell_c.to(dtype) + jitter[..., 1]) * (t / g)

    eps = torch.randn(detect_p.shape, generator=generator, dtype=dtype)
    logflux = params.flux_mean.to(dtype) + eps * torch.exp(params.flux_logsd.to(dtype))
    kind = torch.bernoulli(
        torch.sigmoid(params.type_logit.to(dtype)), generator=generator
    ).long()
    eps6 = torch.randn((*detect_p.shape, SHAPE_DIM), generator=generator, dtype=dtype)
    shape_t = params.shape_mean.movedim(1, -1).to(dtype) + eps6 * torch.exp(
        params.shape_logsd.movedim(1, -1).to(dtype)
    )
    return {
        "present": pres,
        "offsets": torch.stack([off_r, off_c], dim=-1),
        "logflux": logflux,
        "kind": kind,
        "shape_t": shape_t,
    }


def _mode_slot_values(params: TileDistParams, threshold: float, config, dtype):
    g = params.subcell_grid
    t = float(config.tile_side)
    detect_p = torch.sigmoid(params.detect_logit.to(dtype))
    pres = detect_p >= threshold
    cell = params.subcell_logits.argmax(dim=1)
    cell_r = torch.div(cell, g, rounding_mode="floor")
    cell_c = cell % g
    off_r = (cell_r.to(dtype) + 0.5) * (t / g)
    off_c = (cell_c.to(dtype) + 0.5) * (t / g)
    kind = (params.type_logit > 0).long()
    return {
        "present": pres,
        "offsets": torch.stack([off_r, off_c], dim=-1),
        "logflux": params.flux_mean.to(dtype),
        "kind": kind,
        "shape_t": params.shape_mean.movedim(1, -1).to(dtype),
    }


def _write_slot(state: TileBatch, values: dict, i: int, rank_mask: torch.Tensor):
    """Write slot i at rank-mask tiles; zeros where not present.

    Tiles outside rank_mask keep their previously written values: ranks are
    decoded in sequence and each pass must not disturb the others."""
    pres = values["present"] & rank_mask
    presf = pres.to(state.offsets.dtype)
    rm = rank_mask.unsqueeze(-1)
    state.present[..., i] |= pres
    state.offsets[..., i, :] = torch.where(
        rm, values["offsets"] * presf.unsqueeze(-1), state.offsets[..., i, :]
    )
    state.logflux[..., i] = torch.where(
        rank_mask, values["logflux"] * presf, state.logflux[..., i]
    )
    state.kind[..., i] = torch.where(
        rank_mask, values["kind"] * pres.long(), state.kind[..., i]
    )
    gal = pres & (values["kind"] == 1)
    state.shape_t[..., i, :] = torch.where(
        rm,
        values["shape_t"] * gal.to(state.offsets.dtype).unsqueeze(-1),
        state.shape_t[..., i, :],
    )


def _decode_loop(net, images, config, feature_set, slot_fn, dtype=None):
    """Shared rank-ascending slot-by-slot loop for sampling and mode decoding."""
    if dtype is None:
        dtype = next(net.parameters()).dtype
    with torch.no_grad():
        feats = net.backbone_forward(net.normalize(images.to(dtype)))
        b = images.shape[0]
        hh, ww = feats.shape[2], feats.shape[3]
        state = TileBatch.empty(b, (hh, ww), config.max_per_tile, config.tile_side, dtype)
        grid = torch.as_tensor(rank_grid((hh, ww), config.ranks))
        for k in range(config.ranks):
            rank_mask = (grid == k).unsqueeze(0).expand(b, hh, ww)
            for i in range(config.max_per_tile):
                params = params_for_subset(
                    net, feats, state, config, k, range(i), feature_set
                )
                _write_slot(state, slot_fn(params), i, rank_mask)
    return state


def sample_posterior_batch(
    net,
    images: torch.Tensor,
    config: CheckerboardConfig,
    generator: torch.Generator,
    feature_set: str = "minimal",
    dtype=None,
) -> TileBatch:
    """One posterior draw per image, sampled rank-ascending with each rank's
    tiles drawn in parallel and slots sequential."""
    if dtype is None:
        dtype = next(net.parameters()).dtype
    return _decode_loop(
        net, images, config, feature_set,
        lambda p: _sample_slot_values(p, generator, config, dtype), dtype,
    )


def mode_catalog_batch(
    net,
    images: torch.Tensor,
    config: CheckerboardConfig,
    threshold: float = 0.5,
    feature_set: str = "minimal",
    dtype=None,
) -> TileBatch:
    if not 0.0 < threshold < 1.0:
        raise ConfigError("threshold must be in (0, 1)")
    if dtype is None:
        dtype = next(net.parameters()).dtype
    return _decode_loop(
        net, images, config, feature_set,
        lambda p: _mode_slot_values(p, threshold, config, dtype), dtype,
    )


def sample_posterior(
    net,
    image,
    config: CheckerboardConfig,
    n_samples: int,
    seed: int,
    feature_set: str = "minimal",
    chunk: int = 256,
) -> list[TiledCatalog]:
    """n_samples independent posterior catalogs for one image."""
    from . import rng as rngmod

    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    x = image_to_tensor(image)
    dims = (x.shape[2], x.shape[3])
    out = []
    done = 0
    while done < n_samples:
        b = min(chunk, n_samples - done)
        gen = rngmod.torch_generator(seed, "posterior", done)
        batch = sample_posterior_batch(
            net, x.expand(b, -1, -1, -1), config, gen, feature_set
        )
        out.extend(batch.to_tiled(i, dims) for i in range(b))
        done += b
    return out


def mode_catalog(
    net,
    image,
    config: CheckerboardConfig,
    threshold: float = 0.5,
    feature_set: str = "minimal",
) -> TiledCatalog:
    """Greedy rank-ascending point estimate with a detection threshold."""
    x = image_to_tensor(image)
    batch = mode_catalog_batch(net, x, config, threshold, feature_set)
    return batch.to_tiled(0, (x.shape[2], x.shape[3]))
