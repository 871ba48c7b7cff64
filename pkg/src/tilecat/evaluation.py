"""Evaluation and calibration: matched detection metrics, held-out catalog
log-likelihood, confusion-matrix calibration checks, and border probes.

The matching metrics compare a predicted catalog against ground truth through a
maximum-cardinality bipartite matching under a distance cap; ties among maximum
matchings are broken by minimum total matched distance. Calibration draws pairs
(true catalog, approximate-posterior sample) and counts objects inside randomly
placed probe regions; a calibrated sampler makes the resulting count matrix
symmetric in expectation, so transpose-pair asymmetry measures miscalibration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.stats import binomtest, ttest_rel

from . import rng as rngmod
from .catalogs import (
    DEFAULT_ZERO_POINT,
    Catalog,
    CheckerboardConfig,
    Source,
    SourceKind,
    TiledCatalog,
    flux_to_mag,
    mag_to_flux,
    rank_grid,
)
from .errors import ConfigError
from .simulator import (
    PriorConfig,
    RenderConfig,
    ancestral_sample,
    render_mean,
    sample_catalog_arrays,
    shape_to_unconstrained,
)
from .varfamily import (
    TileBatch,
    catalog_log_prob,
    params_for_subset,
    sample_posterior_batch,
    _sample_slot_values,
    _write_slot,
)

__all__ = [
    "MatchSpec",
    "MatchResult",
    "match_catalogs",
    "MagnitudeBinnedMetrics",
    "BinMetrics",
    "magnitude_binned_metrics",
    "HeldoutResult",
    "heldout_loglik",
    "paired_loglik_pvalue",
    "RegionSpec",
    "sample_regions",
    "count_in_regions",
    "select_interest_mask",
    "ConfusionMatrix",
    "sbc_confusion",
    "BorderProbeResult",
    "border_probe",
    "DetectionMaps",
    "conditional_detection_maps",
]


# ---------------------------------------------------------------------------
# Bipartite matching metrics
# ---------------------------------------------------------------------------

_NORMS = ("euclidean", "linf")


@dataclass(frozen=True)
class MatchSpec:
    """How detections are matched to ground-truth objects.

    A truth/prediction pair may match only if their separation is at most
    ``distance_threshold`` pixels under ``distance_norm`` and, when
    ``flux_match_threshold`` is set, their magnitudes differ by at most that
    much. ``magnitude_threshold`` filters both catalogs to sources at or
    brighter than the given magnitude before matching.
    """

    distance_threshold: float
    distance_norm: str = "euclidean"
    magnitude_threshold: float | None = None
    flux_match_threshold: float | None = None
    zero_point: float = DEFAULT_ZERO_POINT

    def __post_init__(self):
        if not self.distance_threshold > 0:
            raise ConfigError("distance_threshold must be positive")
        if self.distance_norm not in _NORMS:
            raise ConfigError(f"distance_norm must be one of {_NORMS}")
        if self.flux_match_threshold is not None and not self.flux_match_threshold > 0:
            raise ConfigError("flux_match_threshold must be positive")


@dataclass(frozen=True)
class MatchResult:
    """Matching outcome. ``pairs`` holds (truth index, prediction index) into
    the original catalogs; counts refer to the magnitude-filtered sets. Empty
    denominators report 0 metrics with the corresponding flag set."""

    pairs: tuple[tuple[int, int], ...]
    n_truth: int
    n_pred: int
    precision: float
    recall: float
    f1: float
    empty_truth: bool
    empty_pred: bool

    @property
    def n_matched(self) -> int:
        return len(self.pairs)

    @property
    def undefined(self) -> bool:
        """True when any reported metric had a zero denominator. With no
        matches the f1 denominator (precision + recall) is always zero, so
        this is exactly the no-match condition."""
        return len(self.pairs) == 0


def _mag_filter(catalog: Catalog, spec: MatchSpec) -> np.ndarray:
    """Indices of sources surviving the magnitude cut, original order."""
    n = len(catalog.sources)
    if spec.magnitude_threshold is None or n == 0:
        return np.arange(n)
    mags = flux_to_mag(catalog.fluxes(), spec.zero_point)
    return np.nonzero(mags <= spec.magnitude_threshold)[0]


def _pair_distances(a: np.ndarray, b: np.ndarray, norm: str) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    if norm == "euclidean":
        return np.sqrt((diff**2).sum(axis=2))
    return np.abs(diff).max(axis=2)


def match_catalogs(truth: Catalog, pred: Catalog, spec: MatchSpec) -> MatchResult:
    """Maximum-cardinality matching between truth and predictions.

    Implemented as a linear assignment on a cost matrix where admissible pairs
    cost their distance and inadmissible pairs cost more than any full set of
    admissible ones, which maximizes the number of admissible pairs first and
    minimizes total matched distance second. Recall is the matched fraction of
    truth, precision the matched fraction of predictions.
    """
    ti = _mag_filter(truth, spec)
    pi = _mag_filter(pred, spec)
    nt, npred = len(ti), len(pi)
    pairs: list[tuple[int, int]] = []
    if nt and npred:
        tpos = truth.positions()[ti]
        ppos = pred.positions()[pi]
        dist = _pair_distances(tpos, ppos, spec.distance_norm)
        allowed = dist <= spec.distance_threshold
        if spec.flux_match_threshold is not None:
            tmag = flux_to_mag(truth.fluxes()[ti], spec.zero_point)
            pmag = flux_to_mag(pred.fluxes()[pi], spec.zero_point)
            allowed &= (
                np.abs(tmag[:, None] - pmag[None, :]) <= spec.flux_match_threshold
            )
        if allowed.any():
            # one inadmissible edge costs more than every admissible edge combined
            big = spec.distance_threshold * (min(nt, npred) + 1) + 1.0
            cost = np.where(allowed, dist, big)
            rows, cols = linear_sum_assignment(cost)
            keep = allowed[rows, cols]
            pairs = [
                (int(ti[r]), int(pi[c]))
                for r, c in zip(rows[keep], cols[keep])
            ]
    m = len(pairs)
    precision = m / npred if npred else 0.0
    recall = m / nt if nt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MatchResult(
        pairs=tuple(sorted(pairs)),
        n_truth=nt,
        n_pred=npred,
        precision=precision,
        recall=recall,
        f1=f1,
        empty_truth=nt == 0,
        empty_pred=npred == 0,
    )


@dataclass(frozen=True)
class BinMetrics:
    """Counts and rates for one magnitude bin. Rates are None for empty bins."""

    mag_lo: float
    mag_hi: float
    n_truth: int
    n_matched_truth: int
    recall: float | None
    n_pred: int
    n_matched_pred: int
    precision: float | None


@dataclass(frozen=True)
class MagnitudeBinnedMetrics:
    edges: tuple[float, ...]
    bins: tuple[BinMetrics, ...]


def _bin_index(mags: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Left-closed bins, final bin closed on the right; -1 outside range."""
    idx = np.searchsorted(edges, mags, side="right") - 1
    idx[mags == edges[-1]] = len(edges) - 2
    idx[(mags < edges[0]) | (mags > edges[-1])] = -1
    return idx


def magnitude_binned_metrics(
    truth: Catalog,
    pred: Catalog | Sequence[Catalog],
    edges: Sequence[float],
    spec: MatchSpec,
) -> MagnitudeBinnedMetrics:
    """Detection rates binned by magnitude.

    One global matching is computed per predicted catalog (so pooled per-bin
    counts agree exactly with the unbinned matching), then truth sources are
    binned by true magnitude for recall and predictions by predicted magnitude
    for precision. A sequence of predicted catalogs pools counts across them.
    """
    edges_arr = np.asarray(edges, dtype=np.float64)
    if edges_arr.ndim != 1 or len(edges_arr) < 2 or np.any(np.diff(edges_arr) <= 0):
        raise ConfigError("edges must be an increasing sequence of at least 2 values")
    preds = [pred] if isinstance(pred, Catalog) else list(pred)
    nb = len(edges_arr) - 1
    n_truth = np.zeros(nb, dtype=np.int64)
    n_match_t = np.zeros(nb, dtype=np.int64)
    n_pred = np.zeros(nb, dtype=np.int64)
    n_match_p = np.zeros(nb, dtype=np.int64)

    tmag_all = flux_to_mag(truth.fluxes(), spec.zero_point) if len(truth) else np.zeros(0)
    ti = _mag_filter(truth, spec)
    tbin = _bin_index(tmag_all[ti], edges_arr) if len(ti) else np.zeros(0, dtype=np.int64)
    for b in range(nb):
        n_truth[b] = int((tbin == b).sum()) * len(preds)

    for p in preds:
        res = match_catalogs(truth, p, spec)
        pmag_all = flux_to_mag(p.fluxes(), spec.zero_point) if len(p) else np.zeros(0)
        pif = _mag_filter(p, spec)
        pbin = _bin_index(pmag_all[pif], edges_arr) if len(pif) else np.zeros(0, dtype=np.int64)
        for b in range(nb):
            n_pred[b] += int((pbin == b).sum())
        matched_t = {t for t, _ in res.pairs}
        matched_p = {q for _, q in res.pairs}
        for pos, orig in enumerate(ti):
            if orig in matched_t and tbin[pos] >= 0:
                n_match_t[tbin[pos]] += 1
        for pos, orig in enumerate(pif):
            if orig in matched_p and pbin[pos] >= 0:
                n_match_p[pbin[pos]] += 1

    rows = []
    for b in range(nb):
        rows.append(BinMetrics(
            mag_lo=float(edges_arr[b]),
            mag_hi=float(edges_arr[b + 1]),
            n_truth=int(n_truth[b]),
            n_matched_truth=int(n_match_t[b]),
            recall=float(n_match_t[b] / n_truth[b]) if n_truth[b] else None,
            n_pred=int(n_pred[b]),
            n_matched_pred=int(n_match_p[b]),
            precision=float(n_match_p[b] / n_pred[b]) if n_pred[b] else None,
        ))
    return MagnitudeBinnedMetrics(edges=tuple(edges_arr.tolist()), bins=tuple(rows))


# ---------------------------------------------------------------------------
# Held-out catalog log-likelihood
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HeldoutResult:
    """Total held-out log-likelihood with a per-image breakdown. The standard
    error is for the total (sd of per-image values times sqrt(n)); it is None
    for a single image, where the spread is undefined."""

    total: float
    per_image: np.ndarray
    std_error: float | None


def heldout_loglik(
    net,
    pairs: Sequence[tuple[TiledCatalog, "object"]],
    config: CheckerboardConfig,
    feature_set: str = "minimal",
    batch_size: int = 32,
) -> HeldoutResult:
    """Log-density of held-out ground-truth catalogs under the fitted family."""
    if not pairs:
        raise ConfigError("heldout_loglik needs at least one (catalog, image) pair")
    dtype = next(net.parameters()).dtype
    per: list[np.ndarray] = []
    with torch.no_grad():
        for lo in range(0, len(pairs), batch_size):
            chunk = pairs[lo : lo + batch_size]
            images = torch.stack([
                torch.as_tensor(im.pixels, dtype=dtype) for _, im in chunk
            ]).unsqueeze(1)
            batch = TileBatch.from_tiled([t for t, _ in chunk], dtype=dtype)
            ll = catalog_log_prob(net, images, batch, config, feature_set)
            per.append(ll.detach().double().cpu().numpy())
    per_image = np.concatenate(per)
    n = len(per_image)
    se = float(per_image.std(ddof=1) * math.sqrt(n)) if n > 1 else None
    return HeldoutResult(total=float(per_image.sum()), per_image=per_image, std_error=se)


def paired_loglik_pvalue(per_a: np.ndarray, per_b: np.ndarray) -> float:
    """One-sided paired t-test p-value for mean(per_a) > mean(per_b)."""
    a = np.asarray(per_a, dtype=np.float64)
    b = np.asarray(per_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ConfigError("paired test needs two equal-length vectors, n >= 2")
    d = a - b
    if np.allclose(d.std(ddof=1), 0.0):
        return 0.0 if d.mean() > 0 else 1.0
    return float(ttest_rel(a, b, alternative="greater").pvalue)


# ---------------------------------------------------------------------------
# Probe regions and interest selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegionSpec:
    """Geometry of the probe regions used for calibration counts.

    ``block`` regions are squares of ``block_tiles`` x ``block_tiles`` adjacent
    tiles. ``strip`` regions are thin rectangles of one tile side by
    ``strip_thickness`` pixels, centered on a boundary between two adjacent
    tiles (both orientations), half the area on each side. Placement is
    uniform over all valid positions.
    """

    kind: str
    block_tiles: int = 2
    strip_thickness: float = 0.25

    def __post_init__(self):
        if self.kind not in ("block", "strip"):
            raise ConfigError("region kind must be 'block' or 'strip'")
        if self.block_tiles < 1:
            raise ConfigError("block_tiles must be >= 1")
        if not self.strip_thickness > 0:
            raise ConfigError("strip_thickness must be positive")


def sample_regions(
    region: RegionSpec,
    grid_dims: tuple[int, int],
    tile_side: int,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """(n, 4) array of [row_lo, row_hi, col_lo, col_hi) in pixel coordinates."""
    hh, ww = grid_dims
    t = float(tile_side)
    if region.kind == "block":
        b = region.block_tiles
        if hh < b or ww < b:
            raise ConfigError(f"grid {grid_dims} too small for a {b}-tile block")
        hr = rng.integers(0, hh - b + 1, size=n)
        wc = rng.integers(0, ww - b + 1, size=n)
        out = np.empty((n, 4), dtype=np.float64)
        out[:, 0] = hr * t
        out[:, 1] = (hr + b) * t
        out[:, 2] = wc * t
        out[:, 3] = (wc + b) * t
        return out
    # strips straddle interior borders; enumerate both orientations uniformly
    half = region.strip_thickness / 2.0
    n_v = hh * (ww - 1)   # vertical borders, strip spans one tile of rows
    n_h = (hh - 1) * ww   # horizontal borders, strip spans one tile of cols
    if n_v + n_h == 0:
        raise ConfigError("grid has no interior tile borders for strip regions")
    pick = rng.integers(0, n_v + n_h, size=n)
    out = np.empty((n, 4), dtype=np.float64)
    vert = pick < n_v
    hv = pick[vert] // (ww - 1)
    wv = pick[vert] % (ww - 1) + 1
    out[vert, 0] = hv * t
    out[vert, 1] = hv * t + t
    out[vert, 2] = wv * t - half
    out[vert, 3] = wv * t + half
    ph = pick[~vert] - n_v
    hb = ph // ww + 1
    wb = ph % ww
    out[~vert, 0] = hb * t - half
    out[~vert, 1] = hb * t + half
    out[~vert, 2] = wb * t
    out[~vert, 3] = wb * t + t
    return out


def count_in_regions(
    rows: np.ndarray,
    cols: np.ndarray,
    draw_id: np.ndarray,
    regions: np.ndarray,
) -> np.ndarray:
    """Per-draw object counts inside that draw's region (half-open bounds)."""
    n = regions.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    if len(rows):
        r = regions[draw_id]
        inside = (
            (rows >= r[:, 0]) & (rows < r[:, 1])
            & (cols >= r[:, 2]) & (cols < r[:, 3])
        )
        np.add.at(counts, draw_id[inside], 1)
    return counts


def select_interest_mask(
    arrays: Mapping[str, np.ndarray],
    dims: tuple[int, int],
    config: CheckerboardConfig,
) -> np.ndarray:
    """Vectorized objects-of-interest selection over stacked prior draws.

    Mirrors the per-catalog tiling rule: keep sources at or above the flux
    threshold, at most max_per_tile per tile, brightest first (ties broken by
    storage index). Returns a boolean mask over the flat object arrays.
    """
    hh, ww = config.grid_dims(dims)
    t, m = config.tile_side, config.max_per_tile
    flux = np.asarray(arrays["flux"], dtype=np.float64)
    total = len(flux)
    mask = np.zeros(total, dtype=bool)
    cand = np.nonzero(flux >= config.min_flux)[0]
    if not len(cand):
        return mask
    th = np.floor(arrays["row"][cand] / t).astype(np.int64)
    tw = np.floor(arrays["col"][cand] / t).astype(np.int64)
    key = (np.asarray(arrays["draw_id"][cand], dtype=np.int64) * hh + th) * ww + tw
    # primary: tile key; secondary: decreasing flux; tertiary: storage index
    order = np.lexsort((cand, -flux[cand], key))
    sorted_key = key[order]
    new_group = np.r_[True, np.diff(sorted_key) != 0]
    starts = np.nonzero(new_group)[0]
    group_of = np.cumsum(new_group) - 1
    rank_in_group = np.arange(len(sorted_key)) - starts[group_of]
    mask[cand[order[rank_in_group < m]]] = True
    return mask


# ---------------------------------------------------------------------------
# Calibration confusion matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Joint counts of (true objects, sampled objects) inside probe regions.

    Row index is the count under the data-generating catalog, column index the
    count under the approximate-posterior sample. A calibrated sampler makes
    the matrix symmetric in expectation; the asymmetry of a transpose pair is
    |c_ij - c_ji| / min(c_ij, c_ji), reported only where both entries have
    at least ``min_support`` observations.
    """

    counts: np.ndarray
    region: RegionSpec
    n_draws: int
    min_support: int = 100

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or (c < 0).any():
            raise ConfigError("counts must be a square nonnegative matrix")
        object.__setattr__(self, "counts", c)

    @property
    def size(self) -> int:
        return self.counts.shape[0]

    def supported_pairs(self) -> list[tuple[int, int]]:
        """Transpose pairs (i < j) where both entries meet min_support."""
        out = []
        for i in range(self.size):
            for j in range(i + 1, self.size):
                if min(self.counts[i, j], self.counts[j, i]) >= self.min_support:
                    out.append((i, j))
        return out

    def asymmetries(self) -> dict[tuple[int, int], float]:
        return {
            (i, j): float(
                abs(int(self.counts[i, j]) - int(self.counts[j, i]))
                / min(self.counts[i, j], self.counts[j, i])
            )
            for i, j in self.supported_pairs()
        }

    def pair_ratio(self, i: int, j: int) -> float:
        """counts[i, j] / counts[j, i]; infinite when the denominator is 0."""
        num, den = int(self.counts[i, j]), int(self.counts[j, i])
        return float("inf") if den == 0 else num / den

    def pair_pvalue(self, i: int, j: int) -> float:
        """Two-sided binomial test of symmetry for one transpose pair."""
        num, den = int(self.counts[i, j]), int(self.counts[j, i])
        if num + den == 0:
            return 1.0
        return float(binomtest(num, num + den, 0.5).pvalue)


def _confusion_from_counts(
    true_counts: np.ndarray, samp_counts: np.ndarray, region: RegionSpec
) -> ConfusionMatrix:
    size = int(max(true_counts.max(initial=0), samp_counts.max(initial=0))) + 1
    counts = np.zeros((size, size), dtype=np.int64)
    np.add.at(counts, (true_counts, samp_counts), 1)
    return ConfusionMatrix(counts=counts, region=region, n_draws=len(true_counts))


def _batch_positions(state: TileBatch) -> list[np.ndarray]:
    """Per-image (n, 2) absolute positions of present slots in a TileBatch."""
    present = state.present.detach().cpu().numpy()
    offsets = state.offsets.detach().double().cpu().numpy()
    hh, ww = state.grid_dims
    t = state.tile_side
    origins = np.zeros((hh, ww, 1, 2))
    origins[..., 0, 0] = (np.arange(hh) * t)[:, None]
    origins[..., 0, 1] = (np.arange(ww) * t)[None, :]
    out = []
    for b in range(state.batch_size):
        out.append((offsets[b] + origins)[present[b]])
    return out


def sbc_confusion(
    net,
    prior: PriorConfig,
    render: RenderConfig,
    dims: tuple[int, int],
    config: CheckerboardConfig,
    region: RegionSpec,
    n_draws: int,
    seed: int,
    sampler: str = "net",
    feature_set: str = "minimal",
    batch_size: int = 64,
) -> ConfusionMatrix:
    """Simulation-based calibration counts.

    Each draw ancestrally samples a (catalog, image) pair, draws one catalog
    from the approximate posterior for that image, places a probe region
    uniformly at random, and tallies the two objects-of-interest counts inside
    it. ``sampler='oracle'`` replaces the network with a fresh prior draw,
    which is exchangeable with the true catalog by construction, so the
    expected matrix is exactly symmetric; since neither count then depends on
    pixels, rendering is skipped and the draws are fully vectorized.
    """
    if n_draws < 1:
        raise ConfigError("n_draws must be >= 1")
    if sampler not in ("net", "oracle"):
        raise ConfigError("sampler must be 'net' or 'oracle'")
    grid_dims = config.grid_dims(dims)

    if sampler == "oracle":
        true_arrays = sample_catalog_arrays(
            prior, dims, n_draws, rngmod.numpy_stream(seed, "sbc-true")
        )
        samp_arrays = sample_catalog_arrays(
            prior, dims, n_draws, rngmod.numpy_stream(seed, "sbc-approx")
        )
        regions = sample_regions(
            region, grid_dims, config.tile_side, n_draws,
            rngmod.numpy_stream(seed, "sbc-region"),
        )
        tc = []
        for arrays in (true_arrays, samp_arrays):
            sel = select_interest_mask(arrays, dims, config)
            tc.append(count_in_regions(
                arrays["row"][sel], arrays["col"][sel],
                arrays["draw_id"][sel], regions,
            ))
        return _confusion_from_counts(tc[0], tc[1], region)

    true_counts = np.empty(n_draws, dtype=np.int64)
    samp_counts = np.empty(n_draws, dtype=np.int64)
    dtype = next(net.parameters()).dtype
    done = 0
    bi = 0
    while done < n_draws:
        b = min(batch_size, n_draws - done)
        pairs = ancestral_sample(
            prior, render, dims, b, rngmod.derive_seed(seed, "sbc-sim", bi), config
        )
        images = torch.stack([
            torch.as_tensor(im.pixels, dtype=dtype) for _, im in pairs
        ]).unsqueeze(1)
        gen = rngmod.torch_generator(seed, "sbc-draw", bi)
        state = sample_posterior_batch(net, images, config, gen, feature_set)
        regions = sample_regions(
            region, grid_dims, config.tile_side, b,
            rngmod.numpy_stream(seed, "sbc-region", bi),
        )
        samp_pos = _batch_positions(state)
        for i, (tiled, _) in enumerate(pairs):
            tp = tiled.pos[tiled.present]
            true_counts[done + i] = int(np.sum(
                (tp[:, 0] >= regions[i, 0]) & (tp[:, 0] < regions[i, 1])
                & (tp[:, 1] >= regions[i, 2]) & (tp[:, 1] < regions[i, 3])
            ))
            sp = samp_pos[i]
            samp_counts[done + i] = int(np.sum(
                (sp[:, 0] >= regions[i, 0]) & (sp[:, 0] < regions[i, 1])
                & (sp[:, 1] >= regions[i, 2]) & (sp[:, 1] < regions[i, 3])
            ))
        done += b
        bi += 1
    return _confusion_from_counts(true_counts, samp_counts, region)


# ---------------------------------------------------------------------------
# Border response probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BorderProbeResult:
    """Correct-count frequencies for a single star swept across a tile border.

    ``frequency[i, j]`` is the fraction of noisy replicates whose posterior
    sample contains exactly one object, for magnitude i at vertical offset j
    (pixels relative to the probed border; 0 is on the border).
    """

    magnitudes: tuple[float, ...]
    offsets: tuple[float, ...]
    frequency: np.ndarray
    n_noise: int
    border_row: float
    star_col: float

    def curve(self, magnitude: float) -> np.ndarray:
        i = self.magnitudes.index(magnitude)
        return self.frequency[i]

    def frequency_at(self, magnitude: float, offset: float) -> float:
        i = self.magnitudes.index(magnitude)
        j = self.offsets.index(offset)
        return float(self.frequency[i, j])


def border_probe(
    net,
    config: CheckerboardConfig,
    render: RenderConfig,
    dims: tuple[int, int],
    magnitudes: Sequence[float],
    offsets: Sequence[float],
    n_noise: int,
    seed: int,
    border_row: float | None = None,
    star_col: float | None = None,
    feature_set: str = "minimal",
) -> BorderProbeResult:
    """Frequency of sampling exactly one object for a star near a tile border.

    For each magnitude and each vertical offset, one star is placed at
    (border_row + offset, star_col), its noise-free rendering is computed once,
    n_noise noisy replicates are drawn, and one posterior catalog is sampled
    per replicate. Defaults probe the horizontal border nearest the image
    center, with the star centered within a tile column.
    """
    if n_noise < 1:
        raise ConfigError("n_noise must be >= 1")
    h, w = dims
    t = config.tile_side
    if border_row is None:
        border_row = float((h // (2 * t)) * t)
    if star_col is None:
        star_col = float((w // (2 * t)) * t + t / 2.0)
    mags = [float(m) for m in magnitudes]
    offs = [float(o) for o in offsets]
    freq = np.zeros((len(mags), len(offs)), dtype=np.float64)
    dtype = next(net.parameters()).dtype
    for mi, mag in enumerate(mags):
        flux = float(mag_to_flux(mag, config.zero_point))
        for oi, off in enumerate(offs):
            row = border_row + off
            if not (0 <= row < h):
                raise ConfigError(f"offset {off} places the star outside the image")
            cat = Catalog(
                (Source(row=row, col=star_col, kind=SourceKind.STAR, flux=flux),),
                dims,
            )
            mean = render_mean(cat, render)
            stream = rngmod.numpy_stream(seed, "noise", mi, oi)
            if render.noise_model == "poisson":
                pixels = stream.poisson(mean, size=(n_noise, h, w))
            else:
                pixels = mean + stream.standard_normal((n_noise, h, w)) * np.sqrt(mean)
            images = torch.as_tensor(
                pixels.astype(np.float32), dtype=dtype
            ).unsqueeze(1)
            gen = rngmod.torch_generator(seed, "probe-draw", mi, oi)
            state = sample_posterior_batch(net, images, config, gen, feature_set)
            n_objects = state.present.sum(dim=(1, 2, 3)).cpu().numpy()
            freq[mi, oi] = float(np.mean(n_objects == 1))
    return BorderProbeResult(
        magnitudes=tuple(mags),
        offsets=tuple(offs),
        frequency=freq,
        n_noise=n_noise,
        border_row=float(border_row),
        star_col=float(star_col),
    )


# ---------------------------------------------------------------------------
# Conditional detection maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DetectionMaps:
    """Per-tile probability of at least one detection, optionally conditioned
    on fixed outcomes for a rank-downward-closed set of tiles. Clamped tiles
    report their deterministic indicator."""

    probability: np.ndarray
    clamped: np.ndarray
    n_samples: int


def _clamp_tensors(
    conditioning: Mapping[tuple[int, int], Sequence[Source]],
    config: CheckerboardConfig,
    grid_dims: tuple[int, int],
    dtype,
):
    """Validate clamp outcomes and convert them to slot tensors."""
    hh, ww = grid_dims
    t, m = config.tile_side, config.max_per_tile
    clamped = np.zeros((hh, ww), dtype=bool)
    state = TileBatch.empty(1, grid_dims, m, t, dtype=dtype)
    for (h, w), sources in conditioning.items():
        if not (0 <= h < hh and 0 <= w < ww):
            raise ConfigError(f"clamped tile ({h}, {w}) outside grid {grid_dims}")
        if len(sources) > m:
            raise ConfigError(f"tile ({h}, {w}) clamps {len(sources)} > {m} sources")
        clamped[h, w] = True
        ordered = sorted(sources, key=lambda s: -s.flux)
        for i, s in enumerate(ordered):
            off_r, off_c = s.row - h * t, s.col - w * t
            if not (0 <= off_r < t and 0 <= off_c < t):
                raise ConfigError(
                    f"source at ({s.row}, {s.col}) not inside tile ({h}, {w})"
                )
            if s.flux < config.min_flux:
                raise ConfigError(
                    "clamped sources must be at or above the flux threshold"
                )
            state.present[0, h, w, i] = True
            state.offsets[0, h, w, i, 0] = off_r
            state.offsets[0, h, w, i, 1] = off_c
            state.logflux[0, h, w, i] = math.log(s.flux)
            state.kind[0, h, w, i] = int(s.kind)
            if s.kind == SourceKind.GALAXY:
                shape_t = shape_to_unconstrained(np.asarray(s.shape)[None, :])[0]
                state.shape_t[0, h, w, i] = torch.as_tensor(shape_t, dtype=dtype)
    return clamped, state


def conditional_detection_maps(
    net,
    image,
    config: CheckerboardConfig,
    conditioning: Mapping[tuple[int, int], Sequence[Source]] | None = None,
    n_samples: int = 64,
    seed: int = 0,
    feature_set: str = "minimal",
) -> DetectionMaps:
    """Per-tile detection-probability map, marginal or conditional.

    ``conditioning`` maps tile coordinates to their fixed outcomes (an empty
    sequence clamps a tile to "no detections"). The clamped set must be
    rank-downward-closed: every tile of rank lower than any clamped tile must
    itself be clamped, since the family factorizes in rank order and cannot
    condition a tile's distribution on later-rank outcomes. Unclamped earlier
    ranks are integrated by sampling; within each tile the no-detection chain
    is evaluated exactly, so for max_per_tile = 1 the map is exact given the
    sampled cross-tile context.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    conditioning = dict(conditioning or {})
    dtype = next(net.parameters()).dtype
    pixels = torch.as_tensor(np.asarray(image.pixels), dtype=dtype)
    images = pixels.unsqueeze(0).unsqueeze(0)
    hh = images.shape[2] // config.tile_side
    ww = images.shape[3] // config.tile_side
    grid = rank_grid((hh, ww), config.ranks)
    clamped, clamp_state = _clamp_tensors(conditioning, config, (hh, ww), dtype)
    if clamped.any():
        kmax = int(grid[clamped].max())
        if not clamped[grid < kmax].all():
            raise ConfigError(
                "conditioning must be rank-downward-closed; conditioning on a "
                "later-rank tile than an unconditioned one is rejected"
            )

    n = n_samples
    gen = rngmod.torch_generator(seed, "maps")
    with torch.no_grad():
        feats = net.backbone_forward(net.normalize(images)).expand(n, -1, -1, -1)
        state = TileBatch.empty(n, (hh, ww), config.max_per_tile, config.tile_side, dtype)
        grid_t = torch.as_tensor(grid)
        clamped_t = torch.as_tensor(clamped)
        no_detect = torch.ones(n, hh, ww, dtype=torch.float64)
        for k in range(config.ranks):
            rank_mask = (grid_t == k).unsqueeze(0).expand(n, hh, ww)
            # exact within-tile chain: P(empty tile) multiplies the absence
            # probability of each slot given all earlier slots absent, which is
            # the pre-write state with earlier slots marked visible
            slot_params = []
            for i in range(config.max_per_tile):
                params = params_for_subset(
                    net, feats, state, config, k, range(i), feature_set
                )
                slot_params.append(params)
                p_det = torch.sigmoid(params.detect_logit.double())
                no_detect = torch.where(rank_mask, no_detect * (1.0 - p_det), no_detect)
            for i in range(config.max_per_tile):
                params = slot_params[i] if i == 0 else params_for_subset(
                    net, feats, state, config, k, range(i), feature_set
                )
                values = _sample_slot_values(params, gen, config, dtype)
                _write_slot(state, values, i, rank_mask)
            # clamped tiles of this rank take their fixed outcome as context
            over = rank_mask & clamped_t.unsqueeze(0)
            if over.any():
                fill = over.unsqueeze(-1).expand(-1, -1, -1, config.max_per_tile)
                state.present[fill] = clamp_state.present.expand(n, -1, -1, -1)[fill]
                state.offsets[fill] = clamp_state.offsets.expand(n, -1, -1, -1, -1)[fill]
                state.logflux[fill] = clamp_state.logflux.expand(n, -1, -1, -1)[fill]
                state.kind[fill] = clamp_state.kind.expand(n, -1, -1, -1)[fill]
                state.shape_t[fill] = clamp_state.shape_t.expand(n, -1, -1, -1, -1)[fill]

    prob = (1.0 - no_detect).mean(dim=0).cpu().numpy()
    if clamped.any():
        has_obj = clamp_state.present[0].any(dim=-1).cpu().numpy()
        prob[clamped] = has_obj[clamped].astype(np.float64)
    return DetectionMaps(probability=prob, clamped=clamped, n_samples=n_samples)
