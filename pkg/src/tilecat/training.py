"""Neural posterior estimation trainer.

Training draws (catalog, image) pairs from the simulator, teacher-forces the
conditioning contexts from the true catalogs, and minimizes the negative
variational log-density. The loss can cover all checkerboard ranks or an
unbiased single sampled rank per example (scaled by the rank count).

Every stochastic choice is keyed by (seed, purpose, step) through
counter-based streams, so resuming from a checkpoint (weights + optimizer +
step) reproduces an uninterrupted run bit for bit in fixed-dataset mode.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import rng as rngmod
from .catalogs import Catalog, CheckerboardConfig, TiledCatalog, tile_catalog, untile_catalog
from .errors import ConfigError, TrainingDiverged
from .network import InferenceNet, load_checkpoint, net_dtype, save_checkpoint
from .simulator import ImageGrid, PriorConfig, RenderConfig, ancestral_sample
from .varfamily import TileBatch, catalog_log_prob, sample_posterior_batch

__all__ = [
    "TrainConfig",
    "TrainResult",
    "AUGMENT_OPS",
    "npe_loss",
    "augment_pair",
    "train",
    "exposure_gap",
]

AUGMENT_OPS = ("rot90", "flip_v", "flip_h")


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 8
    lr: float = 1e-3
    lr_schedule: str = "constant"  # or "cosine": half-cosine decay toward zero
    rank_selection: str = "all"  # or "sample": one uniform rank per example, x K
    feature_set: str = "minimal"
    augment: tuple[str, ...] = ()
    dataset_size: int | None = None  # None: fresh simulations every step
    val_size: int = 0
    val_every: int = 0
    checkpoint_every: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    fit_normalizer: bool = True
    normalizer_images: int = 16

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.rank_selection not in ("all", "sample"):
            raise ConfigError(f"unknown rank_selection {self.rank_selection!r}")
        if self.feature_set not in ("minimal", "rich"):
            raise ConfigError(f"unknown feature_set {self.feature_set!r}")
        bad = set(self.augment) - set(AUGMENT_OPS)
        if bad:
            raise ConfigError(f"unknown augment ops {sorted(bad)}")
        if self.dataset_size is not None and self.dataset_size < 1:
            raise ConfigError("dataset_size must be >= 1 when given")
        if self.val_size and not self.val_every:
            raise ConfigError("val_size needs val_every")
        if self.divergence_factor <= 1 or self.divergence_patience < 1:
            raise ConfigError("bad divergence settings")
        object.__setattr__(self, "augment", tuple(self.augment))


@dataclass
class TrainResult:
    net: InferenceNet
    history: list[dict]
    step: int
    diverged: bool = False
    final_checkpoint: Path | None = None


def npe_loss(
    net,
    images: torch.Tensor,
    batch: TileBatch,
    config: CheckerboardConfig,
    feature_set: str = "minimal",
    rank_selection: str = "all",
    generator: torch.Generator | None = None,
    rank_indices: torch.Tensor | None = None,
) -> torch.Tensor:
    """Negative mean variational log-density, teacher-forced.

    ``all`` sums every rank; ``sample`` scores one rank per example scaled by
    the rank count, an unbiased estimate of the full sum (``rank_indices``
    overrides the draw, for tests).
    """
    per = catalog_log_prob(
        net, images, batch, config, feature_set=feature_set, per_rank=True
    )
    if rank_selection == "all":
        return -per.sum(dim=0).mean()
    if rank_selection != "sample":
        raise ConfigError(f"unknown rank_selection {rank_selection!r}")
    b = per.shape[1]
    if rank_indices is None:
        rank_indices = torch.randint(0, config.ranks, (b,), generator=generator)
    sel = per.gather(0, rank_indices.view(1, b)).squeeze(0)
    return -(config.ranks * sel).mean()


# ---------------------------------------------------------------------------
# dihedral augmentation
# ---------------------------------------------------------------------------

def _clamp_open(x: float, high: float) -> float:
    if x >= high:
        return float(np.nextafter(high, 0.0))
    if x < 0.0:
        return 0.0
    return x


def _map_position(r: float, c: float, op: str, dims) -> tuple[float, float]:
    h, w = dims
    if op == "rot90":
        return _clamp_open(w - c, w), _clamp_open(r, h)
    if op == "flip_v":
        return _clamp_open(h - r, h), c
    if op == "flip_h":
        return r, _clamp_open(w - c, w)
    raise ConfigError(f"unknown augment op {op!r}")


def _map_angle(theta: float, op: str) -> float:
    if op == "rot90":
        out = (theta + math.pi / 2.0) % math.pi
    else:
        out = (math.pi - theta) % math.pi
    if out <= 0.0:  # orientation 0 is the same ellipse as pi
        out = float(np.nextafter(math.pi, 0.0))
    return out


def augment_pair(
    pixels: np.ndarray, catalog: Catalog, op: str
) -> tuple[np.ndarray, Catalog]:
    """Apply one dihedral op to an image and its catalog together.

    Positions map so pixel centers stay on pixel centers; galaxy orientation
    angles rotate/reflect accordingly. rot90 (counter-clockwise) requires a
    square image.
    """
    if op == "identity":
        return pixels, catalog
    h, w = pixels.shape
    if op == "rot90":
        if h != w:
            raise ConfigError("rot90 augmentation needs square images")
        out_px = np.ascontiguousarray(np.rot90(pixels))
    elif op == "flip_v":
        out_px = np.ascontiguousarray(np.flipud(pixels))
    elif op == "flip_h":
        out_px = np.ascontiguousarray(np.fliplr(pixels))
    else:
        raise ConfigError(f"unknown augment op {op!r}")

    sources = []
    for s in catalog.sources:
        r2, c2 = _map_position(s.row, s.col, op, (h, w))
        shape = s.shape
        if shape is not None:
            shape = tuple(shape[:4]) + (_map_angle(shape[4], op),) + tuple(shape[5:])
        sources.append(
            type(s)(row=r2, col=c2, kind=s.kind, flux=s.flux, shape=shape)
        )
    return out_px, Catalog(tuple(sources), catalog.image_dims)


def _full_catalog(tiled: TiledCatalog) -> Catalog:
    """Slots plus nuisance objects, flattened."""
    interest = untile_catalog(tiled)
    return Catalog(
        interest.sources + tiled.nuisance.sources, tiled.image_dims
    )


def _augment_batch(pairs, ops, stream, config):
    if not ops:
        return pairs
    choices = ("identity",) + tuple(ops)
    picks = stream.integers(0, len(choices), size=len(pairs))
    out = []
    for (tiled, image), pick in zip(pairs, picks):
        op = choices[pick]
        if op == "identity":
            out.append((tiled, image))
            continue
        px, cat = augment_pair(image.pixels, _full_catalog(tiled), op)
        out.append((tile_catalog(cat, config), ImageGrid(px.astype(np.float32),
                                                         image.render, image.seed)))
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _batch_tensors(pairs, dtype):
    images = torch.stack(
        [torch.as_tensor(im.pixels, dtype=dtype) for _, im in pairs]
    ).unsqueeze(1)
    batch = TileBatch.from_tiled([t for t, _ in pairs], dtype=dtype)
    return images, batch


def _eval_loss(net, pairs, config, feature_set, chunk=32) -> float:
    dtype = net_dtype(net)
    total = 0.0
    n = 0
    with torch.no_grad():
        for lo in range(0, len(pairs), chunk):
            part = pairs[lo : lo + chunk]
            images, batch = _batch_tensors(part, dtype)
            lls = catalog_log_prob(net, images, batch, config, feature_set)
            total += float(-lls.sum())
            n += len(part)
    return total / n


def train(
    net: InferenceNet,
    prior: PriorConfig,
    render: RenderConfig,
    dims: tuple[int, int],
    config: CheckerboardConfig,
    train_config: TrainConfig,
    seed: int,
    out_dir: str | os.PathLike | None = None,
    resume_from: str | os.PathLike | None = None,
    dataset: list[tuple[TiledCatalog, ImageGrid]] | None = None,
) -> TrainResult:
    """Fit the network by teacher-forced NPE.

    A preloaded ``dataset`` fixes the training pairs (overriding
    dataset_size); otherwise dataset_size simulates a fixed dataset up front
    and None simulates fresh batches every step.

    Divergence policy: a non-finite loss aborts immediately; a loss above
    divergence_factor x max(|first loss|, 1) for divergence_patience
    consecutive steps aborts. Both raise TrainingDiverged.
    """
    tc = train_config
    opt = torch.optim.Adam(net.parameters(), lr=tc.lr)
    start = 0
    if resume_from is not None:
        bundle = load_checkpoint(resume_from)
        if bundle.net.config != net.config:
            raise ConfigError("checkpoint architecture disagrees with the network")
        net.load_state_dict(bundle.net.state_dict())
        if bundle.optimizer_state is not None:
            opt.load_state_dict(bundle.optimizer_state)
        start = bundle.step
    if start >= tc.steps:
        raise ConfigError(f"checkpoint step {start} is not before steps={tc.steps}")

    if dataset is not None:
        if not dataset:
            raise ConfigError("preloaded dataset must be non-empty")
    elif tc.dataset_size is not None:
        dataset = ancestral_sample(
            prior, render, dims, tc.dataset_size,
            rngmod.derive_seed(seed, "data"), config,
        )
    val_pairs = None
    if tc.val_size:
        val_pairs = ancestral_sample(
            prior, render, dims, tc.val_size, rngmod.derive_seed(seed, "val"), config
        )

    if start == 0 and tc.fit_normalizer:
        if dataset is not None:
            norm_pairs = dataset[: tc.normalizer_images]
        else:
            norm_pairs = ancestral_sample(
                prior, render, dims, tc.normalizer_images,
                rngmod.derive_seed(seed, "norm"), config,
            )
        net.normalizer.fit([im.pixels for _, im in norm_pairs])

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    dtype = net_dtype(net)
    history: list[dict] = []
    initial: float | None = None
    consecutive_high = 0

    for step in range(start, tc.steps):
        if tc.lr_schedule == "cosine":
            # stateless in the absolute step, so resumed runs stay on curve
            cur = tc.lr * 0.5 * (1.0 + math.cos(math.pi * step / tc.steps))
            for group in opt.param_groups:
                group["lr"] = cur
        if dataset is not None:
            order = rngmod.numpy_stream(seed, "order", step)
            replace_draw = tc.batch_size > len(dataset)
            idx = order.choice(len(dataset), size=tc.batch_size, replace=replace_draw)
            pairs = [dataset[i] for i in idx]
        else:
            pairs = ancestral_sample(
                prior, render, dims, tc.batch_size,
                rngmod.derive_seed(seed, "sim", step), config,
            )
        pairs = _augment_batch(
            pairs, tc.augment, rngmod.numpy_stream(seed, "aug", step), config
        )
        images, batch = _batch_tensors(pairs, dtype)
        loss = npe_loss(
            net, images, batch, config, tc.feature_set, tc.rank_selection,
            generator=rngmod.torch_generator(seed, "rank", step),
        )
        lval = float(loss.detach())
        if not math.isfinite(lval):
            raise TrainingDiverged(f"non-finite loss {lval} at step {step + 1}")
        if initial is None:
            initial = lval
        if lval > tc.divergence_factor * max(abs(initial), 1.0):
            consecutive_high += 1
            if consecutive_high >= tc.divergence_patience:
                raise TrainingDiverged(
                    f"loss {lval:.4g} stayed above "
                    f"{tc.divergence_factor:g}x the initial loss "
                    f"({initial:.4g}) for {consecutive_high} steps"
                )
        else:
            consecutive_high = 0

        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

        entry = {"step": step + 1, "loss": lval}
        done = step + 1
        if val_pairs is not None and (done % tc.val_every == 0 or done == tc.steps):
            entry["val_loss"] = _eval_loss(net, val_pairs, config, tc.feature_set)
        history.append(entry)

        if (
            out_path is not None
            and tc.checkpoint_every
            and done % tc.checkpoint_every == 0
            and done < tc.steps
        ):
            save_checkpoint(
                out_path / f"ckpt_{done:07d}.pt", net, config, optimizer=opt,
                step=done,
            )

    final = None
    if out_path is not None:
        final = out_path / "final.pt"
        save_checkpoint(final, net, config, optimizer=opt, step=tc.steps)
        with open(out_path / "train_log.tsv", "w", encoding="utf-8") as fh:
            fh.write("step\tloss\tval_loss\n")
            for entry in history:
                val = entry.get("val_loss")
                fh.write(
                    f"{entry['step']}\t{entry['loss']:.10g}\t"
                    f"{'' if val is None else format(val, '.10g')}\n"
                )
    return TrainResult(
        net=net, history=history, step=tc.steps, final_checkpoint=final
    )


def exposure_gap(
    net: InferenceNet,
    pairs,
    config: CheckerboardConfig,
    feature_set: str = "minimal",
    seed: int = 0,
) -> float:
    """Teacher-forced minus free-running mean log-density.

    Free-running replaces the cross-tile conditioning contexts with one of the
    model's own posterior draws; the scored catalogs stay the real ones. With
    a single rank there is no cross-tile conditioning and the gap is exactly
    zero.
    """
    dtype = net_dtype(net)
    images, truth = _batch_tensors(pairs, dtype)
    with torch.no_grad():
        forced = catalog_log_prob(net, images, truth, config, feature_set)
        sampled = sample_posterior_batch(
            net, images, config, rngmod.torch_generator(seed, "gap"), feature_set
        )
        free = catalog_log_prob(
            net, images, truth, config, feature_set, context_override=sampled
        )
    return float(forced.mean() - free.mean())
