"""Command-line entry point.

Six commands cover the pipeline: simulate a dataset, train a model, decode
catalogs for images, run posterior calibration, sweep a star across a tile
border, and consolidate run manifests into comparison tables. Each command
reads one declarative config (preset name or YAML path), applies the flag
overrides, writes every artifact under one output directory, and finishes by
saving a manifest there.

Exit codes: 0 success, 2 configuration error, 3 training divergence, 4 IO
error.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import rng as rngmod
from .catalog_io import (
    CatalogHeader,
    load_catalog,
    load_image,
    read_dataset_index,
    save_catalog,
    save_image,
    save_samples,
    write_dataset_index,
)
from .catalogs import (
    CheckerboardConfig,
    Source,
    SourceKind,
    TiledCatalog,
    mag_to_flux,
    rank_of,
    tile_catalog,
    untile_catalog,
)
from .config import (
    apply_overrides,
    build_checkerboard,
    build_net_config,
    build_prior,
    build_render,
    build_train_config,
    image_dims,
    resolve_config,
)
from .errors import ConfigError, TrainingDiverged
from .evaluation import (
    RegionSpec,
    border_probe,
    conditional_detection_maps,
    heldout_loglik,
    paired_loglik_pvalue,
    sbc_confusion,
)
from .manifest import RunManifest, load_manifest
from .network import InferenceNet, load_checkpoint
from .reporting import (
    save_border_curves,
    save_confusion,
    save_detection_map,
    save_image_preview,
    save_loss_curves,
    write_table,
)
from .simulator import (
    Catalog,
    ImageGrid,
    ancestral_sample,
    render_mean,
    sample_image,
    shape_from_unconstrained,
    ShapePrior,
)
from .training import exposure_gap, train
from .varfamily import mode_catalog, sample_posterior

COMMANDS = ("simulate", "train", "catalog", "calibrate", "probe-border", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tilecat",
        description="Probabilistic source detection with a tiled "
        "autoregressive variational family.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument(
        "--config", required=True,
        help="preset name (sparse, crowded, toy-border) or YAML path",
    )
    parser.add_argument(
        "--out", default=None,
        help="output directory (default: tilecat-out/<command>)",
    )
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument(
        "--n", type=int, default=None,
        help="per-command count: images to simulate, training steps, "
        "posterior samples, calibration draws, or noise replicates",
    )
    parser.add_argument(
        "--threshold", type=float, default=None,
        help="detection probability threshold for catalog mode decoding",
    )
    parser.add_argument("--feature-set", choices=("minimal", "rich"), default=None)
    parser.add_argument(
        "--k", type=int, default=None,
        help="override the checkerboard rank count (perfect square)",
    )
    return parser


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path("tilecat-out") / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _catalog_header(board: CheckerboardConfig, dims) -> CatalogHeader:
    return CatalogHeader(dims, board.tile_side, board.max_per_tile,
                         board.flux_threshold)


def _check_header(header: CatalogHeader, board: CheckerboardConfig, dims, path):
    if header.image_dims != tuple(dims):
        raise ConfigError(
            f"{path}: catalog dims {header.image_dims} disagree with "
            f"configured {tuple(dims)}"
        )
    if header.tile_side != board.tile_side \
            or header.max_per_tile != board.max_per_tile:
        raise ConfigError(f"{path}: catalog tiling disagrees with the config")
    if not math.isclose(header.flux_threshold, board.flux_threshold,
                        rel_tol=1e-12, abs_tol=1e-12):
        raise ConfigError(f"{path}: catalog flux threshold disagrees")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: dict, out: Path) -> RunManifest:
    board = build_checkerboard(cfg)
    prior, render = build_prior(cfg), build_render(cfg)
    dims = image_dims(cfg)
    board.grid_dims(dims)
    n, seed = cfg["simulate"]["n"], cfg["seed"]
    if n < 1:
        raise ConfigError(f"simulate.n must be >= 1, got {n}")

    pairs = ancestral_sample(prior, render, dims, n, seed, board)
    (out / "images").mkdir(exist_ok=True)
    (out / "catalogs").mkdir(exist_ok=True)
    header = _catalog_header(board, dims)
    index = []
    n_interest = 0
    for i, (tiled, image) in enumerate(pairs):
        img_rel, cat_rel = f"images/{i:05d}.img", f"catalogs/{i:05d}.cat"
        save_image(out / img_rel, image.pixels, seed, render.noise_model)
        full = Catalog(
            untile_catalog(tiled).sources + tiled.nuisance.sources, dims
        )
        save_catalog(out / cat_rel, full, header)
        index.append((img_rel, cat_rel))
        n_interest += int(tiled.present.sum())
    write_dataset_index(out / "index.tsv", index)

    manifest = RunManifest("simulate", seed, cfg)
    manifest.register("index", out / "index.tsv", out)
    if cfg["simulate"]["preview"]:
        save_image_preview([im.pixels for _, im in pairs], out / "preview.png")
        manifest.register("preview", out / "preview.png", out)
    manifest.metrics = {
        "n_images": n,
        "mean_objects_of_interest": n_interest / n,
    }
    print(f"simulate: wrote {n} image/catalog pairs to {out}")
    return manifest


def _load_dataset(source, board: CheckerboardConfig, render, dims):
    """Rebuild training pairs from a simulate output directory."""
    path = Path(source)
    index = path / "index.tsv" if path.is_dir() else path
    if not index.is_file():
        raise ConfigError(f"no dataset index found at {index}")
    pairs = []
    for img_path, cat_path in read_dataset_index(index):
        pixels, meta = load_image(img_path)
        catalog, header = load_catalog(cat_path)
        _check_header(header, board, dims, cat_path)
        if pixels.shape != tuple(dims):
            raise ConfigError(
                f"{img_path}: image dims {pixels.shape} disagree with "
                f"configured {tuple(dims)}"
            )
        tiled = tile_catalog(catalog, board)
        image = ImageGrid(pixels=pixels, render=render)
        pairs.append((tiled, image))
    if not pairs:
        raise ConfigError(f"dataset index {index} lists no pairs")
    return pairs


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(cfg: dict, out: Path) -> RunManifest:
    board = build_checkerboard(cfg)
    prior, render = build_prior(cfg), build_render(cfg)
    dims = image_dims(cfg)
    board.grid_dims(dims)
    tc = build_train_config(cfg)
    seed = cfg["seed"]
    # weight init draws from torch's global generator; pin it to the run seed
    torch.manual_seed(rngmod.derive_seed(seed, "init"))
    net = InferenceNet(build_net_config(cfg))

    dataset = None
    if cfg["train"]["data"] is not None:
        dataset = _load_dataset(cfg["train"]["data"], board, render, dims)
    result = train(
        net, prior, render, dims, board, tc, seed,
        out_dir=out, resume_from=cfg["train"]["resume_from"], dataset=dataset,
    )
    save_loss_curves(result.history, out / "loss_curve")

    gap_pairs = dataset[:16] if dataset is not None else ancestral_sample(
        prior, render, dims, 16, rngmod.derive_seed(seed, "gap"), board
    )
    gap = exposure_gap(net, gap_pairs, board, tc.feature_set, seed=seed)

    manifest = RunManifest("train", seed, cfg)
    manifest.register("checkpoint", result.final_checkpoint, out)
    manifest.register("train_log", out / "train_log.tsv", out)
    manifest.register("loss_curve", out / "loss_curve.png", out)
    tail = [e["loss"] for e in result.history[-50:]]
    val = [e["val_loss"] for e in result.history if e.get("val_loss") is not None]
    manifest.metrics = {
        "steps": result.step,
        "final_loss": result.history[-1]["loss"],
        "tail_mean_loss": float(np.mean(tail)),
        "exposure_gap": gap,
    }
    if val:
        manifest.metrics["final_val_loss"] = val[-1]
    print(
        f"train: {result.step} steps, tail mean loss "
        f"{manifest.metrics['tail_mean_loss']:.4f}, checkpoint "
        f"{result.final_checkpoint}"
    )
    return manifest


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

def _image_paths(cfg: dict) -> list[Path]:
    section = cfg["catalog"]
    paths: list[Path] = []
    if section["data"] is not None:
        src = Path(section["data"])
        index = src / "index.tsv" if src.is_dir() else src
        if not index.is_file():
            raise ConfigError(f"no dataset index found at {index}")
        paths += [Path(img) for img, _ in read_dataset_index(index)]
    paths += [Path(p) for p in section["images"]]
    if not paths:
        raise ConfigError("catalog needs catalog.data or catalog.images")
    return paths


def cmd_catalog(cfg: dict, out: Path) -> RunManifest:
    section = cfg["catalog"]
    if section["checkpoint"] is None:
        raise ConfigError("catalog.checkpoint must point to a trained model")
    bundle = load_checkpoint(section["checkpoint"])
    net, board = bundle.net, bundle.checkerboard
    net.eval()
    render = build_render(cfg)
    feature_set = section["feature_set"]
    mode, seed = section["mode"], cfg["seed"]
    if mode == "sample" and section["n_samples"] < 1:
        raise ConfigError(
            f"catalog.n_samples must be >= 1, got {section['n_samples']}"
        )

    paths = _image_paths(cfg)
    (out / "catalogs").mkdir(exist_ok=True)
    outputs = []
    start = time.perf_counter()
    for i, path in enumerate(paths):
        pixels, _ = load_image(path)
        board.grid_dims(pixels.shape)
        image = ImageGrid(pixels=pixels, render=render)
        header = _catalog_header(board, pixels.shape)
        dest = out / "catalogs" / f"{i:05d}.cat"
        with torch.no_grad():
            if mode == "mode":
                tiled = mode_catalog(net, image, board, section["threshold"],
                                     feature_set)
                save_catalog(dest, untile_catalog(tiled), header)
            else:
                draws = sample_posterior(
                    net, image, board, section["n_samples"],
                    rngmod.derive_seed(seed, "catalog", i), feature_set,
                )
                save_samples(dest, [untile_catalog(t) for t in draws], header)
        outputs.append((str(path), f"catalogs/{dest.name}"))
    elapsed = time.perf_counter() - start

    write_table(out / "processed.tsv", ["image", "catalog"], outputs)
    manifest = RunManifest("catalog", seed, cfg)
    manifest.register("processed", out / "processed.tsv", out)
    manifest.metrics = {
        "n_images": len(paths),
        "mode": mode,
        "seconds_per_image": elapsed / len(paths),
    }
    print(
        f"catalog: {len(paths)} images in {elapsed:.2f}s "
        f"({len(paths) / max(elapsed, 1e-9):.2f} images/s), wrote {out}/catalogs"
    )
    return manifest


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def _load_bundles(entries: dict[str, str]):
    if not entries:
        raise ConfigError("this command needs at least one checkpoint")
    bundles = {name: load_checkpoint(path) for name, path in entries.items()}
    names = list(bundles)
    first = bundles[names[0]].checkerboard
    for name in names[1:]:
        b = bundles[name].checkerboard
        same = (
            b.tile_side == first.tile_side
            and b.max_per_tile == first.max_per_tile
            and b.flux_threshold == first.flux_threshold
            and b.zero_point == first.zero_point
        )
        if not same:
            raise ConfigError(
                f"checkpoints {names[0]!r} and {name!r} are incompatible: "
                "tile side, per-tile cap, flux threshold, and zero point "
                "must agree (only the rank count may differ)"
            )
    for bundle in bundles.values():
        bundle.net.eval()
    return bundles


def cmd_calibrate(cfg: dict, out: Path) -> RunManifest:
    section = cfg["calibrate"]
    prior, render = build_prior(cfg), build_render(cfg)
    dims = image_dims(cfg)
    seed = cfg["seed"]
    region = RegionSpec(
        kind=section["region_kind"],
        block_tiles=section["block_tiles"],
        strip_thickness=section["strip_thickness"],
    )
    manifest = RunManifest("calibrate", seed, cfg)
    metrics: dict = {}

    if section["sampler"] == "oracle":
        board = build_checkerboard(cfg)
        board.grid_dims(dims)
        cm = sbc_confusion(
            None, prior, render, dims, board, region,
            section["n_draws"], seed, sampler="oracle",
        )
        for path in save_confusion(cm, out / "confusion_oracle",
                                   "self-calibration oracle"):
            manifest.register(Path(path).name, path, out)
        worst = max(
            (cm.pair_ratio(i, j) for i, j in cm.supported_pairs()), default=None
        )
        metrics["oracle_worst_pair_ratio"] = worst
        manifest.metrics = metrics
        print(f"calibrate: oracle confusion matrix ({cm.n_draws} draws) in {out}")
        return manifest

    bundles = _load_bundles(section["checkpoints"])
    names = list(bundles)
    first_board = bundles[names[0]].checkerboard
    first_board.grid_dims(dims)

    per_image: dict[str, np.ndarray] = {}
    heldout_rows = []
    pairs = ancestral_sample(
        prior, render, dims, section["heldout_n"],
        rngmod.derive_seed(seed, "heldout"), first_board,
    )
    for name in names:
        bundle = bundles[name]
        cm = sbc_confusion(
            bundle.net, prior, render, dims, bundle.checkerboard, region,
            section["n_draws"], seed, sampler="net",
            feature_set=section["feature_set"],
            batch_size=section["batch_size"],
        )
        cm = type(cm)(
            counts=cm.counts, region=cm.region, n_draws=cm.n_draws,
            min_support=section["min_support"],
        )
        for path in save_confusion(cm, out / f"confusion_{name}", name):
            manifest.register(Path(path).name, path, out)
        if cm.size > 2:
            metrics[f"asym_12_{name}"] = cm.asymmetries().get((1, 2))
            metrics[f"ratio_12_{name}"] = (
                cm.pair_ratio(1, 2) if cm.counts[2, 1] > 0 else None
            )
        res = heldout_loglik(
            bundle.net, pairs, bundle.checkerboard,
            section["feature_set"],
        )
        per_image[name] = res.per_image
        heldout_rows.append(
            [name, len(pairs), res.total, res.std_error]
        )
        metrics[f"heldout_total_{name}"] = res.total
        metrics[f"heldout_se_{name}"] = res.std_error

    write_table(
        out / "heldout.tsv",
        ["model", "n_images", "total_loglik", "std_error"],
        heldout_rows,
    )
    manifest.register("heldout", out / "heldout.tsv", out)
    if len(names) > 1:
        rows = []
        for a in names:
            for b in names:
                if a == b:
                    continue
                p = paired_loglik_pvalue(per_image[a], per_image[b])
                delta = float(per_image[a].sum() - per_image[b].sum())
                rows.append([a, b, delta, p])
                metrics[f"pvalue_{a}_gt_{b}"] = p
        write_table(
            out / "pairwise.tsv",
            ["model_a", "model_b", "delta_total_loglik", "pvalue_a_gt_b"],
            rows,
        )
        manifest.register("pairwise", out / "pairwise.tsv", out)
    manifest.metrics = metrics
    print(f"calibrate: {len(names)} model(s), {section['n_draws']} draws -> {out}")
    return manifest


# ---------------------------------------------------------------------------
# probe-border
# ---------------------------------------------------------------------------

def _scene_tiles(catalog: Catalog, board: CheckerboardConfig) -> dict:
    """Map each occupied tile to its objects of interest."""
    tiles: dict[tuple[int, int], list[Source]] = {}
    for s in catalog.sources:
        if s.flux >= board.min_flux:
            key = (int(s.row // board.tile_side), int(s.col // board.tile_side))
            tiles.setdefault(key, []).append(s)
    return tiles


def _map_conditionings(scene: Catalog, star_tile, board: CheckerboardConfig):
    """Free-running plus two clampings of the star's tile (empty / truth).

    Tiles of ranks below the star tile's rank are clamped to the scene truth,
    which keeps the conditioning a valid scan-order prefix.
    """
    truth = _scene_tiles(scene, board)
    # rank_of takes 1-based tile indices; conditioning keys are 0-based
    k_star = rank_of(star_tile[0] + 1, star_tile[1] + 1, board.ranks)
    hh = scene.image_dims[0] // board.tile_side
    ww = scene.image_dims[1] // board.tile_side
    prefix = {
        (h, w): truth.get((h, w), [])
        for h in range(hh) for w in range(ww)
        if rank_of(h + 1, w + 1, board.ranks) < k_star
    }
    return {
        "free": None,
        "clamp-empty": {**prefix, star_tile: []},
        "clamp-truth": {**prefix, star_tile: truth.get(star_tile, [])},
    }


def cmd_probe_border(cfg: dict, out: Path) -> RunManifest:
    section = cfg["probe"]
    render = build_render(cfg)
    dims = image_dims(cfg)
    seed = cfg["seed"]
    bundles = _load_bundles(section["checkpoints"])
    names = list(bundles)
    board0 = bundles[names[0]].checkerboard
    board0.grid_dims(dims)
    t = board0.tile_side

    half = section["offset_span_tiles"] * t / 2.0
    step = section["offset_step"]
    if step <= 0:
        raise ConfigError("probe.offset_step must be positive")
    offsets = [round(v, 6) for v in np.arange(-half, half + step / 2, step)]
    magnitudes = list(section["magnitudes"])
    if not magnitudes:
        raise ConfigError("probe.magnitudes must be non-empty")

    manifest = RunManifest("probe-border", seed, cfg)
    metrics: dict = {}
    results = {}
    for name in names:
        bundle = bundles[name]
        results[name] = border_probe(
            bundle.net, bundle.checkerboard, render, dims, magnitudes,
            offsets, section["n_noise"], seed,
            feature_set=section["feature_set"],
        )
        for mag in magnitudes:
            curve = results[name].curve(mag)
            metrics[f"min_freq_{name}_mag{mag:g}"] = float(curve.min())
            metrics[f"border_freq_{name}_mag{mag:g}"] = float(
                results[name].frequency_at(mag, 0.0)
            )
            center = min(offsets, key=lambda o: abs(abs(o) - t / 2))
            metrics[f"center_freq_{name}_mag{mag:g}"] = float(
                results[name].frequency_at(mag, center)
            )
    for path in save_border_curves(results, out / "border_curves", t):
        manifest.register(Path(path).name, path, out)

    if section["maps"]:
        first = results[names[0]]
        border_row, star_col = first.border_row, first.star_col
        star = Source(
            row=border_row, col=star_col, kind=SourceKind.STAR,
            flux=float(mag_to_flux(min(magnitudes), board0.zero_point)),
        )
        star_tile = (int(border_row // t), int(star_col // t))
        scenes = {"star": Catalog((star,), dims)}
        if section["blend"]:
            galaxy = Source(
                row=border_row - 1.0, col=star_col + 0.5,
                kind=SourceKind.GALAXY, flux=star.flux,
                shape=tuple(shape_from_unconstrained(
                    np.array(ShapePrior().mean)
                )),
            )
            scenes["blend"] = Catalog((star, galaxy), dims)
        for scene_name, scene in scenes.items():
            mean = render_mean(scene, render)
            image = sample_image(
                mean, render.noise_model,
                rngmod.numpy_stream(seed, "map-noise", scene_name),
                render=render,
            )
            for name in names:
                bundle = bundles[name]
                variants = _map_conditionings(
                    scene, star_tile, bundle.checkerboard
                )
                for variant, conditioning in variants.items():
                    maps = conditional_detection_maps(
                        bundle.net, image, bundle.checkerboard, conditioning,
                        n_samples=section["map_n_samples"],
                        seed=rngmod.derive_seed(seed, "maps", name, scene_name,
                                                variant),
                        feature_set=section["feature_set"],
                    )
                    stem = out / f"detmap_{name}_{scene_name}_{variant}"
                    for path in save_detection_map(
                        maps, stem, f"{name}: {scene_name}, {variant}"
                    ):
                        manifest.register(Path(path).name, path, out)

    manifest.metrics = metrics
    print(
        f"probe-border: {len(names)} model(s), {len(magnitudes)} magnitudes x "
        f"{len(offsets)} offsets -> {out}"
    )
    return manifest


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _flatten(prefix: str, value, into: dict) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, into)
    elif isinstance(value, (int, float, str, bool)) or value is None:
        into[prefix] = value


def _resolved_ranks(config: dict) -> int:
    return build_checkerboard(config).ranks


def cmd_report(cfg: dict, out: Path) -> RunManifest:
    paths = cfg["report"]["manifests"]
    if not paths:
        raise ConfigError("report.manifests must list at least one manifest")
    loaded = []
    for p in paths:
        m = load_manifest(p)
        base = Path(p) if Path(p).is_dir() else Path(p).parent
        loaded.append((base.name, m))

    tiles = {m.config["checkerboard"]["tile_side"] for _, m in loaded}
    if len(tiles) > 1:
        raise ConfigError(
            f"manifests disagree on tile side ({sorted(tiles)}); "
            "refusing to merge incomparable runs"
        )

    flat: list[dict] = []
    for name, m in loaded:
        row = {
            "command": m.command,
            "seed": m.seed,
            "ranks": _resolved_ranks(m.config),
        }
        _flatten("", m.metrics, row)
        flat.append(row)
    keys = sorted(set().union(*(r.keys() for r in flat)))

    names = [name for name, _ in loaded]
    header = ["metric"] + names
    delta = None
    if len(loaded) == 2:
        a, b = loaded[0][1].config, loaded[1][1].config
        a_rest = {k: ({kk: vv for kk, vv in v.items() if kk != "ranks"}
                      if k == "checkerboard" else v) for k, v in a.items()}
        b_rest = {k: ({kk: vv for kk, vv in v.items() if kk != "ranks"}
                      if k == "checkerboard" else v) for k, v in b.items()}
        if a_rest == b_rest:
            delta = True
            header.append(f"delta({names[1]}-{names[0]})")
    rows = []
    for key in keys:
        row = [key] + [r.get(key) for r in flat]
        if delta:
            va, vb = flat[0].get(key), flat[1].get(key)
            numeric = all(
                isinstance(v, (int, float)) and not isinstance(v, bool)
                for v in (va, vb)
            )
            row.append(vb - va if numeric else None)
        rows.append(row)
    write_table(out / "report.tsv", header, rows)

    manifest = RunManifest("report", cfg["seed"], cfg)
    manifest.register("report", out / "report.tsv", out)
    manifest.metrics = {"n_manifests": len(loaded), "paired_delta": bool(delta)}
    print(f"report: merged {len(loaded)} manifest(s) -> {out / 'report.tsv'}")
    return manifest


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_HANDLERS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "catalog": cmd_catalog,
    "calibrate": cmd_calibrate,
    "probe-border": cmd_probe_border,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args.config)
        cfg = apply_overrides(
            cfg, args.command, seed=args.seed, n=args.n,
            threshold=args.threshold, feature_set=args.feature_set, k=args.k,
        )
        out = _out_dir(args)
        manifest = _HANDLERS[args.command](cfg, out)
        manifest.save(out)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
