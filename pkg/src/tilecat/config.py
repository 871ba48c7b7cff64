"""Declarative run configuration.

A run is described by one YAML file with sections for the generative model
(prior, render, image), the tiling and variational family (checkerboard, net),
and per-command settings (train, simulate, catalog, calibrate, probe, report).
Validation is full-schema: unknown keys are rejected and every omitted value is
filled with its default, so the resolved mapping echoed into a manifest is the
complete truth about the run.

Named presets ship inside the package; ``load_config`` accepts either a preset
name or a filesystem path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .catalogs import DEFAULT_ZERO_POINT, CheckerboardConfig
from .errors import ConfigError
from .network import NetConfig
from .simulator import ParetoFlux, PriorConfig, RenderConfig, ShapePrior
from .training import AUGMENT_OPS, TrainConfig

__all__ = [
    "load_config",
    "validate_config",
    "resolve_config",
    "apply_overrides",
    "preset_names",
    "build_checkerboard",
    "build_prior",
    "build_render",
    "build_net_config",
    "build_train_config",
    "image_dims",
]

_REQUIRED = object()


@dataclass(frozen=True)
class _Field:
    """One scalar or list entry of the schema."""

    default: Any
    kind: str  # int, float, bool, str, list[float], list[int], list[str], map
    nullable: bool = False
    choices: tuple | None = None


def _f(default, kind, nullable=False, choices=None) -> _Field:
    return _Field(default, kind, nullable, choices)


_FLUX_SCHEMA = {
    "alpha": _f(_REQUIRED, "float"),
    "bright_mag": _f(_REQUIRED, "float"),
    "faint_mag": _f(_REQUIRED, "float"),
}

SCHEMA: dict[str, Any] = {
    "seed": _f(0, "int"),
    "checkerboard": {
        "tile_side": _f(_REQUIRED, "int"),
        "max_per_tile": _f(_REQUIRED, "int"),
        "object_radius": _f(_REQUIRED, "float"),
        "flux_threshold": _f(_REQUIRED, "float"),
        # null radii/ranks take the structure-matched values for (T, R)
        "ranks": _f(None, "int", nullable=True),
        "image_radius": _f(None, "int", nullable=True),
        "context_radius": _f(None, "int", nullable=True),
        "zero_point": _f(DEFAULT_ZERO_POINT, "float"),
    },
    "image": {
        "height": _f(_REQUIRED, "int"),
        "width": _f(_REQUIRED, "int"),
    },
    "prior": {
        "mu": _f(_REQUIRED, "float"),
        "star_fraction": _f(_REQUIRED, "float"),
        "star_flux": _FLUX_SCHEMA,
        "galaxy_flux": dict(_FLUX_SCHEMA),
        "shape_mean": _f(list(ShapePrior().mean), "list[float]"),
        "shape_sd": _f(list(ShapePrior().sd), "list[float]"),
    },
    "render": {
        "background": _f(_REQUIRED, "float"),
        "psf_sigma": _f(_REQUIRED, "float"),
        "gain": _f(1.0, "float"),
        "noise_model": _f("poisson", "str", choices=("poisson", "gaussian_approx")),
        "oversample": _f(3, "int"),
    },
    "net": {
        "subcell_grid": _f(None, "int", nullable=True),
        "asinh_bands": _f(8, "int"),
        "backbone_channels": _f([16, 32, 64], "list[int]"),
        "backbone_post_blocks": _f(2, "int"),
        "pathway_channels": _f(128, "int"),
        "pathway_blocks": _f(2, "int"),
        "head_channels": _f(64, "int"),
        "head_blocks": _f(5, "int"),
        "group_size": _f(8, "int"),
    },
    "train": {
        "steps": _f(1000, "int"),
        "batch_size": _f(8, "int"),
        "lr": _f(1e-3, "float"),
        "lr_schedule": _f("constant", "str", choices=("constant", "cosine")),
        "rank_selection": _f("all", "str", choices=("all", "sample")),
        "feature_set": _f("minimal", "str", choices=("minimal", "rich")),
        "augment": _f([], "list[str]", choices=AUGMENT_OPS),
        "dataset_size": _f(None, "int", nullable=True),
        "val_size": _f(0, "int"),
        "val_every": _f(0, "int"),
        "checkpoint_every": _f(0, "int"),
        "divergence_factor": _f(10.0, "float"),
        "divergence_patience": _f(100, "int"),
        "fit_normalizer": _f(True, "bool"),
        "normalizer_images": _f(16, "int"),
        "data": _f(None, "str", nullable=True),
        "resume_from": _f(None, "str", nullable=True),
    },
    "simulate": {
        "n": _f(16, "int"),
        "preview": _f(True, "bool"),
    },
    "catalog": {
        "checkpoint": _f(None, "str", nullable=True),
        "data": _f(None, "str", nullable=True),
        "images": _f([], "list[str]"),
        "mode": _f("mode", "str", choices=("mode", "sample")),
        "threshold": _f(0.5, "float"),
        "n_samples": _f(16, "int"),
        "feature_set": _f("minimal", "str", choices=("minimal", "rich")),
    },
    "calibrate": {
        "checkpoints": _f({}, "map"),
        "sampler": _f("net", "str", choices=("net", "oracle")),
        "n_draws": _f(20000, "int"),
        "region_kind": _f("block", "str", choices=("block", "strip")),
        "block_tiles": _f(2, "int"),
        "strip_thickness": _f(0.25, "float"),
        "heldout_n": _f(64, "int"),
        "batch_size": _f(64, "int"),
        "min_support": _f(100, "int"),
        "feature_set": _f("minimal", "str", choices=("minimal", "rich")),
    },
    "probe": {
        "checkpoints": _f({}, "map"),
        "magnitudes": _f([20.47, 22.21], "list[float]"),
        "offset_span_tiles": _f(2.0, "float"),
        "offset_step": _f(0.25, "float"),
        "n_noise": _f(100, "int"),
        "maps": _f(True, "bool"),
        "map_n_samples": _f(64, "int"),
        "blend": _f(False, "bool"),
        "feature_set": _f("minimal", "str", choices=("minimal", "rich")),
    },
    "report": {
        "manifests": _f([], "list[str]"),
    },
}


def preset_names() -> list[str]:
    """Names of the presets shipped inside the package."""
    pkg = resources.files("tilecat") / "presets"
    return sorted(p.name[: -len(".yaml")] for p in pkg.iterdir()
                  if p.name.endswith(".yaml"))


def load_config(source) -> dict:
    """Read a raw config mapping from a preset name or a YAML file path."""
    text = None
    s = str(source)
    if "/" not in s and not s.endswith((".yaml", ".yml")):
        entry = resources.files("tilecat") / "presets" / f"{s}.yaml"
        if entry.is_file():
            text = entry.read_text()
        else:
            raise ConfigError(
                f"unknown preset {s!r}; available: {', '.join(preset_names())}"
            )
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return raw


def _check_scalar(value, field: _Field, path: str):
    if value is None:
        if field.nullable:
            return None
        raise ConfigError(f"{path} must not be null")
    kind = field.kind
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return int(value)
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        if field.choices is not None and value not in field.choices:
            raise ConfigError(
                f"{path} must be one of {list(field.choices)}, got {value!r}"
            )
        return value
    if kind.startswith("list["):
        inner = kind[len("list["):-1]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list, got {value!r}")
        item_field = _Field(_REQUIRED, inner, choices=None)
        out = [_check_scalar(v, item_field, f"{path}[{i}]")
               for i, v in enumerate(value)]
        if field.choices is not None:
            bad = [v for v in out if v not in field.choices]
            if bad:
                raise ConfigError(f"{path} has unknown entries {bad}")
        return out
    if kind == "map":
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be a mapping, got {value!r}")
        out = {}
        for k, v in value.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ConfigError(f"{path} entries must map string to string")
            out[k] = v
        return out
    raise AssertionError(f"unhandled schema kind {kind}")


def _validate_section(schema: Mapping, data, path: str) -> dict:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {data!r}")
    unknown = set(data) - set(schema)
    if unknown:
        raise ConfigError(
            f"unknown config key{'s' if len(unknown) > 1 else ''} "
            f"{sorted(unknown)} under {path or 'the top level'}"
        )
    out = {}
    for key, node in schema.items():
        sub_path = f"{path}.{key}" if path else key
        if isinstance(node, Mapping):
            out[key] = _validate_section(node, data.get(key), sub_path)
        else:
            if key not in data and node.default is _REQUIRED:
                raise ConfigError(f"missing required config key {sub_path}")
            value = data.get(key, node.default)
            out[key] = _check_scalar(value, node, sub_path)
    return out


def validate_config(raw: Mapping) -> dict:
    """Check ``raw`` against the schema and return it with defaults filled."""
    return _validate_section(SCHEMA, dict(raw), "")


def resolve_config(source) -> dict:
    return validate_config(load_config(source))


def apply_overrides(
    cfg: dict,
    command: str,
    seed: int | None = None,
    n: int | None = None,
    threshold: float | None = None,
    feature_set: str | None = None,
    k: int | None = None,
) -> dict:
    """Fold command-line flags into a resolved config.

    --n maps to the command's count (simulate.n, train.steps,
    catalog.n_samples, calibrate.n_draws, probe.n_noise); --threshold only
    applies to catalog mode decoding; --k replaces checkerboard.ranks.
    """
    out = {k2: dict(v) if isinstance(v, dict) else v for k2, v in cfg.items()}
    if seed is not None:
        out["seed"] = int(seed)
    if k is not None:
        s = math.isqrt(k)
        if k < 1 or s * s != k:
            raise ConfigError(f"--k must be a perfect square, got {k}")
        out["checkerboard"]["ranks"] = int(k)
    if threshold is not None:
        if command != "catalog":
            raise ConfigError("--threshold only applies to the catalog command")
        out["catalog"]["threshold"] = float(threshold)
    if feature_set is not None:
        if command in ("simulate", "report"):
            raise ConfigError(f"--feature-set does not apply to {command}")
        for section in ("train", "catalog", "calibrate", "probe"):
            out[section]["feature_set"] = feature_set
    if n is not None:
        if n < 0:
            raise ConfigError(f"--n must be nonnegative, got {n}")
        slot = {
            "simulate": ("simulate", "n"),
            "train": ("train", "steps"),
            "catalog": ("catalog", "n_samples"),
            "calibrate": ("calibrate", "n_draws"),
            "probe-border": ("probe", "n_noise"),
        }.get(command)
        if slot is None:
            raise ConfigError(f"--n does not apply to {command}")
        out[slot[0]][slot[1]] = int(n)
    return out


# ---------------------------------------------------------------------------
# Builders from resolved config sections to module dataclasses
# ---------------------------------------------------------------------------

def build_checkerboard(cfg: Mapping) -> CheckerboardConfig:
    c = cfg["checkerboard"]
    t, r = c["tile_side"], c["object_radius"]
    ranks = c["ranks"]
    if ranks is None:
        side = math.ceil(2.0 * r / t + 1.0)
        ranks = side * side
    image_radius = c["image_radius"]
    if image_radius is None:
        image_radius = math.ceil(r)
    context_radius = c["context_radius"]
    if context_radius is None:
        context_radius = math.ceil(2.0 * r / t)
    return CheckerboardConfig(
        tile_side=t,
        ranks=ranks,
        max_per_tile=c["max_per_tile"],
        object_radius=r,
        image_radius=image_radius,
        context_radius=context_radius,
        flux_threshold=c["flux_threshold"],
        zero_point=c["zero_point"],
    )


def _build_flux(d: Mapping, zero_point: float) -> ParetoFlux:
    return ParetoFlux.from_magnitudes(
        alpha=d["alpha"], faint_mag=d["faint_mag"], bright_mag=d["bright_mag"],
        zero_point=zero_point,
    )


def build_prior(cfg: Mapping) -> PriorConfig:
    p = cfg["prior"]
    zp = cfg["checkerboard"]["zero_point"]
    return PriorConfig(
        mu=p["mu"],
        star_fraction=p["star_fraction"],
        star_flux=_build_flux(p["star_flux"], zp),
        galaxy_flux=_build_flux(p["galaxy_flux"], zp),
        shape_prior=ShapePrior(tuple(p["shape_mean"]), tuple(p["shape_sd"])),
    )


def build_render(cfg: Mapping) -> RenderConfig:
    r = cfg["render"]
    return RenderConfig(
        background=r["background"],
        psf_sigma=r["psf_sigma"],
        psf_radius=cfg["checkerboard"]["object_radius"],
        gain=r["gain"],
        noise_model=r["noise_model"],
        zero_point=cfg["checkerboard"]["zero_point"],
        oversample=r["oversample"],
    )


def build_net_config(cfg: Mapping) -> NetConfig:
    board = build_checkerboard(cfg)
    n = cfg["net"]
    return NetConfig(
        tile_side=board.tile_side,
        max_per_tile=board.max_per_tile,
        image_radius=board.image_radius,
        context_radius=board.context_radius,
        subcell_grid=n["subcell_grid"],
        asinh_bands=n["asinh_bands"],
        backbone_channels=tuple(n["backbone_channels"]),
        backbone_post_blocks=n["backbone_post_blocks"],
        pathway_channels=n["pathway_channels"],
        pathway_blocks=n["pathway_blocks"],
        head_channels=n["head_channels"],
        head_blocks=n["head_blocks"],
        group_size=n["group_size"],
    )


def build_train_config(cfg: Mapping) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        steps=t["steps"],
        batch_size=t["batch_size"],
        lr=t["lr"],
        lr_schedule=t["lr_schedule"],
        rank_selection=t["rank_selection"],
        feature_set=t["feature_set"],
        augment=tuple(t["augment"]),
        dataset_size=t["dataset_size"],
        val_size=t["val_size"],
        val_every=t["val_every"],
        checkpoint_every=t["checkpoint_every"],
        divergence_factor=t["divergence_factor"],
        divergence_patience=t["divergence_patience"],
        fit_normalizer=t["fit_normalizer"],
        normalizer_images=t["normalizer_images"],
    )


def image_dims(cfg: Mapping) -> tuple[int, int]:
    im = cfg["image"]
    h, w = im["height"], im["width"]
    if h < 1 or w < 1:
        raise ConfigError("image dims must be positive")
    return h, w
