"""Inference network with a certified receptive field.

The network factors into three stages so the expensive part runs once per
image:

* backbone: image pixels -> one feature column per tile, downsampling by the
  tile side through a pyramid of strided convolutions whose total receptive
  radius is made to equal ``image_radius`` exactly (see plan_backbone);
* neighborhood: encodes masked catalog context, with a cross-tile pathway
  whose 3x3 depth equals ``context_radius`` and a within-tile pathway of 1x1
  convolutions only;
* head: 1x1 convolutions from concatenated features to the per-slot
  distribution parameters.

Receptive-field bookkeeping assumes every convolution uses zero padding and
every nonlinearity and normalization acts per position, which is why the
normalization here standardizes channel groups at each position instead of
pooling over space, and why the input normalizer uses frozen buffers rather
than per-image statistics.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .catalogs import CheckerboardConfig, context_channel_count
from .errors import ConfigError
from .varfamily import (
    TileBatch,
    TileDistParams,
    image_to_tensor,
    param_count,
    params_for_subset,
)

__all__ = [
    "NetConfig",
    "ConvSpec",
    "plan_backbone",
    "receptive_radius",
    "ImageNormalizer",
    "PositionGroupNorm",
    "Backbone",
    "NeighborhoodNet",
    "DetectionHead",
    "InferenceNet",
    "full_forward",
    "normalize_image",
    "net_dtype",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
]

CHECKPOINT_FORMAT = 1


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters.

    subcell_grid defaults to twice the tile side so sub-cells are half-pixel.
    backbone_channels gives the width at each pyramid scale; the last entry
    repeats if the pyramid is deeper than the tuple.
    """

    tile_side: int
    max_per_tile: int
    image_radius: int
    context_radius: int
    subcell_grid: int | None = None
    asinh_bands: int = 8
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    backbone_post_blocks: int = 2
    pathway_channels: int = 128
    pathway_blocks: int = 2
    head_channels: int = 64
    head_blocks: int = 5
    group_size: int = 8

    def __post_init__(self):
        if not _is_power_of_two(self.tile_side):
            raise ConfigError("tile_side must be a power of two")
        if self.max_per_tile < 1:
            raise ConfigError("max_per_tile must be >= 1")
        if self.image_radius < 0 or self.context_radius < 0:
            raise ConfigError("radii must be non-negative")
        if self.asinh_bands < 1:
            raise ConfigError("asinh_bands must be >= 1")
        if not self.backbone_channels:
            raise ConfigError("backbone_channels must be non-empty")
        if self.pathway_blocks < 1 or self.head_blocks < 1:
            raise ConfigError("pathway_blocks and head_blocks must be >= 1")
        if self.subcell_grid is not None and self.subcell_grid < 1:
            raise ConfigError("subcell_grid must be >= 1")
        object.__setattr__(
            self, "backbone_channels", tuple(int(c) for c in self.backbone_channels)
        )

    @property
    def subcell(self) -> int:
        return self.subcell_grid if self.subcell_grid is not None else 2 * self.tile_side

    @property
    def param_channels(self) -> int:
        return param_count(self.subcell)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(**d)


@dataclass(frozen=True)
class ConvSpec:
    """One convolution in the backbone plan, at the given input stride."""

    kernel: int
    stride: int
    padding: int
    scale: int  # input stride relative to pixels


def receptive_radius(plan: list[ConvSpec]) -> tuple[int, int, int]:
    """(left_radius, right_radius, total_stride) of a plan, anchored at the
    first pixel of each output cell's footprint."""
    left = right = 0
    stride = 1
    for spec in plan:
        left += stride * spec.padding
        right += stride * (spec.kernel - 1 - spec.padding)
        stride *= spec.stride
    return left, right, stride


def plan_backbone(tile_side: int, image_radius: int) -> list[ConvSpec]:
    """Choose a pyramid whose receptive radius equals image_radius exactly.

    Downsampling happens once per octave. A strided 3x3 (padding 1) at input
    stride s contributes s to each side; a strided 1x1 contributes nothing; an
    extra unit-stride 3x3 at input stride s contributes s. The budget is spent
    greedily from the largest scale down, and the remainder is paid with extra
    3x3 blocks, which is always possible because scale-1 blocks contribute 1.
    """
    if not _is_power_of_two(tile_side):
        raise ConfigError("tile_side must be a power of two")
    if image_radius < 0:
        raise ConfigError("image_radius must be non-negative")
    n_stages = tile_side.bit_length() - 1
    scales = [2 ** j for j in range(n_stages)]

    remaining = image_radius
    strided_is_3x3: dict[int, bool] = {}
    for s in reversed(scales):
        if remaining >= s:
            strided_is_3x3[s] = True
            remaining -= s
        else:
            strided_is_3x3[s] = False
    extra_scales = scales if scales else [1]  # tile_side 1: unit-stride blocks only
    extras: dict[int, int] = {}
    for s in reversed(extra_scales):
        extras[s] = remaining // s
        remaining %= s
    if remaining != 0:
        raise ConfigError(f"cannot realize image_radius={image_radius}")

    plan: list[ConvSpec] = []
    for s in extra_scales:
        plan.extend(ConvSpec(3, 1, 1, s) for _ in range(extras[s]))
        if s in strided_is_3x3:
            if strided_is_3x3[s]:
                plan.append(ConvSpec(3, 2, 1, s))
            else:
                plan.append(ConvSpec(1, 2, 0, s))
    left, right, stride = receptive_radius(plan)
    if not (left == right == image_radius and stride == tile_side):
        raise ConfigError("backbone plan failed its receptive-field check")
    return plan


class PositionGroupNorm(nn.Module):
    """Normalizes channel groups independently at every spatial position, so
    it never mixes information across pixels and leaves receptive fields
    untouched."""

    def __init__(self, channels: int, group_size: int = 8, eps: float = 1e-5):
        super().__init__()
        if channels < 2:
            raise ConfigError("PositionGroupNorm needs at least 2 channels")
        groups = max(1, channels // group_size)
        while channels % groups:
            groups -= 1
        self.groups = groups
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        xg = x.view(b, self.groups, c // self.groups, h, w)
        mean = xg.mean(dim=2, keepdim=True)
        var = xg.var(dim=2, unbiased=False, keepdim=True)
        xn = ((xg - mean) / torch.sqrt(var + self.eps)).view(b, c, h, w)
        return xn * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride, padding, group_size, norm=True):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding)
        self.norm = PositionGroupNorm(out_ch, group_size) if norm else None
        self.act = nn.SiLU()

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return self.act(x)


class ImageNormalizer(nn.Module):
    """Maps raw counts to asinh bands using frozen shift/scale buffers, fitted
    once from data so normalization is a fixed pointwise function at use time
    (a constant image fits to unit scale)."""

    def __init__(self, bands: int):
        super().__init__()
        self.bands = bands
        self.register_buffer("shift", torch.zeros(bands))
        self.register_buffer("scale", torch.ones(bands))

    def fit(self, images) -> None:
        pixels = np.concatenate(
            [np.asarray(im, dtype=np.float64).ravel() for im in images]
        )
        if pixels.size == 0:
            raise ConfigError("cannot fit normalizer on empty input")
        step = max(1, pixels.size // 2_000_000)
        pixels = pixels[::step]
        sky = float(np.median(pixels))
        positive = pixels[pixels > sky] - sky
        if positive.size == 0:
            scales = np.ones(self.bands)
        else:
            lo = max(float(np.quantile(positive, 0.5)), 1e-12)
            hi = max(float(np.quantile(positive, 0.9999)), lo * (1.0 + 1e-9))
            scales = np.geomspace(lo, hi, self.bands) if self.bands > 1 else np.array([hi])
        with torch.no_grad():
            self.shift.copy_(torch.full((self.bands,), sky, dtype=self.shift.dtype))
            self.scale.copy_(torch.as_tensor(scales, dtype=self.scale.dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ConfigError("normalizer expects (B, 1, H, W) input")
        z = (x - self.shift[None, :, None, None]) / self.scale[None, :, None, None]
        return torch.asinh(z)


class Backbone(nn.Module):
    """Image features at tile resolution with exact receptive radius."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.tile_side = config.tile_side
        self.plan = plan_backbone(config.tile_side, config.image_radius)
        chans = config.backbone_channels

        def width(stage):
            return chans[min(stage, len(chans) - 1)]

        layers = []
        in_ch = config.asinh_bands
        stage = 0
        for spec in self.plan:
            out_ch = width(stage + 1) if spec.stride == 2 else width(stage)
            layers.append(
                ConvBlock(in_ch, out_ch, spec.kernel, spec.stride, spec.padding,
                          config.group_size)
            )
            in_ch = out_ch
            if spec.stride == 2:
                stage += 1
        for _ in range(config.backbone_post_blocks):
            layers.append(ConvBlock(in_ch, width(stage), 1, 1, 0, config.group_size))
            in_ch = width(stage)
        self.layers = nn.Sequential(*layers)
        self.out_channels = in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[2] % self.tile_side or x.shape[3] % self.tile_side:
            raise ConfigError(
                f"image dims {tuple(x.shape[2:])} not divisible by tile side "
                f"{self.tile_side}"
            )
        return self.layers(x)


class NeighborhoodNet(nn.Module):
    """Catalog-context encoder. The cross-tile pathway stacks exactly
    context_radius 3x3 blocks (then 1x1 blocks); the within-tile pathway is
    1x1 only, so within-tile context never leaks across tiles."""

    def __init__(self, config: NetConfig):
        super().__init__()
        data_ch, mask_ch = context_channel_count(config.max_per_tile)
        in_ch = data_ch + mask_ch
        pw = config.pathway_channels
        gs = config.group_size

        cross = []
        c = in_ch
        for _ in range(config.context_radius):
            cross.append(ConvBlock(c, pw, 3, 1, 1, gs))
            c = pw
        for _ in range(config.pathway_blocks):
            cross.append(ConvBlock(c, pw, 1, 1, 0, gs))
            c = pw
        self.cross = nn.Sequential(*cross)

        within = []
        c = in_ch
        for _ in range(config.pathway_blocks + 1):
            within.append(ConvBlock(c, pw, 1, 1, 0, gs))
            c = pw
        self.within = nn.Sequential(*within)
        self.out_channels = 2 * pw

    def forward(self, cross: torch.Tensor, within: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.cross(cross), self.within(within)], dim=1)


class DetectionHead(nn.Module):
    """1x1 blocks (first without normalization) ending in a linear projection
    to the slot distribution parameters."""

    def __init__(self, config: NetConfig, in_channels: int):
        super().__init__()
        blocks = []
        c = in_channels
        for i in range(config.head_blocks):
            blocks.append(
                ConvBlock(c, config.head_channels, 1, 1, 0, config.group_size,
                          norm=(i > 0))
            )
            c = config.head_channels
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.Conv2d(c, config.param_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.blocks(x))


class InferenceNet(nn.Module):
    """Composed normalizer + backbone + neighborhood + head.

    The backbone output depends only on the image and can be computed once and
    reused across ranks, slots, and visible subsets.
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.normalizer = ImageNormalizer(config.asinh_bands)
        self.backbone = Backbone(config)
        self.neighborhood = NeighborhoodNet(config)
        self.head = DetectionHead(
            config, self.backbone.out_channels + self.neighborhood.out_channels
        )

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return self.normalizer(images)

    def backbone_forward(self, normalized: torch.Tensor) -> torch.Tensor:
        return self.backbone(normalized)

    def neighborhood_forward(self, cross, within) -> torch.Tensor:
        return self.neighborhood(cross, within)

    def head_forward(self, feats: torch.Tensor, nbhd: torch.Tensor) -> torch.Tensor:
        return self.head(torch.cat([feats, nbhd], dim=1))


def net_dtype(net: nn.Module) -> torch.dtype:
    return next(net.parameters()).dtype


def normalize_image(image, net: InferenceNet) -> torch.Tensor:
    """Raw image -> normalized asinh bands (1, bands, H, W)."""
    return net.normalize(image_to_tensor(image, dtype=net_dtype(net)))


def full_forward(
    net: InferenceNet,
    image,
    tiled,
    k: int,
    i: int,
    config: CheckerboardConfig,
    feature_set: str = "minimal",
    cache: torch.Tensor | None = None,
) -> tuple[TileDistParams, torch.Tensor]:
    """Distribution parameters for the i-th slot (1-based) of rank k, given
    the catalog's earlier ranks and this rank's first i-1 slots as context.
    Returns the params and the backbone features for reuse."""
    if not 1 <= i <= config.max_per_tile:
        raise ConfigError(f"slot index {i} outside 1..{config.max_per_tile}")
    if not 0 <= k < config.ranks:
        raise ConfigError(f"rank {k} outside 0..{config.ranks - 1}")
    dtype = net_dtype(net)
    if cache is None:
        cache = net.backbone_forward(net.normalize(image_to_tensor(image, dtype)))
    batch = TileBatch.from_tiled([tiled], dtype=dtype)
    params = params_for_subset(
        net, cache, batch, config, k, range(i - 1), feature_set
    )
    return params, cache


def save_checkpoint(
    path,
    net: InferenceNet,
    checkerboard: CheckerboardConfig,
    optimizer=None,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "net_config": net.config.to_dict(),
        "checkerboard": dataclasses.asdict(checkerboard),
        "state_dict": net.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": int(step),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


@dataclass
class CheckpointBundle:
    net: InferenceNet
    checkerboard: CheckerboardConfig
    optimizer_state: dict | None
    step: int
    extra: dict


def load_checkpoint(path) -> CheckpointBundle:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {version!r}")
    net = InferenceNet(NetConfig.from_dict(payload["net_config"]))
    net.load_state_dict(payload["state_dict"])
    return CheckpointBundle(
        net=net,
        checkerboard=CheckerboardConfig(**payload["checkerboard"]),
        optimizer_state=payload["optimizer"],
        step=payload["step"],
        extra=payload["extra"],
    )
