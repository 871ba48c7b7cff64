"""On-disk formats: catalogs, posterior samples, images, dataset indexes.

Catalog files are plain text: a header line ``H W T M flux_threshold`` followed
by one record per source, ``row col kind flux s1..s6`` (six zeros for stars).
Floats are written with repr-faithful precision (%.17g) so a load/save round
trip is bit-exact. Posterior-sample files append a sample-index column.

Image files are a one-line ASCII header ``H W seed noise_model`` followed by
raw little-endian float32 pixels, row-major. A dataset index is a text file of
``<image file> <catalog file>`` pairs relative to its own directory.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalogs import SHAPE_DIM, Catalog, Source, SourceKind
from .errors import ConfigError

__all__ = [
    "save_catalog",
    "load_catalog",
    "save_samples",
    "load_samples",
    "save_image",
    "load_image",
    "write_dataset_index",
    "read_dataset_index",
    "CatalogHeader",
]

_F = "%.17g"  # round-trips IEEE doubles exactly


class CatalogHeader:
    """Metadata recorded in a catalog file header."""

    def __init__(self, image_dims, tile_side, max_per_tile, flux_threshold):
        self.image_dims = (int(image_dims[0]), int(image_dims[1]))
        self.tile_side = int(tile_side)
        self.max_per_tile = int(max_per_tile)
        self.flux_threshold = float(flux_threshold)

    def line(self) -> str:
        h, w = self.image_dims
        return f"{h} {w} {self.tile_side} {self.max_per_tile} {_F % self.flux_threshold}"

    @classmethod
    def parse(cls, line: str) -> "CatalogHeader":
        parts = line.split()
        if len(parts) != 5:
            raise ConfigError(f"bad catalog header: {line!r}")
        return cls((int(parts[0]), int(parts[1])), int(parts[2]), int(parts[3]), float(parts[4]))


def _source_fields(s: Source) -> str:
    shape = s.shape if s.shape is not None else (0.0,) * SHAPE_DIM
    cols = [_F % s.row, _F % s.col, s.kind.name.lower(), _F % s.flux]
    cols += [_F % v for v in shape]
    return " ".join(cols)


def _parse_source(parts: Sequence[str]) -> Source:
    kind = SourceKind[parts[2].upper()]
    shape = tuple(float(v) for v in parts[4 : 4 + SHAPE_DIM])
    return Source(
        row=float(parts[0]),
        col=float(parts[1]),
        kind=kind,
        flux=float(parts[3]),
        shape=shape if kind == SourceKind.GALAXY else None,
    )


def save_catalog(path, catalog: Catalog, header: CatalogHeader) -> None:
    if header.image_dims != catalog.image_dims:
        raise ConfigError("header dims disagree with catalog dims")
    lines = [header.line()]
    lines += [_source_fields(s) for s in catalog.sources]
    Path(path).write_text("\n".join(lines) + "\n")


def load_catalog(path) -> tuple[Catalog, CatalogHeader]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ConfigError(f"empty catalog file {path}")
    header = CatalogHeader.parse(lines[0])
    sources = []
    for ln in lines[1:]:
        parts = ln.split()
        if not parts:
            continue
        if len(parts) != 4 + SHAPE_DIM:
            raise ConfigError(f"bad catalog record in {path}: {ln!r}")
        sources.append(_parse_source(parts))
    return Catalog(tuple(sources), header.image_dims), header


def save_samples(path, samples: Sequence[Catalog], header: CatalogHeader) -> None:
    """Posterior samples: catalog format plus a trailing sample-index column."""
    lines = [header.line()]
    for idx, cat in enumerate(samples):
        if header.image_dims != cat.image_dims:
            raise ConfigError("sample dims disagree with header dims")
        for s in cat.sources:
            lines.append(f"{_source_fields(s)} {idx}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_samples(path) -> tuple[list[Catalog], CatalogHeader]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ConfigError(f"empty samples file {path}")
    header = CatalogHeader.parse(lines[0])
    by_index: dict[int, list[Source]] = {}
    max_idx = -1
    for ln in lines[1:]:
        parts = ln.split()
        if not parts:
            continue
        if len(parts) != 5 + SHAPE_DIM:
            raise ConfigError(f"bad sample record in {path}: {ln!r}")
        idx = int(parts[-1])
        max_idx = max(max_idx, idx)
        by_index.setdefault(idx, []).append(_parse_source(parts[:-1]))
    return (
        [Catalog(tuple(by_index.get(i, [])), header.image_dims) for i in range(max_idx + 1)],
        header,
    )


def save_image(path, pixels: np.ndarray, seed, noise_model: str) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ConfigError("image must be 2-D")
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"{h} {w} {seed} {noise_model}\n".encode("ascii"))
        f.write(pixels.astype("<f4").tobytes(order="C"))


def load_image(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if len(header) != 4:
            raise ConfigError(f"bad image header in {path}")
        h, w = int(header[0]), int(header[1])
        raw = f.read(4 * h * w)
    if len(raw) != 4 * h * w:
        raise ConfigError(f"truncated image payload in {path}")
    pixels = np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()
    meta = {"seed": header[2], "noise_model": header[3]}
    return pixels, meta


def write_dataset_index(path, pairs: Sequence[tuple[str, str]]) -> None:
    lines = [f"{img} {cat}" for img, cat in pairs]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_dataset_index(path) -> list[tuple[str, str]]:
    base = Path(path).parent
    pairs = []
    for ln in Path(path).read_text().splitlines():
        parts = ln.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise ConfigError(f"bad dataset index line: {ln!r}")
        pairs.append((str(base / parts[0]), str(base / parts[1])))
    return pairs
