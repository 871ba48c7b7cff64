"""Delimited-text tables and PNG figures for command outputs.

Every figure has a text twin carrying the same numbers, so headless pipelines
can assert on data without parsing images. Tables are tab-separated with a
single header row; floats use %.10g.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError
from .evaluation import BorderProbeResult, ConfusionMatrix, DetectionMaps

__all__ = [
    "write_table",
    "read_table",
    "save_confusion",
    "save_border_curves",
    "save_detection_map",
    "save_loss_curves",
    "save_image_preview",
]

_F = "%.10g"


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _F % float(v)
    return str(v)


def write_table(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    """Tab-separated table with one header row; None renders as NA."""
    lines = ["\t".join(str(h) for h in header)]
    for row in rows:
        if len(row) != len(header):
            raise ConfigError(
                f"row width {len(row)} disagrees with header width {len(header)}"
            )
        lines.append("\t".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ConfigError(f"empty table file {path}")
    header = lines[0].split("\t")
    return header, [ln.split("\t") for ln in lines[1:] if ln]


def save_confusion(cm: ConfusionMatrix, stem, title: str) -> list[str]:
    """Counts table, asymmetry table, and annotated heatmap for one matrix."""
    stem = Path(stem)
    counts_path = stem.with_suffix(".tsv")
    n = cm.size
    write_table(
        counts_path,
        ["true\\sampled"] + [str(j) for j in range(n)],
        [[str(i)] + [int(v) for v in cm.counts[i]] for i in range(n)],
    )
    asym_path = stem.parent / (stem.name + "_asymmetry.tsv")
    rows = []
    for (i, j), a in sorted(cm.asymmetries().items()):
        rows.append([i, j, int(cm.counts[i, j]), int(cm.counts[j, i]), a,
                     cm.pair_ratio(i, j), cm.pair_pvalue(i, j)])
    write_table(
        asym_path,
        ["i", "j", "count_ij", "count_ji", "asymmetry", "ratio", "symmetry_pvalue"],
        rows,
    )
    png_path = stem.with_suffix(".png")
    fig, ax = plt.subplots(figsize=(1.2 * n + 2, 1.2 * n + 1.5))
    shown = np.log10(cm.counts + 1.0)
    ax.imshow(shown, cmap="Blues")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center",
                    fontsize=9)
    ax.set_xlabel("objects in sampled catalog")
    ax.set_ylabel("objects in true catalog")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [str(counts_path), str(asym_path), str(png_path)]


def save_border_curves(
    results: Mapping[str, BorderProbeResult], stem, tile_side: int
) -> list[str]:
    """Correct-count frequency curves, one panel per magnitude, one line per
    model, plus the flat table of every point."""
    stem = Path(stem)
    names = list(results)
    if not names:
        raise ConfigError("no border-probe results to plot")
    first = results[names[0]]
    for name in names[1:]:
        if results[name].magnitudes != first.magnitudes or \
                results[name].offsets != first.offsets:
            raise ConfigError("border-probe results have mismatched sweeps")
    table_path = stem.with_suffix(".tsv")
    rows = []
    for name in names:
        r = results[name]
        for i, mag in enumerate(r.magnitudes):
            for j, off in enumerate(r.offsets):
                rows.append([name, mag, off, float(r.frequency[i, j])])
    write_table(table_path, ["model", "magnitude", "offset", "frequency"], rows)

    png_path = stem.with_suffix(".png")
    mags = first.magnitudes
    fig, axes = plt.subplots(1, len(mags), figsize=(5.5 * len(mags), 4.0),
                             squeeze=False)
    offs = np.asarray(first.offsets)
    for i, mag in enumerate(mags):
        ax = axes[0, i]
        for name in names:
            ax.plot(offs, results[name].frequency[i], marker=".", label=name)
        lo = np.floor(offs.min() / tile_side) * tile_side
        hi = np.ceil(offs.max() / tile_side) * tile_side
        for b in np.arange(lo, hi + tile_side / 2, tile_side):
            ax.axvline(b, color="gray", lw=0.6, ls=":")
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel("vertical offset from border (px)")
        ax.set_ylabel("frequency of exactly one object")
        ax.set_title(f"magnitude {mag:g}")
        ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [str(table_path), str(png_path)]


def save_detection_map(maps: DetectionMaps, stem, title: str) -> list[str]:
    """Per-tile detection-probability heatmap and its table."""
    stem = Path(stem)
    table_path = stem.with_suffix(".tsv")
    hh, ww = maps.probability.shape
    rows = [
        [h, w, float(maps.probability[h, w]), bool(maps.clamped[h, w])]
        for h in range(hh) for w in range(ww)
    ]
    write_table(table_path, ["tile_row", "tile_col", "p_detect", "clamped"], rows)
    png_path = stem.with_suffix(".png")
    fig, ax = plt.subplots(figsize=(0.8 * ww + 2.5, 0.8 * hh + 2))
    im = ax.imshow(maps.probability, vmin=0.0, vmax=1.0, cmap="viridis")
    for h in range(hh):
        for w in range(ww):
            label = f"{maps.probability[h, w]:.2f}"
            if maps.clamped[h, w]:
                label += "*"
            ax.text(w, h, label, ha="center", va="center", fontsize=8,
                    color="white" if maps.probability[h, w] < 0.6 else "black")
    ax.set_title(title + " (* = conditioned tile)")
    ax.set_xlabel("tile column")
    ax.set_ylabel("tile row")
    fig.colorbar(im, ax=ax, label="P(at least one detection)")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [str(table_path), str(png_path)]


def save_loss_curves(history: Sequence[dict], stem) -> list[str]:
    """Training/validation loss plot next to the trainer's own log."""
    stem = Path(stem)
    png_path = stem.with_suffix(".png")
    steps = [e["step"] for e in history]
    losses = [e["loss"] for e in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.8, label="train")
    val = [(e["step"], e["val_loss"]) for e in history if e.get("val_loss") is not None]
    if val:
        ax.plot([v[0] for v in val], [v[1] for v in val], marker="o", ms=3,
                label="validation")
    ax.set_xlabel("step")
    ax.set_ylabel("loss (nats)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [str(png_path)]


def save_image_preview(images: Sequence[np.ndarray], path, max_panels: int = 4) -> list[str]:
    """Asinh-stretched panels of the first few images of a dataset."""
    chosen = list(images)[:max_panels]
    if not chosen:
        raise ConfigError("no images to preview")
    fig, axes = plt.subplots(1, len(chosen), figsize=(4 * len(chosen), 4),
                             squeeze=False)
    for ax, px in zip(axes[0], chosen):
        px = np.asarray(px, dtype=np.float64)
        sky = np.median(px)
        scale = max(float(np.quantile(np.abs(px - sky), 0.99)), 1e-12)
        ax.imshow(np.arcsinh((px - sky) / scale), cmap="gray")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [str(path)]
