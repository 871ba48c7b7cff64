"""Config schema, manifests, table/figure emission, and the six CLI commands.

CLI tests invoke main() in-process with tiny configs (32x32 images, few-step
training) so the whole file stays fast.
"""

import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from tilecat import cli
from tilecat.config import (
    apply_overrides,
    build_checkerboard,
    build_net_config,
    build_prior,
    load_config,
    preset_names,
    resolve_config,
    validate_config,
    SCHEMA,
)
from tilecat.errors import ConfigError
from tilecat.catalog_io import load_catalog, load_samples, read_dataset_index
from tilecat.manifest import RunManifest, load_manifest
from tilecat.network import load_checkpoint
from tilecat.reporting import read_table, write_table


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------

def test_presets_all_resolve():
    names = preset_names()
    assert {"sparse", "crowded", "toy-border"} <= set(names)
    for name in names:
        cfg = resolve_config(name)
        build_checkerboard(cfg)
        build_prior(cfg)


def test_sparse_preset_matches_headline_shape():
    cfg = resolve_config("sparse")
    board = build_checkerboard(cfg)
    assert (board.tile_side, board.ranks, board.max_per_tile) == (4, 4, 1)
    assert build_net_config(cfg).param_channels == 80


def test_crowded_preset_tile_rate():
    cfg = resolve_config("crowded")
    board = build_checkerboard(cfg)
    rate = cfg["prior"]["mu"] * board.tile_side ** 2
    assert rate == pytest.approx(0.48)
    assert board.max_per_tile == 2


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError, match="unknown preset"):
        load_config("nonexistent")


def test_unknown_keys_rejected():
    cfg = resolve_config("sparse")
    cfg["bogus"] = 1
    with pytest.raises(ConfigError, match="bogus"):
        validate_config(cfg)
    cfg = resolve_config("sparse")
    cfg["train"]["bogus"] = 1
    with pytest.raises(ConfigError, match="train"):
        validate_config(cfg)


def test_missing_required_key_rejected():
    cfg = resolve_config("sparse")
    del cfg["checkerboard"]["tile_side"]
    with pytest.raises(ConfigError, match="tile_side"):
        validate_config(cfg)


def test_type_errors_rejected():
    cfg = resolve_config("sparse")
    cfg["train"]["steps"] = "many"
    with pytest.raises(ConfigError, match="steps"):
        validate_config(cfg)
    cfg = resolve_config("sparse")
    cfg["train"]["steps"] = True  # bool is not an int here
    with pytest.raises(ConfigError, match="steps"):
        validate_config(cfg)
    cfg = resolve_config("sparse")
    cfg["train"]["rank_selection"] = "sometimes"
    with pytest.raises(ConfigError, match="rank_selection"):
        validate_config(cfg)


def test_defaults_are_echoed_everywhere():
    resolved = validate_config(
        {
            "checkerboard": {
                "tile_side": 4, "max_per_tile": 1,
                "object_radius": 6.0, "flux_threshold": 22.5,
            },
            "image": {"height": 64, "width": 64},
            "prior": {
                "mu": 1e-3, "star_fraction": 0.5,
                "star_flux": {"alpha": 0.5, "bright_mag": 17, "faint_mag": 22},
                "galaxy_flux": {"alpha": 0.5, "bright_mag": 17, "faint_mag": 22},
            },
            "render": {"background": 100.0, "psf_sigma": 1.0},
        }
    )

    def check(schema, section, path):
        for key, node in schema.items():
            assert key in section, f"missing {path}{key}"
            if isinstance(node, dict):
                check(node, section[key], f"{path}{key}.")

    check(SCHEMA, resolved, "")


def test_null_geometry_takes_structure_matched_values():
    cfg = resolve_config("sparse")
    cfg["checkerboard"]["ranks"] = None
    cfg["checkerboard"]["image_radius"] = None
    cfg["checkerboard"]["context_radius"] = None
    board = build_checkerboard(validate_config(cfg))
    # T=4, R=6: sqrt(K) = ceil(2R/T + 1) = 4
    assert board.ranks == 16
    assert board.image_radius == 6
    assert board.context_radius == 3


def test_override_mapping_per_command():
    cfg = resolve_config("sparse")
    out = apply_overrides(cfg, "simulate", seed=9, n=7)
    assert out["seed"] == 9 and out["simulate"]["n"] == 7
    assert apply_overrides(cfg, "train", n=12)["train"]["steps"] == 12
    assert apply_overrides(cfg, "catalog", n=5)["catalog"]["n_samples"] == 5
    assert apply_overrides(cfg, "calibrate", n=5)["calibrate"]["n_draws"] == 5
    assert apply_overrides(cfg, "probe-border", n=5)["probe"]["n_noise"] == 5
    out = apply_overrides(cfg, "catalog", threshold=0.9, feature_set="rich")
    assert out["catalog"]["threshold"] == 0.9
    assert out["catalog"]["feature_set"] == "rich"
    assert apply_overrides(cfg, "train", k=9)["checkerboard"]["ranks"] == 9


def test_override_misuse_rejected():
    cfg = resolve_config("sparse")
    with pytest.raises(ConfigError, match="perfect square"):
        apply_overrides(cfg, "train", k=3)
    with pytest.raises(ConfigError, match="threshold"):
        apply_overrides(cfg, "train", threshold=0.5)
    with pytest.raises(ConfigError, match="feature-set"):
        apply_overrides(cfg, "simulate", feature_set="rich")
    with pytest.raises(ConfigError, match="--n"):
        apply_overrides(cfg, "report", n=3)


def test_overrides_do_not_mutate_input():
    cfg = resolve_config("sparse")
    before = cfg["checkerboard"]["ranks"]
    apply_overrides(cfg, "train", k=1)
    assert cfg["checkerboard"]["ranks"] == before


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    m = RunManifest("simulate", 3, {"a": 1})
    (tmp_path / "x.tsv").write_text("x\n")
    m.register("x", tmp_path / "x.tsv", tmp_path)
    m.metrics = {"n": 2}
    m.save(tmp_path)
    back = load_manifest(tmp_path)
    assert back.command == "simulate"
    assert back.seed == 3
    assert back.config == {"a": 1}
    assert back.artifacts == {"x": "x.tsv"}
    assert back.metrics == {"n": 2}
    assert back.versions["tilecat"]
    assert back.artifact_path("x", tmp_path).read_text() == "x\n"
    with pytest.raises(ConfigError, match="no artifact"):
        back.artifact_path("y", tmp_path)


def test_manifest_errors(tmp_path):
    with pytest.raises(ConfigError, match="no manifest"):
        load_manifest(tmp_path / "none")
    (tmp_path / "manifest.json").write_text("{}")
    with pytest.raises(ConfigError, match="missing fields"):
        load_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text("not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_manifest(tmp_path)


# ---------------------------------------------------------------------------
# reporting tables
# ---------------------------------------------------------------------------

def test_write_table_round_trip(tmp_path):
    path = tmp_path / "t.tsv"
    write_table(path, ["a", "b"], [[1, 0.5], [None, "x"], [True, 1e-17]])
    header, rows = read_table(path)
    assert header == ["a", "b"]
    assert rows == [["1", "0.5"], ["NA", "x"], ["True", "1e-17"]]


def test_write_table_width_mismatch(tmp_path):
    with pytest.raises(ConfigError, match="width"):
        write_table(tmp_path / "t.tsv", ["a"], [[1, 2]])


# ---------------------------------------------------------------------------
# CLI end to end
# ---------------------------------------------------------------------------

def tiny_config(**sections) -> dict:
    cfg = load_config("toy-border")
    cfg["image"] = {"height": 32, "width": 32}
    cfg["net"] = {
        "backbone_channels": [8], "backbone_post_blocks": 1,
        "pathway_channels": 8, "pathway_blocks": 1,
        "head_channels": 8, "head_blocks": 1, "group_size": 4,
    }
    cfg["train"] = {"steps": 3, "batch_size": 2, "normalizer_images": 2}
    cfg["simulate"] = {"n": 2, "preview": True}
    for key, val in sections.items():
        cfg.setdefault(key, {}).update(val)
    return cfg


def write_cfg(path: Path, cfg: dict) -> str:
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> train -> catalog artifacts shared by the CLI tests."""
    root = tmp_path_factory.mktemp("pipeline")
    sim_cfg = write_cfg(root / "sim.yaml", tiny_config())
    assert cli.main(["simulate", "--config", sim_cfg, "--out",
                     str(root / "sim"), "--seed", "11"]) == 0
    train_cfg = write_cfg(
        root / "train.yaml",
        tiny_config(train={"data": str(root / "sim"), "checkpoint_every": 2}),
    )
    assert cli.main(["train", "--config", train_cfg, "--out",
                     str(root / "run"), "--seed", "11"]) == 0
    cat_cfg = write_cfg(
        root / "cat.yaml",
        tiny_config(catalog={"checkpoint": str(root / "run" / "final.pt"),
                             "data": str(root / "sim")}),
    )
    assert cli.main(["catalog", "--config", cat_cfg, "--out",
                     str(root / "cat"), "--seed", "11"]) == 0
    return root


def test_simulate_outputs(pipeline):
    out = pipeline / "sim"
    pairs = read_dataset_index(out / "index.tsv")
    assert len(pairs) == 2
    for img, cat in pairs:
        assert Path(img).is_file() and Path(cat).is_file()
    assert (out / "preview.png").is_file()
    manifest = load_manifest(out)
    assert manifest.command == "simulate"
    assert manifest.metrics["n_images"] == 2
    # the full resolved config is echoed, including untouched defaults
    assert manifest.config["calibrate"]["n_draws"] == 20000


def test_simulate_same_seed_byte_identical(pipeline, tmp_path):
    cfg = write_cfg(tmp_path / "sim.yaml", tiny_config())
    assert cli.main(["simulate", "--config", cfg, "--out",
                     str(tmp_path / "again"), "--seed", "11"]) == 0
    for sub in ("images/00000.img", "catalogs/00001.cat", "index.tsv"):
        assert (tmp_path / "again" / sub).read_bytes() == \
            (pipeline / "sim" / sub).read_bytes()


def test_train_outputs(pipeline):
    out = pipeline / "run"
    assert (out / "final.pt").is_file()
    assert (out / "ckpt_0000002.pt").is_file()
    assert (out / "loss_curve.png").is_file()
    header, rows = read_table(out / "train_log.tsv")
    assert header == ["step", "loss", "val_loss"]
    assert len(rows) == 3
    manifest = load_manifest(out)
    assert manifest.metrics["steps"] == 3
    assert np.isfinite(manifest.metrics["exposure_gap"])
    bundle = load_checkpoint(out / "final.pt")
    assert bundle.checkerboard.ranks == 4


def test_train_resume_reproduces_trajectory(pipeline, tmp_path):
    base = tiny_config(train={"data": str(pipeline / "sim")})
    resumed = tiny_config(
        train={"data": str(pipeline / "sim"),
               "resume_from": str(pipeline / "run" / "ckpt_0000002.pt")}
    )
    cfg = write_cfg(tmp_path / "resume.yaml", resumed)
    assert cli.main(["train", "--config", cfg, "--out",
                     str(tmp_path / "resumed"), "--seed", "11"]) == 0
    _, rows_full = read_table(pipeline / "run" / "train_log.tsv")
    _, rows_res = read_table(tmp_path / "resumed" / "train_log.tsv")
    assert rows_res == rows_full[2:]


def test_train_k_override_lands_in_checkpoint(pipeline, tmp_path):
    cfg = write_cfg(tmp_path / "k1.yaml",
                    tiny_config(train={"data": str(pipeline / "sim")}))
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "k1"),
                     "--seed", "11", "--k", "1", "--n", "2"]) == 0
    bundle = load_checkpoint(tmp_path / "k1" / "final.pt")
    assert bundle.checkerboard.ranks == 1
    assert bundle.step == 2


def test_catalog_mode_outputs(pipeline):
    out = pipeline / "cat"
    header, rows = read_table(out / "processed.tsv")
    assert len(rows) == 2
    catalog, ch = load_catalog(out / "catalogs" / "00000.cat")
    assert ch.image_dims == (32, 32)
    manifest = load_manifest(out)
    assert manifest.metrics["mode"] == "mode"
    assert manifest.metrics["seconds_per_image"] > 0


def test_catalog_rerun_byte_identical(pipeline, tmp_path):
    cfg = write_cfg(
        tmp_path / "cat.yaml",
        tiny_config(catalog={"checkpoint": str(pipeline / "run" / "final.pt"),
                             "data": str(pipeline / "sim")}),
    )
    assert cli.main(["catalog", "--config", cfg, "--out",
                     str(tmp_path / "cat2"), "--seed", "11"]) == 0
    for name in ("00000.cat", "00001.cat"):
        assert (tmp_path / "cat2" / "catalogs" / name).read_bytes() == \
            (pipeline / "cat" / "catalogs" / name).read_bytes()


def test_catalog_sample_mode(pipeline, tmp_path):
    cfg = write_cfg(
        tmp_path / "samp.yaml",
        tiny_config(catalog={"checkpoint": str(pipeline / "run" / "final.pt"),
                             "data": str(pipeline / "sim"),
                             "mode": "sample", "n_samples": 3}),
    )
    assert cli.main(["catalog", "--config", cfg, "--out",
                     str(tmp_path / "s"), "--seed", "4"]) == 0
    samples, _ = load_samples(tmp_path / "s" / "catalogs" / "00000.cat")
    assert len(samples) <= 3  # trailing empty draws collapse in the file
    assert cli.main(["catalog", "--config", cfg, "--out",
                     str(tmp_path / "s0"), "--n", "0"]) == 2


def test_indivisible_dims_rejected(tmp_path):
    odd = tiny_config()
    odd["image"] = {"height": 30, "width": 32}
    odd["simulate"] = {"n": 1, "preview": False}
    bad_sim = write_cfg(tmp_path / "bad.yaml", odd)
    assert cli.main(["simulate", "--config", bad_sim, "--out",
                     str(tmp_path / "bad")]) == 2


def test_calibrate_oracle_mode(tmp_path):
    cfg = write_cfg(
        tmp_path / "cal.yaml",
        tiny_config(calibrate={"sampler": "oracle", "n_draws": 1500,
                               "region_kind": "block", "block_tiles": 2}),
    )
    assert cli.main(["calibrate", "--config", cfg, "--out",
                     str(tmp_path / "cal"), "--seed", "2"]) == 0
    header, rows = read_table(tmp_path / "cal" / "confusion_oracle.tsv")
    counts = np.array([[int(v) for v in r[1:]] for r in rows])
    assert counts.sum() == 1500
    assert (tmp_path / "cal" / "confusion_oracle.png").is_file()
    assert (tmp_path / "cal" / "confusion_oracle_asymmetry.tsv").is_file()


def test_calibrate_net_mode_two_models(pipeline, tmp_path):
    ckpt = str(pipeline / "run" / "final.pt")
    cfg = write_cfg(
        tmp_path / "cal.yaml",
        tiny_config(calibrate={"checkpoints": {"a": ckpt, "b": ckpt},
                               "n_draws": 30, "batch_size": 15,
                               "heldout_n": 3}),
    )
    assert cli.main(["calibrate", "--config", cfg, "--out",
                     str(tmp_path / "cal"), "--seed", "3"]) == 0
    header, rows = read_table(tmp_path / "cal" / "heldout.tsv")
    assert [r[0] for r in rows] == ["a", "b"]
    # identical checkpoints on identical draws give identical totals
    assert rows[0][2] == rows[1][2]
    header, rows = read_table(tmp_path / "cal" / "pairwise.tsv")
    assert {(r[0], r[1]) for r in rows} == {("a", "b"), ("b", "a")}
    # zero-variance ties: one-sided p-value is 1 in both directions
    assert all(float(r[3]) == 1.0 for r in rows)


def test_calibrate_requires_checkpoints(tmp_path):
    cfg = write_cfg(tmp_path / "cal.yaml",
                    tiny_config(calibrate={"sampler": "net", "n_draws": 10}))
    assert cli.main(["calibrate", "--config", cfg, "--out",
                     str(tmp_path / "cal")]) == 2


def test_probe_border_outputs(pipeline, tmp_path):
    ckpt = str(pipeline / "run" / "final.pt")
    cfg = write_cfg(
        tmp_path / "probe.yaml",
        tiny_config(probe={"checkpoints": {"m": ckpt}, "magnitudes": [20.0],
                           "offset_span_tiles": 0.5, "offset_step": 0.5,
                           "n_noise": 3, "maps": True, "map_n_samples": 2,
                           "blend": True}),
    )
    assert cli.main(["probe-border", "--config", cfg, "--out",
                     str(tmp_path / "p"), "--seed", "6"]) == 0
    header, rows = read_table(tmp_path / "p" / "border_curves.tsv")
    assert header == ["model", "magnitude", "offset", "frequency"]
    assert len(rows) == 5  # offsets -1, -0.5, 0, 0.5, 1
    manifest = load_manifest(tmp_path / "p")
    assert "min_freq_m_mag20" in manifest.metrics
    for scene in ("star", "blend"):
        for variant in ("free", "clamp-empty", "clamp-truth"):
            stem = tmp_path / "p" / f"detmap_m_{scene}_{variant}"
            assert stem.with_suffix(".tsv").is_file()
            assert stem.with_suffix(".png").is_file()
    # clamping the star's own tile forces its indicator
    _, rows = read_table(tmp_path / "p" / "detmap_m_star_clamp-truth.tsv")
    probs = {(int(r[0]), int(r[1])): (float(r[2]), r[3]) for r in rows}
    star_tile = (4, 4)  # border row 16, star col 18, tile side 4
    assert probs[star_tile] == (1.0, "True")
    _, rows = read_table(tmp_path / "p" / "detmap_m_star_clamp-empty.tsv")
    probs = {(int(r[0]), int(r[1])): (float(r[2]), r[3]) for r in rows}
    assert probs[star_tile] == (0.0, "True")


def test_report_single_and_delta(pipeline, tmp_path):
    cfg = write_cfg(
        tmp_path / "rep.yaml",
        tiny_config(report={"manifests": [str(pipeline / "run")]}),
    )
    assert cli.main(["report", "--config", cfg, "--out",
                     str(tmp_path / "rep1")]) == 0
    header, rows = read_table(tmp_path / "rep1" / "report.tsv")
    assert header == ["metric", "run"]

    k1 = write_cfg(
        tmp_path / "k1.yaml",
        tiny_config(train={"data": str(pipeline / "sim"),
                           "checkpoint_every": 2}),
    )
    assert cli.main(["train", "--config", k1, "--out", str(tmp_path / "k1run"),
                     "--seed", "11", "--k", "1"]) == 0
    cfg = write_cfg(
        tmp_path / "rep2.yaml",
        tiny_config(report={"manifests": [str(pipeline / "run"),
                                          str(tmp_path / "k1run")]}),
    )
    assert cli.main(["report", "--config", cfg, "--out",
                     str(tmp_path / "rep2")]) == 0
    header, rows = read_table(tmp_path / "rep2" / "report.tsv")
    assert header[-1] == "delta(k1run-run)"
    by_metric = {r[0]: r for r in rows}
    assert by_metric["ranks"][1:3] == ["4", "1"]
    assert float(by_metric["ranks"][3]) == -3.0


def test_report_no_delta_when_more_differs(pipeline, tmp_path):
    other = write_cfg(tmp_path / "other.yaml",
                      tiny_config(train={"data": str(pipeline / "sim")}))
    assert cli.main(["train", "--config", other, "--out",
                     str(tmp_path / "other_run"), "--seed", "12", "--k", "1",
                     "--n", "2"]) == 0
    cfg = write_cfg(
        tmp_path / "rep.yaml",
        tiny_config(report={"manifests": [str(pipeline / "run"),
                                          str(tmp_path / "other_run")]}),
    )
    assert cli.main(["report", "--config", cfg, "--out",
                     str(tmp_path / "rep")]) == 0
    header, _ = read_table(tmp_path / "rep" / "report.tsv")
    assert len(header) == 3  # metric + two runs, no delta column


def test_report_refuses_conflicting_tile_sides(pipeline, tmp_path):
    small = tiny_config()
    small["checkerboard"]["tile_side"] = 2
    small["checkerboard"]["object_radius"] = 3.0
    small["checkerboard"]["image_radius"] = 3
    small["simulate"] = {"n": 1, "preview": False}
    cfg = write_cfg(tmp_path / "t2.yaml", small)
    assert cli.main(["simulate", "--config", cfg, "--out",
                     str(tmp_path / "t2sim")]) == 0
    rep = write_cfg(
        tmp_path / "rep.yaml",
        tiny_config(report={"manifests": [str(pipeline / "sim"),
                                          str(tmp_path / "t2sim")]}),
    )
    assert cli.main(["report", "--config", rep, "--out",
                     str(tmp_path / "rep")]) == 2


def test_exit_code_2_on_config_errors(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.yaml"),
                     "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["simulate", "--config", "not-a-preset",
                     "--out", str(tmp_path / "o")]) == 2
    cfg = write_cfg(tmp_path / "rep.yaml", tiny_config())
    assert cli.main(["report", "--config", cfg, "--out",
                     str(tmp_path / "o")]) == 2  # no manifests listed


def test_exit_code_3_on_divergence(pipeline, tmp_path):
    cfg = tiny_config(train={"data": str(pipeline / "sim"), "steps": 10,
                             "lr": 1e12})
    path = write_cfg(tmp_path / "dv.yaml", cfg)
    assert cli.main(["train", "--config", path, "--out",
                     str(tmp_path / "dv")]) == 3


def test_exit_code_4_on_io_error(tmp_path):
    cfg = write_cfg(tmp_path / "sim.yaml", tiny_config())
    blocked = tmp_path / "blocked"
    blocked.write_text("a file, not a directory\n")
    assert cli.main(["simulate", "--config", cfg, "--out",
                     str(blocked)]) == 4


def test_preset_usable_from_cli(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["simulate", "--config", "sparse", "--n", "1"]) == 0
    out = tmp_path / "tilecat-out" / "simulate"
    assert (out / "manifest.json").is_file()
    assert load_manifest(out).metrics["n_images"] == 1
