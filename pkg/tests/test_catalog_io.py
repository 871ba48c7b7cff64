"""File formats: catalogs, samples, images, dataset indexes."""

import numpy as np
import pytest

from tilecat.catalog_io import (
    CatalogHeader,
    load_catalog,
    load_image,
    load_samples,
    read_dataset_index,
    save_catalog,
    save_image,
    save_samples,
    write_dataset_index,
)
from tilecat.catalogs import Catalog, Source, SourceKind
from tilecat.errors import ConfigError


def awkward_floats(rng, n):
    """Values whose decimal round trips catch precision loss."""
    vals = rng.random(n) * 10
    return [float(np.nextafter(v, v + 1)) for v in vals]


def test_catalog_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    rows = awkward_floats(rng, 8)
    cols = awkward_floats(rng, 8)
    fluxes = [abs(v) + 1e-3 for v in awkward_floats(rng, 8)]
    sources = []
    for i in range(8):
        if i % 2:
            sources.append(
                Source(rows[i], cols[i], SourceKind.GALAXY, fluxes[i],
                       tuple(awkward_floats(rng, 6)))
            )
        else:
            sources.append(Source(rows[i], cols[i], SourceKind.STAR, fluxes[i]))
    cat = Catalog(tuple(sources), (16, 16))
    header = CatalogHeader((16, 16), 4, 2, 24.0)
    path = tmp_path / "cat.txt"
    save_catalog(path, cat, header)
    loaded, h2 = load_catalog(path)
    assert h2.image_dims == (16, 16)
    assert h2.tile_side == 4 and h2.max_per_tile == 2
    assert h2.flux_threshold == 24.0
    assert loaded.sources == cat.sources  # bit-exact float fields
    # star shapes come back as None
    assert loaded.sources[0].shape is None

    # saving the loaded catalog again produces identical bytes
    path2 = tmp_path / "cat2.txt"
    save_catalog(path2, loaded, h2)
    assert path.read_bytes() == path2.read_bytes()


def test_empty_catalog_round_trip(tmp_path):
    path = tmp_path / "empty.txt"
    save_catalog(path, Catalog((), (8, 8)), CatalogHeader((8, 8), 2, 1, 22.5))
    loaded, _ = load_catalog(path)
    assert len(loaded) == 0


def test_header_dim_mismatch(tmp_path):
    with pytest.raises(ConfigError):
        save_catalog(tmp_path / "x.txt", Catalog((), (8, 8)), CatalogHeader((4, 4), 2, 1, 22.5))


def test_samples_round_trip(tmp_path):
    header = CatalogHeader((8, 8), 2, 1, 24.0)
    s1 = Catalog((Source(1.5, 2.5, SourceKind.STAR, 3.0),), (8, 8))
    s2 = Catalog((), (8, 8))
    s3 = Catalog(
        (
            Source(0.5, 0.5, SourceKind.STAR, 1.0),
            Source(7.5, 7.5, SourceKind.GALAXY, 2.0, (0.4, 1.0, 0.5, 0.3, 1.2, 0.7)),
        ),
        (8, 8),
    )
    path = tmp_path / "samples.txt"
    save_samples(path, [s1, s2, s3], header)
    loaded, _ = load_samples(path)
    assert len(loaded) == 3
    assert loaded[0].sources == s1.sources
    assert len(loaded[1]) == 0  # empty sample preserved by index
    assert set(loaded[2].sources) == set(s3.sources)


def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    pixels = rng.random((6, 9)).astype(np.float32) * 500
    path = tmp_path / "img.dat"
    save_image(path, pixels, seed=123, noise_model="poisson")
    loaded, meta = load_image(path)
    assert np.array_equal(loaded, pixels)
    assert loaded.dtype == np.float32
    assert meta["seed"] == "123" and meta["noise_model"] == "poisson"


def test_image_truncated_payload(tmp_path):
    path = tmp_path / "img.dat"
    save_image(path, np.zeros((4, 4), dtype=np.float32), 0, "poisson")
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ConfigError):
        load_image(path)


def test_dataset_index_round_trip(tmp_path):
    pairs = [("images/im_0.dat", "catalogs/cat_0.txt"), ("images/im_1.dat", "catalogs/cat_1.txt")]
    path = tmp_path / "index.txt"
    write_dataset_index(path, pairs)
    loaded = read_dataset_index(path)
    assert loaded == [
        (str(tmp_path / a), str(tmp_path / b)) for a, b in pairs
    ]
