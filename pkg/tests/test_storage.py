"""Index and feature-grid files: layout, fail-closed decoding and dataset directories."""

import struct

import numpy as np
import pytest

from hyperplace.errors import FormatError, InvalidInputError
from hyperplace.hierarchy import FeatureGrid, PoolingSpec, window_layout
from hyperplace.hypgeo import BallConfig, BallPoint
from hyperplace.index import RetrievalConfig, index_from_trees, retrieve
from hyperplace.storage import (
    INDEX_HEADER,
    decode_grids,
    decode_index,
    encode_grids,
    encode_index,
    index_storage_bytes,
    load_index,
    persist_index,
    read_ground_truth,
    read_panorama_dir,
    read_pooling_spec,
    read_query_grid,
    record_payload_bytes,
    write_grids,
    write_pooling_spec,
)
from hyperplace.synth import random_trees, write_dataset


@pytest.fixture
def index():
    config = BallConfig(dim=3, curvature=0.5)
    trees = random_trees(6, 3, config, seed=5)
    geotags = [None, (47.1, 8.5), None, (0.0, -1.25), None, (1.0, 2.0)]
    return index_from_trees(trees, config, window_layout(3), stored_levels=(1, 3), ids=[0, 5, 9, 12, 40, 2**40], geotags=geotags)


def patched(data, offset, fmt, value):
    data = bytearray(data)
    struct.pack_into(fmt, data, offset, value)
    return bytes(data)


class TestStorageAccounting:
    def test_payload_example(self):
        assert record_payload_bytes(2048, (1, 5)) == 17 * 2048 * 4

    def test_payload_ratio_of_presets(self):
        ratio = record_payload_bytes(2048, (1, 4)) / record_payload_bytes(2048, (1, 5))
        assert ratio == pytest.approx(9 / 17)

    def test_size_matches_encoding(self, index):
        assert index_storage_bytes(index) == len(encode_index(index))


class TestIndexRoundtrip:
    def test_roundtrip_preserves_everything(self, index):
        loaded = decode_index(encode_index(index))
        assert loaded.config == index.config
        assert loaded.depth == index.depth
        assert loaded.stored_levels == (1, 3)
        assert list(loaded.ids) == list(index.ids)
        assert [r.geotag for r in loaded.records] == [r.geotag for r in index.records]
        for level in index.stored_levels:
            np.testing.assert_array_equal(loaded.level_array(level), index.level_array(level))

    def test_query_results_identical_after_reload(self, index, tmp_path, rng):
        path = tmp_path / "db.hvpr"
        written = persist_index(index, path)
        assert written == path.stat().st_size
        loaded = load_index(path)
        config = RetrievalConfig(k_prime=4, top_k=4, levels=(3,))
        for _ in range(50):
            v = rng.normal(size=3)
            h_q = BallPoint(v * 0.4 / np.linalg.norm(v), index.config)
            assert retrieve(h_q, loaded, config) == retrieve(h_q, index, config)

    def test_header_layout(self, index):
        data = encode_index(index)
        magic, version, curvature, depth, bitmask, dim, count = INDEX_HEADER.unpack_from(data, 0)
        assert INDEX_HEADER.size == 32
        assert (magic, version, curvature, depth, bitmask, dim, count) == (b"HVPR", 1, 0.5, 3, 0b101, 3, 6)


class TestIndexFailClosed:
    @pytest.mark.parametrize(
        ("offset", "fmt", "value"),
        [
            (4, "<I", 2),
            (8, "<d", -1.0),
            (8, "<d", float("nan")),
            (16, "<H", 1),
            (18, "<H", 0),
            (18, "<H", 0b1000),
            (20, "<I", 0),
        ],
    )
    def test_bad_header_field(self, index, offset, fmt, value):
        with pytest.raises(FormatError) as error:
            decode_index(patched(encode_index(index), offset, fmt, value))
        assert error.value.offset == offset

    def test_bad_magic(self, index):
        data = b"XXXX" + encode_index(index)[4:]
        with pytest.raises(FormatError) as error:
            decode_index(data)
        assert error.value.offset == 0
        assert "offset 0" in str(error.value)

    @pytest.mark.parametrize("cut", [10, 33, 100, -1])
    def test_truncation(self, index, cut):
        with pytest.raises(FormatError):
            decode_index(encode_index(index)[:cut])

    def test_trailing_bytes(self, index):
        with pytest.raises(FormatError):
            decode_index(encode_index(index) + b"\x00")

    def test_ids_out_of_order(self, index):
        data = encode_index(index)
        first = INDEX_HEADER.size
        second = first + 9 + record_payload_bytes(3, (1, 3))
        data = patched(data, second, "<Q", 0)
        with pytest.raises(FormatError) as error:
            decode_index(data)
        assert error.value.offset == second

    def test_bad_geotag_flag(self, index):
        data = patched(encode_index(index), INDEX_HEADER.size + 8, "<B", 7)
        with pytest.raises(FormatError):
            decode_index(data)

    def test_descriptor_outside_ball(self, index):
        data = patched(encode_index(index), INDEX_HEADER.size + 9, "<f", 2.0)
        with pytest.raises(FormatError):
            decode_index(data)

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_index(tmp_path / "absent.hvpr")


class TestGridFiles:
    def test_roundtrip(self, rng, tmp_path):
        grids = [FeatureGrid(rng.uniform(size=(2, 3, 4))) for _ in range(3)]
        path = tmp_path / "p.hfgr"
        write_grids(path, grids)
        decoded = decode_grids(path.read_bytes())
        assert len(decoded) == 3
        for original, loaded in zip(grids, decoded):
            np.testing.assert_array_equal(loaded.values, original.values.astype(np.float32))

    def test_mixed_shapes_rejected(self):
        with pytest.raises(InvalidInputError):
            encode_grids([FeatureGrid(np.zeros((1, 1, 2))), FeatureGrid(np.zeros((1, 2, 2)))])

    def test_bad_magic_and_truncation(self):
        data = encode_grids([FeatureGrid(np.ones((1, 2, 2)))])
        with pytest.raises(FormatError):
            decode_grids(b"NOPE" + data[4:])
        with pytest.raises(FormatError):
            decode_grids(data[:-4])
        with pytest.raises(FormatError):
            decode_grids(data + b"\x00\x00\x00\x00")

    def test_query_file_holds_one_grid(self, tmp_path):
        path = tmp_path / "q.hfgr"
        write_grids(path, [FeatureGrid(np.ones((1, 1, 2)))] * 2)
        with pytest.raises(FormatError):
            read_query_grid(path)


class TestDatasetDirectories:
    def test_panorama_dir_and_ground_truth(self, small_dataset, tmp_path):
        write_dataset(small_dataset, tmp_path)
        sources = read_panorama_dir(tmp_path / "panoramas")
        assert [s.id for s in sources] == [p.id for p in small_dataset.panoramas]
        assert sources[1].geotag == pytest.approx(small_dataset.panoramas[1].geotag)
        assert len(sources[0].leaf_grids) == small_dataset.layout.leaf_count
        truth = read_ground_truth(tmp_path / "queries")
        assert list(truth.columns) == ["query", "panorama_id", "leaf"]
        assert list(truth["panorama_id"]) == small_dataset.ground_truth()

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_panorama_dir(tmp_path / "nowhere")

    def test_pooling_sidecar(self, tmp_path):
        index_path = tmp_path / "db.hvpr"
        assert read_pooling_spec(index_path) is None
        spec = PoolingSpec(levels=5, channels=32, dim=8, gem_p=2.5, seed=4)
        assert write_pooling_spec(spec, index_path).name == "db.hvpr.pooling.json"
        assert read_pooling_spec(index_path) == spec
