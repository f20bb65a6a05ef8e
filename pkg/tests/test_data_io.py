import json

import numpy as np
import pytest

from colorcapsnet import data_io
from colorcapsnet.colorspace import image_rgb_to_normalized_lab, lightness_plane
from colorcapsnet.errors import DomainError, ImageFormatError, ManifestError


class TestNetpbm:

    def test_decodes_known_p6(self, tmp_path):
        payload = bytes(range(12))
        path = tmp_path / "tiny.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + payload)
        image = data_io.load_image(str(path))
        assert image.shape == (3, 2, 2) and image.dtype == np.uint8
        # pixel (row 0, col 1) is bytes 3..5
        assert image[:, 0, 1].tolist() == [3, 4, 5]
        assert image[2, 1, 1] == 11

    def test_header_comments(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made by hand\n3 1\n# depth\n255\n\x01\x02\x03")
        assert data_io.load_image(str(path)).tolist() == [[[1, 2, 3]]]

    def test_16_bit_maxval_rejected(self, tmp_path):
        path = tmp_path / "deep.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(ImageFormatError, match="maxval"):
            data_io.load_image(str(path))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "ascii.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(ImageFormatError, match="magic"):
            data_io.load_image(str(path))

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(ImageFormatError, match="truncated"):
            data_io.load_image(str(path))

    @pytest.mark.parametrize("channels", [1, 3])
    def test_write_reproduces_file(self, tmp_path, rng, channels):
        image = rng.integers(0, 256, (channels, 5, 7), dtype=np.uint8)
        first = tmp_path / "a.pnm"
        data_io.write_image(str(first), image)
        second = tmp_path / "b.pnm"
        data_io.write_image(str(second), data_io.load_image(str(first)))
        assert first.read_bytes() == second.read_bytes()
        assert first.read_bytes().startswith(b"P5\n7 5\n255\n" if channels == 1 else b"P6\n7 5\n255\n")


class TestManifest:

    def test_relative_paths_resolve(self, manifest_dir, tmp_path):
        manifest = data_io.load_manifest(manifest_dir([(9, 9)]))
        assert manifest.records[0].color == str(tmp_path / "color_0.ppm")
        assert manifest.n == 9 and manifest.seed == 42

    def test_missing_file(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"records": [{"color": "nowhere.ppm"}]}))
        with pytest.raises(ManifestError, match="nowhere.ppm"):
            data_io.load_manifest(str(path))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text("{records: ")
        with pytest.raises(ManifestError):
            data_io.load_manifest(str(path))


class TestBuildPairs:

    def test_fallback_gray_is_lightness(self, manifest_dir, smooth_rgb):
        manifest = data_io.load_manifest(manifest_dir([(9, 9)]))
        pairs = list(data_io.build_pairs(manifest))
        assert len(pairs) == 1
        lab = image_rgb_to_normalized_lab(smooth_rgb(9, 9))
        np.testing.assert_array_equal(pairs[0].gray, lightness_plane(smooth_rgb(9, 9)))
        np.testing.assert_array_equal(pairs[0].lab, lab)

    def test_row_major_pairs(self, manifest_dir, smooth_rgb):
        manifest = data_io.load_manifest(manifest_dir([(18, 18)]))
        pairs = list(data_io.build_pairs(manifest))
        assert [p.index for p in pairs] == [0, 1, 2, 3]
        lab = image_rgb_to_normalized_lab(smooth_rgb(18, 18))
        np.testing.assert_array_equal(pairs[1].lab, lab[:, :9, 9:])
        np.testing.assert_array_equal(pairs[2].lab, lab[:, 9:, :9])

    def test_provided_gray_takes_precedence(self, manifest_dir):
        manifest = data_io.load_manifest(manifest_dir([(9, 9)], gray_sizes=[(9, 9)]))
        pairs = list(data_io.build_pairs(manifest))
        np.testing.assert_allclose(pairs[0].gray, 128 / 255.0)

    def test_size_mismatch_skipped(self, manifest_dir):
        manifest = data_io.load_manifest(manifest_dir([(9, 9), (9, 9)], gray_sizes=[(10, 10), None]))
        stats = data_io.PairStats()
        pairs = list(data_io.build_pairs(manifest, stats=stats))
        assert stats.skipped == 1 and stats.records == 2
        assert len(pairs) == 1 and pairs[0].source.endswith("color_1.ppm")

    def test_concurrent_load_keeps_order(self, manifest_dir):
        manifest = data_io.load_manifest(manifest_dir([(18, 9), (9, 27), (20, 20)]))
        sequential = list(data_io.build_pairs(manifest))
        concurrent = list(data_io.build_pairs(manifest, workers=3))
        assert [(p.source, p.index) for p in sequential] == [(p.source, p.index) for p in concurrent]
        assert len(sequential) == 2 + 3 + 9
        for a, b in zip(sequential, concurrent):
            assert np.array_equal(a.lab, b.lab)

    def test_scan_checks_ranges(self, manifest_dir):
        manifest = data_io.load_manifest(manifest_dir([(18, 18)]))
        assert data_io.scan_pairs(data_io.build_pairs(manifest)) == 4
        bad = data_io.PatchPair(np.full((1, 9, 9), 1.5, dtype=np.float32),
                                np.zeros((3, 9, 9), dtype=np.float32), "x", 0)
        with pytest.raises(DomainError):
            data_io.scan_pairs([bad])


class TestShuffleBatches:

    def test_same_seed_same_order(self):
        assert data_io.shuffle_batches(list(range(20)), 5, 1, 3) == data_io.shuffle_batches(list(range(20)), 5, 1, 3)

    def test_epochs_differ(self):
        items = list(range(16))
        assert data_io.shuffle_batches(items, 16, 1, 1) != data_io.shuffle_batches(items, 16, 1, 2)

    def test_short_final_batch(self):
        batches = data_io.shuffle_batches(list(range(10)), 4, 0, 0)
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(x for b in batches for x in b) == list(range(10))
