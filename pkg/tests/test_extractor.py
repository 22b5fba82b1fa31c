from __future__ import annotations

import numpy as np
import pytest

from patchbank.bank import build_bank, score_image
from patchbank.errors import ConfigError, FormatError, UnsupportedVersionError
from patchbank.extractor import (
    ExtractorSpec,
    FeaturePack,
    extract_image,
    extractor_fingerprint,
    preprocess,
    read_pack,
    read_packs,
    run_extractor,
    write_pack,
)
from patchbank.features import merge_layers, neighborhood_pool


def pixels_spec(**kwargs):
    defaults = dict(model="pixels", native_input_size=64, scale=1.0, mean=(0, 0, 0), std=(1, 1, 1))
    defaults.update(kwargs)
    return ExtractorSpec(**defaults)


class TestSpec:
    def test_effective_size_rounding(self):
        assert ExtractorSpec(model="pixels", native_input_size=224, scale=2.0).effective_input_size == 448
        assert ExtractorSpec(model="pixels", native_input_size=224, scale=0.5).effective_input_size == 112

    def test_odd_effective_size_rejected(self):
        with pytest.raises(ConfigError):
            ExtractorSpec(model="pixels", native_input_size=223, scale=1.0)

    def test_tiny_effective_size_rejected(self):
        with pytest.raises(ConfigError):
            ExtractorSpec(model="pixels", native_input_size=224, scale=0.25)

    def test_model_extractor_requires_taps(self):
        with pytest.raises(ConfigError):
            ExtractorSpec(model="some.onnx", taps=())

    def test_pixel_stride_must_divide(self):
        with pytest.raises(ConfigError):
            ExtractorSpec(model="pixels:7", native_input_size=64, scale=1.0)


class TestPreprocess:
    def test_midgray_closed_form(self):
        spec = ExtractorSpec(model="pixels", native_input_size=64, scale=1.0,
                             mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))
        img = np.full((64, 64, 3), 128, dtype=np.uint8)
        out = preprocess(img, spec)
        expected = (128 / 255.0 - np.array([0.485, 0.456, 0.406])) / np.array([0.229, 0.224, 0.225])
        assert out.shape == (3, 64, 64)
        for ch in range(3):
            assert np.allclose(out[ch], expected[ch], atol=1e-6)

    def test_already_at_size_only_rescales(self):
        spec = pixels_spec()
        img = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
        out = preprocess(img, spec)
        assert np.allclose(out, img.transpose(2, 0, 1) / 255.0, atol=1e-7)

    def test_scale_two_doubles_side(self):
        spec = ExtractorSpec(model="pixels", native_input_size=224, scale=2.0)
        img = np.zeros((100, 100, 3), dtype=np.uint8)
        assert preprocess(img, spec).shape == (3, 448, 448)

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError):
            preprocess(np.zeros((0, 10, 3), dtype=np.uint8), pixels_spec())

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (90, 70, 3), dtype=np.uint8)
        spec = pixels_spec()
        assert np.array_equal(preprocess(img, spec), preprocess(img, spec))


class TestPixelsBackend:
    def test_stride_pools_means(self):
        spec = pixels_spec(model="pixels:4")
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        img[:4, :4] = 255  # one pooled cell fully bright
        maps = extract_image(img, spec)
        assert len(maps) == 1
        assert maps[0].data.shape == (3, 16, 16)
        assert maps[0].data[0, 0, 0] == pytest.approx(1.0)
        assert maps[0].data[0, 0, 1] == pytest.approx(0.0)

    def test_stride_one_is_identity(self):
        spec = pixels_spec()
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
        maps = extract_image(img, spec)
        assert np.allclose(maps[0].data, img.transpose(2, 0, 1) / 255.0, atol=1e-7)


class TestOnnxBackend:
    def test_identity_model_round_trips_input(self, identity_onnx):
        spec = ExtractorSpec(model=str(identity_onnx), taps=("out",), native_input_size=64,
                             scale=1.0, mean=(0, 0, 0), std=(1, 1, 1))
        rng = np.random.default_rng(3)
        tensor = rng.standard_normal((3, 64, 64)).astype(np.float32)
        maps = run_extractor(spec, tensor)
        assert len(maps) == 1
        assert maps[0].layer_name == "out"
        assert np.array_equal(maps[0].data, tensor)

    def test_same_input_bit_identical(self, identity_onnx):
        spec = ExtractorSpec(model=str(identity_onnx), taps=("out",), native_input_size=64,
                             scale=1.0, mean=(0, 0, 0), std=(1, 1, 1))
        img = np.random.default_rng(4).integers(0, 256, (64, 64, 3), dtype=np.uint8)
        a = extract_image(img, spec)
        b = extract_image(img, spec)
        assert np.array_equal(a[0].data, b[0].data)

    def test_missing_tap_lists_outputs(self, identity_onnx):
        spec = ExtractorSpec(model=str(identity_onnx), taps=("layer9",), native_input_size=64,
                             scale=1.0, mean=(0, 0, 0), std=(1, 1, 1))
        with pytest.raises(ConfigError, match="out"):
            run_extractor(spec, np.zeros((3, 64, 64), dtype=np.float32))

    def test_missing_model_file(self):
        spec = ExtractorSpec(model="/nonexistent/m.onnx", taps=("out",))
        with pytest.raises(ConfigError):
            run_extractor(spec, np.zeros((3, 224, 224), dtype=np.float32))


class TestFeaturePacks:
    def _pack(self, rng, image_id="img"):
        from patchbank.features import FeatureMap

        maps = (
            FeatureMap("l2", rng.standard_normal((5, 6, 6)).astype(np.float32)),
            FeatureMap("l3", rng.standard_normal((9, 3, 3)).astype(np.float32)),
        )
        return FeaturePack(image_id=image_id, fingerprint="fp0", maps=maps)

    def test_round_trip_bit_exact(self, tmp_path):
        pack = self._pack(np.random.default_rng(5))
        path = tmp_path / "a.fpak"
        write_pack(pack, path)
        loaded = read_pack(path)
        assert loaded.image_id == pack.image_id
        assert loaded.fingerprint == pack.fingerprint
        assert [m.layer_name for m in loaded.maps] == ["l2", "l3"]
        for orig, got in zip(pack.maps, loaded.maps):
            assert got.data.tobytes() == orig.data.tobytes()

    def test_corrupt_header_rejected(self, tmp_path):
        pack = self._pack(np.random.default_rng(6))
        path = tmp_path / "a.fpak"
        write_pack(pack, path)
        blob = bytearray(path.read_bytes())
        blob[14] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            read_pack(path)

    def test_truncated_tensor_rejected(self, tmp_path):
        pack = self._pack(np.random.default_rng(7))
        path = tmp_path / "a.fpak"
        write_pack(pack, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-9])
        with pytest.raises(FormatError):
            read_pack(path)

    def test_version_gate(self, tmp_path):
        pack = self._pack(np.random.default_rng(8))
        path = tmp_path / "a.fpak"
        write_pack(pack, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (9).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(UnsupportedVersionError):
            read_pack(path)

    def test_mixed_fingerprints_named(self, tmp_path):
        rng = np.random.default_rng(9)
        a = self._pack(rng, "a")
        b = FeaturePack(image_id="b", fingerprint="other", maps=self._pack(rng).maps)
        write_pack(a, tmp_path / "a.fpak")
        write_pack(b, tmp_path / "b.fpak")
        with pytest.raises(FormatError, match="b.fpak"):
            read_packs([tmp_path / "a.fpak", tmp_path / "b.fpak"])


class TestPipelineEquivalence:
    def test_scores_identical_through_pack_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        spec = pixels_spec(model="pixels:4")
        train = rng.integers(90, 140, (64, 64, 3), dtype=np.uint8)
        query = rng.integers(90, 140, (64, 64, 3), dtype=np.uint8)
        query[20:34, 8:22] = 250

        def grid_of(img, image_id):
            maps = extract_image(img, spec)
            return merge_layers([neighborhood_pool(m, 3) for m in maps], image_id=image_id)

        bank = build_bank([grid_of(train, "train")])
        direct = score_image(bank, grid_of(query, "q"), (64, 64), 4.0)

        fingerprint = extractor_fingerprint(spec)
        pack = FeaturePack("q", fingerprint, tuple(extract_image(query, spec)))
        write_pack(pack, tmp_path / "q.fpak")
        loaded = read_pack(tmp_path / "q.fpak")
        via_pack_grid = merge_layers(
            [neighborhood_pool(m, 3) for m in loaded.maps], image_id="q"
        )
        via_pack = score_image(bank, via_pack_grid, (64, 64), 4.0)

        assert via_pack.image_score == direct.image_score
        assert np.array_equal(via_pack.anomaly_map, direct.anomaly_map)
