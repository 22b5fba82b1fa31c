from __future__ import annotations

import numpy as np
import pytest

from patchbank.augment import (
    AFFINE,
    ALL_TYPES,
    AugmentConfig,
    BLUR,
    BRIGHTNESS_CONTRAST,
    FLIP,
    SHARPEN,
    active_set_for,
    apply_augmentation,
    brightness_contrast,
    flip,
    generate_augmented_set,
    variant_rng,
)


@pytest.fixture()
def checker():
    rng = np.random.default_rng(0)
    return rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)


class TestActiveSets:
    def test_visa_has_all_five(self):
        assert active_set_for("visa") == ALL_TYPES
        assert len(active_set_for("visa")) == 5

    def test_mvtec_excludes_flip(self):
        types = active_set_for("mvtec")
        assert len(types) == 4
        assert FLIP not in types

    def test_mvtec_no_sharpen_ablation(self):
        assert active_set_for("mvtec-no-sharpen") == (AFFINE, BRIGHTNESS_CONTRAST, BLUR)

    def test_unknown_profile_rejected(self):
        with pytest.raises(ValueError):
            active_set_for("cifar")


class TestApply:
    def test_flip_twice_restores(self, checker):
        assert np.array_equal(flip(flip(checker, "horizontal"), "horizontal"), checker)
        assert np.array_equal(flip(flip(checker, "vertical"), "vertical"), checker)

    def test_brightness_contrast_identity(self, checker):
        assert np.array_equal(brightness_contrast(checker, 0.0, 0.0), checker)

    def test_brightness_shifts_mean(self, checker):
        brighter = brightness_contrast(checker, 0.2, 0.0)
        assert brighter.mean() > checker.mean() + 20

    def test_rotation_90_bookkeeping(self):
        # cv2 positive angles rotate counter-clockwise about the pixel-center
        # origin; on an exact 90-degree turn the bilinear weights collapse to
        # a pure permutation of the four pixels.
        import cv2

        img = np.zeros((2, 2, 3), dtype=np.uint8)
        img[0, 0] = 10
        img[0, 1] = 20
        img[1, 1] = 30
        matrix = cv2.getRotationMatrix2D((0.5, 0.5), 90, 1.0)
        out = cv2.warpAffine(img, matrix, (2, 2), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_REPLICATE)
        expected = np.zeros((2, 2, 3), dtype=np.uint8)
        expected[0, 0] = 20  # (0,1) -> (0,0)
        expected[0, 1] = 30  # (1,1) -> (0,1)
        expected[1, 1] = 0   # (1,0) -> (1,1)
        expected[1, 0] = 10  # (0,0) -> (1,0)
        assert np.array_equal(out, expected)

    @pytest.mark.parametrize("aug_type", ALL_TYPES)
    def test_all_types_preserve_shape_and_dtype(self, checker, aug_type):
        out = apply_augmentation(checker, aug_type, variant_rng(1, 0, 0))
        assert out.shape == checker.shape
        assert out.dtype == np.uint8

    def test_unknown_type_rejected(self, checker):
        with pytest.raises(ValueError):
            apply_augmentation(checker, "solarize", variant_rng(1, 0, 0))

    def test_same_stream_same_result(self, checker):
        a = apply_augmentation(checker, AFFINE, variant_rng(3, 1, 2))
        b = apply_augmentation(checker, AFFINE, variant_rng(3, 1, 2))
        assert np.array_equal(a, b)

    def test_blur_and_sharpen_act(self, checker):
        blurred = apply_augmentation(checker, BLUR, variant_rng(5, 0, 0))
        assert not np.array_equal(blurred, checker)
        sharpened = apply_augmentation(checker, SHARPEN, variant_rng(5, 0, 1))
        assert not np.array_equal(sharpened, checker)


class TestGenerate:
    def test_zero_augs_returns_originals(self, checker):
        cfg = AugmentConfig(num_augs_per_image=0, active_types=())
        out = generate_augmented_set([("a", checker)], cfg)
        assert len(out) == 1
        assert out[0][2] is False
        assert np.array_equal(out[0][1], checker)

    def test_two_images_eight_augs_gives_eighteen(self, checker):
        cfg = AugmentConfig(num_augs_per_image=8, active_types=active_set_for("visa"), seed=0)
        out = generate_augmented_set([("a", checker), ("b", checker)], cfg)
        assert len(out) == 18
        assert sum(1 for _, _, is_aug, _ in out if not is_aug) == 2

    def test_count_scales_with_config(self, checker):
        for a in (1, 3, 16):
            cfg = AugmentConfig(num_augs_per_image=a, active_types=(BLUR,), seed=1)
            out = generate_augmented_set([("x", checker)] * 3, cfg)
            assert len(out) == 3 * (1 + a)

    def test_fixed_seed_reproducible(self, checker):
        cfg = AugmentConfig(num_augs_per_image=4, active_types=active_set_for("mvtec"), seed=9)
        one = generate_augmented_set([("a", checker)], cfg)
        two = generate_augmented_set([("a", checker)], cfg)
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(one, two))
        assert [x[0] for x in one] == [y[0] for y in two]

    def test_different_seed_changes_variants(self, checker):
        out1 = generate_augmented_set(
            [("a", checker)], AugmentConfig(num_augs_per_image=6, active_types=(AFFINE,), seed=1)
        )
        out2 = generate_augmented_set(
            [("a", checker)], AugmentConfig(num_augs_per_image=6, active_types=(AFFINE,), seed=2)
        )
        assert any(not np.array_equal(x[1], y[1]) for x, y in zip(out1[1:], out2[1:]))

    def test_variant_sources_recorded(self, checker):
        cfg = AugmentConfig(num_augs_per_image=2, active_types=(BLUR,), seed=0)
        out = generate_augmented_set([("a", checker), ("b", checker)], cfg)
        assert [entry[3] for entry in out] == ["a", "b", "a", "a", "b", "b"]

    def test_augs_without_types_rejected(self, checker):
        with pytest.raises(ValueError):
            AugmentConfig(num_augs_per_image=2, active_types=())

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            generate_augmented_set([], AugmentConfig())

    def test_drawn_types_stay_in_active_set(self, checker):
        # Reproduce the type draws and check membership for a spread of configs.
        for seed in range(5):
            types = active_set_for("visa")[: 2 + seed % 4]
            cfg = AugmentConfig(num_augs_per_image=5, active_types=types, seed=seed)
            for index in range(3):
                for variant in range(cfg.num_augs_per_image):
                    rng = variant_rng(cfg.seed, index, variant)
                    drawn = cfg.active_types[int(rng.integers(len(cfg.active_types)))]
                    assert drawn in types
