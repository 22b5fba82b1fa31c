"""Image-level training-set augmentation.

Each training image gets a fixed number of augmented variants, and every
variant applies exactly one transformation type drawn uniformly from the
dataset's active set.  Flipping is excluded from mvtec-style runs because a
mirrored part is itself a defect for several of those categories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

AFFINE = "affine"
BRIGHTNESS_CONTRAST = "brightness_contrast"
BLUR = "blur"
SHARPEN = "sharpen"
FLIP = "flip"

ALL_TYPES = (AFFINE, BRIGHTNESS_CONTRAST, BLUR, SHARPEN, FLIP)

# Parameter ranges are configuration, tuned for moderate variability.
DEFAULT_PARAMS = {
    "rotation_deg": (-15.0, 15.0),
    "scale": (0.9, 1.1),
    "translate_frac": (-0.05, 0.05),
    "brightness_delta": (-0.2, 0.2),
    "contrast_delta": (-0.2, 0.2),
    "blur_kernels": (3, 5, 7),
    "sharpen_alpha": (0.2, 0.5),
    "sharpen_lightness": (0.5, 1.0),
}


@dataclass(frozen=True)
class AugmentConfig:
    num_augs_per_image: int = 0
    active_types: tuple[str, ...] = ()
    seed: int = 0
    params: dict = field(default_factory=lambda: dict(DEFAULT_PARAMS))

    def __post_init__(self):
        if self.num_augs_per_image < 0:
            raise ValueError("num_augs_per_image must be >= 0")
        unknown = set(self.active_types) - set(ALL_TYPES)
        if unknown:
            raise ValueError(f"unknown augmentation types: {sorted(unknown)}")
        if self.num_augs_per_image > 0 and not self.active_types:
            raise ValueError("augmentation requested but active_types is empty")
        merged = dict(DEFAULT_PARAMS)
        merged.update(self.params)
        object.__setattr__(self, "params", merged)
        object.__setattr__(self, "active_types", tuple(self.active_types))


def active_set_for(dataset_profile: str) -> tuple[str, ...]:
    """Augmentation types allowed for a dataset profile.

    visa-style parts tolerate mirroring, mvtec-style parts do not; the
    mvtec-no-sharpen profile is the reduced set that stays beneficial there.
    """
    profiles = {
        "visa": ALL_TYPES,
        "mvtec": (AFFINE, BRIGHTNESS_CONTRAST, BLUR, SHARPEN),
        "mvtec-no-sharpen": (AFFINE, BRIGHTNESS_CONTRAST, BLUR),
    }
    if dataset_profile not in profiles:
        raise ValueError(f"unknown dataset profile {dataset_profile!r}; known: {sorted(profiles)}")
    return profiles[dataset_profile]


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected uint8 RGB (h, w, 3), got {image.dtype} {image.shape}")
    return image


def _uniform(rng: np.random.Generator, bounds) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi))


def apply_augmentation(
    image: np.ndarray, aug_type: str, rng: np.random.Generator, params: dict | None = None
) -> np.ndarray:
    """Apply one augmentation with parameters drawn from `rng`.

    Output has the input's shape and dtype; values stay in [0, 255].
    """
    image = _check_image(image)
    p = dict(DEFAULT_PARAMS)
    if params:
        p.update(params)
    h, w = image.shape[:2]

    if aug_type == AFFINE:
        angle = _uniform(rng, p["rotation_deg"])
        scale = _uniform(rng, p["scale"])
        tx = _uniform(rng, p["translate_frac"]) * w
        ty = _uniform(rng, p["translate_frac"]) * h
        matrix = cv2.getRotationMatrix2D((w / 2.0 - 0.5, h / 2.0 - 0.5), angle, scale)
        matrix[0, 2] += tx
        matrix[1, 2] += ty
        return cv2.warpAffine(
            image, matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
        )

    if aug_type == BRIGHTNESS_CONTRAST:
        brightness = _uniform(rng, p["brightness_delta"])
        contrast = _uniform(rng, p["contrast_delta"])
        return brightness_contrast(image, brightness, contrast)

    if aug_type == BLUR:
        kernels = tuple(p["blur_kernels"])
        ksize = int(kernels[rng.integers(len(kernels))])
        return cv2.blur(image, (ksize, ksize))

    if aug_type == SHARPEN:
        alpha = _uniform(rng, p["sharpen_alpha"])
        lightness = _uniform(rng, p["sharpen_lightness"])
        return sharpen(image, alpha, lightness)

    if aug_type == FLIP:
        axis = int(rng.integers(2))  # 0 = vertical, 1 = horizontal
        return flip(image, "horizontal" if axis else "vertical")

    raise ValueError(f"unknown augmentation type {aug_type!r}")


def brightness_contrast(image: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    """Contrast (1 + contrast) around mid-gray, then brightness shift; 0/0 is identity."""
    image = _check_image(image)
    x = image.astype(np.float32) / 255.0
    x = (x - 0.5) * (1.0 + contrast) + 0.5 + brightness
    return np.clip(x * 255.0, 0, 255).round().astype(np.uint8)


def sharpen(image: np.ndarray, alpha: float, lightness: float) -> np.ndarray:
    """Unsharp-style kernel blend: (1 - alpha) * identity + alpha * edge kernel."""
    image = _check_image(image)
    identity = np.array([[0, 0, 0], [0, 1, 0], [0, 0, 0]], dtype=np.float32)
    edge = np.array([[-1, -1, -1], [-1, 8 + lightness, -1], [-1, -1, -1]], dtype=np.float32)
    kernel = (1.0 - alpha) * identity + alpha * edge
    out = cv2.filter2D(image.astype(np.float32), -1, kernel, borderType=cv2.BORDER_REPLICATE)
    return np.clip(out, 0, 255).round().astype(np.uint8)


def flip(image: np.ndarray, direction: str) -> np.ndarray:
    image = _check_image(image)
    if direction == "horizontal":
        return np.ascontiguousarray(image[:, ::-1])
    if direction == "vertical":
        return np.ascontiguousarray(image[::-1, :])
    raise ValueError(f"unknown flip direction {direction!r}")


def variant_rng(seed: int, image_index: int, variant_index: int) -> np.random.Generator:
    """Independent stream per (config seed, source image, variant)."""
    return np.random.default_rng(np.random.SeedSequence([seed, image_index, variant_index]))


def generate_augmented_set(
    images: list[tuple[str, np.ndarray]], cfg: AugmentConfig
) -> list[tuple[str, np.ndarray, bool, str]]:
    """Originals followed by their augmented variants.

    Returns (output_id, image, is_augmented, source_id) tuples: all originals
    first in input order, then num_augs_per_image variants per original, each
    applying one type drawn uniformly from cfg.active_types.
    """
    if not images:
        raise ValueError("generate_augmented_set needs at least one image")
    if cfg.num_augs_per_image > 0 and not cfg.active_types:
        raise ValueError("augmentation requested but active_types is empty")
    out = [(image_id, _check_image(img), False, image_id) for image_id, img in images]
    for index, (image_id, img) in enumerate(images):
        for variant in range(cfg.num_augs_per_image):
            rng = variant_rng(cfg.seed, index, variant)
            aug_type = cfg.active_types[int(rng.integers(len(cfg.active_types)))]
            augmented = apply_augmentation(img, aug_type, rng, cfg.params)
            out.append((f"{image_id}#aug{variant}", augmented, True, image_id))
    return out
