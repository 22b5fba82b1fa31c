"""Dataset tree indexing and deterministic k-shot sampling.

Expected layout (the one-class convention both supported dataset families
share; VisA is consumed after its standard one-class reorganization):

    root/<category>/train/good/<image>
    root/<category>/test/good/<image>            normal test images
    root/<category>/test/<defect>/<image>        anomalous test images
    root/<category>/ground_truth/<defect>/<image stem>[_mask].png

Every identifier is a path relative to the category directory, so indexes are
a pure function of the directory tree and sort identically everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IndexingError
from .rng import sampling_rng

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
PROFILES = ("mvtec", "visa")


@dataclass(frozen=True)
class TestImage:
    image_id: str
    label: int  # 1 = anomalous
    mask_id: str | None


@dataclass(frozen=True)
class CategoryIndex:
    name: str
    train_normal: tuple[str, ...]
    test: tuple[TestImage, ...]


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    profile: str
    categories: tuple[CategoryIndex, ...]

    def category(self, name: str) -> CategoryIndex:
        for c in self.categories:
            if c.name == name:
                return c
        raise KeyError(f"unknown category {name!r}")

    def category_names(self) -> list[str]:
        return [c.name for c in self.categories]

    def resolve(self, category: str, image_id: str) -> Path:
        return self.root / category / image_id


@dataclass(frozen=True)
class KShotSample:
    category: str
    k: int
    seed: int
    image_ids: tuple[str, ...]


def _list_images(directory: Path) -> list[str]:
    return sorted(
        p.name for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def _find_mask(category_dir: Path, defect: str, stem: str) -> str | None:
    gt_dir = category_dir / "ground_truth" / defect
    for candidate in (f"{stem}_mask.png", f"{stem}.png"):
        if (gt_dir / candidate).is_file():
            return f"ground_truth/{defect}/{candidate}"
    return None


def index_dataset(root, profile: str) -> DatasetIndex:
    """Index a dataset tree; deterministic, lexicographic everywhere."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; known: {PROFILES}")
    root = Path(root)
    if not root.is_dir():
        raise IndexingError(f"dataset root {root} does not exist")
    category_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not category_dirs:
        raise IndexingError(f"dataset root {root} contains no category directories")

    categories = []
    for cat_dir in category_dirs:
        train_dir = cat_dir / "train" / "good"
        if not train_dir.is_dir():
            raise IndexingError(f"{cat_dir.name}: missing train/good directory")
        train_ids = tuple(f"train/good/{name}" for name in _list_images(train_dir))
        if not train_ids:
            raise IndexingError(f"{cat_dir.name}: no training images in train/good")

        test_dir = cat_dir / "test"
        if not test_dir.is_dir():
            raise IndexingError(f"{cat_dir.name}: missing test directory")
        test_images = []
        for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            defect = defect_dir.name
            for name in _list_images(defect_dir):
                image_id = f"test/{defect}/{name}"
                if defect == "good":
                    test_images.append(TestImage(image_id=image_id, label=0, mask_id=None))
                    continue
                mask_id = _find_mask(cat_dir, defect, Path(name).stem)
                if mask_id is None:
                    raise IndexingError(
                        f"{cat_dir.name}/{image_id}: anomalous test image has no "
                        f"ground-truth mask under ground_truth/{defect}/"
                    )
                test_images.append(TestImage(image_id=image_id, label=1, mask_id=mask_id))
        if not test_images:
            raise IndexingError(f"{cat_dir.name}: no test images")
        categories.append(
            CategoryIndex(name=cat_dir.name, train_normal=train_ids, test=tuple(test_images))
        )
    return DatasetIndex(root=root, profile=profile, categories=tuple(categories))


def sample_kshot(index: DatasetIndex, category: str, k: int, seed: int) -> KShotSample:
    """First k ids of a seeded Fisher-Yates shuffle of the sorted training list.

    One shuffle serves every k, so samples for growing k are nested by
    construction and bit-stable across platforms (xoshiro256** keyed by
    seed and category).
    """
    cat = index.category(category)
    available = list(cat.train_normal)
    if k < 1 or k > len(available):
        raise ValueError(f"k must be in [1, {len(available)}] for {category!r}, got {k}")
    rng = sampling_rng(seed, category)
    rng.shuffle(available)
    return KShotSample(category=category, k=k, seed=seed, image_ids=tuple(available[:k]))


def load_image(path) -> np.ndarray:
    """Load an RGB image as uint8 (h, w, 3)."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def load_mask(path, expected_hw: tuple[int, int]) -> np.ndarray:
    """Load a ground-truth mask, binarized at > 0; shape must match."""
    with Image.open(path) as img:
        mask = np.asarray(img.convert("L"))
    if mask.shape != tuple(expected_hw):
        raise ValueError(
            f"mask {path} is {mask.shape[0]}x{mask.shape[1]}, "
            f"expected {expected_hw[0]}x{expected_hw[1]}"
        )
    return mask > 0


def index_to_json(index: DatasetIndex) -> str:
    """Human-inspectable JSON dump of an index."""
    return json.dumps(
        {
            "root": str(index.root),
            "profile": index.profile,
            "categories": [
                {
                    "name": c.name,
                    "train_normal": list(c.train_normal),
                    "test": [
                        {"image_id": t.image_id, "label": t.label, "mask_id": t.mask_id}
                        for t in c.test
                    ],
                }
                for c in index.categories
            ],
        },
        indent=2,
        sort_keys=True,
    )
