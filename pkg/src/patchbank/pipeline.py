"""End-to-end pipeline: config, per-cell benchmark execution, staged artifacts.

A benchmark run is a grid over (category, k, seed).  Each cell samples k
training images, augments them, extracts patch grids, fits the (optionally
coreset-subsampled) memory bank, scores the category's full test set, and
reduces to the cell's metric row.  Cells are cached by a content hash of
everything that influences their numbers, so interrupted grids resume without
recomputation and reruns never change finished cells.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import augment as aug
from .bank import MemoryBank, build_bank, greedy_coreset, score_image
from .datasets import DatasetIndex, index_dataset, load_image, load_mask, sample_kshot
from .errors import ConfigError
from .extractor import ExtractorSpec, extract_image, extractor_fingerprint
from .features import PatchGrid, merge_layers, neighborhood_pool
from .metrics import hproc, image_auroc, pixel_aupr

CONFIG_VERSION = 1


@dataclass(frozen=True)
class BenchmarkConfig:
    dataset_root: str
    profile: str
    out_dir: str
    model: str = "pixels:4"
    taps: tuple[str, ...] = ()
    native_input_size: int = 224
    scale: float = 1.0
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    patch_size: int = 3
    categories: tuple[str, ...] = ()  # empty = all
    shots: tuple[int, ...] = (1, 5, 10)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    num_augs: int = 0
    aug_types: tuple[str, ...] = ()  # empty = profile default when num_augs > 0
    coreset_size: int | str = "all"
    coreset_projection: int | None = None
    smoothing_sigma: float = 4.0
    pixel_binning: int | None = None
    jobs: int = 1

    def __post_init__(self):
        for name in ("taps", "categories", "shots", "seeds", "aug_types", "mean", "std"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.shots or any(b <= a for a, b in zip(self.shots, self.shots[1:])):
            raise ConfigError(f"shots must be non-empty and strictly increasing, got {self.shots}")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError(f"seeds must be non-empty and distinct, got {self.seeds}")
        if self.coreset_size != "all":
            if int(self.coreset_size) < 1:
                raise ConfigError(f"coreset_size must be 'all' or >= 1, got {self.coreset_size}")
            object.__setattr__(self, "coreset_size", int(self.coreset_size))
        if self.num_augs > 0 and not self.aug_types:
            object.__setattr__(self, "aug_types", aug.active_set_for(self.profile))

    def extractor_spec(self) -> ExtractorSpec:
        return ExtractorSpec(
            model=self.model,
            taps=self.taps,
            native_input_size=self.native_input_size,
            scale=self.scale,
            mean=self.mean,
            std=self.std,
        )

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True, indent=2)

    @staticmethod
    def from_dict(d: dict) -> "BenchmarkConfig":
        return BenchmarkConfig(**d)


def config_from_file(path, overrides: dict | None = None) -> BenchmarkConfig:
    with open(path) as fh:
        data = json.load(fh)
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return BenchmarkConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(f"bad config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Image -> grid


def image_to_grid(image: np.ndarray, spec: ExtractorSpec, patch_size: int, image_id: str) -> PatchGrid:
    maps = extract_image(image, spec)
    pooled = [neighborhood_pool(m, patch_size) for m in maps]
    return merge_layers(pooled, image_id=image_id)


def fit_bank_from_grids(
    grids: list[PatchGrid],
    augmented: list[bool],
    coreset_size: int | str,
    seed: int,
    projection: int | None = None,
) -> MemoryBank:
    """Build and (when beneficial) coreset-subsample the bank.

    A coreset target at or above the bank size leaves the bank untouched:
    with every point kept there is nothing to subsample.
    """
    bank = build_bank(grids, augmented)
    if coreset_size == "all" or int(coreset_size) >= bank.size:
        return bank
    return greedy_coreset(bank, int(coreset_size), seed, projection_dim=projection)


# ---------------------------------------------------------------------------
# Cell execution


@dataclass(frozen=True)
class CellRow:
    dataset: str
    category: str
    k: int
    seed: int
    image_auroc: float
    pixel_aupr: float
    hproc: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ScoredImage:
    image_id: str
    label: int
    mask_id: str | None
    image_score: float
    anomaly_map: np.ndarray  # float32, original image size


def train_grids_for_cell(
    index: DatasetIndex, cfg: BenchmarkConfig, category: str, k: int, seed: int
) -> tuple[list[PatchGrid], list[bool], tuple[str, ...]]:
    sample = sample_kshot(index, category, k, seed)
    images = [
        (image_id, load_image(index.resolve(category, image_id)))
        for image_id in sample.image_ids
    ]
    aug_cfg = aug.AugmentConfig(
        num_augs_per_image=cfg.num_augs, active_types=cfg.aug_types, seed=seed
    )
    expanded = aug.generate_augmented_set(images, aug_cfg)
    spec = cfg.extractor_spec()
    grids = [
        image_to_grid(img, spec, cfg.patch_size, out_id)
        for out_id, img, _, _ in expanded
    ]
    flags = [is_augmented for _, _, is_augmented, _ in expanded]
    return grids, flags, sample.image_ids


def score_test_set(
    index: DatasetIndex, cfg: BenchmarkConfig, category: str, bank: MemoryBank
) -> list[ScoredImage]:
    spec = cfg.extractor_spec()
    scored = []
    for t in index.category(category).test:
        img = load_image(index.resolve(category, t.image_id))
        grid = image_to_grid(img, spec, cfg.patch_size, t.image_id)
        result = score_image(bank, grid, img.shape[:2], cfg.smoothing_sigma)
        scored.append(
            ScoredImage(
                image_id=t.image_id,
                label=t.label,
                mask_id=t.mask_id,
                image_score=result.image_score,
                anomaly_map=result.anomaly_map,
            )
        )
    return scored


def cell_metrics(
    index: DatasetIndex,
    cfg: BenchmarkConfig,
    category: str,
    scored: list[ScoredImage],
) -> tuple[float, float, float]:
    """(image_auroc, pixel_aupr, hproc) for one scored test set."""
    auroc = image_auroc(
        [s.image_score for s in scored], [s.label for s in scored]
    )
    pixel_scores, pixel_labels = [], []
    for s in scored:
        if s.mask_id is not None:
            mask = load_mask(index.resolve(category, s.mask_id), s.anomaly_map.shape)
        else:
            mask = np.zeros(s.anomaly_map.shape, dtype=bool)
        pixel_scores.append(s.anomaly_map.ravel())
        pixel_labels.append(mask.ravel())
    aupr = pixel_aupr(
        np.concatenate(pixel_scores), np.concatenate(pixel_labels), bins=cfg.pixel_binning
    )
    return auroc, aupr, hproc(auroc * 100.0, aupr * 100.0)


def run_cell(cfg: BenchmarkConfig, category: str, k: int, seed: int) -> CellRow:
    index = index_dataset(cfg.dataset_root, cfg.profile)
    grids, flags, _ = train_grids_for_cell(index, cfg, category, k, seed)
    bank = fit_bank_from_grids(grids, flags, cfg.coreset_size, seed, cfg.coreset_projection)
    scored = score_test_set(index, cfg, category, bank)
    auroc, aupr, hp = cell_metrics(index, cfg, category, scored)
    return CellRow(
        dataset=cfg.profile,
        category=category,
        k=k,
        seed=seed,
        image_auroc=auroc,
        pixel_aupr=aupr,
        hproc=hp,
    )


# ---------------------------------------------------------------------------
# Cell cache


def cell_key(cfg: BenchmarkConfig, category: str, k: int, seed: int, sampled_ids, fingerprint: str) -> str:
    """Content hash of everything that influences a cell's numbers."""
    blob = json.dumps(
        {
            "version": CONFIG_VERSION,
            "profile": cfg.profile,
            "category": category,
            "k": k,
            "seed": seed,
            "sampled_ids": list(sampled_ids),
            "fingerprint": fingerprint,
            "patch_size": cfg.patch_size,
            "num_augs": cfg.num_augs,
            "aug_types": list(cfg.aug_types),
            "coreset_size": cfg.coreset_size,
            "coreset_projection": cfg.coreset_projection,
            "smoothing_sigma": cfg.smoothing_sigma,
            "pixel_binning": cfg.pixel_binning,
        },
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def cache_dir_for(cfg: BenchmarkConfig) -> Path:
    env = os.environ.get("PATCHBANK_CACHE")
    return Path(env) if env else Path(cfg.out_dir) / "cells"


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def atomic_write_bytes(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def _cell_worker(args) -> tuple[str, int, int, dict]:
    """Executed in worker processes; returns the cell outcome as plain data."""
    cfg_dict, category, k, seed, cache_path = args
    cfg = BenchmarkConfig.from_dict(cfg_dict)
    try:
        row = run_cell(cfg, category, k, seed)
        payload = {"status": "ok", "row": row.as_dict()}
    except Exception as exc:  # cell failures must not kill the grid
        payload = {"status": "error", "message": f"{type(exc).__name__}: {exc}"}
    atomic_write_text(Path(cache_path), json.dumps(payload, sort_keys=True, indent=1))
    return category, k, seed, payload


def plan_cells(cfg: BenchmarkConfig, index: DatasetIndex) -> list[tuple[str, int, int]]:
    categories = cfg.categories or tuple(index.category_names())
    unknown = set(categories) - set(index.category_names())
    if unknown:
        raise ConfigError(f"unknown categories {sorted(unknown)}")
    return [(c, k, s) for c in categories for k in cfg.shots for s in cfg.seeds]


def run_benchmark(cfg: BenchmarkConfig, progress=None) -> tuple[list[CellRow], list[tuple]]:
    """Run (or resume) the full grid; returns (finished rows, failed cells)."""
    index = index_dataset(cfg.dataset_root, cfg.profile)
    spec = cfg.extractor_spec()
    fingerprint = extractor_fingerprint(spec)
    cache = cache_dir_for(cfg)
    cache.mkdir(parents=True, exist_ok=True)

    cells = plan_cells(cfg, index)
    pending = []
    outcomes: dict[tuple, dict] = {}
    for category, k, seed in cells:
        sampled = sample_kshot(index, category, k, seed).image_ids
        key = cell_key(cfg, category, k, seed, sampled, fingerprint)
        path = cache / f"{category}_k{k}_s{seed}_{key}.json"
        if path.is_file():
            outcomes[(category, k, seed)] = json.loads(path.read_text())
        else:
            pending.append((asdict(cfg), category, k, seed, str(path)))

    if pending:
        if cfg.jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                for category, k, seed, payload in pool.map(_cell_worker, pending):
                    outcomes[(category, k, seed)] = payload
                    if progress:
                        progress(category, k, seed, payload)
        else:
            for args in pending:
                category, k, seed, payload = _cell_worker(args)
                outcomes[(category, k, seed)] = payload
                if progress:
                    progress(category, k, seed, payload)

    rows, failures = [], []
    for cell in cells:
        payload = outcomes[cell]
        if payload["status"] == "ok":
            rows.append(CellRow(**payload["row"]))
        else:
            failures.append((*cell, payload["message"]))
    rows.sort(key=lambda r: (r.category, r.k, r.seed))
    return rows, failures


def with_overrides(cfg: BenchmarkConfig, **kwargs) -> BenchmarkConfig:
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
