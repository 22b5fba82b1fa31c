"""patchbank: patch-feature memory-bank anomaly detection and benchmarking."""

from .augment import AugmentConfig, active_set_for, apply_augmentation, generate_augmented_set
from .bank import (
    AnomalyResult,
    CoresetMeta,
    MemoryBank,
    build_bank,
    covering_radius,
    greedy_coreset,
    load_bank,
    nn_distance,
    nn_distances,
    project_for_coreset,
    save_bank,
    score_image,
)
from .datasets import DatasetIndex, KShotSample, index_dataset, load_image, load_mask, sample_kshot
from .extractor import (
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
from .features import (
    FeatureMap,
    PatchGrid,
    flatten_patches,
    grid_from_patches,
    merge_layers,
    neighborhood_pool,
)
from .metrics import (
    KShotCurve,
    aggregate_report,
    auhproc,
    defect_size_fractions,
    hproc,
    image_auroc,
    pixel_aupr,
)
from .pipeline import BenchmarkConfig, run_benchmark, run_cell

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
