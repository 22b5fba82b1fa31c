"""Detection / segmentation metric suite.

Image-level ranking quality is measured with AUROC, pixel-level localization
with average precision (AUPR, robust to the heavy pixel class imbalance), and
the two are combined through their harmonic mean (HPROC, on the 0-100 scale).
Performance across shot counts is summarized by the normalized area under the
HPROC-vs-k curve (AUHPROC).

F1-max is deliberately absent: on test sets with more anomalous than normal
images the PR curve it derives from is inflated, so it rewards imbalance
rather than detection quality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import IncompleteGridError, UndefinedMetricError


def _as_scored_set(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
    if scores.size == 0:
        raise UndefinedMetricError("empty scored set")
    if not np.isfinite(scores).all():
        raise ValueError("scores contain non-finite values")
    labels = labels.astype(np.int64)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if labels.min() == labels.max():
        raise UndefinedMetricError("need both a positive and a negative label")
    return scores, labels


def image_auroc(scores, labels) -> float:
    """P(anomalous outranks normal), ties half-counted; equals the midrank AUROC.

    Computed from tie-aware ranks in O(n log n).
    """
    scores, labels = _as_scored_set(scores, labels)
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    new_block = np.concatenate([[True], sorted_scores[1:] != sorted_scores[:-1]])
    block_id = np.cumsum(new_block) - 1
    counts = np.bincount(block_id)
    block_end = np.cumsum(counts)  # 1-based rank of each block's last element
    midranks = (block_end - counts + 1 + block_end) / 2.0
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = midranks[block_id]
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    rank_sum = math.fsum(ranks[labels == 1])
    u_statistic = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u_statistic / (n_pos * n_neg)


def pixel_aupr(scores, labels, bins: int | None = None) -> float:
    """Average precision: sum of (recall step) x (precision) over descending thresholds.

    No interpolation.  With `bins` set, scores are first quantized onto a
    uniform grid, trading exactness for memory on very large pixel sets;
    exact mode (bins=None) is the default.
    """
    scores, labels = _as_scored_set(scores, labels)
    if bins is not None:
        if bins < 2:
            raise ValueError("bins must be >= 2")
        lo, hi = float(scores.min()), float(scores.max())
        if hi > lo:
            scores = np.floor((scores - lo) / (hi - lo) * (bins - 1))
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    pp = np.arange(1, scores.size + 1)
    # Evaluate only at the last index of each tied-score block.
    block_end = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([block_end, [scores.size - 1]])
    precision = tp[idx] / pp[idx]
    recall = tp[idx] / tp[-1]
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    return math.fsum((recall - recall_prev) * precision)


def hproc(image_auroc_pct: float, pixel_aupr_pct: float) -> float:
    """Harmonic mean of image-AUROC and pixel-AUPR, both given in percent."""
    a, b = float(image_auroc_pct), float(pixel_aupr_pct)
    for name, v in (("image_auroc_pct", a), ("pixel_aupr_pct", b)):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"{name} must be in [0, 100], got {v}")
    if a + b == 0.0:
        return 0.0
    return 2.0 * a * b / (a + b)


@dataclass(frozen=True)
class KShotCurve:
    """HPROC values against shot counts; k strictly increasing."""

    points: tuple[tuple[int, float], ...]

    def __post_init__(self):
        pts = tuple((int(k), float(h)) for k, h in self.points)
        if not pts:
            raise ValueError("curve needs at least one point")
        ks = [k for k, _ in pts]
        if any(k2 <= k1 for k1, k2 in zip(ks, ks[1:])) or ks[0] < 1:
            raise ValueError(f"k values must be positive and strictly increasing, got {ks}")
        object.__setattr__(self, "points", pts)


def auhproc(curve: KShotCurve) -> float:
    """Trapezoidal area under the HPROC-k curve, normalized by the k span.

    Normalization keeps the result on the same 0-100 scale as HPROC: a
    constant curve returns its constant, a single point returns its value.
    """
    pts = curve.points
    if len(pts) == 1:
        return pts[0][1]
    area = 0.0
    for (k1, h1), (k2, h2) in zip(pts, pts[1:]):
        area += (k2 - k1) * (h1 + h2) / 2.0
    return area / (pts[-1][0] - pts[0][0])


FEW_SHOT_KS = (1, 5, 10)
MANY_SHOT_KS = (25, 50)


def defect_size_fractions(masks) -> list[float]:
    """Fraction of anomalous pixels per mask; all-zero masks are skipped."""
    fractions = []
    for mask in masks:
        mask = np.asarray(mask)
        positives = int(np.count_nonzero(mask))
        if positives:
            fractions.append(positives / mask.size)
    return fractions


@dataclass(frozen=True)
class CategoryAggregate:
    category: str
    per_k: dict  # k -> {"image_auroc", "pixel_aupr", "hproc"} averaged over seeds
    auhproc: float


@dataclass(frozen=True)
class AggregateReport:
    categories: tuple[CategoryAggregate, ...]
    auhproc_mean: float
    auhproc_std: float
    per_k_dataset: dict  # k -> {"image_auroc_mean", "image_auroc_std", ...} over seeds
    shots_average: dict  # metric -> mean over k of per_k_dataset means


def _sample_std(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1))


def aggregate_report(rows, shots=None, seeds=None, categories=None) -> AggregateReport:
    """Aggregate per-(category, k, seed) metric rows.

    rows: dicts with keys category, k, seed, image_auroc, pixel_aupr, hproc
    (ratios in [0,1] for auroc/aupr, hproc already in percent).  The grid must
    be complete over the cross product; gaps raise IncompleteGridError.

    Seeds are averaged first, then each category's HPROC curve is integrated
    into AUHPROC; mean and sample std are reported across categories.  The
    dataset-level view averages categories within each seed and reports
    mean/std across seeds per k, plus the equal-weight average over k.
    """
    table = {}
    for row in rows:
        key = (str(row["category"]), int(row["k"]), int(row["seed"]))
        table[key] = (float(row["image_auroc"]), float(row["pixel_aupr"]), float(row["hproc"]))
    if categories is None:
        categories = sorted({c for c, _, _ in table})
    if shots is None:
        shots = sorted({k for _, k, _ in table})
    if seeds is None:
        seeds = sorted({s for _, _, s in table})
    missing = [
        (c, k, s)
        for c in categories
        for k in shots
        for s in seeds
        if (c, k, s) not in table
    ]
    if missing:
        raise IncompleteGridError(missing)

    per_category = []
    for c in categories:
        per_k = {}
        for k in shots:
            cells = [table[(c, k, s)] for s in seeds]
            per_k[k] = {
                "image_auroc": float(np.mean([x[0] for x in cells])),
                "pixel_aupr": float(np.mean([x[1] for x in cells])),
                "hproc": float(np.mean([x[2] for x in cells])),
            }
        curve = KShotCurve(tuple((k, per_k[k]["hproc"]) for k in shots))
        per_category.append(CategoryAggregate(category=c, per_k=per_k, auhproc=auhproc(curve)))

    auhproc_values = [c.auhproc for c in per_category]

    per_k_dataset = {}
    for k in shots:
        by_seed_auroc = [float(np.mean([table[(c, k, s)][0] for c in categories])) for s in seeds]
        by_seed_aupr = [float(np.mean([table[(c, k, s)][1] for c in categories])) for s in seeds]
        by_seed_hproc = [float(np.mean([table[(c, k, s)][2] for c in categories])) for s in seeds]
        per_k_dataset[k] = {
            "image_auroc_mean": float(np.mean(by_seed_auroc)),
            "image_auroc_std": _sample_std(by_seed_auroc),
            "pixel_aupr_mean": float(np.mean(by_seed_aupr)),
            "pixel_aupr_std": _sample_std(by_seed_aupr),
            "hproc_mean": float(np.mean(by_seed_hproc)),
            "hproc_std": _sample_std(by_seed_hproc),
        }
    shots_average = {
        metric: float(np.mean([per_k_dataset[k][metric] for k in shots]))
        for metric in ("image_auroc_mean", "pixel_aupr_mean", "hproc_mean")
    }
    return AggregateReport(
        categories=tuple(per_category),
        auhproc_mean=float(np.mean(auhproc_values)),
        auhproc_std=_sample_std(auhproc_values),
        per_k_dataset=per_k_dataset,
        shots_average=shots_average,
    )
