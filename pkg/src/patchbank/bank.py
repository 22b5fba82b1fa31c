"""Normality memory bank: construction, coreset subsampling, and 1-NN scoring.

The bank is the model: every patch embedding of every normal training image,
optionally thinned by farthest-point sampling to a fixed budget.  A query
patch's anomaly score is its Euclidean distance to the closest bank point; an
image's score is the maximum over its patches.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FormatError, UnsupportedVersionError
from .features import PatchGrid
from .rng import Xoshiro256StarStar

_BANK_MAGIC = b"PBNK"
_BANK_VERSION = 1

# Candidate count for the refinement pass of batched NN search.  The first
# pass ranks by a Gram-expansion distance whose error is ~1e-12 relative, so
# the true neighbor is always inside a margin this wide.
_NN_CANDIDATES = 8

_DIST_BLOCK_ROWS = 16384


@dataclass(frozen=True)
class CoresetMeta:
    target_size: int
    seed: int
    selected_indices: tuple[int, ...]
    projection_dim: int | None = None


@dataclass(frozen=True)
class MemoryBank:
    """Immutable set of normal patch embeddings, (n, dim) float32.

    Per-point provenance is kept as parallel arrays: the source image (as an
    index into `image_ids`), the grid cell, and whether the source image was
    an augmented variant.
    """

    points: np.ndarray
    image_ids: tuple[str, ...]
    prov_image: np.ndarray  # (n,) int32 index into image_ids
    prov_row: np.ndarray  # (n,) int32
    prov_col: np.ndarray  # (n,) int32
    prov_augmented: np.ndarray  # (n,) bool
    coreset_meta: CoresetMeta | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError(f"bank points must be a non-empty (n, dim) matrix, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("bank points contain non-finite values")
        object.__setattr__(self, "points", pts)
        for name in ("prov_image", "prov_row", "prov_col"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int32)
            if arr.shape != (pts.shape[0],):
                raise ValueError(f"{name} must have one entry per point")
            object.__setattr__(self, name, arr)
        object.__setattr__(
            self, "prov_augmented", np.ascontiguousarray(self.prov_augmented, dtype=bool)
        )

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def provenance(self, i: int) -> tuple[str, int, int, bool]:
        return (
            self.image_ids[int(self.prov_image[i])],
            int(self.prov_row[i]),
            int(self.prov_col[i]),
            bool(self.prov_augmented[i]),
        )


@dataclass(frozen=True)
class AnomalyResult:
    """Scores for one query image: scalar, per-patch grid, full-size map."""

    image_id: str
    image_score: float
    patch_scores: np.ndarray  # (h', w') float32, pre-smoothing
    anomaly_map: np.ndarray  # (h, w) float32 at the original image size


def build_bank(grids: list[PatchGrid], augmented: list[bool] | None = None) -> MemoryBank:
    """Stack every patch of every grid, row-major per grid, in input order."""
    if not grids:
        raise ValueError("build_bank needs at least one patch grid")
    dim = grids[0].dim
    for g in grids[1:]:
        if g.dim != dim:
            raise ValueError(f"grid dim mismatch: expected {dim}, got {g.dim} ({g.source_image_id!r})")
    if augmented is None:
        augmented = [False] * len(grids)
    if len(augmented) != len(grids):
        raise ValueError("augmented flags must match the number of grids")

    image_ids = tuple(g.source_image_id for g in grids)
    blocks, img_idx, rows, cols, aug = [], [], [], [], []
    for gi, g in enumerate(grids):
        n = g.height * g.width
        blocks.append(g.embeddings.reshape(n, dim))
        rr, cc = np.divmod(np.arange(n, dtype=np.int32), g.width)
        img_idx.append(np.full(n, gi, dtype=np.int32))
        rows.append(rr.astype(np.int32))
        cols.append(cc.astype(np.int32))
        aug.append(np.full(n, bool(augmented[gi]), dtype=bool))
    return MemoryBank(
        points=np.concatenate(blocks, axis=0),
        image_ids=image_ids,
        prov_image=np.concatenate(img_idx),
        prov_row=np.concatenate(rows),
        prov_col=np.concatenate(cols),
        prov_augmented=np.concatenate(aug),
    )


def _dist2_to_point(points: np.ndarray, center: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances from every row to `center`, difference-based.

    Computed blockwise in float64 with the plain (p - c)^2 sum so results are
    bit-identical to a naive per-pair evaluation (no Gram-expansion
    cancellation), which keeps coreset selection exactly reproducible.
    """
    for start in range(0, points.shape[0], _DIST_BLOCK_ROWS):
        block = points[start : start + _DIST_BLOCK_ROWS]
        diff = block - center
        out[start : start + block.shape[0]] = (diff * diff).sum(axis=1)
    return out


def coreset_start_index(seed: int, n: int) -> int:
    """Seeded choice of the farthest-point-sampling start point."""
    return Xoshiro256StarStar(seed).next_below(n)


def project_for_coreset(
    bank: MemoryBank, d_star: int, seed: int, identity: bool = False
) -> np.ndarray:
    """Random-projection view of the bank used only for coreset distances.

    Returns an (n, d_star) float64 matrix; the bank itself keeps its original
    embeddings.  With identity=True (requires d_star == dim) the points are
    passed through unchanged, which makes projected and unprojected selection
    coincide.
    """
    if d_star < 1 or d_star > bank.dim:
        raise ValueError(f"d_star must be in [1, {bank.dim}], got {d_star}")
    pts = bank.points.astype(np.float64)
    if identity:
        if d_star != bank.dim:
            raise ValueError("identity projection requires d_star == dim")
        return pts
    rng = np.random.default_rng(seed)
    basis = rng.standard_normal((bank.dim, d_star)) / np.sqrt(d_star)
    return pts @ basis


def greedy_coreset(
    bank: MemoryBank,
    target_size: int,
    seed: int,
    projection_dim: int | None = None,
) -> MemoryBank:
    """Farthest-point subsample of the bank down to target_size points.

    The start point is drawn by a seeded RNG; every following pick maximizes
    the distance to the nearest already-selected point, ties resolved toward
    the lowest bank index.  With projection_dim set, selection distances are
    computed on a seeded Gaussian projection while the returned bank keeps the
    original embeddings.
    """
    n = bank.size
    if target_size < 1 or target_size > n:
        raise ValueError(f"target_size must be in [1, {n}], got {target_size}")

    if projection_dim is None:
        sel_points = bank.points.astype(np.float64)
    else:
        sel_points = project_for_coreset(bank, projection_dim, seed)

    selected = np.empty(target_size, dtype=np.int64)
    selected[0] = coreset_start_index(seed, n)
    min_d2 = np.empty(n, dtype=np.float64)
    _dist2_to_point(sel_points, sel_points[selected[0]], min_d2)
    scratch = np.empty(n, dtype=np.float64)
    for i in range(1, target_size):
        nxt = int(np.argmax(min_d2))  # first max == lowest-index tie-break
        selected[i] = nxt
        np.minimum(min_d2, _dist2_to_point(sel_points, sel_points[nxt], scratch), out=min_d2)

    idx = selected
    return MemoryBank(
        points=bank.points[idx],
        image_ids=bank.image_ids,
        prov_image=bank.prov_image[idx],
        prov_row=bank.prov_row[idx],
        prov_col=bank.prov_col[idx],
        prov_augmented=bank.prov_augmented[idx],
        coreset_meta=CoresetMeta(
            target_size=target_size,
            seed=seed,
            selected_indices=tuple(int(i) for i in selected),
            projection_dim=projection_dim,
        ),
    )


def covering_radius(bank: MemoryBank, selected: MemoryBank) -> float:
    """Max over bank points of the distance to the nearest selected point."""
    pts = bank.points.astype(np.float64)
    d2 = np.empty(bank.size, dtype=np.float64)
    best = np.full(bank.size, np.inf)
    for c in selected.points.astype(np.float64):
        np.minimum(best, _dist2_to_point(pts, c, d2), out=best)
    return float(np.sqrt(best.max()))


def nn_distances(bank: MemoryBank, queries: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Euclidean distance from each query row to its nearest bank point.

    Two passes: a Gram-expansion pass ranks candidates cheaply, then the top
    few are re-evaluated with the exact difference formula, so results match
    a naive exhaustive scan bit for bit (exact zeros included).
    """
    q = np.ascontiguousarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[1] != bank.dim:
        raise ValueError(f"query dim {q.shape[1]} does not match bank dim {bank.dim}")
    if not np.isfinite(q).all():
        raise ValueError("queries contain non-finite values")
    b = bank.points.astype(np.float64)
    n = b.shape[0]
    k = min(_NN_CANDIDATES, n)
    b_sq = (b * b).sum(axis=1)
    out = np.empty(q.shape[0], dtype=np.float64)
    for start in range(0, q.shape[0], chunk):
        qc = q[start : start + chunk]
        approx = (qc * qc).sum(axis=1)[:, None] + b_sq[None, :] - 2.0 * (qc @ b.T)
        if k < n:
            cand = np.argpartition(approx, k - 1, axis=1)[:, :k]
        else:
            cand = np.broadcast_to(np.arange(n), (qc.shape[0], n))
        diff = qc[:, None, :] - b[cand]
        exact = (diff * diff).sum(axis=2)
        out[start : start + qc.shape[0]] = exact.min(axis=1)
    return np.sqrt(out)


def nn_distance(bank: MemoryBank, query: np.ndarray) -> float:
    """Distance from a single query embedding to its nearest bank point."""
    return float(nn_distances(bank, np.asarray(query)[None, :])[0])


def score_image(
    bank: MemoryBank,
    grid: PatchGrid,
    target_hw: tuple[int, int],
    smoothing_sigma: float = 4.0,
) -> AnomalyResult:
    """Score one query grid against the bank.

    The image score is the raw max patch distance (taken before smoothing);
    the anomaly map is the patch-score grid bilinearly upsampled to the
    original image size, then Gaussian smoothed when smoothing_sigma > 0.
    """
    if grid.dim != bank.dim:
        raise ValueError(f"grid dim {grid.dim} does not match bank dim {bank.dim}")
    height, width = int(target_hw[0]), int(target_hw[1])
    if height < 1 or width < 1:
        raise ValueError(f"target size must be positive, got {target_hw}")
    flat = grid.embeddings.reshape(grid.height * grid.width, grid.dim)
    patch_scores = nn_distances(bank, flat).astype(np.float32).reshape(grid.height, grid.width)
    image_score = float(patch_scores.max())
    anomaly_map = cv2.resize(patch_scores, (width, height), interpolation=cv2.INTER_LINEAR)
    if smoothing_sigma > 0:
        anomaly_map = gaussian_filter(anomaly_map, sigma=smoothing_sigma)
    return AnomalyResult(
        image_id=grid.source_image_id,
        image_score=image_score,
        patch_scores=patch_scores,
        anomaly_map=np.ascontiguousarray(anomaly_map, dtype=np.float32),
    )


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_bank(bank: MemoryBank, path) -> None:
    """Write the bank in the PBNK container (float32 LE payload, JSON header)."""
    header = {
        "dim": bank.dim,
        "count": bank.size,
        "provenance": {
            "images": list(bank.image_ids),
            "image_index": bank.prov_image.tolist(),
            "row": bank.prov_row.tolist(),
            "col": bank.prov_col.tolist(),
            "augmented": bank.prov_augmented.astype(int).tolist(),
        },
        "coreset_meta": None
        if bank.coreset_meta is None
        else {
            "target_size": bank.coreset_meta.target_size,
            "seed": bank.coreset_meta.seed,
            "selected_indices": list(bank.coreset_meta.selected_indices),
            "projection_dim": bank.coreset_meta.projection_dim,
        },
    }
    payload = _json_bytes(header)
    data = np.ascontiguousarray(bank.points, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_BANK_MAGIC)
        fh.write(struct.pack("<II", _BANK_VERSION, len(payload)))
        fh.write(payload)
        fh.write(data)


def load_bank(path) -> MemoryBank:
    """Read a PBNK file back; embeddings round-trip bit for bit."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _BANK_MAGIC:
        raise FormatError(f"{path}: not a PBNK bank file")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != _BANK_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported bank version {version}")
    if len(blob) < 12 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from exc
    dim, count = int(header["dim"]), int(header["count"])
    expected = count * dim * 4
    raw = blob[12 + header_len :]
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    points = np.frombuffer(raw, dtype="<f4").reshape(count, dim)
    prov = header["provenance"]
    meta = header.get("coreset_meta")
    return MemoryBank(
        points=points.copy(),
        image_ids=tuple(prov["images"]),
        prov_image=np.asarray(prov["image_index"], dtype=np.int32),
        prov_row=np.asarray(prov["row"], dtype=np.int32),
        prov_col=np.asarray(prov["col"], dtype=np.int32),
        prov_augmented=np.asarray(prov["augmented"], dtype=bool),
        coreset_meta=None
        if meta is None
        else CoresetMeta(
            target_size=int(meta["target_size"]),
            seed=int(meta["seed"]),
            selected_indices=tuple(int(i) for i in meta["selected_indices"]),
            projection_dim=meta["projection_dim"],
        ),
    )
