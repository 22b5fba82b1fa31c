"""Locally aware patch embeddings built from multi-layer feature maps.

A backbone yields one activation tensor per tapped layer.  Each tensor is
mean-pooled over a small spatial neighborhood so every cell summarizes its
surroundings, deeper taps are bilinearly resized to the shallowest tap's grid,
and the channels are concatenated into a single embedding per grid cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.ndimage import uniform_filter

# cv2.resize rejects arrays beyond this channel count.
_CV2_MAX_CHANNELS = 128


@dataclass(frozen=True)
class FeatureMap:
    """One tapped activation tensor, stored channel-major as (c, h, w) float32."""

    layer_name: str
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"feature map must be (c, h, w) with positive dims, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError(f"feature map {self.layer_name!r} contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PatchGrid:
    """Per-cell embeddings on the shallowest tap's spatial grid, (h, w, dim) float32."""

    embeddings: np.ndarray
    source_image_id: str = ""
    layer_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        emb = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if emb.ndim != 3 or min(emb.shape) < 1:
            raise ValueError(f"patch grid must be (h, w, dim) with positive dims, got {emb.shape}")
        if not np.isfinite(emb).all():
            raise ValueError("patch grid contains non-finite values")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "layer_names", tuple(self.layer_names))

    @property
    def height(self) -> int:
        return self.embeddings.shape[0]

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]


def neighborhood_pool(fmap: FeatureMap, patch_size: int = 3) -> FeatureMap:
    """Mean-pool each cell over a patch_size x patch_size window.

    Borders are zero padded and the divisor stays patch_size**2, so edge cells
    are averaged as if the padding were real (the baseline convention).
    patch_size must be odd so windows stay centered.
    """
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError(f"patch_size must be odd and >= 1, got {patch_size}")
    if patch_size == 1:
        return fmap
    pooled = uniform_filter(
        fmap.data.astype(np.float64), size=(1, patch_size, patch_size), mode="constant", cval=0.0
    )
    return FeatureMap(layer_name=fmap.layer_name, data=pooled.astype(np.float32))


def _resize_bilinear(data: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (c, h, w) tensor with half-pixel sampling."""
    if data.shape[1] == height and data.shape[2] == width:
        return data
    hwc = np.ascontiguousarray(np.moveaxis(data, 0, -1))
    parts = []
    for start in range(0, hwc.shape[2], _CV2_MAX_CHANNELS):
        chunk = np.ascontiguousarray(hwc[:, :, start : start + _CV2_MAX_CHANNELS])
        resized = cv2.resize(chunk, (width, height), interpolation=cv2.INTER_LINEAR)
        if resized.ndim == 2:
            resized = resized[:, :, None]
        parts.append(resized)
    out = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=2)
    return np.ascontiguousarray(np.moveaxis(out, -1, 0))


def merge_layers(maps: list[FeatureMap], image_id: str = "") -> PatchGrid:
    """Concatenate taps into one grid at the first (shallowest) tap's resolution.

    Maps must be ordered shallow to deep; deeper maps are upsampled bilinearly.
    The grid dim is the sum of all channel counts.
    """
    if not maps:
        raise ValueError("merge_layers needs at least one feature map")
    base = maps[0]
    for m in maps[1:]:
        if m.height > base.height or m.width > base.width:
            raise ValueError(
                f"first map must be the largest: {base.layer_name!r} is "
                f"{base.height}x{base.width} but {m.layer_name!r} is {m.height}x{m.width}"
            )
    stacked = [base.data] + [_resize_bilinear(m.data, base.height, base.width) for m in maps[1:]]
    merged = np.concatenate(stacked, axis=0)
    return PatchGrid(
        embeddings=np.moveaxis(merged, 0, -1),
        source_image_id=image_id,
        layer_names=tuple(m.layer_name for m in maps),
    )


def flatten_patches(grid: PatchGrid) -> list[tuple[int, int, np.ndarray]]:
    """Row-major (row, col, embedding) enumeration of every grid cell."""
    return [
        (r, c, grid.embeddings[r, c])
        for r in range(grid.height)
        for c in range(grid.width)
    ]


def grid_from_patches(
    patches: list[tuple[int, int, np.ndarray]],
    height: int,
    width: int,
    image_id: str = "",
) -> PatchGrid:
    """Inverse of flatten_patches; rebuilds the (h, w, dim) grid."""
    if len(patches) != height * width:
        raise ValueError(f"expected {height * width} patches, got {len(patches)}")
    dim = len(patches[0][2])
    emb = np.empty((height, width, dim), dtype=np.float32)
    for r, c, vec in patches:
        emb[r, c] = vec
    return PatchGrid(embeddings=emb, source_image_id=image_id)
