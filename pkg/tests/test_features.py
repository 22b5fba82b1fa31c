from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchbank.features import (
    FeatureMap,
    PatchGrid,
    flatten_patches,
    grid_from_patches,
    merge_layers,
    neighborhood_pool,
)

from oracles import zero_pad_mean_pool_reference


def fmap(data, name="layer"):
    return FeatureMap(layer_name=name, data=np.asarray(data, dtype=np.float32))


class TestNeighborhoodPool:
    def test_center_spike_spreads_to_every_cell(self):
        data = np.zeros((1, 3, 3), dtype=np.float32)
        data[0, 1, 1] = 9.0
        out = neighborhood_pool(fmap(data), 3)
        assert np.allclose(out.data, 1.0)

    def test_patch_size_one_is_identity(self):
        data = np.arange(4, dtype=np.float32).reshape(1, 2, 2)
        out = neighborhood_pool(fmap(data), 1)
        assert np.array_equal(out.data, data)

    def test_single_cell_map(self):
        out = neighborhood_pool(fmap([[[5.0]]]), 1)
        assert out.data.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 5.0

    def test_constant_map_interior_preserved_and_borders_padded(self):
        # Zero padding with a full-kernel divisor keeps interior cells at c
        # and shrinks border cells by the padded fraction.
        c = 3.5
        data = np.full((2, 5, 5), c, dtype=np.float32)
        out = neighborhood_pool(fmap(data), 3)
        assert np.allclose(out.data[:, 1:-1, 1:-1], c)
        assert np.allclose(out.data[:, 0, 0], c * 4 / 9)
        assert np.allclose(out.data[:, 0, 2], c * 6 / 9)

    def test_matches_windowed_reference(self):
        rng = np.random.default_rng(0)
        data = rng.standard_normal((3, 7, 6)).astype(np.float32)
        for patch in (3, 5):
            out = neighborhood_pool(fmap(data), patch)
            for ch in range(3):
                ref = zero_pad_mean_pool_reference(data[ch], patch)
                assert np.allclose(out.data[ch], ref, atol=1e-5)

    @pytest.mark.parametrize("patch", [0, 2, 4, -3])
    def test_even_or_nonpositive_patch_rejected(self, patch):
        with pytest.raises(ValueError):
            neighborhood_pool(fmap(np.zeros((1, 3, 3))), patch)

    def test_rejects_nonfinite_maps(self):
        data = np.zeros((1, 2, 2), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            fmap(data)


class TestMergeLayers:
    def test_single_map_identity(self):
        data = np.random.default_rng(1).standard_normal((8, 6, 6)).astype(np.float32)
        grid = merge_layers([fmap(data)], image_id="img")
        assert grid.dim == 8
        assert grid.height == grid.width == 6
        assert np.array_equal(grid.embeddings, np.moveaxis(data, 0, -1))
        assert grid.source_image_id == "img"

    def test_two_scales_concatenate(self):
        shallow = fmap(np.zeros((512, 56, 56)), "l2")
        deep = fmap(np.zeros((1024, 28, 28)), "l3")
        grid = merge_layers([shallow, deep])
        assert (grid.height, grid.width, grid.dim) == (56, 56, 1536)
        assert grid.layer_names == ("l2", "l3")

    def test_constants_survive_bilinear_resize(self):
        grid = merge_layers([fmap(np.full((2, 4, 4), 1.25), "a"), fmap(np.full((3, 2, 2), -2.5), "b")])
        expected = np.array([1.25, 1.25, -2.5, -2.5, -2.5], dtype=np.float32)
        assert np.allclose(grid.embeddings, expected)

    def test_bilinear_interpolation_values(self):
        # 2x2 -> 4x4 with half-pixel centers: row/col factors 0, .25, .75, 1.
        deep = np.zeros((1, 2, 2), dtype=np.float32)
        deep[0, 1, 1] = 10.0
        base = fmap(np.zeros((1, 4, 4)), "base")
        grid = merge_layers([base, fmap(deep, "deep")])
        f = np.array([0.0, 0.25, 0.75, 1.0])
        expected = 10.0 * np.outer(f, f)
        assert np.allclose(grid.embeddings[:, :, 1], expected, atol=1e-6)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            merge_layers([])

    def test_first_map_must_be_largest(self):
        small = fmap(np.zeros((1, 2, 2)))
        big = fmap(np.zeros((1, 4, 4)))
        with pytest.raises(ValueError):
            merge_layers([small, big])

    @given(
        st.lists(
            st.tuples(st.integers(1, 6), st.integers(1, 4)),
            min_size=1,
            max_size=4,
        ),
        st.integers(0, 10_000),
    )
    @settings(max_examples=40, deadline=None, derandomize=True)
    def test_dim_is_sum_of_channels(self, shapes, seed):
        rng = np.random.default_rng(seed)
        sizes = sorted({s for _, s in shapes}, reverse=True)
        base_size = sizes[0]
        maps = []
        for i, (channels, _) in enumerate(shapes):
            size = base_size if i == 0 else int(rng.integers(1, base_size + 1))
            maps.append(fmap(rng.standard_normal((channels, size, size)), f"m{i}"))
        grid = merge_layers(maps)
        assert grid.dim == sum(m.channels for m in maps)
        assert (grid.height, grid.width) == (maps[0].height, maps[0].width)


class TestFlatten:
    def test_row_major_order(self):
        emb = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
        grid = PatchGrid(embeddings=emb, source_image_id="x")
        flat = flatten_patches(grid)
        assert [(r, c) for r, c, _ in flat] == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert np.array_equal(flat[2][2], emb[1, 0])

    def test_single_cell(self):
        grid = PatchGrid(embeddings=np.ones((1, 1, 4), dtype=np.float32))
        assert len(flatten_patches(grid)) == 1

    def test_grid_56_yields_3136_patches(self):
        grid = PatchGrid(embeddings=np.zeros((56, 56, 2), dtype=np.float32))
        assert len(flatten_patches(grid)) == 3136

    def test_round_trip_identity(self):
        rng = np.random.default_rng(3)
        emb = rng.standard_normal((5, 4, 7)).astype(np.float32)
        grid = PatchGrid(embeddings=emb, source_image_id="img")
        rebuilt = grid_from_patches(flatten_patches(grid), 5, 4, image_id="img")
        assert np.array_equal(rebuilt.embeddings, grid.embeddings)
