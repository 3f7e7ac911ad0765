import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsseg import patchflow


class TestAxisStarts:
    def test_exact_fit_single_patch(self):
        assert patchflow._axis_starts(64, 64, 32) == [0]

    def test_double_extent_three_starts(self):
        # 128 with 64 patches at stride 32: 0, 32, 64
        assert patchflow._axis_starts(128, 64, 32) == [0, 32, 64]

    def test_boundary_flush(self):
        # final start is clamped so the last patch ends at the volume edge
        assert patchflow._axis_starts(70, 64, 32) == [0, 6]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(64, 200), st.sampled_from([16, 32, 64]),
           st.integers(8, 64))
    def test_full_coverage_and_in_bounds(self, size, extent, stride):
        # coverage is only guaranteed for overlap >= 0, i.e. stride <= extent
        stride = min(stride, extent)
        starts = patchflow._axis_starts(size, extent, stride)
        covered = np.zeros(size, dtype=bool)
        for s in starts:
            assert 0 <= s <= size - extent
            covered[s:s + extent] = True
        assert covered.all()


class TestExtractGrid:
    def test_cube_count_64_in_96(self):
        # starts [0, 32] on each axis -> 2^3 = 8 patches
        origins = patchflow.extract_grid((96, 96, 96), 64)
        assert len(origins) == 8

    def test_origin_dedup(self):
        origins = patchflow.extract_grid((64, 64, 64), 64)
        assert origins == [(0, 0, 0)]

    def test_anisotropic_volume(self):
        origins = patchflow.extract_grid((64, 96, 70), 64)
        assert set(origins) == {(0, y, z) for y in (0, 32) for z in (0, 6)}

    def test_sorted_output(self):
        origins = patchflow.extract_grid((96, 96, 96), 32)
        assert origins == sorted(origins)

    def test_patch_larger_than_volume_raises(self):
        with pytest.raises(ValueError, match="extent"):
            patchflow.extract_grid((32, 64, 64), 64)

    def test_bad_overlap_raises(self):
        with pytest.raises(ValueError, match="overlap"):
            patchflow.extract_grid((64, 64, 64), 64, overlap=1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.tuples(st.integers(64, 96), st.integers(64, 96),
                     st.integers(64, 96)))
    def test_every_voxel_covered(self, shape):
        origins = patchflow.extract_grid(shape, 64)
        covered = np.zeros(shape, dtype=bool)
        for z, y, x in origins:
            covered[z:z + 64, y:y + 64, x:x + 64] = True
        assert covered.all()


class TestExtractPatches:
    def test_values_match_slices(self):
        rng = np.random.default_rng(0)
        vol = rng.standard_normal((4, 64, 80, 70))
        mask = (rng.random((64, 80, 70)) < 0.1).astype(np.uint8)
        for rec in patchflow.extract_patches(vol, mask, 64):
            z, y, x = rec.origin
            assert np.array_equal(
                rec.data, vol[:, z:z + 64, y:y + 64, x:x + 64])
            assert np.array_equal(
                rec.mask_patch, mask[z:z + 64, y:y + 64, x:x + 64])

    def test_lesion_voxel_count(self):
        vol = np.zeros((4, 64, 64, 64))
        mask = np.zeros((64, 64, 64), dtype=np.uint8)
        mask[10:12, 10:12, 10:12] = 1
        recs = patchflow.extract_patches(vol, mask, 64)
        assert recs[0].lesion_voxels == 8


class TestLesionFilter:
    def test_keeps_only_lesion_patches(self):
        vol = np.zeros((4, 96, 96, 96))
        mask = np.zeros((96, 96, 96), dtype=np.uint8)
        mask[70, 70, 70] = 1  # only patches with origin (32, 32, 32) see it
        recs = patchflow.extract_patches(vol, mask, 64)
        kept = patchflow.filter_lesion_patches(recs)
        assert len(kept) == 1
        assert kept[0].origin == (32, 32, 32)

    def test_empty_mask_keeps_nothing(self):
        vol = np.zeros((4, 64, 64, 64))
        mask = np.zeros((64, 64, 64), dtype=np.uint8)
        recs = patchflow.extract_patches(vol, mask, 64)
        assert patchflow.filter_lesion_patches(recs) == []


class TestFuse:
    def test_single_patch_identity(self):
        rng = np.random.default_rng(1)
        patch = rng.random((64, 64, 64))
        out = patchflow.fuse([((0, 0, 0), patch)], (64, 64, 64))
        assert np.allclose(out, patch)

    def test_overlap_region_is_mean(self):
        shape = (96, 64, 64)
        origins = patchflow.extract_grid(shape, 64)
        pairs = [(o, np.full((64, 64, 64), float(i)))
                 for i, o in enumerate(origins)]
        out = patchflow.fuse(pairs, shape)
        # origins (0,..) and (32,..): overlap along the first axis in [32, 64)
        assert np.allclose(out[:32], 0.0)
        assert np.allclose(out[32:64], 0.5)
        assert np.allclose(out[64:], 1.0)

    def test_constant_field_is_preserved(self):
        shape = (80, 70, 64)
        pairs = [(o, np.full((64,) * 3, 2.5))
                 for o in patchflow.extract_grid(shape, 64)]
        assert np.allclose(patchflow.fuse(pairs, shape), 2.5)

    def test_uncovered_voxel_raises(self):
        with pytest.raises(ValueError, match="not covered"):
            patchflow.fuse([((0, 0, 0), np.zeros((16,) * 3))], (32, 16, 16))

    def test_round_trip_volume(self):
        rng = np.random.default_rng(2)
        vol = rng.standard_normal((1, 70, 64, 96))
        mask = np.zeros(vol.shape[1:], dtype=np.uint8)
        pairs = [(rec.origin, rec.data[0])
                 for rec in patchflow.extract_patches(vol, mask, 64)]
        out = patchflow.fuse(pairs, vol.shape[1:])
        assert np.allclose(out, vol[0])
