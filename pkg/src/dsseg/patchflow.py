"""Overlapping-grid patch extraction and prediction fusion.

Training uses only patches containing at least one lesion voxel; testing
uses the full grid and averages overlapping predictions back into the
volume.  The last patch along each axis is shifted flush to the boundary
so coverage is always total without padding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np


@dataclass
class PatchRecord:
    origin: Tuple[int, int, int]
    extent: int
    data: np.ndarray        # [4, e, e, e]
    mask_patch: np.ndarray  # [e, e, e]

    @property
    def lesion_voxels(self) -> int:
        return int(self.mask_patch.sum())


def _axis_starts(axis_len: int, extent: int, stride: int) -> List[int]:
    starts = list(range(0, axis_len - extent + 1, stride))
    last = axis_len - extent
    if starts[-1] != last:
        starts.append(last)  # flush to the boundary
    return starts


def extract_grid(volume_shape: Sequence[int], extent: int,
                 overlap: float = 0.5) -> List[Tuple[int, int, int]]:
    """Sorted, deduplicated patch origins covering the whole volume."""
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    shape = tuple(volume_shape)[-3:]
    for ext in shape:
        if extent > ext:
            raise ValueError(f"patch extent {extent} exceeds axis {ext}")
    stride = max(1, int(round(extent * (1.0 - overlap))))
    axes = [_axis_starts(ext, extent, stride) for ext in shape]
    origins = sorted({(z, y, x) for z in axes[0] for y in axes[1]
                      for x in axes[2]})
    return origins


def extract_patches(volume: np.ndarray, mask: np.ndarray, extent: int,
                    overlap: float = 0.5) -> List[PatchRecord]:
    origins = extract_grid(volume.shape[1:], extent, overlap)
    records = []
    for z, y, x in origins:
        records.append(PatchRecord(
            origin=(z, y, x), extent=extent,
            data=volume[:, z:z + extent, y:y + extent, x:x + extent],
            mask_patch=mask[z:z + extent, y:y + extent, x:x + extent]))
    return records


def filter_lesion_patches(records: Sequence[PatchRecord]) -> List[PatchRecord]:
    """Training-time filter: keep patches with >= 1 lesion voxel."""
    return [r for r in records if r.lesion_voxels >= 1]


def fuse(predictions: Sequence[Tuple[Tuple[int, int, int], np.ndarray]],
         volume_shape: Sequence[int]) -> np.ndarray:
    """Average overlapping patch probabilities into a full volume."""
    shape = tuple(volume_shape)[-3:]
    acc = np.zeros(shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.int32)
    for (z, y, x), patch in predictions:
        e = patch.shape[-1]
        acc[z:z + e, y:y + e, x:x + e] += patch
        count[z:z + e, y:y + e, x:x + e] += 1
    if np.any(count == 0):
        uncovered = int(np.count_nonzero(count == 0))
        raise ValueError(f"fusion: {uncovered} voxels not covered by any patch")
    return acc / count
