"""Closed-form stand-in detector that supplies per-step detection losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from ..boxes import BoxParams, iou
from ..events import VoxelGrid

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def toy_detect_loss(segment: VoxelGrid, proposals: Sequence[BoxParams],
                    gt_boxes: Sequence[BoxParams]) -> float:
    """``1 - best IoU`` per ground-truth box, averaged; 1.0 for an empty segment."""
    if segment.mass == 0:
        return 1.0
    if not gt_boxes:
        return 0.0
    terms = [1.0 - max((iou(p, g) for p in proposals), default=0.0) for g in gt_boxes]
    return float(np.clip(np.mean(terms), 0.0, 1.0))


@dataclass(frozen=True)
class ToyDetector:
    """Proposes the bounding box of each 8-connected blob of active pixels.

    Pixels separated by at most ``gap`` inactive pixels join the same blob, so
    sparsely sampled outlines stay whole.  Blobs with fewer than
    ``min_pixels`` active pixels are treated as noise.
    """

    min_pixels: int = 4
    gap: int = 1

    def propose(self, grid: VoxelGrid) -> list[BoxParams]:
        active = np.abs(grid.data).sum(axis=0) > 0
        grouped = active
        if self.gap > 0 and active.any():
            grouped = ndimage.binary_dilation(active, _EIGHT_CONNECTED, iterations=self.gap)
        labels, _ = ndimage.label(grouped, structure=_EIGHT_CONNECTED)
        labels[~active] = 0
        boxes = []
        for k in range(1, labels.max() + 1):
            rows, cols = np.nonzero(labels == k)
            if rows.size < self.min_pixels:
                continue
            boxes.append(BoxParams.from_corners(cols.min(), rows.min(),
                                                cols.max() + 1, rows.max() + 1))
        return boxes

    def loss(self, grid: VoxelGrid, gt_boxes: Sequence[BoxParams]) -> float:
        return toy_detect_loss(grid, self.propose(grid), gt_boxes)
