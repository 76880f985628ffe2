"""Axis-aligned boxes in centre form and the overlap helpers built on them.

Pixel ``i`` covers the continuous interval ``[i, i + 1)``, so a box spanning
columns ``x0 .. x0 + w - 1`` has centre ``x0 + w / 2`` and width ``w``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoxParams:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x0, y0, x1, y1) -> "BoxParams":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, float(x1 - x0), float(y1 - y0))

    @classmethod
    def from_list(cls, v) -> "BoxParams":
        x, y, w, h = (float(c) for c in v)
        return cls(x, y, w, h)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2, self.y - self.h / 2,
                self.x + self.w / 2, self.y + self.h / 2)

    def as_list(self) -> list[float]:
        return [float(self.x), float(self.y), float(self.w), float(self.h)]

    def as_array(self) -> np.ndarray:
        return np.array(self.as_list())

    @property
    def area(self) -> float:
        return self.w * self.h

    def cells(self, height: int, width: int) -> tuple[slice, slice]:
        """Row/column slices of the grid cells the box touches, clipped."""
        x0, y0, x1, y1 = self.corners()
        c0 = max(int(np.floor(x0)), 0)
        c1 = min(int(np.ceil(x1)), width)
        r0 = max(int(np.floor(y0)), 0)
        r1 = min(int(np.ceil(y1)), height)
        return slice(r0, max(r0, r1)), slice(c0, max(c0, c1))

    def mask(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width), dtype=bool)
        m[self.cells(height, width)] = True
        return m


def iou(a: BoxParams, b: BoxParams) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corners as the intersection, so iou(a, a) is exactly 1
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(min(max(inter / union, 0.0), 1.0))


def nms(boxes: list[BoxParams], scores, iou_threshold: float = 0.5) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices, best score first.

    Ties in score keep the lower index first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) <= iou_threshold for k in keep):
            keep.append(i)
    return keep
