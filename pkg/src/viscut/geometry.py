"""Base-level pixel projection of box labels, pixel counting, and IoU.

All cross-module comparisons of labels (loss, suppression, matching) happen
in base-level pixel coordinates: a cell at pyramid level sigma spans
cell_size/scale(sigma) base pixels. Pixel membership in a half-open real
interval [lo, hi) is integer counting, count = max(0, ceil(hi) - ceil(lo)),
so rasterized areas, intersections, and Hamming distances are exact integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imaging import FeaturePyramid
from .model import Label, ViewpointShape


@dataclass(frozen=True)
class Geometry:
    cell_size: int
    scales: tuple[float, ...]
    shapes: tuple[ViewpointShape, ...]

    @classmethod
    def for_pyramid(cls, pyr: FeaturePyramid, shapes) -> "Geometry":
        return cls(cell_size=pyr.cell_size, scales=pyr.scales, shapes=tuple(shapes))

    def span(self, level: int) -> float:
        """Base pixels covered by one cell at this level."""
        return self.cell_size / self.scales[level]

    def box_rect(self, y: Label) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) base-pixel rectangle of a label's box."""
        s = self.span(y.p_sigma)
        shape = self.shapes[y.a]
        return (y.p_x * s, y.p_y * s, (y.p_x + shape.w) * s, (y.p_y + shape.h) * s)

    def cell_edges(self, y: Label) -> tuple[np.ndarray, np.ndarray]:
        """Pixel boundaries of the box's cell columns and rows (w+1 and h+1)."""
        s = self.span(y.p_sigma)
        shape = self.shapes[y.a]
        xs = (y.p_x + np.arange(shape.w + 1)) * s
        ys = (y.p_y + np.arange(shape.h + 1)) * s
        return xs, ys


def count_px(lo: float, hi: float) -> int:
    """Integer pixel indices n with lo <= n < hi."""
    return max(0, math.ceil(hi) - math.ceil(lo))


def overlap_px(a0: float, a1: float, b0: float, b1: float) -> int:
    return count_px(max(a0, b0), min(a1, b1))


def rect_area_px(rect) -> int:
    x0, y0, x1, y1 = rect
    return count_px(x0, x1) * count_px(y0, y1)


def rect_inter_px(r1, r2) -> int:
    return (overlap_px(r1[0], r1[2], r2[0], r2[2])
            * overlap_px(r1[1], r1[3], r2[1], r2[3]))


def rect_iou_px(r1, r2) -> float:
    inter = rect_inter_px(r1, r2)
    union = rect_area_px(r1) + rect_area_px(r2) - inter
    return inter / union if union > 0 else 0.0


def interval_counts(edges: np.ndarray) -> np.ndarray:
    """Pixel counts of consecutive half-open intervals given their edges."""
    c = np.ceil(edges)
    return np.maximum(0, (c[1:] - c[:-1])).astype(np.int64)


def interval_overlaps(edges_a: np.ndarray, edges_b: np.ndarray) -> np.ndarray:
    """Pairwise pixel-overlap counts between two interval partitions.

    Result[i, j] counts integer points shared by interval i of partition a
    and interval j of partition b.
    """
    a0 = np.ceil(edges_a[:-1])[:, None]
    a1 = np.ceil(edges_a[1:])[:, None]
    b0 = np.ceil(edges_b[:-1])[None, :]
    b1 = np.ceil(edges_b[1:])[None, :]
    return np.maximum(0, np.minimum(a1, b1) - np.maximum(a0, b0)).astype(np.int64)
