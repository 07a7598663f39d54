"""Detection and segmentation metrics plus cell-to-pixel mask utilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Geometry, rect_iou_px
from .imaging import SegmentMap
from .model import Label


@dataclass
class EvalCurve:
    points: np.ndarray       # (n, 2) columns (fppi, recall), sorted by fppi
    auc: float               # trapezoid area over fppi in [0, 1]
    thresholds: np.ndarray   # score at each point


@dataclass
class PixelMask:
    width: int
    height: int
    bits: np.ndarray  # (height, width) bool

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PixelMask":
        b = np.asarray(arr, dtype=bool)
        return cls(width=b.shape[1], height=b.shape[0], bits=b)


def _auc_from_points(points: list[tuple[float, float]]) -> float:
    xs = [0.0]
    ys = [0.0]
    for fppi, rec in points:
        if fppi == xs[-1]:
            ys[-1] = rec  # vertical rise at the same fppi
        else:
            xs.append(fppi)
            ys.append(rec)
    if xs[-1] < 1.0:
        xs.append(1.0)
        ys.append(ys[-1])
    elif xs[-1] > 1.0:
        # interpolate at fppi = 1 and clip
        i = next(k for k in range(1, len(xs)) if xs[k] >= 1.0)
        t = (1.0 - xs[i - 1]) / (xs[i] - xs[i - 1])
        y1 = ys[i - 1] + t * (ys[i] - ys[i - 1])
        xs, ys = xs[:i] + [1.0], ys[:i] + [y1]
    return float(np.trapz(ys, xs))


def fppi_recall(detections: dict[str, list[tuple[float, tuple]]],
                ground_truths: dict[str, list[tuple]],
                iou_match: float = 0.5) -> EvalCurve:
    """Sweep the score threshold over all detections, matching greedily by
    score: a detection is a true positive when its box IoU with some
    still-unmatched ground truth of its image reaches iou_match.

    detections: image id -> [(score, rect), ...]; ground_truths: image id ->
    [rect, ...]. Images with no entry in `detections` simply contribute
    misses; every key of `ground_truths` counts toward the per-image FPPI
    normalization.
    """
    n_images = len(ground_truths)
    total_gt = sum(len(v) for v in ground_truths.values())
    if total_gt == 0:
        raise ValueError("recall is undefined without ground truth")
    flat = []
    for img, dets in detections.items():
        for rank, (score, rect) in enumerate(dets):
            flat.append((-float(score), str(img), rank, rect))
    flat.sort(key=lambda t: t[:3])

    matched: dict[str, np.ndarray] = {
        img: np.zeros(len(boxes), dtype=bool) for img, boxes in ground_truths.items()}
    tp = fp = 0
    points = []
    thresholds = []
    for negscore, img, _rank, rect in flat:
        boxes = ground_truths.get(img, [])
        best_iou, best_j = 0.0, -1
        for j, gt_rect in enumerate(boxes):
            if matched[img][j]:
                continue
            iou = rect_iou_px(rect, gt_rect)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_match:
            matched[img][best_j] = True
            tp += 1
        else:
            fp += 1
        points.append((fp / n_images, tp / total_gt))
        thresholds.append(-negscore)
    return EvalCurve(points=np.array(points).reshape(-1, 2),
                     auc=_auc_from_points(points),
                     thresholds=np.array(thresholds))


def voc_seg_error(pred: PixelMask | np.ndarray, gt: PixelMask | np.ndarray) -> float:
    """1 - intersection/union over object pixels; two empty masks agree (0)."""
    p = pred.bits if isinstance(pred, PixelMask) else np.asarray(pred, dtype=bool)
    g = gt.bits if isinstance(gt, PixelMask) else np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = int((p | g).sum())
    if union == 0:
        return 0.0
    return 1.0 - int((p & g).sum()) / union


def rasterize_cells(y: Label, geom: Geometry, width: int, height: int) -> PixelMask:
    """Paint each visible cell's base-pixel footprint, clipped to the image."""
    shape = geom.shapes[y.a]
    xs, ys = geom.cell_edges(y)
    cx = np.clip(np.ceil(xs).astype(int), 0, width)
    cy = np.clip(np.ceil(ys).astype(int), 0, height)
    bits = np.zeros((height, width), dtype=bool)
    v = y.v.reshape(shape.h, shape.w)
    for r in range(shape.h):
        if cy[r] >= cy[r + 1]:
            continue
        for c in range(shape.w):
            if v[r, c] and cx[c] < cx[c + 1]:
                bits[cy[r]:cy[r + 1], cx[c]:cx[c + 1]] = True
    return PixelMask(width=width, height=height, bits=bits)


def visibility_from_mask(visible: np.ndarray, y_box: Label, geom: Geometry) -> np.ndarray:
    """Quantize a pixel visibility mask to box cells: a cell is visible when
    more than half of its in-image footprint pixels are set."""
    h, w = visible.shape
    shape = geom.shapes[y_box.a]
    xs, ys = geom.cell_edges(y_box)
    cx = np.clip(np.ceil(xs).astype(int), 0, w)
    cy = np.clip(np.ceil(ys).astype(int), 0, h)
    v = np.zeros(shape.wh, dtype=np.uint8)
    for r in range(shape.h):
        for c in range(shape.w):
            window = visible[cy[r]:cy[r + 1], cx[c]:cx[c + 1]]
            if window.size and window.sum() > 0.5 * window.size:
                v[r * shape.w + c] = 1
    return v


def refine_mask(raw: PixelMask, seg: SegmentMap, threshold: float = 0.8) -> PixelMask:
    """Promote whole segments wherever the raw mask covers more than the
    threshold fraction of the segment; other segments keep their raw pixels."""
    if raw.bits.shape != seg.pixel_labels.shape:
        raise ValueError("mask and segmentation dimensions differ")
    ids = seg.pixel_labels
    covered = np.bincount(ids.ravel(), weights=raw.bits.ravel().astype(np.float64),
                          minlength=seg.n_segments)
    frac = covered / np.maximum(seg.segment_areas, 1)
    promote = frac > threshold
    bits = raw.bits | promote[ids]
    return PixelMask(width=raw.width, height=raw.height, bits=bits)
