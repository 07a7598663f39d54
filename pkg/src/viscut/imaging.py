"""Image ingestion, HOG feature pyramids, and graph-based over-segmentation.

Pixel data is float64 in [0, 1] with shape (height, width, channels). HOG
cells use the 31-dimensional descriptor: 18 contrast-sensitive orientation
bins, 9 contrast-insensitive bins, and 4 block-normalization features, all
computed per cell of ``cell_size`` pixels. Over-segmentation is greedy graph
merging on the 8-connected pixel lattice with Euclidean color edge weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError

HOG_DIM = 31
_NORM_EPS = 1e-8  # under the square root of every block norm
_TEXTURE_GAIN = 0.2357  # 1/sqrt(18), gain of the 4 normalization features
_TRUNCATION = 0.2

# 9 gradient directions spanning half the circle; sign extends them to 18.
_UU = np.cos(np.arange(9) * np.pi / 9)
_VV = np.sin(np.arange(9) * np.pi / 9)


@dataclass
class RasterImage:
    width: int
    height: int
    channels: int
    data: np.ndarray  # (height, width, channels) float64 in [0, 1]

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8 pixels")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.data.shape != (self.height, self.width, self.channels):
            raise ValueError("data length must equal width*height*channels")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RasterImage":
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 2:
            a = a[:, :, None]
        h, w, c = a.shape
        return cls(width=w, height=h, channels=c, data=a)


@dataclass
class PyramidLevel:
    scale: float            # nominal scale relative to the original image
    grid_w: int             # cells
    grid_h: int             # cells
    hog: np.ndarray         # (grid_h, grid_w, 31)
    img_w: int              # resampled pixel width at this level
    img_h: int              # resampled pixel height


@dataclass
class FeaturePyramid:
    levels: list[PyramidLevel]
    cell_size: int

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def scales(self) -> tuple[float, ...]:
        return tuple(lv.scale for lv in self.levels)


@dataclass
class SegmentMap:
    pixel_labels: np.ndarray          # (height, width) int32, ids dense in [0, S)
    segment_areas: np.ndarray         # (S,) pixel counts
    cell_labels: list[np.ndarray] | None = field(default=None)  # per pyramid level

    @property
    def n_segments(self) -> int:
        return len(self.segment_areas)


def load_image(path) -> RasterImage:
    """Read a PNG or PPM/PGM file into a normalized RasterImage.

    8-bit samples are scaled by 1/255, 16-bit by 1/65535. Unreadable files
    raise OSError; corrupt or unsupported content raises FormatError.
    """
    p = Path(path)
    if not p.is_file():
        raise OSError(f"cannot read image file: {p}")
    try:
        im = Image.open(p)
        fmt = im.format
        im.load()
    except (UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise FormatError(f"unsupported or corrupt image: {p}: {exc}") from exc
    except OSError as exc:
        # PIL raises OSError for truncated streams after open() succeeded
        raise FormatError(f"corrupt image stream: {p}: {exc}") from exc
    if fmt not in ("PNG", "PPM"):
        raise FormatError(f"unsupported format {fmt!r}: only PNG and PPM/PGM are read")

    if im.mode in ("I", "I;16", "I;16B", "I;16L"):
        arr = np.asarray(im, dtype=np.float64) / 65535.0
    elif im.mode == "L":
        arr = np.asarray(im, dtype=np.float64) / 255.0
    elif im.mode == "RGB":
        arr = np.asarray(im, dtype=np.float64) / 255.0
    elif im.mode in ("P", "RGBA", "LA", "PA", "1"):
        conv = "L" if im.mode in ("LA", "1") else "RGB"
        arr = np.asarray(im.convert(conv), dtype=np.float64) / 255.0
    else:
        raise FormatError(f"unsupported pixel mode {im.mode!r} in {p}")
    return RasterImage.from_array(np.clip(arr, 0.0, 1.0))


def write_segment_pgm(seg: SegmentMap, path) -> None:
    """Serialize segment ids as a 16-bit binary PGM (big-endian per Netpbm)."""
    ids = seg.pixel_labels
    if ids.max(initial=0) > 65535:
        raise ValueError("segment ids exceed 16-bit range")
    h, w = ids.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(ids.astype(">u2").tobytes())


def read_segment_pgm(path) -> np.ndarray:
    """Inverse of write_segment_pgm; returns the (h, w) int32 id array."""
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5" or parts[2] != b"65535":
        raise FormatError(f"not a 16-bit segment PGM: {path}")
    w, h = (int(t) for t in parts[1].split())
    ids = np.frombuffer(parts[3], dtype=">u2", count=w * h)
    return ids.reshape(h, w).astype(np.int32)


def _resize_bilinear(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = data.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = data[y0][:, x0] * (1 - wx) + data[y0][:, x1] * wx
    bot = data[y1][:, x0] * (1 - wx) + data[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def extract_hog(img: RasterImage | np.ndarray, cell_size: int = 8) -> np.ndarray:
    """Per-cell 31-dimensional HOG descriptors, shape (grid_h, grid_w, 31).

    Gradients are clamped central differences; color pixels use the channel
    with the largest gradient magnitude. Each pixel votes for one of 18
    signed orientations and is soft-binned bilinearly into the 4 nearest
    cells. Cell energies are block-normalized over the four diagonal 2x2
    neighborhoods (edge-clamped) with epsilon 1e-8 under the square root,
    truncated at 0.2.
    """
    if cell_size < 2:
        raise ValueError("cell_size must be >= 2")
    data = img.data if isinstance(img, RasterImage) else np.asarray(img, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w = data.shape[:2]
    gh, gw = h // cell_size, w // cell_size
    if gh < 1 or gw < 1:
        raise ValueError("image smaller than one cell")

    xi = np.arange(w)
    yi = np.arange(h)
    dx = data[:, np.minimum(xi + 1, w - 1)] - data[:, np.maximum(xi - 1, 0)]
    dy = data[np.minimum(yi + 1, h - 1)] - data[np.maximum(yi - 1, 0)]
    mag2 = dx * dx + dy * dy
    ch = np.argmax(mag2, axis=2)
    take = lambda g: np.take_along_axis(g, ch[:, :, None], axis=2)[:, :, 0]
    gx, gy = take(dx), take(dy)
    mag = np.sqrt(gx * gx + gy * gy)

    # snap to the best of 18 signed directions (ties: first in [+0..8, -0..8])
    dots = gx[:, :, None] * _UU + gy[:, :, None] * _VV
    obin = np.argmax(np.concatenate([dots, -dots], axis=2), axis=2)

    xp = (np.arange(w) + 0.5) / cell_size - 0.5
    yp = (np.arange(h) + 0.5) / cell_size - 0.5
    ix0 = np.floor(xp).astype(int)
    iy0 = np.floor(yp).astype(int)
    fx = xp - ix0
    fy = yp - iy0

    hist = np.zeros((gh, gw, 18))
    iyg, ixg = np.meshgrid(iy0, ix0, indexing="ij")
    fyg, fxg = np.meshgrid(fy, fx, indexing="ij")
    for oy, wyv in ((0, 1 - fyg), (1, fyg)):
        for ox, wxv in ((0, 1 - fxg), (1, fxg)):
            cy = iyg + oy
            cx = ixg + ox
            ok = (cy >= 0) & (cy < gh) & (cx >= 0) & (cx < gw)
            np.add.at(hist, (cy[ok], cx[ok], obin[ok]), (mag * wyv * wxv)[ok])

    folded = hist[:, :, :9] + hist[:, :, 9:]
    energy = (folded ** 2).sum(axis=2)
    pad = np.pad(energy, 1, mode="edge")
    feats = np.zeros((gh, gw, HOG_DIM))
    tex = []
    for di in (0, 1):
        for dj in (0, 1):
            block = (pad[di:di + gh, dj:dj + gw] + pad[di:di + gh, dj + 1:dj + 1 + gw]
                     + pad[di + 1:di + 1 + gh, dj:dj + gw]
                     + pad[di + 1:di + 1 + gh, dj + 1:dj + 1 + gw])
            norm = 1.0 / np.sqrt(block + _NORM_EPS)
            clipped = np.minimum(hist * norm[:, :, None], _TRUNCATION)
            feats[:, :, :18] += 0.5 * clipped
            feats[:, :, 18:27] += 0.5 * np.minimum(folded * norm[:, :, None], _TRUNCATION)
            tex.append(_TEXTURE_GAIN * clipped.sum(axis=2))
    feats[:, :, 27:] = np.stack(tex, axis=2)
    return feats


def build_pyramid(img: RasterImage, scale_step: float = 2 ** -0.25,
                  n_levels: int = 11, cell_size: int = 8) -> FeaturePyramid:
    """HOG pyramid with level k at nominal scale scale_step**k (level 0 finest).

    Levels whose resampled image would be smaller than one cell per side are
    dropped; the returned pyramid's length is the actual level count.
    """
    if not 0.0 < scale_step < 1.0:
        raise ValueError("scale_step must be in (0, 1)")
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    levels = []
    for k in range(n_levels):
        s = scale_step ** k
        lw = int(round(img.width * s))
        lh = int(round(img.height * s))
        if lw < cell_size or lh < cell_size:
            break
        data = img.data if k == 0 else _resize_bilinear(img.data, lh, lw)
        hog = extract_hog(data, cell_size)
        levels.append(PyramidLevel(scale=s, grid_w=lw // cell_size,
                                   grid_h=lh // cell_size, hog=hog,
                                   img_w=lw, img_h=lh))
    if not levels:
        raise ValueError("no pyramid level fits a single cell")
    return FeaturePyramid(levels=levels, cell_size=cell_size)


def segment_unsupervised(img: RasterImage, k: float = 300.0,
                         min_size: int = 32) -> SegmentMap:
    """Greedy graph-based over-segmentation of the 8-connected pixel lattice.

    Edge weight is the Euclidean color distance; two regions merge while the
    joining edge weight is at most min over both regions of (internal
    difference + k/area). Regions below min_size are then merged across their
    cheapest edges. Ids are densified in row-major first-occurrence order.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    data = img.data
    h, w = data.shape[:2]
    n = h * w
    idx = np.arange(n).reshape(h, w)
    flat = data.reshape(n, -1)

    a_parts, b_parts = [], []
    for sl_a, sl_b in (
        (np.s_[:, :-1], np.s_[:, 1:]),      # right
        (np.s_[:-1, :], np.s_[1:, :]),      # down
        (np.s_[:-1, :-1], np.s_[1:, 1:]),   # down-right
        (np.s_[:-1, 1:], np.s_[1:, :-1]),   # down-left
    ):
        a_parts.append(idx[sl_a].ravel())
        b_parts.append(idx[sl_b].ravel())
    ea = np.concatenate(a_parts)
    eb = np.concatenate(b_parts)
    ew = np.sqrt(((flat[ea] - flat[eb]) ** 2).sum(axis=1))
    order = np.argsort(ew, kind="stable")
    ea_l = ea[order].tolist()
    eb_l = eb[order].tolist()
    ew_l = ew[order].tolist()

    parent = list(range(n))
    size = [1] * n
    thr = [k] * n

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b, wv in zip(ea_l, eb_l, ew_l):
        ra, rb = find(a), find(b)
        if ra != rb and wv <= thr[ra] and wv <= thr[rb]:
            if size[ra] < size[rb]:
                ra, rb = rb, ra
            parent[rb] = ra
            size[ra] += size[rb]
            thr[ra] = wv + k / size[ra]

    for a, b in zip(ea_l, eb_l):
        ra, rb = find(a), find(b)
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            if size[ra] < size[rb]:
                ra, rb = rb, ra
            parent[rb] = ra
            size[ra] += size[rb]

    roots = np.array([find(i) for i in range(n)], dtype=np.int64)
    uniq, dense = np.unique(roots, return_inverse=True)
    # remap so ids follow row-major first occurrence (deterministic)
    first = np.full(len(uniq), n, dtype=np.int64)
    np.minimum.at(first, dense, np.arange(n))
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    labels = rank[dense].reshape(h, w).astype(np.int32)
    areas = np.bincount(labels.ravel(), minlength=len(uniq))
    return SegmentMap(pixel_labels=labels, segment_areas=areas)


def project_segments(seg: SegmentMap, pyr: FeaturePyramid) -> list[np.ndarray]:
    """Majority segment id per HOG cell at every pyramid level.

    A cell's footprint is its pixel extent at the level, mapped back to the
    original resolution through the actual resampling ratio. Ties break
    toward the smaller id.
    """
    h, w = seg.pixel_labels.shape
    cs = pyr.cell_size
    out = []
    nseg = seg.n_segments
    for lv in pyr.levels:
        ry = lv.img_h / h
        rx = lv.img_w / w
        ybounds = [0] * (lv.grid_h + 1)
        for r in range(lv.grid_h + 1):
            ybounds[r] = min(h, int(np.ceil(r * cs / ry)))
        xbounds = [0] * (lv.grid_w + 1)
        for c in range(lv.grid_w + 1):
            xbounds[c] = min(w, int(np.ceil(c * cs / rx)))
        labels = np.zeros((lv.grid_h, lv.grid_w), dtype=np.int32)
        for r in range(lv.grid_h):
            y0, y1 = ybounds[r], max(ybounds[r + 1], ybounds[r] + 1)
            for c in range(lv.grid_w):
                x0, x1 = xbounds[c], max(xbounds[c + 1], xbounds[c] + 1)
                window = seg.pixel_labels[y0:y1, x0:x1].ravel()
                counts = np.bincount(window, minlength=nseg)
                labels[r, c] = int(np.argmax(counts))  # argmax ties -> smaller id
        out.append(labels)
    return out


def segment_and_project(img: RasterImage, pyr: FeaturePyramid, k: float = 300.0,
                        min_size: int = 32) -> SegmentMap:
    """Convenience: segment and attach per-level cell labels."""
    seg = segment_unsupervised(img, k=k, min_size=min_size)
    seg.cell_labels = project_segments(seg, pyr)
    return seg
