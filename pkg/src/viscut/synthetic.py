"""Seeded synthetic scenes with exact boxes, visibility, and pixel masks.

Each scene is a cluttered background, one textured rectangular object per
requested instance planted at integer cell coordinates of a pyramid level,
and striped occluder shapes covering at most a configured fraction of each
object. The object texture is procedural in normalized coordinates, so a
larger planted instance carries the same pattern at proportionally larger
pixel scale and matches the same HOG template one pyramid level up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError
from .evaluation import visibility_from_mask
from .geometry import Geometry
from .imaging import RasterImage, SegmentMap, _resize_bilinear, segment_unsupervised
from .learning import TrainingSample
from .model import Label, ViewpointShape


@dataclass
class SynthConfig:
    n_images: int = 20
    seed: int = 0
    object_texture_seed: int = 7
    occluder_count: int = 2
    max_occlusion: float = 0.5
    clutter_level: float = 0.5
    width: int = 144
    height: int = 112
    box_w: int = 5            # cells
    box_h: int = 4
    cell_size: int = 8
    scale_step: float = 2 ** -0.25
    plant_levels: tuple = (0, 1, 2)
    n_objects: int = 1
    overlap: bool = False     # place later objects overlapping the first
    seg_k: float = 300.0
    seg_min_size: int = 32

    def __post_init__(self):
        if not 0.0 <= self.max_occlusion <= 0.9:
            raise ValueError("max_occlusion must be in [0, 0.9]")
        if self.n_images < 1 or self.n_objects < 1:
            raise ValueError("need at least one image and one object")


@dataclass
class SynthInstance:
    object_id: int
    label: Label
    box_px: tuple[int, int, int, int]   # x0, y0, w, h
    mask: np.ndarray                    # visible-object pixels, (h, w) bool


@dataclass
class SynthDataset:
    config: SynthConfig
    geom: Geometry
    images: list[RasterImage]
    instances: list[list[SynthInstance]]
    segments: list[SegmentMap]

    def training_samples(self, object_id: int = 0) -> list[TrainingSample]:
        out = []
        for img, insts, seg in zip(self.images, self.instances, self.segments):
            for inst in insts:
                if inst.object_id == object_id:
                    out.append(TrainingSample(image=img, y_gt=inst.label,
                                              segments=seg))
        return out


def _texture_params(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    hues = rng.permutation(4)
    palette = np.array([[0.92, 0.18, 0.15], [0.12, 0.55, 0.92],
                        [0.95, 0.83, 0.10], [0.15, 0.78, 0.25]])
    return {
        "quads": palette[hues],
        "frame": np.array([0.97, 0.97, 0.95]),
        "stripe_quad": int(rng.integers(0, 4)),
        "stripe_period": float(rng.uniform(5.0, 7.5)),
        "stripe_colors": np.stack([rng.uniform(0.05, 0.3, 3),
                                   rng.uniform(0.7, 0.95, 3)]),
        "dot": rng.uniform(0.0, 1.0, 3),
        "base_w": None,  # filled by the generator
        "base_h": None,
    }


def _render_object(params: dict, w_px: int, h_px: int) -> np.ndarray:
    uu = (np.arange(w_px) + 0.5) / w_px
    vv = (np.arange(h_px) + 0.5) / h_px
    U, V = np.meshgrid(uu, vv)
    quad = (U >= 0.5).astype(int) + 2 * (V >= 0.5).astype(int)
    img = params["quads"][quad]

    sq = params["stripe_quad"]
    phase = (U * params["base_w"] + V * params["base_h"]) / params["stripe_period"]
    stripe = (phase % 1.0) < 0.5
    in_sq = quad == sq
    img = np.where((in_sq & stripe)[:, :, None], params["stripe_colors"][0], img)
    img = np.where((in_sq & ~stripe)[:, :, None], params["stripe_colors"][1], img)

    dot = (U > 0.15) & (U < 0.35) & (V > 0.6) & (V < 0.85)
    img = np.where(dot[:, :, None], params["dot"], img)

    fb = 0.12
    frame = (U < fb) | (U > 1 - fb) | (V < fb) | (V > 1 - fb)
    img = np.where(frame[:, :, None], params["frame"], img)
    return img


def _background(rng: np.random.Generator, h: int, w: int, clutter: float) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.75, (5, 6, 3))
    img = _resize_bilinear(coarse, h, w)
    for _ in range(int(round(clutter * 10))):
        sw = int(rng.integers(8, 40))
        sh = int(rng.integers(8, 40))
        x0 = int(rng.integers(0, max(1, w - sw)))
        y0 = int(rng.integers(0, max(1, h - sh)))
        color = rng.uniform(0.1, 0.9, 3)
        if rng.random() < 0.5:
            img[y0:y0 + sh, x0:x0 + sw] = color
        else:
            yy, xx = np.mgrid[0:sh, 0:sw]
            e = (((xx - sw / 2) / (sw / 2)) ** 2 + ((yy - sh / 2) / (sh / 2)) ** 2) <= 1
            img[y0:y0 + sh, x0:x0 + sw][e] = color
    img += rng.normal(0.0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0)


def _occluder_patch(rng: np.random.Generator, ow: int, oh: int):
    c0 = rng.uniform(0.1, 0.5, 3)
    c1 = rng.uniform(0.5, 0.95, 3)
    period = float(rng.uniform(3.5, 6.0))
    yy, xx = np.mgrid[0:oh, 0:ow]
    coord = xx if rng.random() < 0.5 else yy
    stripes = ((coord / period) % 1.0) < 0.5
    patch = np.where(stripes[:, :, None], c0, c1)
    if rng.random() < 0.5:
        mask = np.ones((oh, ow), dtype=bool)
    else:
        mask = (((xx - ow / 2) / (ow / 2)) ** 2 + ((yy - oh / 2) / (oh / 2)) ** 2) <= 1
    return patch, mask


def _paste(img: np.ndarray, patch: np.ndarray, mask: np.ndarray,
           x0: int, y0: int) -> np.ndarray:
    """Paint patch pixels where mask holds, clipped; returns the painted mask."""
    h, w = img.shape[:2]
    ph, pw = mask.shape
    xa, ya = max(0, x0), max(0, y0)
    xb, yb = min(w, x0 + pw), min(h, y0 + ph)
    painted = np.zeros((h, w), dtype=bool)
    if xa >= xb or ya >= yb:
        return painted
    sub = mask[ya - y0:yb - y0, xa - x0:xb - x0]
    img[ya:yb, xa:xb][sub] = patch[ya - y0:yb - y0, xa - x0:xb - x0][sub]
    painted[ya:yb, xa:xb] = sub
    return painted


def gen_synthetic(cfg: SynthConfig) -> SynthDataset:
    rng = np.random.default_rng(cfg.seed)
    shapes = (ViewpointShape(cfg.box_w, cfg.box_h),)
    n_scales = max(cfg.plant_levels) + 1
    geom = Geometry(cell_size=cfg.cell_size,
                    scales=tuple(cfg.scale_step ** k for k in range(n_scales)),
                    shapes=shapes)
    textures = []
    for o in range(cfg.n_objects):
        params = _texture_params(cfg.object_texture_seed + o)
        params["base_w"] = cfg.box_w * cfg.cell_size
        params["base_h"] = cfg.box_h * cfg.cell_size
        textures.append(params)

    margin = 2
    feasible_levels = []
    for sigma in cfg.plant_levels:
        span = geom.span(sigma)
        bw = int(round(cfg.box_w * span))
        bh = int(round(cfg.box_h * span))
        px_lo = int(np.ceil(margin / span))
        px_hi = int(np.floor((cfg.width - margin - bw) / span))
        py_lo = int(np.ceil(margin / span))
        py_hi = int(np.floor((cfg.height - margin - bh) / span))
        if px_hi >= px_lo and py_hi >= py_lo:
            feasible_levels.append(sigma)
    if not feasible_levels:
        raise GenerationError("no plant level fits the image size")

    images, all_instances, segments = [], [], []
    for _ in range(cfg.n_images):
        img = _background(rng, cfg.height, cfg.width, cfg.clutter_level)
        placed: list[dict] = []
        for o in range(cfg.n_objects):
            sigma = int(feasible_levels[rng.integers(0, len(feasible_levels))])
            span = geom.span(sigma)
            bw = int(round(cfg.box_w * span))
            bh = int(round(cfg.box_h * span))
            px_lo = int(np.ceil(margin / span))
            px_hi = int(np.floor((cfg.width - margin - bw) / span))
            py_lo = int(np.ceil(margin / span))
            py_hi = int(np.floor((cfg.height - margin - bh) / span))
            if cfg.overlap and placed:
                ref = placed[0]
                p_x = int(np.clip(ref["label"].p_x + int(rng.integers(2, cfg.box_w)),
                                  px_lo, px_hi))
                p_y = int(np.clip(ref["label"].p_y + int(rng.integers(0, 2)),
                                  py_lo, py_hi))
            else:
                for _try in range(100):
                    p_x = int(rng.integers(px_lo, px_hi + 1))
                    p_y = int(rng.integers(py_lo, py_hi + 1))
                    x0 = int(round(p_x * span))
                    y0 = int(round(p_y * span))
                    if all(_rects_disjoint((x0, y0, bw, bh), q["box_px"])
                           for q in placed) or not placed:
                        break
                else:
                    raise GenerationError("could not place disjoint objects")
            x0 = int(round(p_x * span))
            y0 = int(round(p_y * span))
            patch = _render_object(textures[o], bw, bh)
            obj_mask = _paste(img, patch, np.ones((bh, bw), dtype=bool), x0, y0)
            for q in placed:
                q["visible"] &= ~obj_mask
            label = Label(p_x=p_x, p_y=p_y, p_sigma=sigma,
                          v=np.ones(cfg.box_w * cfg.box_h, dtype=np.uint8), a=0)
            placed.append({"object": o, "label": label,
                           "box_px": (x0, y0, bw, bh),
                           "area": int(obj_mask.sum()),
                           "obj_mask": obj_mask,
                           "visible": obj_mask.copy()})

        for _j in range(cfg.occluder_count):
            target = placed[int(rng.integers(0, len(placed)))]
            bx, by, bw, bh = target["box_px"]
            for attempt in range(100):
                ow = int(rng.integers(max(6, bw // 3), max(8, int(bw * 0.8))))
                oh = int(rng.integers(max(6, bh // 3), max(8, int(bh * 0.9))))
                cx = bx + bw / 2 + rng.uniform(-1.3, 1.3) * bw
                cy = by + bh / 2 + rng.uniform(-1.3, 1.3) * bh
                x0 = int(round(cx - ow / 2))
                y0 = int(round(cy - oh / 2))
                patch, mask = _occluder_patch(rng, ow, oh)
                trial = np.zeros((cfg.height, cfg.width), dtype=bool)
                _paste_mask_only(trial, mask, x0, y0)
                ok = True
                for q in placed:
                    hidden = q["obj_mask"] & (~q["visible"] | trial)
                    if q["area"] and hidden.sum() / q["area"] > cfg.max_occlusion:
                        ok = False
                        break
                if ok:
                    painted = _paste(img, patch, mask, x0, y0)
                    for q in placed:
                        q["visible"] &= ~painted
                    break
            else:
                raise GenerationError(
                    "could not satisfy the occlusion bound in 100 attempts")

        insts = []
        for q in placed:
            v = visibility_from_mask(q["visible"], q["label"], geom)
            lab = q["label"]
            lab.v = v
            insts.append(SynthInstance(object_id=q["object"], label=lab,
                                       box_px=q["box_px"], mask=q["visible"]))
        image = RasterImage.from_array(img)
        images.append(image)
        all_instances.append(insts)
        segments.append(segment_unsupervised(image, k=cfg.seg_k,
                                             min_size=cfg.seg_min_size))
    return SynthDataset(config=cfg, geom=geom, images=images,
                        instances=all_instances, segments=segments)


def _paste_mask_only(canvas: np.ndarray, mask: np.ndarray, x0: int, y0: int) -> None:
    h, w = canvas.shape
    ph, pw = mask.shape
    xa, ya = max(0, x0), max(0, y0)
    xb, yb = min(w, x0 + pw), min(h, y0 + ph)
    if xa < xb and ya < yb:
        canvas[ya:yb, xa:xb] |= mask[ya - y0:yb - y0, xa - x0:xb - x0]


def _rects_disjoint(r1, r2) -> bool:
    x1, y1, w1, h1 = r1
    x2, y2, w2, h2 = r2
    return x1 + w1 <= x2 or x2 + w2 <= x1 or y1 + h1 <= y2 or y2 + h2 <= y1
