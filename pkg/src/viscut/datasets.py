"""On-disk dataset layout, annotation records, and detection files.

Layout: ``images/NNN.png``, ``masks/NNN.png`` (binary; ``masks/NNN_k.png``
per object when a scene holds several), and ``annotations.jsonl`` with one
record per object instance: image id, box in pixels, viewpoint, run-length
visibility, level. Visibility bit-vectors are run-length encoded as
``<bit>x<count>`` runs joined by ``;`` (e.g. ``1x12;0x3;1x5``). Detections
are CSV rows: image id, object id, viewpoint, level, x, y, score, RLE v.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .imaging import RasterImage, load_image
from .model import Label, ViewpointShape
from .synthetic import SynthDataset


def rle_encode(v: np.ndarray) -> str:
    v = np.asarray(v, dtype=np.uint8).ravel()
    runs = []
    start = 0
    for i in range(1, len(v) + 1):
        if i == len(v) or v[i] != v[start]:
            runs.append(f"{int(v[start])}x{i - start}")
            start = i
    return ";".join(runs)


def rle_decode(s: str) -> np.ndarray:
    parts = []
    try:
        for run in s.split(";"):
            bit, count = run.split("x")
            parts.append(np.full(int(count), int(bit), dtype=np.uint8))
    except ValueError as exc:
        raise FormatError(f"bad run-length string {s!r}") from exc
    return np.concatenate(parts)


def _save_png(arr: np.ndarray, path: Path) -> None:
    if arr.dtype == bool:
        img = Image.fromarray((arr * 255).astype(np.uint8), mode="L")
    else:
        a = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
        img = Image.fromarray(a.squeeze() if a.shape[-1] == 1 else a)
    img.save(path, format="PNG")


def write_dataset(ds: SynthDataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    multi = ds.config.n_objects > 1
    for i, (img, insts) in enumerate(zip(ds.images, ds.instances)):
        name = f"{i:03d}"
        _save_png(img.data, root / "images" / f"{name}.png")
        for inst in insts:
            if multi:
                mask_name = f"{name}_{inst.object_id}.png"
            else:
                mask_name = f"{name}.png"
            _save_png(inst.mask, root / "masks" / mask_name)
            records.append({
                "image": name,
                "box": list(inst.box_px),
                "viewpoint": inst.label.a if not multi else inst.object_id,
                "v": rle_encode(inst.label.v),
                "level": inst.label.p_sigma,
                "x": inst.label.p_x,
                "y": inst.label.p_y,
            })
    with open(root / "annotations.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class AnnotatedImage:
    image_id: str
    image_path: Path
    annotations: list[dict]

    def mask_path(self, root: Path, viewpoint: int, multi: bool) -> Path:
        if multi:
            return root / "masks" / f"{self.image_id}_{viewpoint}.png"
        return root / "masks" / f"{self.image_id}.png"


def load_dataset(root) -> list[AnnotatedImage]:
    root = Path(root)
    ann_path = root / "annotations.jsonl"
    if not ann_path.is_file():
        raise FormatError(f"missing annotations file: {ann_path}")
    by_image: dict[str, list[dict]] = {}
    with open(ann_path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                for key in ("image", "box", "viewpoint", "v", "level", "x", "y"):
                    if key not in rec:
                        raise KeyError(key)
            except (json.JSONDecodeError, KeyError) as exc:
                raise FormatError(
                    f"{ann_path}:{lineno}: bad annotation record: {exc}") from exc
            by_image.setdefault(rec["image"], []).append(rec)
    out = []
    for image_id in sorted(by_image):
        path = root / "images" / f"{image_id}.png"
        if not path.is_file():
            raise FormatError(f"annotation references missing image {path}")
        out.append(AnnotatedImage(image_id=image_id, image_path=path,
                                  annotations=by_image[image_id]))
    return out


def annotation_label(rec: dict) -> Label:
    return Label(p_x=int(rec["x"]), p_y=int(rec["y"]),
                 p_sigma=int(rec["level"]), v=rle_decode(rec["v"]),
                 a=int(rec["viewpoint"]))


def derive_shapes(items: list[AnnotatedImage], cell_size: int,
                  scale_step: float) -> list[ViewpointShape]:
    """Box cell dims per viewpoint, recovered from pixel boxes and levels."""
    shapes: dict[int, ViewpointShape] = {}
    for item in items:
        for rec in item.annotations:
            a = int(rec["viewpoint"])
            span = cell_size / (scale_step ** int(rec["level"]))
            w_cells = int(round(rec["box"][2] / span))
            h_cells = int(round(rec["box"][3] / span))
            shape = ViewpointShape(max(1, w_cells), max(1, h_cells))
            if a in shapes and shapes[a] != shape:
                raise FormatError(
                    f"viewpoint {a} has inconsistent box dims across annotations")
            shapes[a] = shape
            if len(rle_decode(rec["v"])) != shape.wh:
                raise FormatError(
                    f"visibility length mismatch for image {item.image_id}")
    if not shapes or sorted(shapes) != list(range(len(shapes))):
        raise FormatError("viewpoint indices must be dense starting at 0")
    return [shapes[a] for a in sorted(shapes)]


def load_mask(path) -> np.ndarray:
    img = load_image(path)
    return img.data[:, :, 0] > 0.5


DETECTION_FIELDS = ["image_id", "object_id", "viewpoint", "level",
                    "x", "y", "score", "v_rle"]


def write_detections(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=DETECTION_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_detections(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != DETECTION_FIELDS:
            raise FormatError(f"unexpected detections header in {path}")
        rows = []
        for rec in reader:
            rec["viewpoint"] = int(rec["viewpoint"])
            rec["object_id"] = int(rec["object_id"])
            rec["level"] = int(rec["level"])
            rec["x"] = int(rec["x"])
            rec["y"] = int(rec["y"])
            rec["score"] = float(rec["score"])
            rows.append(rec)
    return rows


def detection_label(rec: dict) -> Label:
    return Label(p_x=rec["x"], p_y=rec["y"], p_sigma=rec["level"],
                 v=rle_decode(rec["v_rle"]), a=rec["viewpoint"])
