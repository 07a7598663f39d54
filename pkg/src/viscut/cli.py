"""Command-line pipeline: synth, train, detect, eval.

All commands are deterministic given identical inputs and the --seed flag,
and write only inside --out-dir (plus an explicit --model-out path).
Exit codes: 0 success, 1 input or runtime error, 2 usage error,
3 training hit the iteration cap before converging.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import datasets as ds
from .config import load_config, write_config
from .errors import FormatError, GenerationError
from .evaluation import fppi_recall, rasterize_cells, refine_mask, voc_seg_error
from .geometry import Geometry
from .imaging import load_image, build_pyramid, segment_unsupervised, project_segments
from .inference import detect, detect_multi
from .learning import TrainConfig, geometry_for, train
from .model import load_model, save_model
from .synthetic import SynthConfig, gen_synthetic


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="key = value config file (c_reg, k, epsilon, max_iters, "
                        "scale_step, n_levels, cell_size, nms_iou)")
    p.add_argument("--seed", type=int, default=0, help="64-bit RNG seed")
    p.add_argument("--out-dir", type=Path, default=Path("out"),
                   help="directory all outputs are written under")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for per-image/per-sample work")


def _load_train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    cfg.threads = max(1, args.threads)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viscut",
        description="occlusion-aware detection with per-cell visibility labelling")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic occlusion dataset")
    _common_flags(p)
    p.add_argument("--n", type=int, default=20, help="number of images")
    p.add_argument("--max-occlusion", type=float, default=0.5)
    p.add_argument("--occluders", type=int, default=2)
    p.add_argument("--clutter", type=float, default=0.5)
    p.add_argument("--objects", type=int, default=1)
    p.add_argument("--overlap", action="store_true",
                   help="plant later objects overlapping the first")
    p.add_argument("--texture-seed", type=int, default=7)
    p.add_argument("--width", type=int, default=144)
    p.add_argument("--height", type=int, default=112)
    p.add_argument("--box-w", type=int, default=5, help="object width in cells")
    p.add_argument("--box-h", type=int, default=4, help="object height in cells")

    p = sub.add_parser("train", help="cutting-plane training on a dataset")
    _common_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model-out", type=Path, default=None,
                   help="model file path (default <out-dir>/model.vcm)")
    p.add_argument("--no-clique-terms", action="store_true",
                   help="freeze the clique-potential weights at zero")
    p.add_argument("--seg-k", type=float, default=300.0)
    p.add_argument("--seg-min-size", type=int, default=32)

    p = sub.add_parser("detect", help="run detection on images")
    _common_flags(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--multi", type=Path, nargs="+", default=None,
                   help="additional jointly trained models: run the "
                        "sequential multi-object pass")
    p.add_argument("--images", type=Path, nargs="+", default=None)
    p.add_argument("--data", type=Path, default=None,
                   help="dataset directory (uses images/*.png)")
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--seg-k", type=float, default=300.0)
    p.add_argument("--seg-min-size", type=int, default=32)
    p.add_argument("--no-overlays", action="store_true")

    p = sub.add_parser("eval", help="score detections against a dataset")
    _common_flags(p)
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mode", choices=("det", "seg"), default="det")
    p.add_argument("--iou-match", type=float, default=0.5)
    p.add_argument("--refined", action="store_true",
                   help="segment-refine predicted masks before scoring")
    p.add_argument("--seg-k", type=float, default=300.0)
    p.add_argument("--seg-min-size", type=int, default=32)
    return parser


def cmd_synth(args) -> int:
    if not 0.0 <= args.max_occlusion <= 0.9:
        raise ValueError("--max-occlusion must be in [0, 0.9]")
    if args.n < 1:
        raise ValueError("--n must be >= 1")
    cfg = SynthConfig(
        n_images=args.n, seed=args.seed, object_texture_seed=args.texture_seed,
        occluder_count=args.occluders, max_occlusion=args.max_occlusion,
        clutter_level=args.clutter, width=args.width, height=args.height,
        box_w=args.box_w, box_h=args.box_h, n_objects=args.objects,
        overlap=args.overlap)
    dataset = gen_synthetic(cfg)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    ds.write_dataset(dataset, args.out_dir)
    print(f"wrote {cfg.n_images} images to {args.out_dir}")
    return 0


def _samples_from_dataset(root: Path, cfg: TrainConfig, seg_k: float,
                          seg_min_size: int):
    from .learning import TrainingSample

    items = ds.load_dataset(root)
    shapes = ds.derive_shapes(items, cfg.cell_size, cfg.scale_step)
    samples = []
    for item in items:
        image = load_image(item.image_path)
        seg = segment_unsupervised(image, k=seg_k, min_size=seg_min_size)
        for rec in item.annotations:
            samples.append(TrainingSample(
                image=image, y_gt=ds.annotation_label(rec), segments=seg))
    return samples, shapes, items


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    cfg.use_cliques = not args.no_clique_terms
    samples, shapes, _items = _samples_from_dataset(
        args.data, cfg, args.seg_k, args.seg_min_size)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    result = train(samples, shapes, cfg)
    model_path = args.model_out or (args.out_dir / "model.vcm")
    save_model(result.weights, model_path)
    log_path = args.out_dir / "train_log.csv"
    with open(log_path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["iteration", "n_constraints", "objective",
                           "max_violation"])
        writer.writeheader()
        for row in result.log:
            writer.writerow(row)
    write_config(cfg, args.out_dir / "train_config.txt")
    status = "converged" if result.converged else "NOT converged"
    print(f"{status} after {len(result.log)} iterations; "
          f"model -> {model_path}, log -> {log_path}")
    return 0 if result.converged else 3


def _detect_one(image_path: Path, models, cfg: TrainConfig, top_n: int,
                seg_k: float, seg_min_size: int):
    image = load_image(image_path)
    pyr = build_pyramid(image, scale_step=cfg.scale_step,
                        n_levels=cfg.n_levels, cell_size=cfg.cell_size)
    seg = segment_unsupervised(image, k=seg_k, min_size=seg_min_size)
    seg_cells = project_segments(seg, pyr)
    if len(models) == 1:
        dets = detect(pyr, seg_cells, models[0], top_n, nms_iou=cfg.nms_iou)
        return image, pyr, [(0, d) for d in dets], None
    result = detect_multi(pyr, seg_cells, models)
    return image, pyr, list(enumerate(result.detections)), result


def cmd_detect(args) -> int:
    cfg = _load_train_config(args)
    models = [load_model(args.model)]
    if args.multi:
        models += [load_model(p) for p in args.multi]
    sizes = {m.cell_size for m in models}
    if len(sizes) > 1:
        raise ValueError(f"models disagree on cell size: {sorted(sizes)}")
    if args.images:
        image_paths = list(args.images)
    elif args.data:
        image_paths = sorted((args.data / "images").glob("*.png"))
    else:
        raise ValueError("give --images or --data")
    if not image_paths:
        raise ValueError("no input images found")

    args.out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    from concurrent.futures import ThreadPoolExecutor

    def work(path):
        return path, _detect_one(path, models, cfg, args.top_n,
                                 args.seg_k, args.seg_min_size)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            outputs = list(pool.map(work, image_paths))
    else:
        outputs = [work(p) for p in image_paths]

    for path, (image, pyr, dets, multi) in outputs:
        image_id = path.stem
        boxes = []
        best_mask = None
        for obj_id, det in dets:
            rows.append({
                "image_id": image_id, "object_id": obj_id,
                "viewpoint": det.label.a, "level": det.label.p_sigma,
                "x": det.label.p_x, "y": det.label.p_y,
                "score": f"{det.score:.10g}",
                "v_rle": ds.rle_encode(det.label.v)})
            boxes.append((det.box_px, det.score))
        if dets and not args.no_overlays:
            geom = Geometry.for_pyramid(pyr, models[0].shapes)
            top = min(dets, key=lambda t: t[1].energy)
            mgeom = Geometry.for_pyramid(pyr, models[top[0]].shapes)
            best_mask = rasterize_cells(top[1].label, mgeom,
                                        image.width, image.height).bits
            from .report import save_overlay
            save_overlay(image, boxes, best_mask,
                         args.out_dir / f"overlay_{image_id}.svg")
        if multi is not None:
            with open(args.out_dir / f"owners_{image_id}.txt", "w") as f:
                for sigma, owners in enumerate(multi.owners):
                    for (yy, xx) in zip(*np.nonzero(owners)):
                        f.write(f"{sigma} {yy} {xx} {owners[yy, xx]}\n")
    ds.write_detections(rows, args.out_dir / "detections.csv")
    print(f"wrote {len(rows)} detections for {len(image_paths)} images "
          f"to {args.out_dir / 'detections.csv'}")
    return 0


def _shape_for(rec: dict, shapes, multi_dataset: bool):
    idx = rec["object_id"] if multi_dataset else rec["viewpoint"]
    return shapes[min(idx, len(shapes) - 1)]


def cmd_eval(args) -> int:
    cfg = _load_train_config(args)
    items = ds.load_dataset(args.data)
    shapes = ds.derive_shapes(items, cfg.cell_size, cfg.scale_step)
    geom = geometry_for(cfg, shapes)
    det_rows = ds.read_detections(args.detections)
    known = {item.image_id for item in items}
    for rec in det_rows:
        if rec["image_id"] not in known:
            raise ValueError(f"detection references unknown image id "
                             f"{rec['image_id']!r}")
    args.out_dir.mkdir(parents=True, exist_ok=True)

    if args.mode == "det":
        gts = {item.image_id: [tuple((r["box"][0], r["box"][1],
                                      r["box"][0] + r["box"][2],
                                      r["box"][1] + r["box"][3]))
                               for r in item.annotations]
               for item in items}
        dets: dict[str, list] = {item.image_id: [] for item in items}
        for rec in det_rows:
            label = ds.detection_label(rec)
            dets[rec["image_id"]].append((rec["score"], geom.box_rect(label)))
        curve = fppi_recall(dets, gts, iou_match=args.iou_match)
        from .report import save_curve_figure, write_curve_csv
        write_curve_csv(curve, args.out_dir / "curve.csv")
        save_curve_figure(curve, args.out_dir / "fppi_recall.png")
        at1 = max((r for f, r in curve.points if f <= 1.0), default=0.0)
        with open(args.out_dir / "metrics.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "value"])
            writer.writerow(["auc", f"{curve.auc:.6f}"])
            writer.writerow(["recall_at_1fppi", f"{at1:.6f}"])
        print(f"AUC {curve.auc:.4f}, recall@1FPPI {at1:.4f}")
        return 0

    # segmentation mode: best detection per image vs. the ground-truth mask
    multi_dataset = any(len(item.annotations) > 1 for item in items)
    best: dict[str, dict] = {}
    for rec in det_rows:
        cur = best.get(rec["image_id"])
        if cur is None or rec["score"] > cur["score"]:
            best[rec["image_id"]] = rec
    rows_out = []
    errors = []
    for item in items:
        gt_rec = item.annotations[0]
        gt_mask = ds.load_mask(item.mask_path(Path(args.data),
                                              gt_rec["viewpoint"], multi_dataset))
        rec = best.get(item.image_id)
        if rec is None:
            pred_bits = np.zeros_like(gt_mask)
        else:
            label = ds.detection_label(rec)
            h, w = gt_mask.shape
            pred = rasterize_cells(label, geom, w, h)
            pred_bits = pred.bits
            if args.refined:
                image = load_image(item.image_path)
                seg = segment_unsupervised(image, k=args.seg_k,
                                           min_size=args.seg_min_size)
                from .evaluation import PixelMask
                pred_bits = refine_mask(PixelMask.from_array(pred_bits), seg).bits
        err = voc_seg_error(pred_bits, gt_mask)
        vacuous = not pred_bits.any() and not gt_mask.any()
        errors.append(err)
        rows_out.append([item.image_id, f"{err:.6f}", int(vacuous)])
    with open(args.out_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "voc_error", "vacuous"])
        writer.writerows(rows_out)
        writer.writerow(["mean", f"{float(np.mean(errors)):.6f}", ""])
    print(f"mean VOC segmentation error {float(np.mean(errors)):.4f} "
          f"({'refined' if args.refined else 'raw'} masks)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"synth": cmd_synth, "train": cmd_train,
                "detect": cmd_detect, "eval": cmd_eval}
    try:
        return handlers[args.command](args)
    except (ValueError, FormatError, GenerationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
