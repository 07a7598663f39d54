"""Structured loss, working-set QP, and cutting-plane max-margin training.

The loss between two labels combines box overlap and a visibility Hamming
term: (1 - IoU) + IoU * H, with boxes and labellings compared in base-level
pixels so different viewpoints and levels are commensurable. H only starts
to matter once the boxes overlap, and it splits per cell, which is what lets
the separation oracle reuse the exact detection machinery.

Training keeps one slack per image and a working set of most-violated
labellings. The QP (min 1/2 ||w||^2 + C sum slack, margin constraints over
the working set, slack >= 0, concavity of the clique weights, nonnegative
pairwise weight) is solved in the dual by coordinate ascent with cached Gram
matrices; the curvature rows keep every iterate graph-representable.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import QPConvergenceError
from .geometry import (Geometry, interval_counts, interval_overlaps,
                       rect_area_px, rect_inter_px)
from .imaging import RasterImage, SegmentMap, build_pyramid, project_segments
from .inference import loss_augmented_detect
from .model import (Label, ViewpointShape, WeightVector, assemble_features,
                    block_offsets, pack_weights, second_diff_rows,
                    unpack_weights)


@dataclass
class LossValue:
    iou: float
    hamming: float
    total: float


@dataclass
class TrainingSample:
    image: RasterImage
    y_gt: Label
    segments: SegmentMap


@dataclass
class TrainConfig:
    c_reg: float = 25.0
    k: int = 4
    epsilon: float = 1e-3
    max_iters: int = 200
    scale_step: float = 2 ** -0.25
    n_levels: int = 11
    cell_size: int = 8
    nms_iou: float = 0.5
    use_cliques: bool = True   # False freezes the clique-potential weights at 0
    threads: int = 1


def geometry_for(config: TrainConfig, shapes) -> Geometry:
    scales = tuple(config.scale_step ** k for k in range(config.n_levels))
    return Geometry(cell_size=config.cell_size, scales=scales,
                    shapes=tuple(shapes))


def hamming_projected(y: Label, y_hat: Label, geom: Geometry) -> float:
    """Mean per-pixel disagreement after rasterizing both labellings to base
    pixels, over the union of the two boxes; pixels covered by only one box
    disagree with an implicit 0."""
    rect_a = geom.box_rect(y)
    rect_b = geom.box_rect(y_hat)
    union = rect_area_px(rect_a) + rect_area_px(rect_b) - rect_inter_px(rect_a, rect_b)
    if union == 0:
        return 0.0
    sa = geom.shapes[y.a]
    sb = geom.shapes[y_hat.a]
    ax, ay = geom.cell_edges(y)
    bx, by = geom.cell_edges(y_hat)
    Va = y.v.reshape(sa.h, sa.w).astype(np.float64)
    Vb = y_hat.v.reshape(sb.h, sb.w).astype(np.float64)
    area_b = np.outer(interval_counts(by), interval_counts(bx)).astype(np.float64)
    total_a = float((Va * np.outer(interval_counts(ay), interval_counts(ax))).sum())
    # ground-truth-visible pixel mass inside each cell of the other box
    G = interval_overlaps(by, ay).astype(np.float64) @ Va \
        @ interval_overlaps(bx, ax).astype(np.float64).T
    inside = float((Vb * (area_b - G) + (1.0 - Vb) * G).sum())
    outside = total_a - float(G.sum())
    return (inside + outside) / union


def loss(y: Label, y_hat: Label, geom: Geometry) -> LossValue:
    """Box-overlap plus overlap-gated visibility disagreement, in [0, 1]."""
    ra = geom.box_rect(y)
    rb = geom.box_rect(y_hat)
    inter = rect_inter_px(ra, rb)
    union = rect_area_px(ra) + rect_area_px(rb) - inter
    iou = inter / union if union > 0 else 0.0
    ham = hamming_projected(y, y_hat, geom) if inter > 0 else 0.0
    return LossValue(iou=iou, hamming=ham, total=(1.0 - iou) + iou * ham)


class _WorkingSetQP:
    """Dual coordinate ascent over margin rows with hard feasibility rows.

    Margin duals live in [0, C] with a per-sample sum cap C; feasibility
    (curvature / nonnegativity) duals are only bounded below. Gram matrices
    are cached so one coordinate update is O(rows).
    """

    def __init__(self, dim: int, g_rows: np.ndarray, c_reg: float):
        self.dim = dim
        self.c = float(c_reg)
        self.G = np.asarray(g_rows, dtype=np.float64)
        self.KGG = self.G @ self.G.T
        self.A = np.zeros((0, dim))
        self.delta = np.zeros(0)
        self.sidx: list[int] = []
        self.alpha = np.zeros(0)
        self.mu = np.zeros(len(self.G))
        self.KAA = np.zeros((0, 0))
        self.KAG = np.zeros((0, len(self.G)))
        self.q = np.zeros(0)            # A @ w
        self.p = np.zeros(len(self.G))  # G @ w

    @property
    def n_rows(self) -> int:
        return len(self.delta)

    def weights(self) -> np.ndarray:
        return self.A.T @ self.alpha + self.G.T @ self.mu

    def has_row(self, a: np.ndarray, i: int) -> bool:
        for r, si in enumerate(self.sidx):
            if si == i and np.array_equal(self.A[r], a):
                return True
        return False

    def add_row(self, a: np.ndarray, delta: float, i: int) -> None:
        col = self.A @ a
        self.KAA = np.block([[self.KAA, col[:, None]],
                             [col[None, :], np.array([[a @ a]])]])
        self.KAG = np.vstack([self.KAG, (self.G @ a)[None, :]])
        self.A = np.vstack([self.A, a[None, :]])
        self.delta = np.append(self.delta, delta)
        self.sidx.append(i)
        self.alpha = np.append(self.alpha, 0.0)
        self.q = np.append(self.q, a @ self.weights())

    def slack(self, i: int) -> float:
        vals = [self.delta[r] - self.q[r]
                for r in range(self.n_rows) if self.sidx[r] == i]
        return max(0.0, max(vals, default=0.0))

    def _refresh(self) -> None:
        w = self.weights()
        self.q = self.A @ w
        self.p = self.G @ w

    def _sample_sums(self) -> dict[int, float]:
        sums: dict[int, float] = {}
        for r, si in enumerate(self.sidx):
            sums[si] = sums.get(si, 0.0) + self.alpha[r]
        return sums

    def _kkt(self) -> tuple[float, float, float]:
        wsq = float(self.alpha @ self.q + self.mu @ self.p)
        slacks: dict[int, float] = {}
        for r, si in enumerate(self.sidx):
            gap = self.delta[r] - self.q[r]
            slacks[si] = max(slacks.get(si, 0.0), gap, 0.0)
        primal = 0.5 * wsq + self.c * sum(slacks.values())
        dual = float(self.alpha @ self.delta) - 0.5 * wsq
        feas = float(self.p.min()) if len(self.p) else 0.0
        return primal, dual, feas

    def _sweep(self, sums: dict[int, float]) -> float:
        moved = 0.0
        for r in range(self.n_rows):
            denom = self.KAA[r, r]
            if denom <= 0:
                continue
            grad = self.delta[r] - self.q[r]
            hi = self.alpha[r] + (self.c - sums[self.sidx[r]])
            new = min(max(self.alpha[r] + grad / denom, 0.0), hi)
            d = new - self.alpha[r]
            if d != 0.0:
                self.alpha[r] = new
                sums[self.sidx[r]] += d
                self.q += d * self.KAA[r]
                self.p += d * self.KAG[r]
                moved += abs(d)
        for s in range(len(self.mu)):
            denom = self.KGG[s, s]
            if denom <= 0:
                continue
            new = max(0.0, self.mu[s] - self.p[s] / denom)
            d = new - self.mu[s]
            if d != 0.0:
                self.mu[s] = new
                self.q += d * self.KAG[:, s]
                self.p += d * self.KGG[s]
                moved += abs(d)
        return moved

    def _pair_sweep(self, sums: dict[int, float]) -> float:
        """Redistribute within samples whose cap binds (escapes stalls)."""
        moved = 0.0
        by_sample: dict[int, list[int]] = {}
        for r, si in enumerate(self.sidx):
            by_sample.setdefault(si, []).append(r)
        for si, rows in by_sample.items():
            if len(rows) < 2 or sums[si] < self.c - 1e-12:
                continue
            for r in rows:
                for r2 in rows:
                    if r2 <= r:
                        continue
                    denom = self.KAA[r, r] - 2 * self.KAA[r, r2] + self.KAA[r2, r2]
                    if denom <= 1e-15:
                        continue
                    grad = (self.delta[r] - self.q[r]) - (self.delta[r2] - self.q[r2])
                    tstep = min(max(grad / denom, -self.alpha[r]), self.alpha[r2])
                    if tstep != 0.0:
                        self.alpha[r] += tstep
                        self.alpha[r2] -= tstep
                        self.q += tstep * (self.KAA[r] - self.KAA[r2])
                        self.p += tstep * (self.KAG[r] - self.KAG[r2])
                        moved += abs(tstep)
        return moved

    def solve(self, tol: float = 1e-6, feas_tol: float = 1e-9,
              max_sweeps: int = 20000) -> np.ndarray:
        if self.n_rows == 0 and len(self.G) == 0:
            return np.zeros(self.dim)
        sums = self._sample_sums()
        stalled = 0
        for sweep in range(1, max_sweeps + 1):
            moved = self._sweep(sums)
            if sweep % 25 == 0:
                self._refresh()
            primal, dual, feas = self._kkt()
            gap = primal - dual
            if gap <= tol * (1.0 + abs(primal)) and feas >= -feas_tol:
                self._refresh()
                return self.weights()
            if moved <= 1e-14:
                stalled += 1
                if self._pair_sweep(sums) <= 1e-14 and stalled > 3:
                    # no coordinate direction improves: accept if KKT is close
                    if gap <= 10 * tol * (1.0 + abs(primal)) and feas >= -feas_tol:
                        self._refresh()
                        return self.weights()
                    raise QPConvergenceError(
                        f"QP stalled with duality gap {gap:.3g}", gap)
            else:
                stalled = 0
        primal, dual, feas = self._kkt()
        raise QPConvergenceError(
            f"QP did not converge in {max_sweeps} sweeps "
            f"(gap {primal - dual:.3g}, feasibility {feas:.3g})", primal - dual)


@dataclass
class TrainerState:
    config: TrainConfig
    shapes: tuple[ViewpointShape, ...]
    qp: _WorkingSetQP
    weights: WeightVector
    geom: Geometry
    log: list[dict] = field(default_factory=list)

    def objective(self) -> float:
        primal, _, _ = self.qp._kkt()
        return primal


def make_trainer_state(shapes, config: TrainConfig) -> TrainerState:
    shapes = tuple(shapes)
    dim = block_offsets(shapes, config.k)[-1]
    g_rows = second_diff_rows(shapes, config.k)
    qp = _WorkingSetQP(dim, g_rows, config.c_reg)
    w = WeightVector.zeros(shapes, config.k, config.cell_size)
    return TrainerState(config=config, shapes=shapes, qp=qp, weights=w,
                        geom=geometry_for(config, shapes))


def solve_qp(state: TrainerState) -> WeightVector:
    """Re-solve the working-set QP and install the new weights."""
    flat = state.qp.solve()
    state.weights = unpack_weights(flat, state.shapes, state.config.k,
                                   state.config.cell_size)
    return state.weights


@dataclass
class _Prepared:
    index: int
    pyr: object
    seg_cells: list[np.ndarray]
    y_gt: Label
    psi_gt: np.ndarray


@dataclass
class MVCResult:
    y_hat: Label
    row: np.ndarray        # Psi(x, y_hat) - Psi(x, y_gt)
    loss: float
    violation: float


def prepare_sample(sample: TrainingSample, index: int, shapes,
                   config: TrainConfig) -> _Prepared:
    pyr = build_pyramid(sample.image, scale_step=config.scale_step,
                        n_levels=config.n_levels, cell_size=config.cell_size)
    if sample.segments.cell_labels is not None and \
            len(sample.segments.cell_labels) == pyr.n_levels:
        seg_cells = sample.segments.cell_labels
    else:
        seg_cells = project_segments(sample.segments, pyr)
    psi_gt = assemble_features(pyr, seg_cells, sample.y_gt, config.k, shapes)
    if not config.use_cliques:
        psi_gt = _zero_clique_block(psi_gt, shapes, config.k)
    return _Prepared(index=index, pyr=pyr, seg_cells=seg_cells,
                     y_gt=sample.y_gt, psi_gt=psi_gt)


def _zero_clique_block(feat: np.ndarray, shapes, K: int) -> np.ndarray:
    feat = feat.copy()
    offs = block_offsets(shapes, K)
    for a, s in enumerate(shapes):
        base = offs[a] + 63 * s.wh + 2
        feat[base:base + K + 1] = 0.0
    return feat


def _mvc_for(prep: _Prepared, state: TrainerState, w_flat: np.ndarray) -> MVCResult:
    cfg = state.config
    det = loss_augmented_detect(prep.pyr, prep.seg_cells, state.weights, prep.y_gt)
    psi_hat = assemble_features(prep.pyr, prep.seg_cells, det.label, cfg.k,
                                state.shapes)
    if not cfg.use_cliques:
        psi_hat = _zero_clique_block(psi_hat, state.shapes, cfg.k)
    row = psi_hat - prep.psi_gt
    lv = loss(prep.y_gt, det.label, state.geom)
    violation = lv.total - float(w_flat @ row)
    return MVCResult(y_hat=det.label, row=row, loss=lv.total, violation=violation)


def find_mvc(state: TrainerState, sample: TrainingSample,
             index: int = 0) -> MVCResult:
    """Most violated constraint for one sample under the current weights."""
    prep = prepare_sample(sample, index, state.shapes, state.config)
    return _mvc_for(prep, state, pack_weights(state.weights))


@dataclass
class TrainResult:
    weights: WeightVector
    log: list[dict]
    converged: bool
    state: TrainerState


def train(samples: list[TrainingSample], shapes,
          config: TrainConfig | None = None) -> TrainResult:
    """Cutting-plane training: add each sample's most violated labelling while
    it beats the sample's slack by epsilon, re-solve the QP, stop when an
    epoch adds nothing."""
    config = config or TrainConfig()
    shapes = tuple(shapes)
    if not samples:
        raise ValueError("need at least one training sample")
    state = make_trainer_state(shapes, config)
    prepared = [prepare_sample(s, i, shapes, config)
                for i, s in enumerate(samples)]
    converged = False
    for it in range(1, config.max_iters + 1):
        w_flat = pack_weights(state.weights)
        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                results = list(pool.map(
                    lambda p: _mvc_for(p, state, w_flat), prepared))
        else:
            results = [_mvc_for(p, state, w_flat) for p in prepared]
        added = 0
        max_excess = -np.inf
        for prep, res in zip(prepared, results):
            excess = res.violation - state.qp.slack(prep.index)
            max_excess = max(max_excess, excess)
            if excess > config.epsilon and not state.qp.has_row(res.row, prep.index):
                state.qp.add_row(res.row, res.loss, prep.index)
                added += 1
        if added == 0:
            converged = True
            state.log.append({"iteration": it, "n_constraints": state.qp.n_rows,
                              "objective": state.objective(),
                              "max_violation": max_excess})
            break
        solve_qp(state)
        state.log.append({"iteration": it, "n_constraints": state.qp.n_rows,
                          "objective": state.objective(),
                          "max_violation": max_excess})
    return TrainResult(weights=state.weights, log=state.log,
                       converged=converged, state=state)


def joint_train_multi(object_datasets: list[list[TrainingSample]],
                      object_shapes: list[list[ViewpointShape]],
                      config: TrainConfig | None = None
                      ) -> tuple[list[WeightVector], TrainResult]:
    """Train several objects as viewpoint components of one model and return
    the per-object weight slices (bias terms keep responses comparable)."""
    config = config or TrainConfig()
    if len(object_datasets) != len(object_shapes):
        raise ValueError("one shape list per object dataset required")
    combined_shapes: list[ViewpointShape] = []
    offsets = []
    for shapes in object_shapes:
        offsets.append(len(combined_shapes))
        combined_shapes.extend(shapes)
    combined_samples: list[TrainingSample] = []
    for o, dataset in enumerate(object_datasets):
        for s in dataset:
            y = s.y_gt
            shifted = Label(p_x=y.p_x, p_y=y.p_y, p_sigma=y.p_sigma,
                            v=y.v.copy(), a=y.a + offsets[o])
            combined_samples.append(TrainingSample(
                image=s.image, y_gt=shifted, segments=s.segments))
    result = train(combined_samples, combined_shapes, config)
    slices = []
    for o, shapes in enumerate(object_shapes):
        lo = offsets[o]
        slices.append(result.weights.slice_viewpoints(lo, lo + len(shapes)))
    return slices, result
