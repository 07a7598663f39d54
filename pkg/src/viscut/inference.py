"""Energy evaluation, mincut graph construction, and detection search.

The energy of a labelling is the sum of per-cell unary responses (visible
filter for label 1; occlusion filter plus occluded-label prior for label 0),
a pairwise cost per disagreeing 4-connected pair, one concave clique
potential per segment intersecting the box, and a constant of truncation
cost plus bias. For nonnegative pairwise weight and concave clique weights
the energy is submodular and minimized exactly by one s-t mincut per box
location: cells still reachable from the source afterwards are labelled 1.

The location search enumerates every integer cell offset at every level
(overhang up to half the box per side). Per location an admissible lower
bound (independent-cell minimum plus per-clique envelope minimum) is
computed vectorized; exact mincuts run in ascending bound order and stop
once no remaining bound can beat the answer, so the search stays exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RepresentabilityError
from .geometry import (Geometry, interval_counts, interval_overlaps,
                       rect_area_px, rect_iou_px)
from .maxflow import FlowNetwork
from .model import (Label, ViewpointShape, WeightVector, box_cliques,
                    box_edges, clique_envelope, count_truncated)

_CONCAVITY_TOL = 1e-8


@dataclass
class EnergyMaps:
    """Per-location unary responses and structure feeding graph construction."""

    F: np.ndarray            # (wh,) visible-filter responses
    B: np.ndarray            # (wh,) occlusion-filter responses
    R: np.ndarray            # (wh,) occluded-label priors
    c_const: float           # truncation cost + bias
    edges: np.ndarray        # (m, 2) 4-connected in-box pairs
    cliques: list[np.ndarray]
    a: int
    shape: ViewpointShape


@dataclass
class CutGraph:
    net: FlowNetwork
    offset: float            # added back to the cut value to recover the energy
    n_cells: int
    n_aux: int
    s: int
    t: int


@dataclass
class Detection:
    label: Label
    energy: float
    box_px: tuple[float, float, float, float]
    augmented: float | None = None  # loss-augmented objective, when applicable

    @property
    def score(self) -> float:
        return -self.energy

    def sort_key(self) -> tuple:
        return (self.energy, *self.label.key())


def _check_representable(w_pair: float, w_clique: np.ndarray) -> None:
    if w_pair < -_CONCAVITY_TOL:
        raise RepresentabilityError(
            f"pairwise weight {w_pair} is negative: energy not graph-representable")
    curv = np.diff(np.diff(w_clique))
    if np.any(curv > _CONCAVITY_TOL):
        k = int(np.argmax(curv))
        raise RepresentabilityError(
            f"clique weights not concave at index {k + 1} "
            f"(second difference {curv[k]:.3g} > 0)")


def build_energy_maps(pyr, seg_cells, w: WeightVector, p, a: int) -> EnergyMaps:
    """Unary responses and box structure for box position p = (p_x, p_y, p_sigma)."""
    p_x, p_y, p_sigma = p
    shape = w.shapes[a]
    lv = pyr.levels[p_sigma]
    rr, cc = np.divmod(np.arange(shape.wh), shape.w)
    gy = p_y + rr
    gx = p_x + cc
    inside = (gy >= 0) & (gy < lv.grid_h) & (gx >= 0) & (gx < lv.grid_w)
    phi = np.zeros((shape.wh, lv.hog.shape[2]))
    phi[inside] = lv.hog[gy[inside], gx[inside]]
    F = np.einsum("ij,ij->i", phi, w.w_vis[a])
    B = np.einsum("ij,ij->i", phi, w.w_occ[a])
    cp = count_truncated(shape, p_x, p_y, lv.grid_w, lv.grid_h)
    return EnergyMaps(
        F=F, B=B, R=w.w_prior[a].copy(),
        c_const=w.w_trunc[a] * cp + w.w_bias[a],
        edges=box_edges(shape),
        cliques=box_cliques(seg_cells[p_sigma], shape, p_x, p_y),
        a=a, shape=shape)


def energy(maps: EnergyMaps, v: np.ndarray, w: WeightVector) -> float:
    """Term-by-term energy of labelling v under the stored responses."""
    v = np.asarray(v, dtype=np.float64).ravel()
    e = float(maps.F @ v + (maps.B + maps.R) @ (1.0 - v)) + maps.c_const
    if maps.edges.size:
        e += w.w_pair[maps.a] * float(
            np.abs(v[maps.edges[:, 0]] - v[maps.edges[:, 1]]).sum())
    for members in maps.cliques:
        env = clique_envelope(w.w_clique[maps.a], len(members), w.K)
        e += float(env(v[members].sum()))
    return e


def _clique_lines(w_clique: np.ndarray, K: int) -> tuple[list[float], list[float]]:
    """Slopes and intercepts of the K standard-coordinate envelope lines."""
    sig = np.diff(np.asarray(w_clique, dtype=np.float64))
    intercepts = w_clique[1:] - sig * np.arange(1, K + 1)
    return sig.tolist(), intercepts.tolist()


def _graph_core(F_adj: np.ndarray, B_adj: np.ndarray, edges: np.ndarray,
                cliques: list[np.ndarray], w_pair: float,
                lines: tuple[list[float], list[float]], K: int,
                base_const: float) -> CutGraph:
    """Shared graph construction; F_adj/B_adj are the full 1/0-label unaries.

    Per clique the concave envelope telescopes into one base line plus K-1
    terms min(0, c_k - delta_k * count), each carried by an auxiliary node
    with arcs of capacity delta_k toward the clique members.
    """
    w_pair = max(w_pair, 0.0)
    wh = len(F_adj)
    u1 = np.array(F_adj, dtype=np.float64)
    u0 = np.array(B_adj, dtype=np.float64)
    offset = float(base_const)

    sig, intercepts = lines
    aux_specs = []  # (members, delta, g) per auxiliary node
    for members in cliques:
        kom = K / len(members)
        M = len(members)
        u1[members] += sig[0] * kom
        offset += intercepts[0]
        for j in range(1, K):
            delta = (sig[j - 1] - sig[j]) * kom
            if delta < 0.0:
                delta = 0.0  # curvature slack up to the representing tolerance
            g = (intercepts[j] - intercepts[j - 1]) - delta * M
            aux_specs.append((members, delta, g))

    n_aux = len(aux_specs)
    n = wh + n_aux + 2
    s, t = n - 2, n - 1

    head: list[int] = []
    cap: list[float] = []
    adj: list[list[int]] = [[] for _ in range(n)]
    ne = 0

    def arc(u, v, c):
        nonlocal ne
        adj[u].append(ne)
        head.append(v)
        cap.append(c)
        adj[v].append(ne + 1)
        head.append(u)
        cap.append(0.0)
        ne += 2

    shift = np.minimum(u1, u0)
    offset += float(shift.sum())
    hi = (u1 - shift).tolist()
    lo = (u0 - shift).tolist()
    for i in range(wh):
        if hi[i] > 0:
            arc(i, t, hi[i])
        if lo[i] > 0:
            arc(s, i, lo[i])
    if w_pair > 0:
        for i, j in edges:
            i, j = int(i), int(j)
            adj[i].append(ne)
            head.append(j)
            cap.append(w_pair)
            adj[j].append(ne + 1)
            head.append(i)
            cap.append(w_pair)
            ne += 2
    for z_rel, (members, delta, g) in enumerate(aux_specs):
        z = wh + z_rel
        if delta > 0:
            for i in members.tolist():
                arc(z, i, delta)
        if g < 0:
            arc(s, z, -g)
            offset += g
        elif g > 0:
            arc(z, t, g)
    net = FlowNetwork.from_arcs(n, head, cap, adj)
    return CutGraph(net=net, offset=offset, n_cells=wh, n_aux=n_aux, s=s, t=t)


def build_graph(maps: EnergyMaps, w: WeightVector) -> CutGraph:
    """Graph whose mincut value plus the recorded offset is min_v energy(v)."""
    _check_representable(w.w_pair[maps.a], w.w_clique[maps.a])
    lines = _clique_lines(w.w_clique[maps.a], w.K)
    return _graph_core(maps.F, maps.B + maps.R, maps.edges, maps.cliques,
                       w.w_pair[maps.a], lines, w.K, maps.c_const)


def mincut(g: CutGraph) -> tuple[float, np.ndarray]:
    """Exact maxflow value and the source-side indicator over all nodes."""
    flow = g.net.max_flow(g.s, g.t)
    return flow, g.net.source_side(g.s)


def min_energy_labelling(pyr, seg_cells, w: WeightVector, p, a: int):
    """Exact minimum-energy visibility labelling at one box position."""
    maps = build_energy_maps(pyr, seg_cells, w, p, a)
    g = build_graph(maps, w)
    flow, side = mincut(g)
    v = side[:g.n_cells].astype(np.uint8)
    return v, flow + g.offset


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy suppression: keep the best detection, drop overlaps above the
    threshold (base-pixel box IoU), repeat."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must be in (0, 1)")
    pending = sorted(dets, key=Detection.sort_key)
    kept: list[Detection] = []
    while pending:
        best = pending.pop(0)
        kept.append(best)
        pending = [d for d in pending
                   if rect_iou_px(best.box_px, d.box_px) <= iou_threshold]
    return kept


@dataclass
class _LevelCandidates:
    a: int
    sigma: int
    pys: np.ndarray
    pxs: np.ndarray
    F_all: np.ndarray       # (NY, NX, wh) label-1 unaries (loss-adjusted)
    B_all: np.ndarray       # (NY, NX, wh) label-0 unaries incl. prior
    const_all: np.ndarray   # (NY, NX)
    bound_all: np.ndarray   # (NY, NX)


class _Scanner:
    """Enumerates (viewpoint, level, offset) candidates with exact pruning."""

    def __init__(self, pyr, seg_cells, w: WeightVector, geom: Geometry,
                 loss_target: Label | None = None,
                 b_override: tuple[list[np.ndarray], list[np.ndarray]] | None = None):
        self.pyr = pyr
        self.seg_cells = seg_cells
        self.w = w
        self.geom = geom
        self.lines = []
        self.levels: list[_LevelCandidates] = []
        for a in range(w.n_viewpoints):
            _check_representable(w.w_pair[a], w.w_clique[a])
            self.lines.append(_clique_lines(w.w_clique[a], w.K))
            for sigma in range(pyr.n_levels):
                lc = self._build_level(a, sigma, loss_target, b_override)
                if lc is not None:
                    self.levels.append(lc)

    def _build_level(self, a, sigma, loss_target, b_override):
        w, pyr = self.w, self.pyr
        shape = w.shapes[a]
        lv = pyr.levels[sigma]
        ox, oy = shape.w // 2, shape.h // 2
        x_lo, x_hi = -ox, lv.grid_w - shape.w + ox
        y_lo, y_hi = -oy, lv.grid_h - shape.h + oy
        if x_hi < x_lo or y_hi < y_lo:
            return None
        pxs = np.arange(x_lo, x_hi + 1)
        pys = np.arange(y_lo, y_hi + 1)
        NY, NX = len(pys), len(pxs)
        wh = shape.wh
        rr, cc = np.divmod(np.arange(wh), shape.w)

        V = np.tensordot(w.w_vis[a], lv.hog, axes=([1], [2]))   # (wh, gh, gw)
        Bm = np.tensordot(w.w_occ[a], lv.hog, axes=([1], [2]))
        if b_override is not None:
            owned, resp = b_override[0][sigma], b_override[1][sigma]
            Bm = np.where(owned[None, :, :], resp[None, :, :], Bm)
        Vp = np.pad(V, ((0, 0), (oy, oy), (ox, ox)))
        Bp = np.pad(Bm, ((0, 0), (oy, oy), (ox, ox)))

        ii = np.arange(wh)[None, None, :]
        iy = pys[:, None, None] + oy + rr[None, None, :]
        ix = pxs[None, :, None] + ox + cc[None, None, :]
        F_all = Vp[ii, iy, ix]
        B_all = Bp[ii, iy, ix] + w.w_prior[a][None, None, :]

        # in-image cell counts factor per axis
        rows = np.arange(shape.h)
        cols = np.arange(shape.w)
        iny = (((pys[:, None] + rows[None, :]) >= 0)
               & ((pys[:, None] + rows[None, :]) < lv.grid_h)).sum(axis=1)
        inx = (((pxs[:, None] + cols[None, :]) >= 0)
               & ((pxs[:, None] + cols[None, :]) < lv.grid_w)).sum(axis=1)
        in_count = iny[:, None] * inx[None, :]
        const_all = w.w_trunc[a] * (wh - in_count) + w.w_bias[a]

        if loss_target is not None:
            F_all, B_all, const_all = self._augment(
                a, sigma, pxs, pys, shape, F_all, B_all,
                const_all.astype(np.float64), loss_target)
        else:
            const_all = const_all.astype(np.float64)

        hop = w.w_clique[a]
        gamma = min(hop[0], hop[-1])
        if gamma != 0.0:
            # each clique's envelope minimum sits at an endpoint, so the exact
            # clique floor is gamma times the distinct-segment count per window
            n_cliques = self._clique_counts(sigma, shape, pys, pxs, oy, ox)
            clique_lb = gamma * n_cliques
        else:
            clique_lb = 0.0
        bound_all = np.minimum(F_all, B_all).sum(axis=2) + const_all + clique_lb
        return _LevelCandidates(a=a, sigma=sigma, pys=pys, pxs=pxs,
                                F_all=F_all, B_all=B_all,
                                const_all=const_all, bound_all=bound_all)

    def _clique_counts(self, sigma: int, shape: ViewpointShape,
                       pys: np.ndarray, pxs: np.ndarray,
                       oy: int, ox: int) -> np.ndarray:
        """Distinct in-image segment ids per box window, all offsets at once.

        One integral image per segment id present at the level; a window
        contains the id when its box sum is positive."""
        cells = self.seg_cells[sigma]
        ids = np.unique(cells)
        pad = np.full((cells.shape[0] + 2 * oy, cells.shape[1] + 2 * ox), -1,
                      dtype=cells.dtype)
        pad[oy:oy + cells.shape[0], ox:ox + cells.shape[1]] = cells
        NY, NX = len(pys), len(pxs)
        counts = np.zeros((NY, NX), dtype=np.int64)
        for sid in ids:
            ind = (pad == sid).astype(np.int64)
            S = np.zeros((ind.shape[0] + 1, ind.shape[1] + 1), dtype=np.int64)
            S[1:, 1:] = ind.cumsum(0).cumsum(1)
            win = (S[shape.h:, shape.w:] - S[:-shape.h, shape.w:]
                   - S[shape.h:, :-shape.w] + S[:-shape.h, :-shape.w])
            counts += win[:NY, :NX] > 0
        return counts

    def _augment(self, a, sigma, pxs, pys, shape, F_all, B_all, const_all,
                 y_gt: Label):
        """Fold the negated loss into the unaries and constants.

        The box-overlap term enters the constant; the Hamming term splits
        exactly into per-cell costs for labelling 1 (fraction of the cell's
        base pixels the ground truth marks 0) and for labelling 0 (fraction
        marked 1), both scaled by IoU over the union pixel count.
        """
        geom = self.geom
        span = geom.span(sigma)
        gt_shape = geom.shapes[y_gt.a]
        gt_xe, gt_ye = geom.cell_edges(y_gt)
        gt_rect = geom.box_rect(y_gt)
        gt_area = rect_area_px(gt_rect)
        Vg = y_gt.v.reshape(gt_shape.h, gt_shape.w).astype(np.float64)
        gt_cell_area = np.outer(interval_counts(gt_ye), interval_counts(gt_xe))
        total_g = float((Vg * gt_cell_area).sum())

        cand_xe = np.arange(pxs[0], pxs[-1] + shape.w + 1) * span
        cand_ye = np.arange(pys[0], pys[-1] + shape.h + 1) * span
        OX = interval_overlaps(cand_xe, gt_xe).astype(np.float64)
        OY = interval_overlaps(cand_ye, gt_ye).astype(np.float64)
        cx = interval_counts(cand_xe).astype(np.float64)
        cy = interval_counts(cand_ye).astype(np.float64)

        NX, NY = len(pxs), len(pys)
        Xi = np.arange(NX)[:, None] + np.arange(shape.w)[None, :]
        Yi = np.arange(NY)[:, None] + np.arange(shape.h)[None, :]
        Px = OX[Xi]                      # (NX, w, gt_w)
        Py = OY[Yi]                      # (NY, h, gt_h)
        G = np.einsum("yrk,xcl,kl->yxrc", Py, Px, Vg).reshape(NY, NX, shape.wh)
        area = (cy[Yi][:, None, :, None] * cx[Xi][None, :, None, :]) \
            .reshape(NY, NX, shape.wh)

        # candidate box pixel extents per axis
        ceil_xe = np.ceil(cand_xe)
        ceil_ye = np.ceil(cand_ye)
        box_cx = ceil_xe[shape.w:] - ceil_xe[:-shape.w]
        box_cy = ceil_ye[shape.h:] - ceil_ye[:-shape.h]
        ivx = np.maximum(0.0, np.minimum(ceil_xe[shape.w:], np.ceil(gt_rect[2]))
                         - np.maximum(ceil_xe[:-shape.w], np.ceil(gt_rect[0])))
        ivy = np.maximum(0.0, np.minimum(ceil_ye[shape.h:], np.ceil(gt_rect[3]))
                         - np.maximum(ceil_ye[:-shape.h], np.ceil(gt_rect[1])))
        inter = ivy[:, None] * ivx[None, :]
        union = box_cy[:, None] * box_cx[None, :] + gt_area - inter
        iou = inter / union
        lam = inter / (union * union)

        F_all = F_all - lam[:, :, None] * (area - G)
        B_all = B_all - lam[:, :, None] * G
        const_all = const_all - (1.0 - iou) - lam * (total_g - G.sum(axis=2))
        return F_all, B_all, const_all

    def _evaluate(self, lc: _LevelCandidates, yi: int, xi: int):
        w = self.w
        shape = w.shapes[lc.a]
        p_x, p_y = int(lc.pxs[xi]), int(lc.pys[yi])
        cliques = box_cliques(self.seg_cells[lc.sigma], shape, p_x, p_y)
        g = _graph_core(lc.F_all[yi, xi], lc.B_all[yi, xi], box_edges(shape),
                        cliques, w.w_pair[lc.a], self.lines[lc.a], w.K,
                        lc.const_all[yi, xi])
        flow, side = mincut(g)
        v = side[:shape.wh].astype(np.uint8)
        label = Label(p_x=p_x, p_y=p_y, p_sigma=lc.sigma, v=v, a=lc.a)
        return label, flow + g.offset

    def _sorted_candidates(self):
        records = []
        for li, lc in enumerate(self.levels):
            b = lc.bound_all
            records.append(np.stack([
                b.ravel(),
                np.full(b.size, li, dtype=np.float64),
                np.repeat(np.arange(b.shape[0]), b.shape[1]).astype(np.float64),
                np.tile(np.arange(b.shape[1]), b.shape[0]).astype(np.float64),
            ], axis=1))
        if not records:
            return np.zeros((0, 4))
        allrec = np.concatenate(records, axis=0)
        return allrec[np.argsort(allrec[:, 0], kind="stable")]

    def best(self) -> Detection | None:
        """Exact argmin over every candidate (ties: level, y, x, viewpoint)."""
        best: Detection | None = None
        for rec in self._sorted_candidates():
            if best is not None and rec[0] > best.energy:
                break
            lc = self.levels[int(rec[1])]
            label, value = self._evaluate(lc, int(rec[2]), int(rec[3]))
            det = Detection(label=label, energy=value,
                            box_px=self.geom.box_rect(label))
            if best is None or det.sort_key() < best.sort_key():
                best = det
        return best

    def top_n(self, n: int, iou_threshold: float) -> list[Detection]:
        """Exact top-n after greedy suppression."""
        if n <= 0:
            return []
        evaluated: list[Detection] = []
        survivors: list[Detection] = []
        for rec in self._sorted_candidates():
            if len(survivors) >= n and rec[0] > survivors[n - 1].energy:
                break
            lc = self.levels[int(rec[1])]
            label, value = self._evaluate(lc, int(rec[2]), int(rec[3]))
            det = Detection(label=label, energy=value,
                            box_px=self.geom.box_rect(label))
            evaluated.append(det)
            if len(survivors) < n or value <= survivors[n - 1].energy:
                survivors = nms(evaluated, iou_threshold)[:n]
        return survivors


def detect(pyr, seg_cells, w: WeightVector, top_n: int,
           nms_iou: float = 0.5) -> list[Detection]:
    """Exact top-n detections over all viewpoints, levels, and cell offsets."""
    if pyr.n_levels < 1:
        raise ValueError("empty pyramid")
    if pyr.cell_size != w.cell_size:
        raise ValueError("model and pyramid cell sizes differ")
    geom = Geometry.for_pyramid(pyr, w.shapes)
    return _Scanner(pyr, seg_cells, w, geom).top_n(top_n, nms_iou)


def loss_augmented_detect(pyr, seg_cells, w: WeightVector,
                          y_gt: Label) -> Detection:
    """argmin over labellings of energy minus detection/segmentation loss.

    The returned detection carries the raw energy and, in ``augmented``, the
    loss-augmented objective actually minimized.
    """
    geom = Geometry.for_pyramid(pyr, w.shapes)
    sc = _Scanner(pyr, seg_cells, w, geom, loss_target=y_gt)
    det = sc.best()
    if det is None:
        raise ValueError("no candidate box positions fit the pyramid")
    maps = build_energy_maps(pyr, seg_cells, w,
                             (det.label.p_x, det.label.p_y, det.label.p_sigma),
                             det.label.a)
    raw = energy(maps, det.label.v, w)
    return Detection(label=det.label, energy=raw, box_px=det.box_px,
                     augmented=det.energy)


@dataclass
class MultiDetectResult:
    detections: list[Detection]
    owners: list[np.ndarray]              # final per-level owner ids (0 = none)
    responses: list[np.ndarray]           # final collected visible responses
    owner_history: list[list[np.ndarray]] = field(default_factory=list)


def detect_multi(pyr, seg_cells, models: list[WeightVector]) -> MultiDetectResult:
    """Sequential per-object detection with response transfer.

    Objects run in order; cells previously marked visible expose the marking
    object's visible-filter response as the occlusion response seen by later
    objects. After each object's argmin detection, its visible in-image cells
    record its response and ownership. Ownership never reverts.
    """
    if not models:
        raise ValueError("need at least one model")
    cs = {m.cell_size for m in models}
    if len(cs) > 1:
        raise ValueError(f"models disagree on cell size: {sorted(cs)}")
    if pyr.cell_size != models[0].cell_size:
        raise ValueError("model and pyramid cell sizes differ")

    owners = [np.zeros((lv.grid_h, lv.grid_w), dtype=np.int32) for lv in pyr.levels]
    responses = [np.zeros((lv.grid_h, lv.grid_w)) for lv in pyr.levels]
    detections = []
    history = []
    for o, w_o in enumerate(models, start=1):
        geom = Geometry.for_pyramid(pyr, w_o.shapes)
        override = None
        if o > 1:
            override = ([m != 0 for m in owners], responses)
        sc = _Scanner(pyr, seg_cells, w_o, geom, b_override=override)
        det = sc.best()
        if det is None:
            raise ValueError("no candidate box positions fit the pyramid")
        detections.append(det)

        lab = det.label
        shape = w_o.shapes[lab.a]
        lv = pyr.levels[lab.p_sigma]
        rr, cc = np.divmod(np.arange(shape.wh), shape.w)
        gy = lab.p_y + rr
        gx = lab.p_x + cc
        keep = (lab.v.astype(bool) & (gy >= 0) & (gy < lv.grid_h)
                & (gx >= 0) & (gx < lv.grid_w))
        if keep.any():
            phi = lv.hog[gy[keep], gx[keep]]
            raw_f = np.einsum("ij,ij->i", phi, w_o.w_vis[lab.a][keep])
            owners[lab.p_sigma][gy[keep], gx[keep]] = o
            responses[lab.p_sigma][gy[keep], gx[keep]] = raw_f
        history.append([m.copy() for m in owners])
    return MultiDetectResult(detections=detections, owners=owners,
                             responses=responses, owner_history=history)
