"""Structured labels, weight layout, joint features, and clique potentials.

A label is a box position in the pyramid, a per-cell visibility bit-vector,
and a viewpoint index. The weight vector stacks one block per viewpoint; a
block holds, in order:

    w_vis   31*wh   visible-cell filter (wh = box width * height in cells)
    w_occ   31*wh   occluded-cell filter
    w_prior wh      per-cell cost of the occluded label
    w_trunc 1       cost per box cell outside the image
    w_pair  1       cost per disagreeing 4-connected cell pair
    w_clique K+1    clique-potential weights over normalized visible counts
    w_bias  1       per-viewpoint bias

Block length is therefore 63*wh + K + 4. The joint feature vector of a label
has the same layout with only its viewpoint's block nonzero, so the model
energy is a single dot product. The model file is a little-endian container:
magic ``VCMODEL1``, then uint32 A, K, cell_size, reserved, per-viewpoint
uint32 (w_a, h_a) pairs, uint64 weight count, and the packed float64 weights.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import FormatError
from .imaging import HOG_DIM, FeaturePyramid

_MAGIC = b"VCMODEL1"


@dataclass(frozen=True)
class ViewpointShape:
    w: int  # box width in cells
    h: int  # box height in cells

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError("viewpoint box dims must be >= 1 cell")

    @property
    def wh(self) -> int:
        return self.w * self.h


@dataclass
class Label:
    """Structured output: box position (cells, pyramid level), visibility, viewpoint."""

    p_x: int
    p_y: int
    p_sigma: int
    v: np.ndarray  # (wh,) uint8, row-major over box cells
    a: int

    def __post_init__(self):
        self.v = np.ascontiguousarray(np.asarray(self.v, dtype=np.uint8).ravel())

    def key(self) -> tuple:
        """Deterministic tie-break order: (level, y, x, viewpoint)."""
        return (self.p_sigma, self.p_y, self.p_x, self.a)

    def same_box(self, other: "Label") -> bool:
        return (self.p_x, self.p_y, self.p_sigma, self.a) == \
            (other.p_x, other.p_y, other.p_sigma, other.a)

    def __eq__(self, other):
        if not isinstance(other, Label):
            return NotImplemented
        return self.same_box(other) and np.array_equal(self.v, other.v)


def block_length(shape: ViewpointShape, K: int) -> int:
    return 63 * shape.wh + K + 4


def block_offsets(shapes: tuple[ViewpointShape, ...], K: int) -> list[int]:
    """Start offset of each viewpoint block in the packed weight vector."""
    offs = [0]
    for s in shapes:
        offs.append(offs[-1] + block_length(s, K))
    return offs


@dataclass
class WeightVector:
    """Per-viewpoint weight blocks plus the shared layout metadata."""

    shapes: tuple[ViewpointShape, ...]
    K: int
    cell_size: int
    w_vis: list[np.ndarray]      # (wh, 31) each
    w_occ: list[np.ndarray]      # (wh, 31)
    w_prior: list[np.ndarray]    # (wh,)
    w_trunc: list[float]
    w_pair: list[float]
    w_clique: list[np.ndarray]   # (K+1,)
    w_bias: list[float]

    @classmethod
    def zeros(cls, shapes, K: int = 4, cell_size: int = 8) -> "WeightVector":
        shapes = tuple(shapes)
        return cls(
            shapes=shapes, K=K, cell_size=cell_size,
            w_vis=[np.zeros((s.wh, HOG_DIM)) for s in shapes],
            w_occ=[np.zeros((s.wh, HOG_DIM)) for s in shapes],
            w_prior=[np.zeros(s.wh) for s in shapes],
            w_trunc=[0.0] * len(shapes),
            w_pair=[0.0] * len(shapes),
            w_clique=[np.zeros(K + 1) for s in shapes],
            w_bias=[0.0] * len(shapes),
        )

    @property
    def n_viewpoints(self) -> int:
        return len(self.shapes)

    @property
    def total_length(self) -> int:
        return block_offsets(self.shapes, self.K)[-1]

    def slice_viewpoints(self, lo: int, hi: int) -> "WeightVector":
        """Weight vector restricted to viewpoints [lo, hi)."""
        return WeightVector(
            shapes=self.shapes[lo:hi], K=self.K, cell_size=self.cell_size,
            w_vis=self.w_vis[lo:hi], w_occ=self.w_occ[lo:hi],
            w_prior=self.w_prior[lo:hi], w_trunc=self.w_trunc[lo:hi],
            w_pair=self.w_pair[lo:hi], w_clique=self.w_clique[lo:hi],
            w_bias=self.w_bias[lo:hi])


def pack_weights(w: WeightVector) -> np.ndarray:
    parts = []
    for a, s in enumerate(w.shapes):
        parts.extend([
            w.w_vis[a].ravel(), w.w_occ[a].ravel(), w.w_prior[a],
            np.array([w.w_trunc[a], w.w_pair[a]]), w.w_clique[a],
            np.array([w.w_bias[a]]),
        ])
    return np.concatenate(parts).astype(np.float64)


def unpack_weights(flat: np.ndarray, shapes, K: int, cell_size: int = 8) -> WeightVector:
    shapes = tuple(shapes)
    flat = np.asarray(flat, dtype=np.float64).ravel()
    expected = block_offsets(shapes, K)[-1]
    if len(flat) != expected:
        raise FormatError(f"weight length {len(flat)} does not match layout {expected}")
    w = WeightVector.zeros(shapes, K, cell_size)
    pos = 0
    for a, s in enumerate(shapes):
        wh = s.wh
        w.w_vis[a] = flat[pos:pos + 31 * wh].reshape(wh, HOG_DIM).copy(); pos += 31 * wh
        w.w_occ[a] = flat[pos:pos + 31 * wh].reshape(wh, HOG_DIM).copy(); pos += 31 * wh
        w.w_prior[a] = flat[pos:pos + wh].copy(); pos += wh
        w.w_trunc[a] = float(flat[pos]); pos += 1
        w.w_pair[a] = float(flat[pos]); pos += 1
        w.w_clique[a] = flat[pos:pos + K + 1].copy(); pos += K + 1
        w.w_bias[a] = float(flat[pos]); pos += 1
    return w


def save_model(w: WeightVector, path) -> None:
    flat = pack_weights(w)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<4I", w.n_viewpoints, w.K, w.cell_size, 0))
        for s in w.shapes:
            f.write(struct.pack("<2I", s.w, s.h))
        f.write(struct.pack("<Q", len(flat)))
        f.write(flat.astype("<f8").tobytes())


def load_model(path) -> WeightVector:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _MAGIC:
        raise FormatError(f"not a model file: {path}")
    try:
        A, K, cell_size, _ = struct.unpack_from("<4I", raw, 8)
        pos = 8 + 16
        shapes = []
        for _ in range(A):
            wv, hv = struct.unpack_from("<2I", raw, pos)
            shapes.append(ViewpointShape(wv, hv))
            pos += 8
        (count,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        flat = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
        if len(flat) != count or pos + 8 * count != len(raw):
            raise FormatError(f"model file size mismatch: {path}")
    except struct.error as exc:
        raise FormatError(f"truncated model file: {path}") from exc
    return unpack_weights(flat, shapes, K, cell_size)


def clique_stats(v_c: np.ndarray, K: int) -> np.ndarray:
    """Distribute a clique's visible count onto K+1 standard-size bins.

    A clique of M cells with m visible maps to t = m*K/M; weight (ceil(t)-t)
    goes to bin floor(t) and (t-floor(t)) to bin ceil(t). Always sums to 1.
    """
    v_c = np.asarray(v_c)
    M = v_c.size
    if M < 1:
        raise ValueError("clique must have at least one cell")
    m = int(v_c.sum())
    theta = np.zeros(K + 1)
    t = m * K / M
    lo = int(np.floor(t))
    hi = int(np.ceil(t))
    if lo == hi:
        theta[lo] = 1.0
    else:
        theta[lo] = hi - t
        theta[hi] = t - lo
    return theta


@dataclass
class CliqueEnvelope:
    """Lower envelope of K lines evaluated at normalized visible counts.

    Line k (1-based) has slope (w[k]-w[k-1])*K/M in raw-count coordinates and
    intercept w[k]-(w[k]-w[k-1])*k; for concave weights the envelope at the
    normalized count m*K/M equals the linear interpolation of the weights, so
    the potential is invariant to clique size and reproduces the weights
    exactly at standard-size integer counts.
    """

    slopes: np.ndarray      # (K,) raw-count slopes
    intercepts: np.ndarray  # (K,)
    M: int
    K: int
    concave: bool

    def __call__(self, m):
        m = np.asarray(m, dtype=np.float64)
        vals = self.slopes * m[..., None] + self.intercepts
        return vals.min(axis=-1)


def clique_envelope(w_clique: np.ndarray, M: int, K: int) -> CliqueEnvelope:
    w_clique = np.asarray(w_clique, dtype=np.float64)
    if K < 2 or len(w_clique) != K + 1:
        raise ValueError("clique weights must have K+1 entries with K >= 2")
    if M < 1:
        raise ValueError("clique size must be >= 1")
    sig = np.diff(w_clique)
    # trained weights satisfy the curvature constraint only to ~1e-9
    concave = bool(np.all(np.diff(sig) <= 1e-8))
    if not concave:
        warnings.warn("clique weights are not concave; envelope underestimates "
                      "the interpolated potential and the energy is not "
                      "graph-representable", stacklevel=2)
    slopes = sig * (K / M)
    intercepts = w_clique[1:] - sig * np.arange(1, K + 1)
    return CliqueEnvelope(slopes=slopes, intercepts=intercepts, M=M, K=K,
                          concave=concave)


@lru_cache(maxsize=64)
def _box_cell_grid(shape: ViewpointShape):
    rr, cc = np.divmod(np.arange(shape.wh), shape.w)
    rr.setflags(write=False)
    cc.setflags(write=False)
    return rr, cc


@lru_cache(maxsize=64)
def box_edges(shape: ViewpointShape) -> np.ndarray:
    """4-connected neighbor pairs (cell index pairs) inside a box, row-major."""
    idx = np.arange(shape.wh).reshape(shape.h, shape.w)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    edges = np.concatenate([horiz, vert], axis=0)
    edges.setflags(write=False)
    return edges


def box_cliques(cell_labels: np.ndarray, shape: ViewpointShape,
                p_x: int, p_y: int) -> list[np.ndarray]:
    """Cliques of in-box, in-image cells grouped by segment id.

    Returns member lists (box cell indices) ordered by ascending segment id;
    cells outside the image belong to no clique.
    """
    gh, gw = cell_labels.shape
    groups: dict[int, list[int]] = {}
    rows = cell_labels.tolist()
    for r in range(shape.h):
        gy = p_y + r
        if not 0 <= gy < gh:
            continue
        base = r * shape.w
        row = rows[gy]
        lo = max(0, -p_x)
        hi = min(shape.w, gw - p_x)
        for c in range(lo, hi):
            sid = row[p_x + c]
            g = groups.get(sid)
            if g is None:
                groups[sid] = [base + c]
            else:
                g.append(base + c)
    return [np.array(groups[k], dtype=np.int64) for k in sorted(groups)]


def count_truncated(shape: ViewpointShape, p_x: int, p_y: int,
                    grid_w: int, grid_h: int) -> int:
    """Number of box cells lying outside the level's cell grid."""
    rr, cc = _box_cell_grid(shape)
    gy = p_y + rr
    gx = p_x + cc
    outside = (gy < 0) | (gy >= grid_h) | (gx < 0) | (gx >= grid_w)
    return int(outside.sum())


def assemble_features(pyr: FeaturePyramid, seg_cells: list[np.ndarray],
                      y: Label, K: int, shapes) -> np.ndarray:
    """Sparse joint feature vector of a label; only block y.a is nonzero.

    The block stacks per-cell HOG split into visible/occluded groups, the
    complemented visibility labels, the truncated-cell count, the pairwise
    disagreement count, the summed clique statistics, and a constant 1.
    """
    shapes = tuple(shapes)
    if not 0 <= y.a < len(shapes):
        raise ValueError(f"viewpoint index {y.a} out of range [0, {len(shapes)})")
    shape = shapes[y.a]
    if y.v.size != shape.wh:
        raise ValueError("visibility length does not match viewpoint box")
    if not 0 <= y.p_sigma < pyr.n_levels:
        raise ValueError("pyramid level out of range")

    lv = pyr.levels[y.p_sigma]
    cells = seg_cells[y.p_sigma]
    rr, cc = _box_cell_grid(shape)
    gy = y.p_y + rr
    gx = y.p_x + cc
    inside = (gy >= 0) & (gy < lv.grid_h) & (gx >= 0) & (gx < lv.grid_w)
    phi = np.zeros((shape.wh, HOG_DIM))
    phi[inside] = lv.hog[gy[inside], gx[inside]]

    v = y.v.astype(np.float64)
    edges = box_edges(shape)
    pair_count = float(np.abs(v[edges[:, 0]] - v[edges[:, 1]]).sum())

    theta = np.zeros(K + 1)
    for members in box_cliques(cells, shape, y.p_x, y.p_y):
        theta += clique_stats(y.v[members], K)

    total = block_offsets(shapes, K)
    feat = np.zeros(total[-1])
    pos = total[y.a]
    wh = shape.wh
    feat[pos:pos + 31 * wh] = (phi * v[:, None]).ravel(); pos += 31 * wh
    feat[pos:pos + 31 * wh] = (phi * (1 - v)[:, None]).ravel(); pos += 31 * wh
    feat[pos:pos + wh] = 1 - v; pos += wh
    feat[pos] = float((~inside).sum()); pos += 1
    feat[pos] = pair_count; pos += 1
    feat[pos:pos + K + 1] = theta; pos += K + 1
    feat[pos] = 1.0
    return feat


def second_diff_rows(shapes, K: int) -> np.ndarray:
    """Concavity rows in full weight coordinates: one (-1, 2, -1) stencil per
    interior clique-weight index per viewpoint, plus a nonnegativity row for
    each pairwise weight. Row . w >= 0 must hold after training."""
    shapes = tuple(shapes)
    offs = block_offsets(shapes, K)
    dim = offs[-1]
    rows = []
    for a, s in enumerate(shapes):
        base = offs[a] + 62 * s.wh + s.wh
        pair_idx = base + 1
        clique_idx = base + 2
        r = np.zeros(dim)
        r[pair_idx] = 1.0
        rows.append(r)
        for j in range(1, K):
            r = np.zeros(dim)
            r[clique_idx + j - 1] = -1.0
            r[clique_idx + j] = 2.0
            r[clique_idx + j + 1] = -1.0
            rows.append(r)
    return np.stack(rows, axis=0)
