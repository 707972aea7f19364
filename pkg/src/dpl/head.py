"""Patch-level MIL head: SPP pooling, patch encoding, SPM aggregation,
the image classifier, the patch classifier with max-over-patches pooling,
the sigmoid cross-entropy loss and the backward pass through all of them.

Shapes used throughout:

* ``J`` patches per image, ``K`` patch-feature width, ``N`` encoded width,
  ``M`` SPM cells in total, ``C`` classes.
* ``F`` patch features ``(J, K)``; ``W`` ``(K, N)``; ``U_cls`` ``(N*M, C)``;
  ``U_dis`` ``(K, C)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from dpl.tensor import ShapeError

SENTINEL_EMPTY = -1

LOSS_MODES = ("multi-task", "cls-only", "dis-only")
_MODE_ALIASES = {
    "multi-task": "multi-task",
    "multi": "multi-task",
    "cls-only": "cls-only",
    "cls": "cls-only",
    "dis-only": "dis-only",
    "dis": "dis-only",
}

DEFAULT_SPM_SCALES = ((1, 1), (2, 2), (3, 1))


def canonical_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}") from None


class PatchBox(NamedTuple):
    """Axis-aligned box in pixels: top-left (lx, ly), bottom-right (rx, ry)."""

    lx: float
    ly: float
    rx: float
    ry: float

    def is_valid(self) -> bool:
        return self.lx < self.rx and self.ly < self.ry


def as_box_array(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return arr


# --------------------------------------------------------------------------
# SPP
# --------------------------------------------------------------------------


def roi_project(box, n: int, map_h: int, map_w: int) -> tuple[int, int, int, int]:
    """Project a pixel box onto the feature map as inclusive cell bounds.

    Returns ``(x0, y0, x1, y1)``. Top-left uses ``floor(l / n)``, bottom-right
    ``ceil(r / n) - 1``; both are clamped to the map and the rectangle is
    never empty.
    """
    if n < 1:
        raise ValueError("roi_project: stride must be >= 1")
    lx, ly, rx, ry = (float(v) for v in box)
    x0 = min(max(math.floor(lx / n), 0), map_w - 1)
    y0 = min(max(math.floor(ly / n), 0), map_h - 1)
    x1 = min(max(math.ceil(rx / n) - 1, x0), map_w - 1)
    y1 = min(max(math.ceil(ry / n) - 1, y0), map_h - 1)
    return x0, y0, x1, y1


def spp_bins(length: int, bins: int) -> list[tuple[int, int]]:
    """Half-open ``[start, end)`` bins covering ``range(length)``.

    ``start = floor(length * i / bins)``, ``end = floor(length * (i + 1) / bins)``;
    when that leaves a bin empty it is widened to one element.
    """
    out = []
    for i in range(bins):
        start = (length * i) // bins
        end = max((length * (i + 1)) // bins, start + 1)
        out.append((start, end))
    return out


def _gather_index(offset: int, length: int, bins: int) -> np.ndarray:
    # (bins, T) index table; short bins repeat their last element so that the
    # first occurrence of a max is always the real (lowest-index) position.
    spans = spp_bins(length, bins)
    width = max(e - s for s, e in spans)
    t = np.arange(width)
    return np.stack([offset + s + np.minimum(t, e - s - 1) for s, e in spans])


def spp_pool(
    fmap: np.ndarray, cellrect: Sequence[int], gh: int, gw: int
) -> tuple[np.ndarray, np.ndarray]:
    """Max-pool the inclusive cell rectangle of ``fmap`` (Cf, h, w) into a
    ``gh x gw`` grid.

    Returns pooled ``(Cf, gh, gw)`` values and the flat index into ``fmap``
    of each winner (ties go to the lowest flat index).
    """
    cf, h, w = fmap.shape
    x0, y0, x1, y1 = (int(v) for v in cellrect)
    if not (0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h):
        raise ShapeError(f"spp_pool: cell rect {cellrect} outside map {h}x{w}")
    rows = _gather_index(y0, y1 - y0 + 1, gh)
    cols = _gather_index(x0, x1 - x0 + 1, gw)
    ty, tx = rows.shape[1], cols.shape[1]
    g = fmap[:, rows[:, :, None, None], cols[None, None, :, :]]
    g = g.transpose(0, 1, 3, 2, 4).reshape(cf, gh, gw, ty * tx)
    local = g.argmax(axis=3)
    pooled = np.take_along_axis(g, local[..., None], axis=3)[..., 0]
    ly, lx = np.divmod(local, tx)
    yy = rows[np.arange(gh)[None, :, None], ly]
    xx = cols[np.arange(gw)[None, None, :], lx]
    argmax = (np.arange(cf)[:, None, None] * h + yy) * w + xx
    return pooled, argmax


def _window_maxima(fmap: np.ndarray, sizes) -> dict:
    """Max over every ``bh x bw`` window for each requested ``(bh, bw)``.

    Returns ``{(bh, bw): (values, winner_y, winner_x)}``. Windows grow one
    column at a time, then one row at a time; only a strictly larger value
    replaces the winner, so ties keep the lowest flat index.
    """
    _, h, w = fmap.shape
    sizes = {(int(a), int(b)) for a, b in sizes}
    widths = {b for _, b in sizes}
    cols = {}
    v, ax = fmap, np.broadcast_to(np.arange(w, dtype=np.int32), fmap.shape)
    for k in range(max(widths)):
        if k:
            c = fmap[:, :, k:]
            m = c > v[:, :, :-1]
            v = np.where(m, c, v[:, :, :-1])
            ax = np.where(m, np.arange(k, w, dtype=np.int32), ax[:, :, :-1])
        if k + 1 in widths:
            cols[k + 1] = (v, ax)
    out = {}
    for bw, (cv, cx) in cols.items():
        heights = {a for a, b in sizes if b == bw}
        val, bx, ay = cv, cx, np.broadcast_to(np.arange(h, dtype=np.int32)[:, None], cv.shape)
        for k in range(max(heights)):
            if k:
                c = cv[:, k:]
                m = c > val[:, :-1]
                val = np.where(m, c, val[:, :-1])
                bx = np.where(m, cx[:, k:], bx[:, :-1])
                ay = np.where(m, np.arange(k, h, dtype=np.int32)[:, None], ay[:, :-1])
            if k + 1 in heights:
                out[(k + 1, bw)] = (val, ay, bx)
    return out


def _bin_table(offset: np.ndarray, length: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    # vectorised spp_bins: (J, bins) absolute starts and widths
    i = np.arange(bins)
    start = (length[:, None] * i) // bins
    end = np.maximum((length[:, None] * (i + 1)) // bins, start + 1)
    return offset[:, None] + start, end - start


def spp_pool_many(
    fmap: np.ndarray, rects: np.ndarray, gh: int, gw: int
) -> tuple[np.ndarray, np.ndarray]:
    """:func:`spp_pool` over a ``(J, 4)`` array of cell rects.

    Every bin is a window of some size, and a set of rects only uses a few
    distinct sizes, so each size gets one sliding-window max over the whole
    map and bins become lookups. Results equal the per-rect call exactly.
    """
    cf, h, w = fmap.shape
    rects = np.asarray(rects, dtype=np.int64).reshape(-1, 4)
    x0, y0, x1, y1 = rects.T
    if not (np.all(0 <= x0) and np.all(x0 <= x1) and np.all(x1 < w)
            and np.all(0 <= y0) and np.all(y0 <= y1) and np.all(y1 < h)):
        raise ShapeError(f"spp_pool_many: cell rects outside map {h}x{w}")
    ys, bh = _bin_table(y0, y1 - y0 + 1, gh)
    xs, bw = _bin_table(x0, x1 - x0 + 1, gw)
    shape = (len(rects), gh, gw)
    ys, bh = np.broadcast_to(ys[:, :, None], shape), np.broadcast_to(bh[:, :, None], shape)
    xs, bw = np.broadcast_to(xs[:, None, :], shape), np.broadcast_to(bw[:, None, :], shape)
    pooled = np.empty(shape + (cf,), dtype=fmap.dtype)
    yy = np.empty(shape + (cf,), dtype=np.int64)
    xx = np.empty(shape + (cf,), dtype=np.int64)
    keys, group = np.unique(bh * (w + 1) + bw, return_inverse=True)
    group = group.reshape(shape)
    tables = _window_maxima(fmap, [divmod(int(key), w + 1) for key in keys])
    for k, key in enumerate(keys):
        sel = group == k
        val, ay, ax = tables[divmod(int(key), w + 1)]
        py, px = ys[sel], xs[sel]
        pooled[sel] = val[:, py, px].T
        yy[sel] = ay[:, py, px].T
        xx[sel] = ax[:, py, px].T
    argmax = (np.arange(cf) * h + yy) * w + xx
    return pooled.transpose(0, 3, 1, 2).copy(), argmax.transpose(0, 3, 1, 2).copy()


def spp_pool_backward(
    argmax: np.ndarray, grad_out: np.ndarray, map_shape: tuple[int, ...]
) -> np.ndarray:
    """Scatter pooled gradients back onto the map.

    ``argmax`` and ``grad_out`` may carry a leading patch axis; contributions
    from overlapping patches add up in ascending patch order.
    """
    size = int(np.prod(map_shape))
    grad = np.bincount(argmax.ravel(), weights=grad_out.ravel(), minlength=size)
    return grad.astype(grad_out.dtype, copy=False).reshape(map_shape)


# --------------------------------------------------------------------------
# Classification branch
# --------------------------------------------------------------------------


def encode_patches(F: np.ndarray, W: np.ndarray) -> np.ndarray:
    if F.ndim != 2 or W.ndim != 2 or F.shape[1] != W.shape[0]:
        raise ShapeError(f"encode_patches: F {F.shape} vs W {W.shape}")
    return F @ W


def spm_cell_count(scales: Sequence[Sequence[int]]) -> int:
    return sum(int(r) * int(c) for r, c in scales)


def spm_membership(
    boxes: np.ndarray, image_w: float, image_h: float, scales: Sequence[Sequence[int]]
) -> np.ndarray:
    """Cell index (within the full concatenated grid) of every box center.

    Returns an int array ``(J, len(scales))``. Scales are ``(rows, cols)``;
    cells are numbered row-major within a scale and scales are concatenated
    in the given order. A center on the right/bottom edge goes to the last
    cell.
    """
    boxes = as_box_array(boxes)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    out = np.empty((len(boxes), len(scales)), dtype=np.int64)
    base = 0
    for s, (rows, cols) in enumerate(scales):
        col = np.clip(np.floor(cx * cols / image_w).astype(np.int64), 0, cols - 1)
        row = np.clip(np.floor(cy * rows / image_h).astype(np.int64), 0, rows - 1)
        out[:, s] = base + row * cols + col
        base += rows * cols
    return out


@dataclass
class ImageRepresentation:
    F: np.ndarray  # (N*M,)
    argmax: np.ndarray  # (N*M,) winning patch per slot or SENTINEL_EMPTY
    membership: np.ndarray  # (J, len(scales)) cell index per patch per scale


def spm_aggregate(
    E: np.ndarray,
    boxes,
    image_w: float,
    image_h: float,
    scales: Sequence[Sequence[int]] = DEFAULT_SPM_SCALES,
) -> ImageRepresentation:
    """Max-pool encoded patches inside each SPM cell and concatenate.

    Slot ``m * N + n`` holds ``max_{j in cell m} E[j, n]``; empty cells hold 0.
    """
    J, N = E.shape
    membership = spm_membership(boxes, image_w, image_h, scales)
    if membership.shape[0] != J:
        raise ShapeError(f"spm_aggregate: {J} encodings but {membership.shape[0]} boxes")
    M = spm_cell_count(scales)
    F = np.zeros((M, N), dtype=E.dtype)
    argmax = np.full((M, N), SENTINEL_EMPTY, dtype=np.int64)
    for m in range(M):
        members = np.flatnonzero((membership == m).any(axis=1))
        if len(members) == 0:
            continue
        sub = E[members]
        best = sub.argmax(axis=0)
        F[m] = sub[best, np.arange(N)]
        argmax[m] = members[best]
    return ImageRepresentation(F.reshape(-1), argmax.reshape(-1), membership)


def spm_backward(argmax: np.ndarray, grad_F: np.ndarray, J: int, N: int) -> np.ndarray:
    """Route each slot gradient to (winning patch, slot mod N)."""
    r = np.flatnonzero(argmax != SENTINEL_EMPTY)
    flat = argmax[r] * N + (r % N)
    grad = np.bincount(flat, weights=grad_F[r], minlength=J * N)
    return grad.astype(grad_F.dtype, copy=False).reshape(J, N)


def classify_image(F: np.ndarray, U_cls: np.ndarray) -> np.ndarray:
    if F.ndim != 1 or U_cls.shape[0] != F.shape[0]:
        raise ShapeError(f"classify_image: F {F.shape} vs U_cls {U_cls.shape}")
    return U_cls.T @ F


# --------------------------------------------------------------------------
# Discovery branch
# --------------------------------------------------------------------------


def score_patches(F: np.ndarray, U_dis: np.ndarray) -> np.ndarray:
    if F.ndim != 2 or U_dis.ndim != 2 or F.shape[1] != U_dis.shape[0]:
        raise ShapeError(f"score_patches: F {F.shape} vs U_dis {U_dis.shape}")
    return F @ U_dis


def discovery_pool(s_pat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class max over patches; ties go to the lowest patch index."""
    idx = s_pat.argmax(axis=0)
    return s_pat[idx, np.arange(s_pat.shape[1])], idx


def discovery_pool_backward(dis_argmax: np.ndarray, grad_s_dis: np.ndarray, J: int) -> np.ndarray:
    grad = np.zeros((J, len(grad_s_dis)), dtype=grad_s_dis.dtype)
    grad[dis_argmax, np.arange(len(grad_s_dis))] = grad_s_dis
    return grad


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def sigmoid(s: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(s)))


def sigmoid_ce_loss(s: np.ndarray, y: np.ndarray) -> float:
    """Multi-label sigmoid cross-entropy summed over classes (stable form)."""
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if s.shape != y.shape:
        raise ShapeError(f"sigmoid_ce_loss: scores {s.shape} vs labels {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("sigmoid_ce_loss: labels must be binary")
    return float(np.sum(np.maximum(s, 0) - s * y + np.log1p(np.exp(-np.abs(s)))))


def sigmoid_ce_grad(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    return sigmoid(s) - np.asarray(y, dtype=np.asarray(s).dtype)


def total_loss(
    s_cls: np.ndarray,
    s_dis: np.ndarray,
    y: np.ndarray,
    mode: str = "multi-task",
    weights: tuple[float, float] = (1.0, 1.0),
) -> tuple[float, float, float]:
    """Return ``(loss, loss_cls, loss_dis)`` for one image.

    Branch losses are always reported; ``mode`` decides which of them enter
    the total.
    """
    mode = canonical_mode(mode)
    l_cls = sigmoid_ce_loss(s_cls, y)
    l_dis = sigmoid_ce_loss(s_dis, y)
    total = 0.0
    if mode != "dis-only":
        total += weights[0] * l_cls
    if mode != "cls-only":
        total += weights[1] * l_dis
    return total, l_cls, l_dis


# --------------------------------------------------------------------------
# Forward / backward through the whole head
# --------------------------------------------------------------------------


@dataclass
class HeadState:
    F: np.ndarray  # patch features (J, K)
    E: np.ndarray  # encoded patches (J, N)
    rep: ImageRepresentation
    s_cls: np.ndarray  # (C,)
    s_pat: np.ndarray  # (J, C)
    s_dis: np.ndarray  # (C,)
    dis_argmax: np.ndarray  # (C,)


def head_forward(
    F: np.ndarray,
    boxes,
    image_w: float,
    image_h: float,
    W: np.ndarray,
    U_cls: np.ndarray,
    U_dis: np.ndarray,
    scales: Sequence[Sequence[int]] = DEFAULT_SPM_SCALES,
) -> HeadState:
    E = encode_patches(F, W)
    rep = spm_aggregate(E, boxes, image_w, image_h, scales)
    s_cls = classify_image(rep.F, U_cls)
    s_pat = score_patches(F, U_dis)
    s_dis, dis_argmax = discovery_pool(s_pat)
    return HeadState(F, E, rep, s_cls, s_pat, s_dis, dis_argmax)


def head_backward(
    state: HeadState,
    y: np.ndarray,
    W: np.ndarray,
    U_cls: np.ndarray,
    U_dis: np.ndarray,
    mode: str = "multi-task",
    weights: tuple[float, float] = (1.0, 1.0),
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`total_loss` for one image.

    Returns ``(grad_W, grad_U_cls, grad_U_dis, grad_F)``. Branches switched
    off by ``mode`` contribute exact zeros.
    """
    mode = canonical_mode(mode)
    F = state.F
    J, N = state.E.shape
    grad_W = np.zeros_like(W)
    grad_U_cls = np.zeros_like(U_cls)
    grad_U_dis = np.zeros_like(U_dis)
    grad_F = np.zeros_like(F)

    if mode != "dis-only":
        g_cls = weights[0] * sigmoid_ce_grad(state.s_cls, y)
        grad_U_cls = np.outer(state.rep.F, g_cls)
        grad_rep = U_cls @ g_cls
        grad_E = spm_backward(state.rep.argmax, grad_rep, J, N)
        grad_W = F.T @ grad_E
        grad_F = grad_F + grad_E @ W.T

    if mode != "cls-only":
        g_dis = weights[1] * sigmoid_ce_grad(state.s_dis, y)
        grad_s_pat = discovery_pool_backward(state.dis_argmax, g_dis, J)
        grad_U_dis = F.T @ grad_s_pat
        grad_F = grad_F + grad_s_pat @ U_dis.T

    return grad_W, grad_U_cls, grad_U_dis, grad_F
