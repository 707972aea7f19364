"""Patch proposals (sliding windows or external CSV files) and box geometry."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CSV_HEADER = ("image_id", "lx", "ly", "rx", "ry")


class ProposalError(ValueError):
    """Malformed or missing proposal data."""


@dataclass
class ProposalSet:
    image_id: str
    boxes: np.ndarray  # (J, 4) float64: lx, ly, rx, ry
    source: str = "sliding-window"

    def __len__(self) -> int:
        return len(self.boxes)


def _positions(length: int, side: int, step: int) -> list[int]:
    pos = list(range(0, length - side + 1, step))
    if pos[-1] != length - side:
        pos.append(length - side)  # snap a final window to the edge
    return pos


def sliding_window(
    image_w: int,
    image_h: int,
    base: int = 32,
    scale_multipliers: Iterable[int] = range(2, 9),
    step: int = 32,
    image_id: str = "",
) -> ProposalSet:
    """Square windows of side ``base * k`` slid with ``step`` over the image.

    Scales that do not fit are skipped; when none fit the whole image is the
    single proposal.
    """
    seen = set()
    boxes = []
    for k in scale_multipliers:
        side = base * k
        if side > image_w or side > image_h:
            continue
        for y in _positions(image_h, side, step):
            for x in _positions(image_w, side, step):
                b = (x, y, x + side, y + side)
                if b not in seen:
                    seen.add(b)
                    boxes.append(b)
    if not boxes:
        boxes.append((0, 0, image_w, image_h))
    return ProposalSet(image_id, np.asarray(boxes, dtype=np.float64), "sliding-window")


def clamp_boxes(boxes: np.ndarray, image_w: float, image_h: float) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, image_w)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, image_h)
    return out


def save_proposals(path: str | Path, proposals: Mapping[str, ProposalSet]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for image_id, ps in proposals.items():
            for b in ps.boxes:
                w.writerow([image_id] + [repr(float(v)) if v != int(v) else int(v) for v in b])


def load_proposals(
    path: str | Path,
    image_sizes: Mapping[str, tuple[int, int]] | None = None,
    required_ids: Sequence[str] | None = None,
) -> dict[str, ProposalSet]:
    """Read a ``image_id,lx,ly,rx,ry`` CSV.

    When ``image_sizes`` (id -> (w, h)) is given boxes are clamped to the
    image. Rows that are unparsable or degenerate (after clamping) raise a
    :class:`ProposalError` listing every offending line number.
    """
    path = Path(path)
    by_id: dict[str, list[tuple[float, float, float, float]]] = {}
    problems = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ProposalError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                problems.append(f"line {lineno}: expected 5 fields, got {len(row)}")
                continue
            image_id = row[0].strip()
            try:
                lx, ly, rx, ry = (float(v) for v in row[1:])
            except ValueError:
                problems.append(f"line {lineno}: non-numeric coordinate in {row[1:]}")
                continue
            if not all(np.isfinite([lx, ly, rx, ry])):
                problems.append(f"line {lineno}: non-finite coordinate")
                continue
            if image_sizes is not None and image_id in image_sizes:
                w, h = image_sizes[image_id]
                lx, rx = min(max(lx, 0.0), w), min(max(rx, 0.0), w)
                ly, ry = min(max(ly, 0.0), h), min(max(ry, 0.0), h)
            if not (lx < rx and ly < ry):
                problems.append(f"line {lineno}: degenerate box ({lx}, {ly}, {rx}, {ry}); need lx<rx and ly<ry")
                continue
            by_id.setdefault(image_id, []).append((lx, ly, rx, ry))
    if problems:
        raise ProposalError(f"{path}: {len(problems)} invalid row(s):\n  " + "\n  ".join(problems))
    if required_ids is not None:
        missing = [i for i in required_ids if i not in by_id]
        if missing:
            raise ProposalError(f"{path}: no proposals for image(s) {missing[:10]}")
    return {
        k: ProposalSet(k, np.asarray(v, dtype=np.float64), "external-file")
        for k, v in by_id.items()
    }


def random_proposals(
    image_w: int,
    image_h: int,
    count: int,
    rng: np.random.Generator,
    min_side: int = 32,
    image_id: str = "",
) -> ProposalSet:
    """Random boxes with varied size and aspect ratio.

    Stands in for an external proposal tool when producing CSV files for
    experiments; not used by training directly.
    """
    boxes = []
    while len(boxes) < count:
        w = rng.uniform(min_side, image_w)
        h = rng.uniform(min_side, image_h)
        x = rng.uniform(0, image_w - w)
        y = rng.uniform(0, image_h - h)
        boxes.append((round(x), round(y), round(x + w), round(y + h)))
    arr = np.asarray(boxes, dtype=np.float64)
    arr = arr[(arr[:, 2] > arr[:, 0]) & (arr[:, 3] > arr[:, 1])]
    return ProposalSet(image_id, arr, "external-file")


def box_area(b) -> float:
    return max(0.0, float(b[2]) - float(b[0])) * max(0.0, float(b[3]) - float(b[1]))


def iou(a, b) -> float:
    """Intersection over union with area ``(rx - lx) * (ry - ly)``."""
    iw = min(float(a[2]), float(b[2])) - max(float(a[0]), float(b[0]))
    ih = min(float(a[3]), float(b[3])) - max(float(a[1]), float(b[1]))
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Visits boxes by descending score (ties: lower index first) and drops any
    box whose IoU with an already kept box exceeds ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    kept: list[int] = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(int(i))
        suppressed |= overlaps[i] > iou_threshold
    return kept
