"""Multi-scale inference, average precision and CorLoc."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from dpl import head, network
from dpl.network import ModelConfig, ModelParams
from dpl.proposals import ProposalSet, iou
from dpl.synthdata import Dataset
from dpl.train import prepare


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """All-point interpolated AP (PASCAL VOC 2010+ convention).

    Items are ranked by descending score, ties by original index. Precision
    is replaced by its running maximum from the right before summing
    ``precision * recall_step`` over the positives. Returns NaN when there
    are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    npos = int(labels.sum())
    if npos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    tp = labels[order].astype(np.float64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(envelope[tp == 1]) / npos)


def corloc(
    predicted: Mapping[str, Mapping[int, Sequence[float]]],
    gt: Mapping[str, Sequence[tuple[int, Sequence[float]]]],
    num_classes: int,
    iou_threshold: float = 0.5,
) -> list[float]:
    """Per-class fraction of class-positive images whose predicted box has
    IoU strictly above the threshold with some ground-truth box of the class.

    ``predicted`` maps image id -> {class: box}. Classes absent from every
    image get NaN.
    """
    hits = np.zeros(num_classes)
    totals = np.zeros(num_classes)
    for image_id, objects in gt.items():
        present = {c for c, _ in objects}
        for c in present:
            totals[c] += 1
            box = predicted.get(image_id, {}).get(c)
            if box is None:
                continue
            if any(iou(box, g) > iou_threshold for cc, g in objects if cc == c):
                hits[c] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return list(np.where(totals > 0, hits / np.maximum(totals, 1), np.nan))


@dataclass
class Prediction:
    image_id: str
    image_scores: np.ndarray  # (C,) classification score
    patch_scores: np.ndarray  # (J, C) scale-averaged patch scores
    boxes: np.ndarray  # (J, 4) in original image coordinates
    seconds: float

    def top_boxes(self) -> dict[int, np.ndarray]:
        idx = self.patch_scores.argmax(axis=0)
        return {c: self.boxes[j] for c, j in enumerate(idx)}


def predict_image(
    params: ModelParams,
    config: ModelConfig,
    image: np.ndarray,
    boxes: np.ndarray,
    scales: Sequence[int],
    mode: str = "multi-task",
    dtype=np.float32,
) -> tuple[np.ndarray, np.ndarray]:
    """Scale-averaged image scores and patch scores for one image (no flips).

    The image score is the mean of both branch scores in multi-task mode and
    the trained branch's score otherwise.
    """
    mode = head.canonical_mode(mode)
    img_sum = np.zeros(config.num_classes)
    pat_sum = np.zeros((len(boxes), config.num_classes))
    for s in scales:
        x, b = prepare(image, boxes, int(s), False, dtype)
        st = network.forward(params, config, x, b)
        if mode == "multi-task":
            img_sum += (st.head.s_cls.astype(np.float64) + st.head.s_dis) / 2.0
        elif mode == "cls-only":
            img_sum += st.head.s_cls
        else:
            img_sum += st.head.s_dis
        pat_sum += st.head.s_pat
    return img_sum / len(scales), pat_sum / len(scales)


def predict(
    params: ModelParams,
    config: ModelConfig,
    dataset: Dataset,
    proposals: Mapping[str, ProposalSet],
    scales: Sequence[int],
    mode: str = "multi-task",
    dtype=np.float32,
) -> list[Prediction]:
    params = params.astype(dtype)
    out = []
    for rec in dataset.images:
        boxes = proposals[rec.id].boxes
        t0 = time.perf_counter()
        img_s, pat_s = predict_image(params, config, dataset.load_image(rec), boxes, scales, mode, dtype)
        out.append(Prediction(rec.id, img_s, pat_s, boxes, time.perf_counter() - t0))
    return out


@dataclass
class EvalReport:
    classes: list[str]
    ap: list[float]
    mAP: float
    corloc: list[float] | None
    mean_corloc: float | None
    config: dict = field(default_factory=dict)
    seconds_per_image: list[float] = field(default_factory=list)

    @property
    def mean_seconds_per_image(self) -> float:
        return float(np.mean(self.seconds_per_image)) if self.seconds_per_image else 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "classes": self.classes,
            "ap": [_num(v) for v in self.ap],
            "mAP": _num(self.mAP),
            "corloc": None if self.corloc is None else [_num(v) for v in self.corloc],
            "mean_corloc": _num(self.mean_corloc),
            "config": self.config,
        }
        if include_timing:
            d["timing"] = {
                "mean_seconds_per_image": self.mean_seconds_per_image,
                "seconds_per_image": self.seconds_per_image,
            }
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        lines = [f"{'class':<12} {'AP':>8} {'CorLoc':>8}"]
        for i, c in enumerate(self.classes):
            cl = "-" if self.corloc is None else f"{100 * self.corloc[i]:8.2f}"
            lines.append(f"{c:<12} {100 * self.ap[i]:>8.2f} {cl:>8}")
        mc = "-" if self.mean_corloc is None else f"{100 * self.mean_corloc:8.2f}"
        lines.append(f"{'mean':<12} {100 * self.mAP:>8.2f} {mc:>8}")
        lines.append(f"test time {self.mean_seconds_per_image:.4f} s/image")
        return "\n".join(lines) + "\n"


def _num(v):
    if v is None:
        return None
    v = float(v)
    return None if np.isnan(v) else v


# JSON schema of EvalReport.to_dict(); checked by the test-suite and usable by
# downstream tools.
REPORT_SCHEMA = {
    "type": "object",
    "required": ["classes", "ap", "mAP", "corloc", "mean_corloc", "config"],
    "properties": {
        "classes": {"type": "array", "items": {"type": "string"}},
        "ap": {"type": "array", "items": {"type": ["number", "null"], "minimum": 0, "maximum": 1}},
        "mAP": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "corloc": {
            "type": ["array", "null"],
            "items": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        },
        "mean_corloc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "config": {"type": "object"},
        "timing": {"type": "object"},
    },
}


def report_from_predictions(
    predictions: Sequence[Prediction],
    dataset: Dataset,
    gt: Mapping[str, Sequence[tuple[int, Sequence[float]]]] | None,
    mode: str = "multi-task",
    config: dict | None = None,
) -> EvalReport:
    mode = head.canonical_mode(mode)
    C = len(dataset.classes)
    labels = dataset.labels()
    scores = np.stack([p.image_scores for p in predictions])
    ap = [average_precision(scores[:, c], labels[:, c]) for c in range(C)]
    mAP = float(np.nanmean(ap))
    cl = mean_cl = None
    if mode != "cls-only" and gt is not None:
        boxes = {p.image_id: p.top_boxes() for p in predictions}
        cl = corloc(boxes, gt, C)
        mean_cl = float(np.nanmean(cl))
    return EvalReport(
        list(dataset.classes), ap, mAP, cl, mean_cl, dict(config or {}), [p.seconds for p in predictions]
    )


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    dataset: Dataset,
    proposals: Mapping[str, ProposalSet],
    gt: Mapping[str, Sequence[tuple[int, Sequence[float]]]] | None,
    scales: Sequence[int],
    mode: str = "multi-task",
    echo: dict | None = None,
) -> tuple[EvalReport, list[Prediction]]:
    """Classification AP from scale-averaged image scores and CorLoc from
    the top scale-averaged patch per labelled class.

    CorLoc is not reported for a classification-only model.
    """
    preds = predict(params, config, dataset, proposals, scales, mode)
    cfg = {"scales": [int(s) for s in scales], "mode": head.canonical_mode(mode)}
    cfg.update(echo or {})
    return report_from_predictions(preds, dataset, gt, mode, cfg), preds
