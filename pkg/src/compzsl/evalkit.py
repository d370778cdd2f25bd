"""NMS mAP evaluation, split aggregation, harmonic means and confusion matrices."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

COCO_IOUS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
ROLES = ("seen", "unseen", "pretrain", "increment")

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: Box
    composition: int
    score: float

    def __post_init__(self):
        if not (self.box[2] > 0 and self.box[3] > 0 and all(math.isfinite(v) for v in self.box)):
            raise ValueError(f"detection box {self.box} must be finite with positive area")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "bbox": list(self.box), "category_id": self.composition, "score": self.score}


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def class_agnostic_nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy NMS that ignores labels.

    Ties on score go to the lower composition id, then to insertion order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, detections[i].composition, i))
    kept: list[Detection] = []
    for i in order:
        d = detections[i]
        if all(box_iou(d.box, k.box) < iou_threshold for k in kept):
            kept.append(d)
    return kept


def nms_per_image(detections: Iterable[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    by_image: dict[int, list[Detection]] = {}
    for d in detections:
        by_image.setdefault(d.image_id, []).append(d)
    out = []
    for image_id in sorted(by_image):
        out.extend(class_agnostic_nms(by_image[image_id], iou_threshold))
    return out


GroundTruth = Mapping[int, Sequence[tuple[Sequence[float], int]]]


def _all_points_ap(tp: np.ndarray, n_gt: int) -> float:
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(
    detections: Sequence[Detection],
    ground_truth: GroundTruth,
    composition: int,
    iou_thresholds: Sequence[float] = COCO_IOUS,
) -> float | None:
    """AP (percent) of one composition, averaged over the IoU sweep; None without GT."""
    gt_boxes = {img: [b for b, c in anns if c == composition] for img, anns in ground_truth.items()}
    n_gt = sum(len(v) for v in gt_boxes.values())
    if n_gt == 0:
        return None
    dets = [d for d in detections if d.composition == composition]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    dets = [dets[i] for i in order]
    aps = []
    for thr in iou_thresholds:
        used = {img: [False] * len(b) for img, b in gt_boxes.items()}
        tp = np.zeros(len(dets))
        for k, d in enumerate(dets):
            best, best_j = thr, -1
            for j, g in enumerate(gt_boxes.get(d.image_id, ())):
                if used[d.image_id][j]:
                    continue
                iou = box_iou(d.box, g)
                if iou >= best:
                    best, best_j = iou, j
            if best_j >= 0:
                used[d.image_id][best_j] = True
                tp[k] = 1.0
        aps.append(_all_points_ap(tp, n_gt))
    return 100.0 * float(np.mean(aps))


def harmonic_mean(a: float, b: float) -> float:
    if a < 0 or b < 0:
        raise ValueError("harmonic mean needs non-negative inputs")
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


def harmonic_mean_n(*values: float) -> float:
    if any(v < 0 for v in values):
        raise ValueError("harmonic mean needs non-negative inputs")
    if any(v == 0 for v in values):
        return 0.0
    return len(values) / sum(1.0 / v for v in values)


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class EvalReport:
    per_composition: dict[str, float | None]
    mAP: dict[str, float | None]
    hm: float | None
    hm3: float | None
    counts: dict[str, int] = field(default_factory=dict)
    roles: dict[str, list[str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def nms_map(
    detections: Iterable[Detection],
    ground_truth: GroundTruth,
    split,
    iou_nms: float = 0.5,
    iou_sweep: Sequence[float] = COCO_IOUS,
    apply_nms: bool = True,
) -> EvalReport:
    """Per-composition AP after per-image class-agnostic NMS, aggregated by split role."""
    if not any(len(v) for v in ground_truth.values()):
        raise ValueError("ground truth is empty")
    dets = list(detections)
    kept = nms_per_image(dets, iou_nms) if apply_nms else dets
    space = split.space
    by_comp = {d for anns in ground_truth.values() for _, d in anns}
    ap = {cid: (average_precision(kept, ground_truth, cid, iou_sweep) if cid in by_comp else None)
          for cid in range(len(space))}
    roles = split.roles()
    mAP = {role: _mean(ap[c] for c in ids) for role, ids in roles.items()}
    mAP["overall"] = _mean(ap.values())
    hm = None
    if mAP["seen"] is not None and mAP["unseen"] is not None:
        hm = harmonic_mean(mAP["seen"], mAP["unseen"])
    hm3 = None
    if all(mAP[r] is not None for r in ("pretrain", "increment", "unseen")):
        hm3 = harmonic_mean_n(mAP["pretrain"], mAP["increment"], mAP["unseen"])
    counts = {"gt": sum(len(v) for v in ground_truth.values()), "detections": len(dets), "after_nms": len(kept)}
    return EvalReport(
        per_composition={space.name(c): v for c, v in ap.items()},
        mAP=mAP,
        hm=hm,
        hm3=hm3,
        counts=counts,
        roles={r: space.names(ids) for r, ids in roles.items()},
    )


@dataclass
class ConfusionMatrix:
    """Rows: ground truth; columns: predicted composition, last column ``missed``."""

    counts: np.ndarray
    names: list[str]

    def normalized(self) -> np.ndarray:
        matched = self.counts[:, :-1].astype(np.float64)
        totals = matched.sum(axis=1, keepdims=True)
        return np.divide(matched, totals, out=np.zeros_like(matched), where=totals > 0)

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gt\\pred", *self.names, "missed"])
        for name, row in zip(self.names, self.counts):
            w.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        rows = list(csv.reader(lines))
        names = rows[0][1:-1]
        counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
        return cls(counts.reshape(len(names), len(names) + 1), names)

    def write(self, path: str | Path, comment: str | None = None) -> None:
        Path(path).write_text(self.to_csv(comment))

    @classmethod
    def read(cls, path: str | Path) -> "ConfusionMatrix":
        return cls.from_csv(Path(path).read_text())


def confusion_matrix(
    detections: Iterable[Detection],
    ground_truth: GroundTruth,
    names: Sequence[str],
    iou_match: float = 0.5,
) -> ConfusionMatrix:
    n = len(names)
    counts = np.zeros((n, n + 1), dtype=np.int64)
    by_image: dict[int, list[Detection]] = {}
    for d in detections:
        by_image.setdefault(d.image_id, []).append(d)
    for img, anns in ground_truth.items():
        cands = by_image.get(img, [])
        for box, comp in anns:
            best = None
            for d in cands:
                if box_iou(d.box, box) >= iou_match and (best is None or d.score > best.score):
                    best = d
            counts[comp, n if best is None else best.composition] += 1
    return ConfusionMatrix(counts, list(names))


def load_detections(path: str | Path) -> list[Detection]:
    return [Detection(int(r["image_id"]), tuple(float(v) for v in r["bbox"]), int(r["category_id"]), float(r["score"]))
            for r in json.loads(Path(path).read_text())]


def save_detections(detections: Iterable[Detection], path: str | Path) -> None:
    Path(path).write_text(json.dumps([d.to_json() for d in detections]) + "\n")


def load_ground_truth(coco: dict) -> dict[int, list[tuple[tuple, int]]]:
    gt: dict[int, list] = {m["id"]: [] for m in coco["images"]}
    for a in coco["annotations"]:
        gt[a["image_id"]].append((tuple(a["bbox"]), int(a["category_id"])))
    return gt
