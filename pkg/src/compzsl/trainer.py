"""Mini-batch SGD over the trainable token arrays of a ``TokenDetector``."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .complosses import TERMS, LossConfig, smooth_targets, total_loss_grad
from .compspace import SplitSpec
from .evalkit import ConfusionMatrix, Detection, EvalReport, box_iou, confusion_matrix, nms_map, nms_per_image
from .scenegen import Dataset, blob_propose, merge_datasets
from .tokenmodel import RegionScore, TokenDetector, detections_from_scores

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 20.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    bg_ratio: float = 0.0
    match_iou: float = 0.5
    # "all": every composition phrase is a candidate class during training; "seen": only trained ones
    train_classes: str = "all"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.train_classes not in ("all", "seen"):
            raise ValueError(f"train_classes must be 'all' or 'seen', got {self.train_classes!r}")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr, "seed": self.seed,
                "loss": self.loss.to_dict(), "bg_ratio": self.bg_ratio, "match_iou": self.match_iou,
                "train_classes": self.train_classes}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        loss = LossConfig.from_dict(doc.pop("loss", {}))
        return cls(loss=loss, **doc)


@dataclass
class TrainLog:
    seed: int
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def match_regions(
    gt: Sequence[tuple[Sequence[float], int]],
    proposals: Sequence[Sequence[float]],
    iou_threshold: float = 0.5,
) -> tuple[list[tuple[int, int]], list[int]]:
    """Assign each GT box to its best unclaimed proposal.

    Returns ``([(proposal index, composition)], [background proposal indices])``.
    """
    taken: dict[int, int] = {}
    for box, comp in gt:
        best, best_iou = -1, iou_threshold
        for j, p in enumerate(proposals):
            if j in taken:
                continue
            iou = box_iou(box, p)
            if iou > best_iou or (iou == best_iou and best < 0):
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = comp
    matched = sorted(taken.items())
    background = [j for j in range(len(proposals)) if j not in taken]
    return matched, background


def sample_background(gt_boxes, n: int, size: int, rng: np.random.Generator, max_iou: float = 0.3,
                      tries: int = 50) -> list[tuple[int, int, int, int]]:
    out = []
    for _ in range(n):
        for _ in range(tries):
            w, h = (int(v) for v in rng.integers(12, size // 3, size=2))
            x = int(rng.integers(0, size - w))
            y = int(rng.integers(0, size - h))
            box = (x, y, w, h)
            if all(box_iou(box, g) < max_iou for g in gt_boxes):
                out.append(box)
                break
    return out


@dataclass
class ImageRegions:
    features: np.ndarray
    gt: list[int | None]  # composition per row, None = background
    instances: list[int]  # GT compositions in the image


def featurize_proposals(ds: Dataset, model: TokenDetector) -> list[tuple[list, np.ndarray]]:
    """Blob proposals and their frozen features per image (cached on the dataset)."""
    key = ("proposals", model.featurizer.seed, model.d)
    if key not in ds.cache:
        out = []
        for img in ds.images:
            boxes = blob_propose(img)
            out.append((boxes, model.featurizer(img, boxes)))
        ds.cache[key] = out
    return ds.cache[key]


def prepare_regions(ds: Dataset, model: TokenDetector, cfg: TrainConfig) -> list[ImageRegions]:
    props = featurize_proposals(ds, model)
    key = ("train", model.featurizer.seed, model.d, cfg.seed, cfg.bg_ratio, cfg.match_iou)
    if key in ds.cache:
        return ds.cache[key]
    rng = np.random.default_rng([cfg.seed, 0xB6])
    out = []
    for img, anns, (boxes, feats) in zip(ds.images, ds.annotations, props):
        matched, bg = match_regions(anns, boxes, cfg.match_iou)
        rows = [feats[j] for j, _ in matched] + [feats[j] for j in bg]
        gt: list[int | None] = [c for _, c in matched] + [None] * len(bg)
        n_extra = max(0, int(round(cfg.bg_ratio * len(matched))) - len(bg))
        extra = sample_background([b for b, _ in anns], n_extra, img.shape[0], rng)
        if extra:
            rows.extend(model.featurizer(img, extra))
            gt.extend([None] * len(extra))
        feats_arr = np.stack(rows) if rows else np.zeros((0, model.d))
        out.append(ImageRegions(feats_arr, gt, [c for _, c in anns]))
    ds.cache[key] = out
    return out


def full_mask(model: TokenDetector, include_tokens: bool = True, include_prompts: bool = True) -> dict[str, np.ndarray]:
    """Row masks (True = trainable) for every parameter array of ``model``."""
    mask = {}
    for name, arr in model.parameters().items():
        is_prompt = name.startswith("prompt/")
        on = include_prompts if is_prompt else include_tokens
        mask[name] = np.full(arr.shape[0], on)
    return mask


def train(
    model: TokenDetector,
    datasets: Dataset | Sequence[Dataset],
    cfg: TrainConfig,
    mask: dict[str, np.ndarray] | None = None,
    class_ids: Sequence[int] | None = None,
) -> tuple[TokenDetector, TrainLog]:
    """Return a trained copy of ``model``; the input is left untouched."""
    if isinstance(datasets, Dataset):
        ds = datasets
    else:
        if not datasets:
            raise ValueError("no training data")
        ds = datasets[0] if len(datasets) == 1 else merge_datasets(*datasets)
    model = model.copy()
    mask = full_mask(model) if mask is None else mask
    space = model.space
    if class_ids is None:
        if cfg.train_classes == "all":
            class_ids = list(range(len(space)))
        else:
            class_ids = sorted({c for anns in ds.annotations for _, c in anns})
    class_ids = list(class_ids)

    regions = prepare_regions(ds, model, cfg)
    targets = [smooth_targets(r.gt, class_ids, space, cfg.loss.policy) for r in regions]
    rng = np.random.default_rng([cfg.seed, 0x5D])
    tlog = TrainLog(seed=cfg.seed)
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(regions))
        sums = dict.fromkeys(TERMS, 0.0)
        n_steps = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = sorted(int(i) for i in order[start:start + cfg.batch_size])
            feats = np.concatenate([regions[i].features for i in batch])
            if len(feats) == 0:
                continue
            y = np.concatenate([targets[i] for i in batch])
            comps = [c for i in batch for c in regions[i].instances]
            emb = model.class_embeddings(class_ids)
            logits = feats @ emb.T / model.tau
            br, g = total_loss_grad(logits, y, model.table.attr, model.table.obj, comps, space,
                                    cfg.loss.weights, cfg.loss.kernel)
            for term, v in br.as_dict().items():
                if not math.isfinite(v):
                    raise TrainingError(f"non-finite {term} loss ({v}) at epoch {epoch}, step {step}")
            grads = model.embedding_backward(g["logits"].T @ feats / model.tau, class_ids)
            grads["attr"] = grads["attr"] + g["attr"]
            grads["obj"] = grads["obj"] + g["obj"]
            for name, value in model.parameters().items():
                rows = mask.get(name)
                if rows is None or not rows.any() or name not in grads:
                    continue
                model.set_parameter(name, value - cfg.lr * grads[name] * rows[:, None])
            for term, v in br.as_dict().items():
                if term in sums:
                    sums[term] += v
            n_steps += 1
            step += 1
        rec = {term: sums[term] / max(n_steps, 1) for term in TERMS}
        rec["total"] = sum(rec[t] for t in TERMS)
        rec["epoch"] = epoch
        tlog.epochs.append(rec)
    tlog.wall_time = time.perf_counter() - t0
    if tlog.epochs:
        log.info("trained %d epochs in %.1fs, final total loss %.4f", cfg.epochs, tlog.wall_time, tlog.epochs[-1]["total"])
    return model, tlog


def detect_dataset(model: TokenDetector, ds: Dataset, class_ids: Sequence[int] | None = None,
                   score_threshold: float = 0.0) -> list[Detection]:
    """Score every blob proposal of every image; raw multi-label detections, no NMS."""
    ids = list(range(len(model.space))) if class_ids is None else list(class_ids)
    dets: list[Detection] = []
    for iid, (boxes, feats) in zip(ds.image_ids, featurize_proposals(ds, model)):
        if not len(boxes):
            continue
        logits = model.score_features(feats, ids)
        scores = [RegionScore(tuple(int(v) for v in b), row) for b, row in zip(boxes, logits)]
        dets.extend(detections_from_scores(scores, ids, score_threshold, iid))
    return dets


def evaluate_model(model: TokenDetector, ds: Dataset, split: SplitSpec,
                   iou_nms: float = 0.5) -> tuple[EvalReport, ConfusionMatrix]:
    """NMS mAP report plus the confusion matrix of the post-NMS detections."""
    dets = detect_dataset(model, ds)
    gt = ds.ground_truth()
    report = nms_map(dets, gt, split, iou_nms=iou_nms)
    cm = confusion_matrix(nms_per_image(dets, iou_nms), gt, split.space.names(range(len(split.space))))
    return report, cm
