"""Deterministic 2D CLEVR-style scenes with COCO-style annotations.

Shapes are flat solid-color silhouettes on a uniform gray background:
cube -> (slightly rotated) square, sphere -> disc, cylinder -> upright capsule.
Annotation boxes are the exact extents of the drawn pixel masks.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .compspace import CompositionSpace, SpaceError, SplitSpec, manifest_dict, split_from_manifest
from .evalkit import box_iou

log = logging.getLogger(__name__)

BACKGROUND = np.array([128, 128, 128], dtype=np.int16)

PALETTE: dict[str, tuple[int, int, int]] = {
    "blue": (42, 75, 215),
    "red": (205, 35, 35),
    "green": (30, 160, 60),
    "purple": (130, 40, 170),
    "brown": (120, 70, 25),
    "yellow": (235, 215, 35),
}
COLOR_JITTER = 10
SHAPES = ("cube", "sphere", "cylinder")

# foreground = any channel differs from the background by more than this
FG_THRESHOLD = 15
_EIGHT = np.ones((3, 3), dtype=bool)

Box = tuple[int, int, int, int]


class PlacementError(RuntimeError):
    def __init__(self, msg: str, seed: int):
        super().__init__(f"{msg} (seed={seed})")
        self.seed = seed


@dataclass
class SceneObject:
    composition: int
    box: Box
    center: tuple[float, float]
    scale: float
    rotation: float
    color: tuple[int, int, int]


@dataclass
class Scene:
    image: np.ndarray
    objects: list[SceneObject]
    seed: int


@dataclass
class DatasetSpec:
    role: str
    shots: int
    compositions: Sequence[int]
    image_size: int = 128
    seed: int = 0
    max_objects: int = 4
    overlap_cap: float = 0.1

    def validate(self, space: CompositionSpace) -> None:
        if self.shots < 1:
            raise SpaceError(f"shots must be >= 1, got {self.shots}")
        if not self.compositions:
            raise SpaceError("dataset spec has no compositions")
        if self.image_size < 64:
            raise SpaceError(f"image size must be >= 64, got {self.image_size}")
        if self.max_objects < 1:
            raise SpaceError("max_objects must be >= 1")
        for c in self.compositions:
            space.decompose(c)
        for c in self.compositions:
            a = space.attributes[space.decompose(c).attribute].name
            o = space.objects[space.decompose(c).object].name
            if a not in PALETTE:
                raise SpaceError(f"no palette color for attribute {a!r}")
            if o not in SHAPES:
                raise SpaceError(f"no drawable shape for object {o!r}")


def shape_mask(shape: str, center: tuple[float, float], scale: float, rotation: float, size: int) -> np.ndarray:
    """Boolean H x W mask sampled at pixel centers."""
    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs + 0.5 - center[0]
    dy = ys + 0.5 - center[1]
    if shape == "sphere":
        return dx * dx + dy * dy <= (scale / 2) ** 2
    if shape == "cube":
        c, s = np.cos(rotation), np.sin(rotation)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (np.abs(u) <= scale / 2) & (np.abs(v) <= scale / 2)
    if shape == "cylinder":
        r = scale / 2
        half_straight = 0.75 * scale  # total height = 1.5 * width + width
        cy = np.clip(dy, -half_straight, half_straight)
        return dx * dx + (dy - cy) ** 2 <= r * r
    raise SpaceError(f"unknown shape {shape!r}")


def _half_extent(shape: str, scale: float) -> float:
    if shape == "cylinder":
        return 0.75 * scale + scale / 2
    return scale / np.sqrt(2) if shape == "cube" else scale / 2


def mask_box(mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)


def render_scene(
    space: CompositionSpace,
    compositions: Sequence[int],
    seed: int,
    image_size: int = 128,
    overlap_cap: float = 0.1,
    max_tries: int = 200,
) -> Scene:
    """Render one scene holding exactly ``compositions`` (one object each)."""
    rng = np.random.default_rng(seed)
    image = np.empty((image_size, image_size, 3), dtype=np.uint8)
    image[:] = BACKGROUND.astype(np.uint8)
    occupied = np.zeros((image_size, image_size), dtype=bool)
    objects: list[SceneObject] = []
    lo_scale, hi_scale = image_size * 0.12, image_size * 0.22
    for comp in compositions:
        c = space.decompose(comp)
        color_name = space.attributes[c.attribute].name
        shape = space.objects[c.object].name
        for _ in range(max_tries):
            scale = float(rng.uniform(lo_scale, hi_scale))
            if shape == "cylinder":
                scale *= 0.75
            rotation = float(np.deg2rad(rng.uniform(-15, 15))) if shape == "cube" else 0.0
            ext = _half_extent(shape, scale) + 1
            if shape == "cylinder":
                cx = float(rng.uniform(scale / 2 + 1, image_size - scale / 2 - 1))
            else:
                cx = float(rng.uniform(ext, image_size - ext))
            cy = float(rng.uniform(ext, image_size - ext))
            mask = shape_mask(shape, (cx, cy), scale, rotation, image_size)
            if mask.sum() < 20:
                continue
            box = mask_box(mask)
            if any(box_iou(box, o.box) > overlap_cap for o in objects):
                continue
            if (ndimage.binary_dilation(mask, structure=_EIGHT) & occupied).any():
                continue
            break
        else:
            raise PlacementError(f"could not place {space.name(comp)!r} after {max_tries} tries", seed)
        base = np.array(PALETTE[color_name], dtype=np.int16)
        col = np.clip(base + rng.integers(-COLOR_JITTER, COLOR_JITTER + 1, size=3), 0, 255).astype(np.uint8)
        image[mask] = col
        occupied |= mask
        objects.append(SceneObject(int(comp), box, (cx, cy), scale, rotation, tuple(int(v) for v in col)))
    return Scene(image, objects, int(seed))


def foreground_mask(image: np.ndarray) -> np.ndarray:
    return (np.abs(image.astype(np.int16) - BACKGROUND).max(axis=2) > FG_THRESHOLD)


def blob_propose(image: np.ndarray, min_area: int = 20) -> list[Box]:
    """Class-agnostic boxes from 8-connected foreground components.

    Ordered by pixel area (descending), then x, then y.
    """
    labels, n = ndimage.label(foreground_mask(image), structure=_EIGHT)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    found = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or areas[idx] < min_area:
            continue
        ys, xs = sl
        box = (int(xs.start), int(ys.start), int(xs.stop - xs.start), int(ys.stop - ys.start))
        found.append((-int(areas[idx]), box[0], box[1], box))
    found.sort(key=lambda t: t[:3])
    return [t[3] for t in found]


# -- datasets ----------------------------------------------------------------

@dataclass
class Dataset:
    split: SplitSpec
    spec: DatasetSpec
    images: list[np.ndarray]
    # per image: list of (box, composition id)
    annotations: list[list[tuple[Box, int]]]
    image_ids: list[int] = field(default_factory=list)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.image_ids:
            self.image_ids = list(range(len(self.images)))

    @property
    def space(self) -> CompositionSpace:
        return self.split.space

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_instances(self) -> int:
        return sum(len(a) for a in self.annotations)

    def instance_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for anns in self.annotations:
            for _, c in anns:
                counts[c] = counts.get(c, 0) + 1
        return dict(sorted(counts.items()))

    def ground_truth(self) -> dict[int, list[tuple[Box, int]]]:
        return {i: list(a) for i, a in zip(self.image_ids, self.annotations)}


def _scene_layout(spec: DatasetSpec) -> list[list[int]]:
    rng = np.random.default_rng(spec.seed)
    instances = np.repeat(np.asarray(sorted(spec.compositions), dtype=np.int64), spec.shots)
    rng.shuffle(instances)
    scenes, i = [], 0
    while i < len(instances):
        k = int(rng.integers(1, spec.max_objects + 1))
        scenes.append([int(c) for c in instances[i:i + k]])
        i += k
    return scenes


def build_dataset(split: SplitSpec, spec: DatasetSpec) -> Dataset:
    """Render every scene of ``spec`` in memory; per-image seed is ``seed ^ index``."""
    spec.validate(split.space)
    images, annotations = [], []
    for idx, comps in enumerate(_scene_layout(spec)):
        scene = render_scene(split.space, comps, spec.seed ^ idx, spec.image_size, spec.overlap_cap)
        images.append(scene.image)
        annotations.append([(o.box, o.composition) for o in scene.objects])
    return Dataset(split, spec, images, annotations)


def coco_dict(ds: Dataset) -> dict:
    space = ds.space
    images, anns = [], []
    ann_id = 0
    for image_id, img, objs in zip(ds.image_ids, ds.images, ds.annotations):
        images.append({"id": image_id, "file_name": f"images/{image_id:06d}.png",
                       "width": int(img.shape[1]), "height": int(img.shape[0])})
        for box, comp in objs:
            anns.append({"id": ann_id, "image_id": image_id, "bbox": list(box),
                         "area": box[2] * box[3], "iscrowd": 0, "category_id": comp})
            ann_id += 1
    categories = []
    for cid in range(len(space)):
        c = space.decompose(cid)
        categories.append({"id": cid, "name": space.name(cid), "attribute_id": c.attribute, "object_id": c.object})
    spec = ds.spec
    info = {"role": spec.role, "shots": spec.shots, "compositions": space.names(sorted(spec.compositions)),
            "image_size": spec.image_size, "seed": spec.seed, "max_objects": spec.max_objects,
            "overlap_cap": spec.overlap_cap}
    return {"info": info, "images": images, "annotations": anns, "categories": categories}


def write_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    doc = coco_dict(ds)
    for meta, img in zip(doc["images"], ds.images):
        Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(out / meta["file_name"], format="PNG", optimize=False)
    (out / "annotations.json").write_text(json.dumps(doc, indent=1) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest_dict(ds.split), indent=2) + "\n")
    return out


def generate_dataset(split: SplitSpec, spec: DatasetSpec, out_dir: str | Path) -> Dataset:
    ds = build_dataset(split, spec)
    write_dataset(ds, out_dir)
    log.info("wrote %s dataset: %d images, %d instances -> %s", spec.role, len(ds), ds.n_instances, out_dir)
    return ds


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    ann_file = root / "annotations.json"
    if not ann_file.is_file():
        raise FileNotFoundError(f"no annotations.json under {root}")
    split = split_from_manifest(json.loads((root / "manifest.json").read_text()))
    doc = json.loads(ann_file.read_text())
    info = doc.get("info", {})
    spec = DatasetSpec(
        role=info.get("role", "test"),
        shots=info.get("shots", 1),
        compositions=[split.space.parse(n) for n in info.get("compositions", [])],
        image_size=info.get("image_size", 128),
        seed=info.get("seed", 0),
        max_objects=info.get("max_objects", 4),
        overlap_cap=info.get("overlap_cap", 0.1),
    )
    by_image: dict[int, list] = {m["id"]: [] for m in doc["images"]}
    for a in doc["annotations"]:
        by_image[a["image_id"]].append((tuple(int(v) for v in a["bbox"]), int(a["category_id"])))
    images, anns, ids = [], [], []
    for m in doc["images"]:
        images.append(np.asarray(Image.open(root / m["file_name"]).convert("RGB")))
        anns.append(by_image[m["id"]])
        ids.append(m["id"])
    return Dataset(split, spec, images, anns, ids)


def merge_datasets(*parts: Dataset) -> Dataset:
    """Concatenate datasets, re-numbering image ids in order."""
    images, anns = [], []
    for p in parts:
        images.extend(p.images)
        anns.extend(p.annotations)
    comps = sorted({c for p in parts for c in p.spec.compositions})
    spec = DatasetSpec(role="train", shots=parts[0].spec.shots, compositions=comps,
                       image_size=parts[0].spec.image_size, seed=parts[0].spec.seed)
    return Dataset(parts[-1].split, spec, images, anns)
