"""Toy open-vocabulary detector with trainable primitive tokens.

Everything except the auxiliary attribute/object tokens (and optional
per-class prompt tokens) is frozen and regenerated from fixed seeds:

* ``Featurizer``: box crop -> hand-built color/shape statistics -> random projection -> unit vector
* ``ComposeMap``: class phrase token mean -> R^d
* ``FunctionWordTable``: embeddings for the closed prompt vocabulary

A class logit is ``region_feature . class_embedding / tau``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .compspace import CompositionSpace, manifest_dict, split_from_manifest
from .evalkit import Detection
from .scenegen import BACKGROUND, foreground_mask

FUNCTION_WORDS = ("is", "not", "but", "a", "an", "the")
CROP = 32
GRID = 4
HUE_BINS = 12
N_RAW = 3 + GRID * GRID + HUE_BINS + 6 + 12
# relative salience of the descriptor blocks; shape outweighs color like an object-biased detector
BLOCK_WEIGHTS = {"geometry": 3.0, "coverage": 1.5, "hue": 1.0, "color": 1.0, "quads": 1.0}


class CheckpointError(ValueError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@dataclass
class TokenTable:
    attr: np.ndarray
    obj: np.ndarray
    attr_base: np.ndarray
    obj_base: np.ndarray
    seed: int = 0

    @property
    def d(self) -> int:
        return self.attr.shape[1]

    @property
    def n_params(self) -> int:
        return self.attr.size + self.obj.size

    def copy(self) -> "TokenTable":
        # base arrays are read-only and shared
        return TokenTable(self.attr.copy(), self.obj.copy(), self.attr_base, self.obj_base, self.seed)


def init_tokens(space: CompositionSpace, d: int, seed: int) -> TokenTable:
    if d < 8:
        raise ValueError(f"embedding dimension must be >= 8, got {d}")
    rng = np.random.default_rng(seed)
    attr = _unit_rows(rng.normal(0.0, 1.0 / np.sqrt(d), size=(space.n_attributes, d)))
    obj = _unit_rows(rng.normal(0.0, 1.0 / np.sqrt(d), size=(space.n_objects, d)))
    return TokenTable(attr, obj, _frozen(attr), _frozen(obj), seed)


class FunctionWordTable:
    def __init__(self, d: int, seed: int, vectors: np.ndarray | None = None):
        self.d, self.seed = d, seed
        if vectors is None:
            rng = np.random.default_rng([seed, 0xF0])
            vectors = _unit_rows(rng.normal(0.0, 1.0 / np.sqrt(d), size=(len(FUNCTION_WORDS), d)))
        self.vectors = _frozen(vectors)

    def __contains__(self, word: str) -> bool:
        return word in FUNCTION_WORDS

    def __getitem__(self, word: str) -> np.ndarray:
        return self.vectors[FUNCTION_WORDS.index(word)]


class ComposeMap:
    def __init__(self, d: int, seed: int, matrix: np.ndarray | None = None):
        self.d, self.seed = d, seed
        if matrix is None:
            rng = np.random.default_rng([seed, 0xC0])
            matrix = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
        self.matrix = _frozen(matrix)

    def __call__(self, mean_tokens: np.ndarray) -> np.ndarray:
        return mean_tokens @ self.matrix.T


def _hue_histogram(rgb: np.ndarray, bins: int = HUE_BINS) -> np.ndarray:
    """Soft (triangular) histogram of hue over the given pixels, weighted by chroma."""
    if len(rgb) == 0:
        return np.zeros(bins)
    mx, mn = rgb.max(axis=1), rgb.min(axis=1)
    chroma = mx - mn
    r, g, b = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    safe = np.where(chroma > 0, chroma, 1.0)
    hue = np.where(mx == r, ((g - b) / safe) % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4))
    pos = hue / 6.0 * bins
    lo = np.floor(pos).astype(int) % bins
    frac = pos - np.floor(pos)
    hist = np.bincount(lo, weights=(1 - frac) * chroma, minlength=bins)
    hist += np.bincount((lo + 1) % bins, weights=frac * chroma, minlength=bins)
    total = hist.sum()
    return hist / total if total > 0 else hist


def crop_statistics(image: np.ndarray, box: Sequence[int]) -> np.ndarray:
    """Raw descriptor of one box (before the random projection).

    Blocks: bias, geometry (fill, log aspect), 4x4 foreground coverage,
    foreground hue histogram, foreground mean/std color, 2x2 patch colors.
    """
    x, y, w, h = (int(v) for v in box)
    rows = y + ((np.arange(CROP) + 0.5) * h / CROP).astype(int)
    cols = x + ((np.arange(CROP) + 0.5) * w / CROP).astype(int)
    patch = image[np.ix_(rows, cols)]
    delta = (patch.astype(np.float64) - BACKGROUND) / 128.0
    fg = foreground_mask(patch)
    cell = CROP // GRID
    coverage = fg.reshape(GRID, cell, GRID, cell).mean(axis=(1, 3)).ravel()
    fg_rgb = patch[fg].astype(np.float64) / 255.0
    fg_mean = fg_rgb.mean(axis=0) if len(fg_rgb) else np.zeros(3)
    fg_std = fg_rgb.std(axis=0) if len(fg_rgb) else np.zeros(3)
    half = CROP // 2
    quads = delta.reshape(2, half, 2, half, 3).mean(axis=(1, 3)).ravel()
    bw = BLOCK_WEIGHTS
    return np.concatenate([
        [1.0],
        bw["geometry"] * np.array([fg.mean(), np.log(h / w)]),
        bw["coverage"] * coverage,
        bw["hue"] * _hue_histogram(fg_rgb),
        bw["color"] * np.concatenate([fg_mean - 0.5, fg_std]),
        bw["quads"] * quads,
    ])


class Featurizer:
    """Frozen random projection of crop statistics to unit vectors in R^d."""

    def __init__(self, d: int, seed: int, projection: np.ndarray | None = None):
        self.d, self.seed = d, seed
        if projection is None:
            rng = np.random.default_rng([seed, 0xFE])
            projection = rng.normal(0.0, 1.0 / np.sqrt(N_RAW), size=(d, N_RAW))
        self.projection = _frozen(projection)

    def __call__(self, image: np.ndarray, boxes: Sequence[Sequence[int]]) -> np.ndarray:
        if len(boxes) == 0:
            return np.zeros((0, self.d))
        raw = np.stack([crop_statistics(image, b) for b in boxes])
        f = raw @ self.projection.T
        return f / np.linalg.norm(f, axis=1, keepdims=True)


@dataclass
class PromptSlot:
    owner: int
    tokens: np.ndarray
    init_text: str

    def __post_init__(self):
        n_words = len(self.init_text.split())
        if self.tokens.shape[0] != n_words:
            raise ValueError(f"prompt has {self.tokens.shape[0]} tokens but init text has {n_words} words")


def compose_embedding(
    table: TokenTable,
    space: CompositionSpace,
    comp_id: int,
    cmap: ComposeMap,
    prompt: PromptSlot | None = None,
) -> np.ndarray:
    c = space.decompose(comp_id)
    parts = [table.attr[c.attribute], table.obj[c.object]]
    if prompt is not None and len(prompt.tokens):
        parts = list(prompt.tokens) + parts
    return cmap(np.mean(parts, axis=0))


def region_logits(features: np.ndarray, embeddings: np.ndarray, tau: float) -> np.ndarray:
    return features @ embeddings.T / tau


@dataclass
class RegionScore:
    box: tuple[int, int, int, int]
    logits: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        return sigmoid(self.logits)


@dataclass
class TokenDetector:
    space: CompositionSpace
    table: TokenTable
    featurizer: Featurizer
    cmap: ComposeMap
    words: FunctionWordTable
    tau: float
    prompts: dict[int, PromptSlot] = field(default_factory=dict)
    backbone_seed: int = 0
    manifest: dict | None = None

    @classmethod
    def create(cls, space: CompositionSpace, d: int = 64, seed: int = 0, backbone_seed: int = 0,
               manifest: dict | None = None) -> "TokenDetector":
        return cls(
            space=space,
            table=init_tokens(space, d, seed),
            featurizer=Featurizer(d, backbone_seed),
            cmap=ComposeMap(d, backbone_seed),
            words=FunctionWordTable(d, backbone_seed),
            tau=10.0 / np.sqrt(d),
            backbone_seed=backbone_seed,
            manifest=manifest,
        )

    @property
    def d(self) -> int:
        return self.table.d

    def copy(self) -> "TokenDetector":
        new = copy.copy(self)
        new.table = self.table.copy()
        new.prompts = {k: PromptSlot(p.owner, p.tokens.copy(), p.init_text) for k, p in self.prompts.items()}
        return new

    def trainable_count(self) -> int:
        return self.table.n_params + sum(p.tokens.size for p in self.prompts.values())

    # -- class embeddings --------------------------------------------------

    def _token_means(self, class_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        means = np.empty((len(class_ids), self.d))
        counts = np.empty(len(class_ids))
        for k, cid in enumerate(class_ids):
            c = self.space.decompose(cid)
            total = self.table.attr[c.attribute] + self.table.obj[c.object]
            n = 2
            p = self.prompts.get(cid)
            if p is not None and len(p.tokens):
                total = total + p.tokens.sum(axis=0)
                n += len(p.tokens)
            means[k] = total / n
            counts[k] = n
        return means, counts

    def class_embeddings(self, class_ids: Sequence[int] | None = None) -> np.ndarray:
        ids = range(len(self.space)) if class_ids is None else class_ids
        means, _ = self._token_means(list(ids))
        return self.cmap(means)

    def embedding_backward(self, grad_emb: np.ndarray, class_ids: Sequence[int]) -> dict[str, np.ndarray]:
        """Pull d(loss)/d(class embeddings) back onto the trainable token arrays."""
        _, counts = self._token_means(class_ids)
        g_mean = (grad_emb @ self.cmap.matrix) / counts[:, None]
        grads = {"attr": np.zeros_like(self.table.attr), "obj": np.zeros_like(self.table.obj)}
        for k, cid in enumerate(class_ids):
            c = self.space.decompose(cid)
            grads["attr"][c.attribute] += g_mean[k]
            grads["obj"][c.object] += g_mean[k]
            p = self.prompts.get(cid)
            if p is not None and len(p.tokens):
                key = f"prompt/{cid}"
                grads[key] = grads.get(key, np.zeros_like(p.tokens)) + g_mean[k]
        return grads

    # -- scoring -------------------------------------------------------------

    def score_features(self, features: np.ndarray, class_ids: Sequence[int] | None = None) -> np.ndarray:
        return region_logits(features, self.class_embeddings(class_ids), self.tau)

    def score_regions(self, image: np.ndarray, boxes: Sequence, class_ids: Sequence[int] | None = None) -> list[RegionScore]:
        if len(boxes) == 0:
            return []
        logits = self.score_features(self.featurizer(image, boxes), class_ids)
        return [RegionScore(tuple(int(v) for v in b), row) for b, row in zip(boxes, logits)]

    def predict(self, image: np.ndarray, boxes: Sequence | None = None, class_ids: Sequence[int] | None = None,
                score_threshold: float = 0.0, image_id: int = 0) -> list[Detection]:
        """One detection per (box, class) whose probability clears the threshold; no NMS."""
        from .scenegen import blob_propose

        if boxes is None:
            boxes = blob_propose(image)
        ids = list(range(len(self.space))) if class_ids is None else list(class_ids)
        return detections_from_scores(self.score_regions(image, boxes, ids), ids, score_threshold, image_id)

    # -- parameters ----------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"attr": self.table.attr, "obj": self.table.obj}
        for cid, p in sorted(self.prompts.items()):
            params[f"prompt/{cid}"] = p.tokens
        return params

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name == "attr":
            self.table.attr = value
        elif name == "obj":
            self.table.obj = value
        elif name.startswith("prompt/"):
            self.prompts[int(name.split("/", 1)[1])].tokens = value
        else:
            raise KeyError(name)


def detections_from_scores(scores: Iterable[RegionScore], class_ids: Sequence[int], threshold: float,
                           image_id: int = 0) -> list[Detection]:
    out = []
    for rs in scores:
        probs = rs.probabilities
        for k, cid in enumerate(class_ids):
            if probs[k] >= threshold:
                out.append(Detection(image_id, rs.box, int(cid), float(probs[k])))
    return out


# -- checkpoint -----------------------------------------------------------
#
# Layout (all integers little-endian):
#   bytes 0..7    magic b"CZSLCKPT"
#   bytes 8..11   uint32 format version (1)
#   bytes 12..19  uint64 header length N
#   next N bytes  UTF-8 JSON header, keys sorted
#   remainder     raw array payloads, float64 little-endian C-order,
#                 at the offsets (relative to payload start) given in the header

MAGIC = b"CZSLCKPT"
VERSION = 1


def _manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def checkpoint_arrays(model: TokenDetector) -> dict[str, np.ndarray]:
    arrays = {
        "tokens/attr": model.table.attr,
        "tokens/obj": model.table.obj,
        "base/attr": model.table.attr_base,
        "base/obj": model.table.obj_base,
        "frozen/featurizer": model.featurizer.projection,
        "frozen/compose_map": model.cmap.matrix,
        "frozen/function_words": model.words.vectors,
    }
    for cid, p in sorted(model.prompts.items()):
        arrays[f"prompt/{cid}"] = p.tokens
    return arrays


def save_checkpoint(model: TokenDetector, path: str | Path, meta: dict | None = None) -> Path:
    """``meta`` is stored verbatim in the header (run provenance); it must be JSON-serializable."""
    manifest = model.manifest or {
        "attributes": [a.name for a in model.space.attributes],
        "objects": [o.name for o in model.space.objects],
        "splits": {"pretrain": model.space.names(), "increment": []},
    }
    entries, blobs, offset = [], [], 0
    for name, arr in checkpoint_arrays(model).items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "arrays": entries,
        "manifest": manifest,
        "manifest_hash": _manifest_hash(manifest),
        "seeds": {"tokens": model.table.seed, "featurizer": model.featurizer.seed,
                  "compose_map": model.cmap.seed, "function_words": model.words.seed},
        "tau": model.tau,
        "d": model.d,
        "prompts": {str(cid): {"owner": p.owner, "init_text": p.init_text} for cid, p in sorted(model.prompts.items())},
    }
    if meta:
        header["meta"] = meta
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path: str | Path, space: CompositionSpace | None = None) -> TokenDetector:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {exc}") from None
    payload = raw[20 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"array {e['name']} truncated in {path}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=e["dtype"]).astype(np.float64)
        arrays[e["name"]] = arr.reshape(e["shape"])

    split = split_from_manifest(header["manifest"])
    ck_space = split.space
    if space is not None:
        want = {"tokens/attr": (space.n_attributes, header["d"]), "tokens/obj": (space.n_objects, header["d"])}
        for name, shape in want.items():
            if arrays[name].shape != shape:
                raise CheckpointShapeError(f"{name} has shape {arrays[name].shape}, expected {shape}")
        ck_space = space

    seeds = header["seeds"]
    d = header["d"]
    table = TokenTable(arrays["tokens/attr"].copy(), arrays["tokens/obj"].copy(),
                       _frozen(arrays["base/attr"]), _frozen(arrays["base/obj"]), seeds["tokens"])
    model = TokenDetector(
        space=ck_space,
        table=table,
        featurizer=Featurizer(d, seeds["featurizer"], arrays["frozen/featurizer"]),
        cmap=ComposeMap(d, seeds["compose_map"], arrays["frozen/compose_map"]),
        words=FunctionWordTable(d, seeds["function_words"], arrays["frozen/function_words"]),
        tau=header["tau"],
        backbone_seed=seeds["featurizer"],
        manifest=header["manifest"],
    )
    for key, meta in header["prompts"].items():
        model.prompts[int(key)] = PromptSlot(meta["owner"], arrays[f"prompt/{key}"].copy(), meta["init_text"])
    return model


def read_checkpoint_header(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    _, hlen = struct.unpack("<IQ", raw[8:20])
    return json.loads(raw[20:20 + hlen].decode())


def frozen_state_matches_seeds(model: TokenDetector) -> bool:
    """Re-derive every frozen array from its seed and compare bitwise."""
    ref_f = Featurizer(model.d, model.featurizer.seed).projection
    ref_m = ComposeMap(model.d, model.cmap.seed).matrix
    ref_w = FunctionWordTable(model.d, model.words.seed).vectors
    return (np.array_equal(ref_f, model.featurizer.projection) and np.array_equal(ref_m, model.cmap.matrix)
            and np.array_equal(ref_w, model.words.vectors))
