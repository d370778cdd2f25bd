"""Attributes, objects, the composition space they span, and its splits."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable


class SpaceError(ValueError):
    """Invalid primitive lists or composition references."""


class SplitError(ValueError):
    pass


class CoverageError(SplitError):
    pass


@dataclass(frozen=True)
class Attribute:
    id: int
    name: str


@dataclass(frozen=True)
class ObjectClass:
    id: int
    name: str


@dataclass(frozen=True, order=True)
class Composition:
    attribute: int
    object: int


def _check_names(kind: str, names: Iterable[str]) -> tuple[str, ...]:
    names = tuple(names)
    if not names:
        raise SpaceError(f"{kind} list is empty")
    for n in names:
        if not isinstance(n, str) or not n or n != n.lower() or " " in n:
            raise SpaceError(f"invalid {kind} name {n!r}: must be a non-empty lowercase word")
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise SpaceError(f"duplicate {kind} names: {dup}")
    return names


@dataclass(frozen=True)
class CompositionSpace:
    """C = A x O with canonical id ``attribute * |O| + object``."""

    attributes: tuple[Attribute, ...]
    objects: tuple[ObjectClass, ...]

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def __len__(self) -> int:
        return self.n_attributes * self.n_objects

    @property
    def compositions(self) -> list[Composition]:
        return [self.decompose(i) for i in range(len(self))]

    def compose(self, attribute: int, obj: int) -> int:
        if not (0 <= attribute < self.n_attributes and 0 <= obj < self.n_objects):
            raise SpaceError(f"primitive ids ({attribute}, {obj}) out of range")
        return attribute * self.n_objects + obj

    def decompose(self, comp_id: int) -> Composition:
        if not 0 <= comp_id < len(self):
            raise SpaceError(f"composition id {comp_id} outside 0..{len(self) - 1}")
        a, o = divmod(int(comp_id), self.n_objects)
        return Composition(a, o)

    def id_of(self, comp: Composition) -> int:
        return self.compose(comp.attribute, comp.object)

    def name(self, comp_id: int) -> str:
        c = self.decompose(comp_id)
        return f"{self.attributes[c.attribute].name} {self.objects[c.object].name}"

    def names(self, comp_ids: Iterable[int] | None = None) -> list[str]:
        ids = range(len(self)) if comp_ids is None else comp_ids
        return [self.name(i) for i in ids]

    def attribute_id(self, name: str) -> int:
        for a in self.attributes:
            if a.name == name:
                return a.id
        raise SpaceError(f"unknown attribute {name!r}")

    def object_id(self, name: str) -> int:
        for o in self.objects:
            if o.name == name:
                return o.id
        raise SpaceError(f"unknown object {name!r}")

    def parse(self, text: str) -> int:
        """Resolve an ``"attribute object"`` phrase to its composition id."""
        parts = text.split()
        if len(parts) != 2:
            raise SpaceError(f"composition {text!r} is not of the form 'attribute object'")
        return self.compose(self.attribute_id(parts[0]), self.object_id(parts[1]))

    def fingerprint(self) -> str:
        payload = json.dumps(
            {"attributes": [a.name for a in self.attributes], "objects": [o.name for o in self.objects]},
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def build_space(attributes: Iterable[str], objects: Iterable[str]) -> CompositionSpace:
    attrs = _check_names("attribute", attributes)
    objs = _check_names("object", objects)
    return CompositionSpace(
        tuple(Attribute(i, n) for i, n in enumerate(attrs)),
        tuple(ObjectClass(i, n) for i, n in enumerate(objs)),
    )


def decompose(space: CompositionSpace, comp_id: int) -> tuple[int, int]:
    c = space.decompose(comp_id)
    return c.attribute, c.object


@dataclass(frozen=True)
class SplitSpec:
    space: CompositionSpace
    pretrain: frozenset[int]
    increment: frozenset[int] = field(default_factory=frozenset)

    @property
    def seen(self) -> frozenset[int]:
        return self.pretrain | self.increment

    @property
    def unseen(self) -> frozenset[int]:
        return frozenset(range(len(self.space))) - self.seen

    def roles(self) -> dict[str, list[int]]:
        """Sorted composition ids per split role."""
        return {
            "seen": sorted(self.seen),
            "unseen": sorted(self.unseen),
            "pretrain": sorted(self.pretrain),
            "increment": sorted(self.increment),
        }

    def role_of(self, comp_id: int) -> str:
        if comp_id in self.pretrain:
            return "pretrain"
        if comp_id in self.increment:
            return "increment"
        return "unseen"

    def with_increment(self, increment: Iterable[int]) -> "SplitSpec":
        return make_split(self.space, self.pretrain, increment)


def make_split(space: CompositionSpace, pretrain: Iterable[int], increment: Iterable[int] = ()) -> SplitSpec:
    p = frozenset(int(c) for c in pretrain)
    i = frozenset(int(c) for c in increment)
    for c in p | i:
        space.decompose(c)
    overlap = p & i
    if overlap:
        raise SplitError(f"pretrain and increment overlap on {space.names(sorted(overlap))}")
    seen_attrs = {space.decompose(c).attribute for c in p}
    seen_objs = {space.decompose(c).object for c in p}
    for a in space.attributes:
        if a.id not in seen_attrs:
            raise CoverageError(f"attribute {a.name!r} unseen in the pretrain set")
    for o in space.objects:
        if o.id not in seen_objs:
            raise CoverageError(f"object {o.name!r} unseen in the pretrain set")
    return SplitSpec(space, p, i)


# -- manifest --------------------------------------------------------------

def manifest_dict(split: SplitSpec) -> dict:
    space = split.space
    return {
        "attributes": [a.name for a in space.attributes],
        "objects": [o.name for o in space.objects],
        "splits": {
            "pretrain": space.names(sorted(split.pretrain)),
            "increment": space.names(sorted(split.increment)),
        },
    }


def split_from_manifest(doc: dict) -> SplitSpec:
    try:
        space = build_space(doc["attributes"], doc["objects"])
        splits = doc.get("splits", {})
        pretrain = [space.parse(s) for s in splits["pretrain"]]
        increment = [space.parse(s) for s in splits.get("increment", [])]
    except KeyError as exc:
        raise SpaceError(f"manifest missing key {exc}") from None
    return make_split(space, pretrain, increment)


def load_manifest(path: str | Path) -> SplitSpec:
    path = Path(path)
    if not path.is_file():
        raise SpaceError(f"manifest {path} not found")
    return split_from_manifest(json.loads(path.read_text()))


def save_manifest(split: SplitSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest_dict(split), indent=2) + "\n")


DEFAULT_ATTRIBUTES = ("blue", "red", "green", "purple", "brown", "yellow")
DEFAULT_OBJECTS = ("cube", "cylinder", "sphere")
DEFAULT_PRETRAIN = (
    "red cube",
    "blue cube",
    "green sphere",
    "purple sphere",
    "brown cylinder",
    "yellow cylinder",
)


def default_split() -> SplitSpec:
    space = build_space(DEFAULT_ATTRIBUTES, DEFAULT_OBJECTS)
    return make_split(space, [space.parse(s) for s in DEFAULT_PRETRAIN])
