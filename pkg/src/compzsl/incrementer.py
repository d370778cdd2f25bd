"""Incremental composition learning: confusion mining, contrastive prompts, tuning regimes."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .compspace import Composition, CompositionSpace, SplitSpec
from .evalkit import ROLES, ConfusionMatrix, EvalReport, harmonic_mean_n
from .scenegen import Dataset
from .tokenmodel import PromptSlot, TokenDetector
from .trainer import TrainConfig, TrainLog, evaluate_model, full_mask, train

log = logging.getLogger(__name__)

COMPONENTS = ("affirmation", "negation", "both")
REGIMES = ("all_tokens", "subset_tokens", "prompt_only")
_REGIME_ALIASES = {"all-tokens": "all_tokens", "all": "all_tokens", "subset-tokens": "subset_tokens",
                   "subset": "subset_tokens", "prompt": "prompt_only", "prompt-only": "prompt_only"}


class IncrementError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusedPair:
    underperformer: Composition  # c_j, the class that gets the prompt
    distractor: Composition  # c_k, what it is mistaken for
    confusion_rate: float

    def __post_init__(self):
        if self.underperformer == self.distractor:
            raise IncrementError("a composition cannot be confused with itself")
        if not 0.0 <= self.confusion_rate <= 1.0:
            raise IncrementError(f"confusion rate {self.confusion_rate} outside [0, 1]")

    def to_dict(self, space: CompositionSpace) -> dict:
        return {"underperformer": space.name(space.id_of(self.underperformer)),
                "distractor": space.name(space.id_of(self.distractor)),
                "rate": self.confusion_rate}

    @classmethod
    def from_dict(cls, doc: dict, space: CompositionSpace) -> "ConfusedPair":
        return cls(space.decompose(space.parse(doc["underperformer"])), space.decompose(space.parse(doc["distractor"])),
                   float(doc["rate"]))


@dataclass(frozen=True)
class TuningRegime:
    kind: str = "prompt_only"
    components: str = "both"

    def __post_init__(self):
        kind = _REGIME_ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in REGIMES:
            raise IncrementError(f"unknown regime {self.kind!r}; expected one of {REGIMES}")
        if self.components not in COMPONENTS:
            raise IncrementError(f"unknown prompt components {self.components!r}; expected one of {COMPONENTS}")

    @property
    def uses_prompts(self) -> bool:
        return self.kind == "prompt_only"


def mine_confusions(cm: ConfusionMatrix | np.ndarray, space: CompositionSpace,
                    threshold: float = 0.2) -> list[ConfusedPair]:
    """Off-diagonal cells whose row-normalized rate reaches ``threshold``, highest rate first."""
    if not 0.0 < threshold:
        raise IncrementError(f"threshold must be positive, got {threshold}")
    if isinstance(cm, ConfusionMatrix):
        rates = cm.normalized()
    else:
        m = np.asarray(cm, dtype=np.float64)
        if m.size == 0:
            return []
        if m.ndim != 2 or m.shape[0] not in (m.shape[1], m.shape[1] - 1):
            raise IncrementError(f"confusion matrix shape {m.shape} is not square (+ optional missed column)")
        m = m[:, : m.shape[0]]
        totals = m.sum(axis=1, keepdims=True)
        rates = np.divide(m, totals, out=np.zeros_like(m), where=totals > 0)
    if rates.size == 0:
        return []
    if rates.shape[0] != len(space):
        raise IncrementError(f"confusion matrix has {rates.shape[0]} rows, space has {len(space)} compositions")
    cells = [(float(rates[j, k]), j, k) for j in range(rates.shape[0]) for k in range(rates.shape[1])
             if j != k and rates[j, k] >= threshold]
    cells.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [ConfusedPair(space.decompose(j), space.decompose(k), r) for r, j, k in cells]


def select_pairs(pairs: Sequence[ConfusedPair], split: SplitSpec, max_pairs: int | None = 2) -> list[ConfusedPair]:
    """One pair per underperformer (its top distractor), skipping already trained underperformers."""
    space = split.space
    chosen: list[ConfusedPair] = []
    seen: set[int] = set()
    for p in pairs:
        j = space.id_of(p.underperformer)
        if j in split.pretrain or j in seen:
            continue
        seen.add(j)
        chosen.append(p)
        if max_pairs is not None and len(chosen) >= max_pairs:
            break
    return chosen


def build_increment_set(pairs: Sequence[ConfusedPair], split: SplitSpec) -> frozenset[int]:
    if not pairs:
        raise IncrementError("cannot build an increment set from zero pairs")
    space = split.space
    out = set()
    for p in pairs:
        for c in (p.underperformer, p.distractor):
            cid = space.id_of(c)
            if cid in split.pretrain:
                log.info("dropping %s from the increment set: already in the pretrain set", space.name(cid))
                continue
            out.add(cid)
    if not out:
        raise IncrementError("every mined composition is already in the pretrain set")
    return frozenset(out)


def contrastive_text(pair: ConfusedPair, space: CompositionSpace, components: str = "both") -> str:
    cj = space.name(space.id_of(pair.underperformer))
    ck = space.name(space.id_of(pair.distractor))
    if components == "both":
        return f"is not {ck} but is {cj}"
    if components == "negation":
        return f"is not {ck}"
    if components == "affirmation":
        return f"is {cj}"
    raise IncrementError(f"unknown prompt components {components!r}")


def _word_vector(model: TokenDetector, word: str) -> np.ndarray:
    if word in model.words:
        return model.words[word]
    space = model.space
    if word in {a.name for a in space.attributes}:
        return model.table.attr[space.attribute_id(word)]
    if word in {o.name for o in space.objects}:
        return model.table.obj[space.object_id(word)]
    raise IncrementError(f"prompt word {word!r} is neither a function word nor a primitive")


def prompt_from_text(model: TokenDetector, owner: int, text: str) -> PromptSlot:
    """Tokens are copies: training them never touches the function table or the token table."""
    words = text.split()
    tokens = np.stack([np.array(_word_vector(model, w), dtype=np.float64) for w in words])
    return PromptSlot(owner, tokens, text)


def build_contrastive_prompt(model: TokenDetector, pair: ConfusedPair, components: str = "both") -> PromptSlot:
    space = model.space
    text = contrastive_text(pair, space, components)
    return prompt_from_text(model, space.id_of(pair.underperformer), text)


def regime_mask(model: TokenDetector, regime: TuningRegime, increment: frozenset[int]) -> dict[str, np.ndarray]:
    if regime.kind == "all_tokens":
        return full_mask(model, include_tokens=True, include_prompts=False)
    if regime.kind == "prompt_only":
        return full_mask(model, include_tokens=False, include_prompts=True)
    mask = full_mask(model, include_tokens=False, include_prompts=False)
    for cid in increment:
        c = model.space.decompose(cid)
        mask["attr"][c.attribute] = True
        mask["obj"][c.object] = True
    return mask


@dataclass
class IncrementPlan:
    pairs: list[ConfusedPair]
    increment: frozenset[int]
    regime: TuningRegime = field(default_factory=TuningRegime)
    threshold: float = 0.2
    source: str = ""

    def prompt_texts(self, space: CompositionSpace) -> dict[str, str]:
        return {space.name(space.id_of(p.underperformer)): contrastive_text(p, space, self.regime.components)
                for p in self.pairs}

    def to_dict(self, space: CompositionSpace) -> dict:
        return {
            "threshold": self.threshold,
            "pairs": [p.to_dict(space) for p in self.pairs],
            "increment": space.names(sorted(self.increment)),
            "regime": self.regime.kind,
            "components": self.regime.components,
            "prompts": self.prompt_texts(space),
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, doc: dict, space: CompositionSpace) -> "IncrementPlan":
        pairs = [ConfusedPair.from_dict(p, space) for p in doc.get("pairs", [])]
        increment = frozenset(space.parse(n) for n in doc.get("increment", []))
        regime = TuningRegime(doc.get("regime", "prompt_only"), doc.get("components", "both"))
        return cls(pairs, increment, regime, float(doc.get("threshold", 0.2)), doc.get("source", ""))

    def write(self, path: str | Path, space: CompositionSpace, extra: dict | None = None) -> None:
        doc = self.to_dict(space)
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path, space: CompositionSpace) -> "IncrementPlan":
        return cls.from_dict(json.loads(Path(path).read_text()), space)


def plan_from_confusions(cm: ConfusionMatrix, split: SplitSpec, threshold: float = 0.2, max_pairs: int | None = 2,
                         regime: TuningRegime | None = None) -> IncrementPlan:
    """Empty plan (with a warning) when nothing clears the threshold."""
    pairs = select_pairs(mine_confusions(cm, split.space, threshold), split, max_pairs)
    if not pairs:
        log.warning("no confused pair at threshold %.3f; the increment plan is empty", threshold)
        return IncrementPlan([], frozenset(), regime or TuningRegime(), threshold)
    return IncrementPlan(pairs, build_increment_set(pairs, split), regime or TuningRegime(), threshold)


def report_deltas(before: EvalReport, after: EvalReport) -> dict:
    """Signed per-split changes plus the three-way HM over pretrain, increment and unseen."""
    if before.roles != after.roles:
        raise IncrementError("reports come from different splits")
    out: dict = {"before": {}, "after": {}, "delta": {}}
    for role in (*ROLES, "overall"):
        b, a = before.mAP.get(role), after.mAP.get(role)
        out["before"][role], out["after"][role] = b, a
        out["delta"][role] = None if a is None or b is None else a - b

    def hm3(r: EvalReport):
        vals = [r.mAP.get(k) for k in ("pretrain", "increment", "unseen")]
        return None if any(v is None for v in vals) else harmonic_mean_n(*vals)

    hb, ha = hm3(before), hm3(after)
    out["before"]["hm3"], out["after"]["hm3"] = hb, ha
    out["delta"]["hm3"] = None if hb is None or ha is None else ha - hb
    return out


@dataclass
class IncrementResult:
    model: TokenDetector
    split: SplitSpec
    before: EvalReport
    after: EvalReport
    deltas: dict
    log: TrainLog
    confusion_before: ConfusionMatrix | None = None
    confusion_after: ConfusionMatrix | None = None


def prepare_model(model: TokenDetector, plan: IncrementPlan) -> TokenDetector:
    """Copy of ``model`` carrying the plan's contrastive prompts (prompt regime only)."""
    out = model.copy()
    if plan.regime.uses_prompts:
        if not plan.pairs:
            raise IncrementError("prompt-only tuning needs at least one mined pair")
        for p in plan.pairs:
            slot = build_contrastive_prompt(out, p, plan.regime.components)
            out.prompts[slot.owner] = slot
    return out


def run_increment(
    model: TokenDetector,
    pretrain: Dataset,
    increment: Dataset,
    test: Dataset,
    plan: IncrementPlan,
    cfg: TrainConfig,
    split: SplitSpec | None = None,
) -> IncrementResult:
    """Tune ``model`` on pretrain + increment data under the plan's regime and report the deltas."""
    if not plan.increment:
        raise IncrementError("increment plan has no compositions")
    base_split = split if split is not None else pretrain.split
    new_split = base_split.with_increment(plan.increment)
    missing = plan.increment - {c for anns in increment.annotations for _, c in anns}
    if missing:
        raise IncrementError(f"increment dataset lacks {model.space.names(sorted(missing))}")
    before, cm_before = evaluate_model(model, test, new_split)
    if cfg.epochs == 0:
        # nothing is tuned, so nothing is attached: the checkpoint stays bitwise equal to the input
        return IncrementResult(model.copy(), new_split, before, before, report_deltas(before, before),
                               TrainLog(seed=cfg.seed), cm_before, cm_before)
    if plan.regime.uses_prompts and not plan.pairs:
        raise IncrementError("prompt-only tuning needs at least one mined pair")
    tuned = prepare_model(model, plan)
    mask = regime_mask(tuned, plan.regime, plan.increment)
    tuned, tlog = train(tuned, [pretrain, increment], cfg, mask=mask)
    after, cm_after = evaluate_model(tuned, test, new_split)
    return IncrementResult(tuned, new_split, before, after, report_deltas(before, after), tlog, cm_before, cm_after)
