"""Classification targets and the auxiliary token-space losses.

Every differentiable loss has a ``*_grad`` twin returning ``(value, grads)``
with closed-form gradients; the plain function returns the value only.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .compspace import CompositionSpace

MODES = ("compositional", "conventional", "none")
DIST_EPS = 1e-8


@dataclass(frozen=True)
class SmoothingPolicy:
    p_C: float = 1.0
    p_O: float = 0.2
    p_A: float = 0.2
    epsilon: float = 0.1
    mode: str = "compositional"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown smoothing mode {self.mode!r}")
        if not (0 <= self.p_O < self.p_C <= 1 and 0 <= self.p_A < self.p_C):
            raise ValueError(f"need 0 <= p_O, p_A < p_C <= 1, got {self.p_O}, {self.p_A}, {self.p_C}")
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")


@dataclass(frozen=True)
class SeparationWeights:
    lambda1: float = 0.1  # distance
    lambda2: float = 0.1  # attribute orthogonality
    lambda3: float = 0.1  # object orthogonality
    lambda_h: float = 1.0  # HSIC

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and >= 0, got {v}")


# -- targets --------------------------------------------------------------

def smooth_targets(
    gt: Sequence[int | None],
    class_ids: Sequence[int],
    space: CompositionSpace,
    policy: SmoothingPolicy,
) -> np.ndarray:
    """Soft label matrix (regions x classes); ``None`` marks a background region."""
    classes = [space.decompose(c) for c in class_ids]
    k = len(classes)
    y = np.zeros((len(gt), k))
    for r, g in enumerate(gt):
        if g is None:
            continue
        t = space.decompose(g)
        if policy.mode == "compositional":
            for j, c in enumerate(classes):
                same_a, same_o = c.attribute == t.attribute, c.object == t.object
                if same_a and same_o:
                    y[r, j] = policy.p_C
                elif same_o:
                    y[r, j] = policy.p_O
                elif same_a:
                    y[r, j] = policy.p_A
        else:
            onehot = np.array([float(c == t) for c in classes])
            if policy.mode == "conventional":
                onehot = (1 - policy.epsilon) * onehot + policy.epsilon / k
            y[r] = onehot
    return y


# -- classification ---------------------------------------------------------

def classification_loss(probabilities: np.ndarray, targets: np.ndarray, eps: float = 1e-12) -> float:
    """Mean binary cross-entropy over all (region, class) entries."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: probabilities {p.shape} vs targets {y.shape}")
    p = np.clip(p, eps, 1 - eps)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def bce_with_logits_grad(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape} vs targets {targets.shape}")
    # softplus(l) - y*l == -[y log s(l) + (1-y) log(1-s(l))]
    value = np.mean(np.logaddexp(0.0, logits) - targets * logits)
    s = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return float(value), (s - targets) / logits.size


# -- separation ---------------------------------------------------------------

def _normalize(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    return e / norms, norms


def _normalize_backward(u: np.ndarray, norms: np.ndarray, du: np.ndarray) -> np.ndarray:
    return (du - u * np.sum(u * du, axis=1, keepdims=True)) / norms


def orthogonality_loss_grad(e: np.ndarray) -> tuple[float, np.ndarray]:
    n = len(e)
    if n < 2:
        warnings.warn("orthogonality loss of fewer than 2 embeddings is defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0, np.zeros_like(e)
    u, norms = _normalize(np.asarray(e, dtype=np.float64))
    sim = u @ u.T
    off = ~np.eye(n, dtype=bool)
    scale = 1.0 / (n * n - n)
    value = scale * np.abs(sim[off]).sum()
    g = np.where(off, np.sign(sim), 0.0) * scale
    du = 2.0 * g @ u
    return float(value), _normalize_backward(u, norms, du)


def orthogonality_loss(e: np.ndarray) -> float:
    return orthogonality_loss_grad(e)[0]


def distance_loss_grad(attr: np.ndarray, obj: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    if len(attr) == 0 or len(obj) == 0:
        raise ValueError("distance loss needs non-empty attribute and object sets")
    ua, na = _normalize(np.asarray(attr, dtype=np.float64))
    uo, no = _normalize(np.asarray(obj, dtype=np.float64))
    delta = ua.mean(axis=0) - uo.mean(axis=0)
    r = np.linalg.norm(delta)
    if r <= DIST_EPS:
        return float(-np.log(DIST_EPS)), np.zeros_like(ua), np.zeros_like(uo)
    d_delta = -delta / (r * r)
    dua = np.broadcast_to(d_delta / len(ua), ua.shape)
    duo = np.broadcast_to(-d_delta / len(uo), uo.shape)
    return float(-np.log(r)), _normalize_backward(ua, na, dua), _normalize_backward(uo, no, duo)


def distance_loss(attr: np.ndarray, obj: np.ndarray) -> float:
    return distance_loss_grad(attr, obj)[0]


def separation_loss_grad(attr: np.ndarray, obj: np.ndarray, weights: SeparationWeights) -> tuple[dict, dict]:
    """Weighted terms ``{distance, attr_orth, obj_orth}`` and grads ``{attr, obj}``."""
    terms = {"distance": 0.0, "attr_orth": 0.0, "obj_orth": 0.0}
    ga, go = np.zeros_like(attr, dtype=np.float64), np.zeros_like(obj, dtype=np.float64)
    if weights.lambda1:
        v, da, do = distance_loss_grad(attr, obj)
        terms["distance"] = weights.lambda1 * v
        ga += weights.lambda1 * da
        go += weights.lambda1 * do
    if weights.lambda2:
        v, da = orthogonality_loss_grad(attr)
        terms["attr_orth"] = weights.lambda2 * v
        ga += weights.lambda2 * da
    if weights.lambda3:
        v, do = orthogonality_loss_grad(obj)
        terms["obj_orth"] = weights.lambda3 * v
        go += weights.lambda3 * do
    return terms, {"attr": ga, "obj": go}


def separation_loss(table, weights: SeparationWeights) -> float:
    terms, _ = separation_loss_grad(table.attr, table.obj, weights)
    return terms["distance"] + terms["attr_orth"] + terms["obj_orth"]


# -- HSIC ---------------------------------------------------------------------

def median_bandwidth(x: np.ndarray) -> float:
    sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    d = np.sqrt(sq[np.triu_indices(len(x), k=1)])
    d = d[d > 0]
    return float(np.median(d)) if len(d) else 1.0


def _gram(x: np.ndarray, kernel: str, sigma: float | None) -> tuple[np.ndarray, float | None]:
    if kernel == "linear":
        return x @ x.T, None
    if kernel == "gaussian":
        s = median_bandwidth(x) if sigma is None else sigma
        sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
        return np.exp(-sq / (2 * s * s)), s
    raise ValueError(f"unknown kernel {kernel!r}")


def _gram_backward(x: np.ndarray, k: np.ndarray, dk: np.ndarray, kernel: str, sigma: float | None) -> np.ndarray:
    dk = dk + dk.T
    if kernel == "linear":
        return dk @ x
    w = dk * k
    return -(w.sum(axis=1, keepdims=True) * x - w @ x) / (sigma * sigma)


def hsic_grad(
    x: np.ndarray,
    y: np.ndarray,
    kernel: str = "linear",
    sigma_x: float | None = None,
    sigma_y: float | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Biased HSIC ``tr(K H L H) / (n-1)^2`` and its gradients.

    Gaussian bandwidths default to the median heuristic and are treated as constants.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    n = len(x)
    if n < 2 or len(y) != n:
        raise ValueError(f"hsic needs n >= 2 paired samples, got {len(x)} and {len(y)}")
    k, sx = _gram(x, kernel, sigma_x)
    l, sy = _gram(y, kernel, sigma_y)
    kc = k - k.mean(axis=0, keepdims=True)
    kc = kc - kc.mean(axis=1, keepdims=True)
    lc = l - l.mean(axis=0, keepdims=True)
    lc = lc - lc.mean(axis=1, keepdims=True)
    scale = 1.0 / (n - 1) ** 2
    value = scale * np.sum(kc * lc)
    # d tr(KHLH)/dK = HLH
    dx = _gram_backward(x, k, scale * lc, kernel, sx)
    dy = _gram_backward(y, l, scale * kc, kernel, sy)
    return float(value), dx, dy


def hsic(x: np.ndarray, y: np.ndarray, kernel: str = "linear", **kw) -> float:
    return hsic_grad(x, y, kernel, **kw)[0]


def decorrelation_loss_grad(
    attr: np.ndarray,
    obj: np.ndarray,
    batch: Sequence[int],
    space: CompositionSpace,
    lambda_h: float,
    kernel: str = "linear",
) -> tuple[float, dict]:
    """``lambda_h * HSIC(object rows, attribute rows)``, one sample per GT instance.

    Rows are unit-normalized first, like the separation terms.
    """
    ga, go = np.zeros_like(attr, dtype=np.float64), np.zeros_like(obj, dtype=np.float64)
    if lambda_h == 0:
        return 0.0, {"attr": ga, "obj": go}
    comps = [space.decompose(c) for c in batch]
    a_idx = np.array([c.attribute for c in comps])
    o_idx = np.array([c.object for c in comps])
    ua, na = _normalize(np.asarray(attr, dtype=np.float64))
    uo, no = _normalize(np.asarray(obj, dtype=np.float64))
    value, dx, dy = hsic_grad(uo[o_idx], ua[a_idx], kernel)
    np.add.at(go, o_idx, lambda_h * dx)
    np.add.at(ga, a_idx, lambda_h * dy)
    return lambda_h * value, {"attr": _normalize_backward(ua, na, ga), "obj": _normalize_backward(uo, no, go)}


def decorrelation_loss(table, batch: Sequence[int], space: CompositionSpace, weights: SeparationWeights,
                       kernel: str = "linear") -> float:
    return decorrelation_loss_grad(table.attr, table.obj, batch, space, weights.lambda_h, kernel)[0]


# -- combined -------------------------------------------------------------------

TERMS = ("classification", "distance", "attr_orth", "obj_orth", "hsic")


@dataclass
class LossBreakdown:
    classification: float = 0.0
    distance: float = 0.0
    attr_orth: float = 0.0
    obj_orth: float = 0.0
    hsic: float = 0.0

    @property
    def total(self) -> float:
        return self.classification + self.distance + self.attr_orth + self.obj_orth + self.hsic

    def as_dict(self) -> dict[str, float]:
        d = asdict(self)
        d["total"] = self.total
        return d


def total_loss_grad(
    logits: np.ndarray,
    targets: np.ndarray,
    attr: np.ndarray,
    obj: np.ndarray,
    batch: Sequence[int],
    space: CompositionSpace,
    weights: SeparationWeights,
    kernel: str = "linear",
) -> tuple[LossBreakdown, dict]:
    """Classification + separation + decorrelation.

    Returns the per-term breakdown (weighted contributions) and gradients
    ``{"logits", "attr", "obj"}``.
    """
    out = LossBreakdown()
    out.classification, g_logits = bce_with_logits_grad(logits, targets)
    sep, g = separation_loss_grad(attr, obj, weights)
    out.distance, out.attr_orth, out.obj_orth = sep["distance"], sep["attr_orth"], sep["obj_orth"]
    if weights.lambda_h and len(batch) >= 2:
        out.hsic, gh = decorrelation_loss_grad(attr, obj, batch, space, weights.lambda_h, kernel)
        g = {"attr": g["attr"] + gh["attr"], "obj": g["obj"] + gh["obj"]}
    g["logits"] = g_logits
    return out, g


def total_loss(logits, targets, table, batch, space, weights, kernel="linear") -> LossBreakdown:
    return total_loss_grad(logits, targets, table.attr, table.obj, batch, space, weights, kernel)[0]


@dataclass(frozen=True)
class LossConfig:
    policy: SmoothingPolicy = field(default_factory=SmoothingPolicy)
    weights: SeparationWeights = field(default_factory=SeparationWeights)
    kernel: str = "linear"

    @classmethod
    def from_dict(cls, doc: dict) -> "LossConfig":
        pol = dict(doc.get("policy", {}))
        if "mode" in doc:
            pol["mode"] = doc["mode"]
        return cls(SmoothingPolicy(**pol), SeparationWeights(**doc.get("weights", {})), doc.get("kernel", "linear"))

    def to_dict(self) -> dict:
        pol = asdict(self.policy)
        mode = pol.pop("mode")
        return {"policy": pol, "weights": asdict(self.weights), "mode": mode, "kernel": self.kernel}

    @classmethod
    def from_toggles(cls, smoothing: bool, separation: bool, decorrelation: bool,
                     base: "LossConfig | None" = None) -> "LossConfig":
        """One row of the 2x2x2 ablation grid; all off is the plain CSP objective."""
        base = base or cls()
        pol = base.policy
        policy = SmoothingPolicy(pol.p_C, pol.p_O, pol.p_A, pol.epsilon, "compositional" if smoothing else "none")
        w = base.weights
        weights = SeparationWeights(
            w.lambda1 if separation else 0.0,
            w.lambda2 if separation else 0.0,
            w.lambda3 if separation else 0.0,
            w.lambda_h if decorrelation else 0.0,
        )
        return cls(policy, weights, base.kernel)
