"""Adaptation objectives and the per-term parameter routing table.

Routing: L_R updates the reconstruction net, L_KD and L_TC the source
classifier, L_EN, L_PC and L_Sup the target classifiers. The loss functions
themselves are plain differentiable expressions; routing is enforced by the
caller (frozen forwards / detached inputs, see ``adaptation``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BatchMismatch, EmptyOtherSet, ShapeMismatch

TERMS = ("L_R", "L_VKD", "L_PKD", "L_TC", "L_EN", "L_PC", "L_Sup")

# parameter group each term may update
ROUTES = {
    "L_R": "recon",
    "L_VKD": "source",
    "L_PKD": "source",
    "L_TC": "source",
    "L_EN": "target",
    "L_PC": "target",
    "L_Sup": "target",
}


def _softmax(logits) -> Tensor:
    return ad.softmax_rows(logits)


def loss_r(source_logits_on_anchor) -> Tensor:
    """Mean prediction entropy of the source model on anchor surrogates."""
    logits = ad.as_tensor(source_logits_on_anchor)
    if logits.values.ndim != 2:
        raise ShapeMismatch(f"expected (n, K) logits, got {logits.shape}")
    return ad.entropy_rows(_softmax(logits))


def loss_tc(anchor_logits, other_logits: Sequence) -> Tensor:
    """Mean over other frames of KL(softmax(anchor) || softmax(other))."""
    if len(other_logits) == 0:
        raise EmptyOtherSet("temporal consistency needs at least one other frame")
    anchor = ad.as_tensor(anchor_logits)
    p = _softmax(anchor)
    total = None
    for other in other_logits:
        other = ad.as_tensor(other)
        if other.shape != anchor.shape:
            raise BatchMismatch(f"anchor {anchor.shape} vs other {other.shape}")
        kl = ad.kl_rows(p, ad.log_softmax_rows(other))
        total = kl if total is None else ad.add(total, kl)
    return ad.mul(total, 1.0 / len(other_logits))


def loss_en(target_logits: Sequence) -> Tensor:
    """Entropy of each target model's predictions, averaged over models."""
    total = None
    for logits in target_logits:
        h = ad.entropy_rows(_softmax(logits))
        total = h if total is None else ad.add(total, h)
    return ad.mul(total, 1.0 / len(target_logits))


def loss_pc(target_logits: Sequence) -> Tensor:
    """Sum of KL over all ordered pairs of target models."""
    logits = [ad.as_tensor(t) for t in target_logits]
    if len({t.shape for t in logits}) != 1:
        raise BatchMismatch("all target models must see the same batch")
    probs = [_softmax(t) for t in logits]
    log_probs = [ad.log_softmax_rows(t) for t in logits]
    total = None
    for k in range(len(logits)):
        for l in range(len(logits)):
            if k == l:
                continue
            kl = ad.kl_rows(probs[k], log_probs[l])
            total = kl if total is None else ad.add(total, kl)
    return total


def loss_sup(target_logits, source_logits) -> Tensor:
    """KL(softmax(P) || softmax(target)) with the teacher logits P gradient-stopped."""
    target = ad.as_tensor(target_logits)
    teacher = source_logits.values if isinstance(source_logits, Tensor) else source_logits
    if target.shape != teacher.shape:
        raise BatchMismatch(f"target {target.shape} vs teacher {teacher.shape}")
    with ad.no_grad():
        p = ad.softmax_rows(teacher).detach()
    return ad.kl_rows(p, ad.log_softmax_rows(target))


@dataclass
class LossReport:
    step: int
    values: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.values.get("L_all", 0.0)

    def to_json(self) -> str:
        doc = {"step": self.step}
        for name in (*TERMS, "L_KD", "L_all"):
            if name in self.values:
                doc[name] = self.values[name]
        return json.dumps(doc, sort_keys=False)


@dataclass
class LossWeights:
    """Per-term multipliers; 0 disables a term. The default is the unweighted sum."""

    L_R: float = 1.0
    L_VKD: float = 1.0
    L_PKD: float = 1.0
    L_TC: float = 1.0
    L_EN: float = 1.0
    L_PC: float = 1.0
    L_Sup: float = 1.0

    @classmethod
    def only(cls, *names: str) -> "LossWeights":
        unknown = set(names) - set(TERMS) - {"L_KD"}
        if unknown:
            raise KeyError(f"unknown loss terms {sorted(unknown)}")
        expanded = set(names)
        if "L_KD" in expanded:
            expanded |= {"L_VKD", "L_PKD"}
        return cls(**{t: (1.0 if t in expanded else 0.0) for t in TERMS})

    def enabled(self, term: str) -> bool:
        return getattr(self, term) != 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def loss_all(components: dict[str, Tensor], weights: Optional[LossWeights] = None,
             step: int = 0) -> tuple[Tensor, LossReport]:
    """Weighted sum of the available components and its report."""
    weights = weights or LossWeights()
    total = None
    values = {}
    for name in TERMS:
        if name not in components or not weights.enabled(name):
            continue
        term = components[name]
        values[name] = term.item()
        weighted = ad.mul(term, getattr(weights, name)) if getattr(weights, name) != 1.0 else term
        total = weighted if total is None else ad.add(total, weighted)
    if "L_VKD" in values or "L_PKD" in values:
        values["L_KD"] = values.get("L_VKD", 0.0) + values.get("L_PKD", 0.0)
    if total is None:
        total = ad.Tensor(0.0)
    values["L_all"] = total.item()
    return total, LossReport(step, values)
