"""Accuracy, mask similarity and layer-collapse diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .pruning import AlignmentError, Mask, prune_rate


class UndefinedMetricError(ValueError):
    pass


@dataclass
class MetricsRecord:
    method: str
    round: int
    sparsity_all_pct: float
    sparsity_eligible_pct: float
    accuracy_pct: float | None = None
    similarity_pct: float | None = None
    kept_per_layer: dict[str, int] = field(default_factory=dict)
    wall_s: float = 0.0
    seeds: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("sparsity_all_pct", "sparsity_eligible_pct", "accuracy_pct", "similarity_pct"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must be a percentage in [0, 100], got {v}")


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions {predictions.shape} and labels {labels.shape} differ in length")
    if labels.size == 0:
        raise UndefinedMetricError("accuracy of an empty prediction set is undefined")
    return 100.0 * float(np.count_nonzero(predictions == labels)) / labels.size


def mask_similarity(m_a: Mask, m_b: Mask) -> float:
    """Share of all parameter positions pruned by both masks, in percent."""
    if list(m_a.entries) != list(m_b.entries):
        raise AlignmentError("masks cover different tensors")
    common = 0
    total = 0
    for name, ea in m_a.entries.items():
        eb = m_b.entries[name]
        if ea.shape != eb.shape:
            raise AlignmentError(f"shape mismatch for {name!r}: {ea.shape} vs {eb.shape}")
        both_pruned = np.bitwise_not(np.bitwise_or(ea.bits, eb.bits))
        # padding bits past the end of the tensor read as "pruned" once inverted
        common += int(np.unpackbits(both_pruned, count=ea.size, bitorder="little").sum())
        total += ea.size
    return 100.0 * common / total if total else 0.0


@dataclass
class CollapseReport:
    kept_fraction: dict[str, float]
    collapsed: list[str]

    @property
    def collapse(self) -> bool:
        return bool(self.collapsed)

    def __str__(self) -> str:
        lines = [f"{n}: {f:.4f}{'  <-- collapsed' if n in self.collapsed else ''}"
                 for n, f in self.kept_fraction.items()]
        return "\n".join(lines)


def layer_collapse_report(m: Mask) -> CollapseReport:
    fractions = {}
    collapsed = []
    for name, e in m.entries.items():
        kept = e.kept()
        fractions[name] = kept / e.size if e.size else 1.0
        if e.eligible and kept == 0:
            collapsed.append(name)
    return CollapseReport(fractions, collapsed)


def matched_similarities(masks_a: Sequence[Mask], masks_b: Sequence[Mask]) -> list[tuple[float, float, float]]:
    """Pair each mask in ``masks_a`` with the ``masks_b`` mask of nearest sparsity.

    Returns ``(sparsity_a, sparsity_b, similarity)`` triples, all in percent.
    """
    if not masks_b:
        return []
    rates_b = [prune_rate(m) for m in masks_b]
    out = []
    for m in masks_a:
        s = prune_rate(m)
        j = min(range(len(rates_b)), key=lambda i: (abs(rates_b[i] - s), i))
        out.append((s, rates_b[j], mask_similarity(m, masks_b[j])))
    return out
