"""Binary masks over a ParameterSet and global magnitude pruning.

A :class:`Mask` stores one LSB-first packed bitfield per tensor (bit 1 = keep)
plus an eligibility flag. Ineligible tensors are always all-ones. Masks are
treated as immutable values: every operation returns a new mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np

from .models import ParameterSet

ELIGIBILITY_RULES = ("conv-only", "all-weights")


class AlignmentError(ValueError):
    """Mask and parameters (or two masks) do not share tensor names and shapes."""


class SnapshotError(RuntimeError):
    """A rewind was requested but no initial snapshot is available."""


def pack_bits(keep: np.ndarray) -> np.ndarray:
    return np.packbits(np.asarray(keep, dtype=bool).ravel(), bitorder="little")


def unpack_bits(bits: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    return np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(shape)


@dataclass(frozen=True, eq=False)
class MaskEntry:
    shape: tuple[int, ...]
    bits: np.ndarray
    eligible: bool

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def keep(self) -> np.ndarray:
        return unpack_bits(self.bits, self.shape)

    def kept(self) -> int:
        return int(self.keep().sum())


class Mask:
    def __init__(self, entries: Mapping[str, MaskEntry]):
        self.entries: dict[str, MaskEntry] = dict(entries)
        for name, e in self.entries.items():
            if len(e.bits) != (e.size + 7) // 8:
                raise AlignmentError(f"bitfield for {name!r} has {len(e.bits)} bytes, expected {(e.size + 7) // 8}")
            e.bits.flags.writeable = False

    @classmethod
    def from_arrays(cls, keep: Mapping[str, np.ndarray], eligible: Iterable[str]) -> "Mask":
        eligible = set(eligible)
        entries = {}
        for name, arr in keep.items():
            arr = np.asarray(arr, dtype=bool)
            if name not in eligible and not arr.all():
                raise AlignmentError(f"ineligible tensor {name!r} must be all-ones")
            entries[name] = MaskEntry(tuple(arr.shape), pack_bits(arr), name in eligible)
        return cls(entries)

    @classmethod
    def ones(cls, shapes: Mapping[str, tuple[int, ...]] | ParameterSet, eligible: Iterable[str]) -> "Mask":
        if isinstance(shapes, ParameterSet):
            shapes = {n: t.shape for n, t in shapes.items()}
        return cls.from_arrays({n: np.ones(s, dtype=bool) for n, s in shapes.items()}, eligible)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name].keep()

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask) or list(self.entries) != list(other.entries):
            return False
        return all(
            a.shape == b.shape and a.eligible == b.eligible and np.array_equal(a.bits, b.bits)
            for a, b in zip(self.entries.values(), other.entries.values())
        )

    def __repr__(self) -> str:
        return f"Mask({len(self.entries)} tensors, sparsity={prune_rate(self)}%)"

    @property
    def eligible_names(self) -> list[str]:
        return [n for n, e in self.entries.items() if e.eligible]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: e.keep() for n, e in self.entries.items()}

    def total(self, basis: str = "all") -> int:
        return sum(e.size for e in self._basis(basis))

    def zeros(self, basis: str = "all") -> int:
        return sum(e.size - e.kept() for e in self._basis(basis))

    def kept_counts(self) -> dict[str, int]:
        return {n: e.kept() for n, e in self.entries.items()}

    def _basis(self, basis: str):
        if basis == "all":
            return self.entries.values()
        if basis == "eligible":
            return [e for e in self.entries.values() if e.eligible]
        raise ValueError(f"unknown sparsity basis {basis!r}; expected 'all' or 'eligible'")

    def restrict(self, names: Iterable[str]) -> "Mask":
        return Mask({n: self.entries[n] for n in names})

    def with_entries(self, extra: Mapping[str, MaskEntry]) -> "Mask":
        return Mask({**self.entries, **extra})


@dataclass(frozen=True)
class PruneSchedule:
    p: float = 0.2
    eligibility: str = "conv-only"
    target_sparsity: float = 89.0
    max_rounds: int = 30
    basis: str = "eligible"

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ValueError(f"prune fraction must be in (0, 1), got {self.p}")
        if not 0 <= self.target_sparsity < 100:
            raise ValueError(f"target sparsity must be in [0, 100), got {self.target_sparsity}")
        if self.eligibility not in ELIGIBILITY_RULES:
            raise ValueError(f"eligibility must be one of {ELIGIBILITY_RULES}, got {self.eligibility!r}")
        if self.basis not in ("all", "eligible"):
            raise ValueError(f"basis must be 'all' or 'eligible', got {self.basis!r}")
        if self.max_rounds < 0:
            raise ValueError(f"max_rounds must be >= 0, got {self.max_rounds}")


def eligible_names(params: ParameterSet, rule: str = "conv-only") -> list[str]:
    """Names of prune-eligible tensors. The output layer, biases and norms never are.

    Under ``conv-only`` a network without convolutions falls back to its
    hidden linear weights, so the MLP still has something to prune.
    """
    if rule not in ELIGIBILITY_RULES:
        raise ValueError(f"eligibility must be one of {ELIGIBILITY_RULES}, got {rule!r}")
    weights = [n for n in params if params.kinds[n] in ("conv", "linear") and not params.is_head(n)]
    if rule == "conv-only":
        convs = [n for n in weights if params.kinds[n] == "conv"]
        return convs or weights
    return weights


def full_mask(params: ParameterSet, rule: str = "conv-only") -> Mask:
    return Mask.ones(params, eligible_names(params, rule))


def _array(value) -> np.ndarray:
    return value.data if hasattr(value, "data") and not isinstance(value, np.ndarray) else np.asarray(value)


def check_aligned(mask: Mask, params: Mapping) -> None:
    for name, e in mask.entries.items():
        if name not in params:
            raise AlignmentError(f"mask tensor {name!r} missing from parameters")
        shape = tuple(np.shape(_array(params[name])))
        if shape != e.shape:
            raise AlignmentError(f"mask shape {e.shape} != parameter shape {shape} for {name!r}")


def prune_count(p: float, remaining: int) -> int:
    """``floor(p * remaining)`` evaluated exactly on the decimal value of ``p``."""
    return int(Fraction(p).limit_denominator(10**9) * remaining)


def global_prune(weights: Mapping[str, np.ndarray], mask: Mask, p: float) -> tuple[Mask, int]:
    """Zero the ``floor(p * R)`` smallest-magnitude kept weights pooled over eligible tensors.

    Ties in magnitude go to the lower (tensor order, flat index). Returns the
    new mask and the number of weights pruned; 0 signals a no-op round.
    """
    if not 0 < p < 1:
        raise ValueError(f"prune fraction must be in (0, 1), got {p}")
    check_aligned(mask, weights)
    names = mask.eligible_names
    keeps = {n: mask[n].ravel() for n in names}
    mags, owners, flat_idx = [], [], []
    for i, n in enumerate(names):
        w = np.abs(_array(weights[n]).ravel())
        idx = np.flatnonzero(keeps[n])
        mags.append(w[idx])
        flat_idx.append(idx)
        owners.append(np.full(len(idx), i, dtype=np.int64))
    if not names:
        return mask, 0
    mags_all = np.concatenate(mags)
    remaining = len(mags_all)
    k = prune_count(p, remaining)
    if k == 0:
        return mask, 0
    # stable sort keeps the concatenation order, i.e. (tensor order, flat index), among ties
    order = np.argsort(mags_all, kind="stable")[:k]
    owner_all = np.concatenate(owners)[order]
    idx_all = np.concatenate(flat_idx)[order]
    new_entries = dict(mask.entries)
    for i, n in enumerate(names):
        hit = idx_all[owner_all == i]
        if len(hit) == 0:
            continue
        keep = keeps[n].copy()
        keep[hit] = False
        e = mask.entries[n]
        new_entries[n] = MaskEntry(e.shape, pack_bits(keep), True)
    return Mask(new_entries), k


def _check_same_structure(m1: Mask, m2: Mask) -> None:
    if list(m1.entries) != list(m2.entries):
        raise AlignmentError(f"mask tensors differ: {list(m1.entries)} vs {list(m2.entries)}")
    for n in m1.entries:
        a, b = m1.entries[n], m2.entries[n]
        if a.shape != b.shape or a.eligible != b.eligible:
            raise AlignmentError(f"mask entry {n!r} differs: {a.shape}/{a.eligible} vs {b.shape}/{b.eligible}")


def intersect(m1: Mask, m2: Mask) -> Mask:
    _check_same_structure(m1, m2)
    return Mask({
        n: MaskEntry(e.shape, np.bitwise_and(e.bits, m2.entries[n].bits), e.eligible)
        for n, e in m1.entries.items()
    })


def _zero_pruned(arr: np.ndarray, keep: np.ndarray) -> None:
    # assignment rather than multiplication: m * w would leave -0.0 behind
    arr[~keep] = 0.0


def apply_mask(params: ParameterSet, m: Mask) -> None:
    check_aligned(m, params)
    for name in m.eligible_names:
        _zero_pruned(params[name].data, m[name])


def mask_gradients(params: ParameterSet, m: Mask) -> None:
    for name in m.eligible_names:
        g = params[name].grad
        if g is not None:
            _zero_pruned(g, m[name])


def rewind(params: ParameterSet, m: Mask) -> None:
    """Reset every tensor to its initial value, then zero the pruned positions."""
    check_aligned(m, params)
    initial = getattr(params, "initial", None)
    if not initial:
        raise SnapshotError("parameter set has no initial snapshot to rewind to")
    for name, t in params.items():
        if name not in initial:
            raise SnapshotError(f"no initial snapshot for {name!r}")
        t.data[...] = initial[name]
    apply_mask(params, m)


def sparsity(m: Mask, basis: str = "all") -> Fraction:
    total = m.total(basis)
    return Fraction(100 * m.zeros(basis), total) if total else Fraction(0)


def prune_rate(m: Mask, denominator: str = "all") -> float:
    """Percentage of zero positions, rounded to 0.1."""
    return float(round(sparsity(m, denominator), 1))


def shuffle_mask(m: Mask, seed: int, scope: str = "global") -> Mask:
    """Random control with the same number of kept eligible weights as ``m``.

    ``scope="global"`` scatters the pooled kept count uniformly over every
    eligible position, so only the overall sparsity is matched.
    ``scope="tensor"`` keeps each eligible tensor's own kept count.
    """
    if scope not in ("global", "tensor"):
        raise ValueError(f"scope must be 'global' or 'tensor', got {scope!r}")
    rng = np.random.default_rng(seed)
    entries = dict(m.entries)
    names = m.eligible_names
    if scope == "tensor":
        for name in names:
            e = m.entries[name]
            keep = np.zeros(e.size, dtype=bool)
            keep[rng.choice(e.size, size=e.kept(), replace=False)] = True
            entries[name] = MaskEntry(e.shape, pack_bits(keep), True)
        return Mask(entries)
    sizes = [m.entries[n].size for n in names]
    keep = np.zeros(sum(sizes), dtype=bool)
    keep[rng.choice(keep.size, size=sum(m.entries[n].kept() for n in names), replace=False)] = True
    start = 0
    for name, size in zip(names, sizes):
        e = m.entries[name]
        entries[name] = MaskEntry(e.shape, pack_bits(keep[start:start + size]), True)
        start += size
    return Mask(entries)


def random_mask(shapes: Mapping[str, tuple[int, ...]], eligible: Iterable[str], sparsity_pct: float,
                seed: int) -> Mask:
    """Uniform random mask with exactly ``round(s * n)`` zeros in each eligible tensor."""
    rng = np.random.default_rng(seed)
    eligible = set(eligible)
    keep = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.ones(n, dtype=bool)
        if name in eligible:
            arr[rng.choice(n, size=int(round(sparsity_pct / 100 * n)), replace=False)] = False
        keep[name] = arr.reshape(shape)
    return Mask.from_arrays(keep, eligible)
