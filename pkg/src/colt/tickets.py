"""Ticket generation (IMP baseline and cyclic overlapping tickets), evaluation and transfer."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from .datasets import Dataset, partition_by_class, validation_split, batches
from .metrics import CollapseReport, accuracy, layer_collapse_report
from .models import Model, ModelSpec, ParameterSet, build_model, replace_head, trunk_signature
from .optim import LRSchedule, OptimizerState, optimizer_step, zero_grad
from .pruning import (
    Mask,
    MaskEntry,
    PruneSchedule,
    apply_mask,
    full_mask,
    global_prune,
    intersect,
    mask_gradients,
    pack_bits,
    prune_rate,
    rewind,
    shuffle_mask,
    sparsity,
)
from .tensor import Tensor, no_grad, softmax_cross_entropy

log = logging.getLogger(__name__)


class LayerCollapseError(RuntimeError):
    def __init__(self, report: CollapseReport, round_: int):
        super().__init__(f"layer collapse in round {round_}: {', '.join(report.collapsed)}\n{report}")
        self.report = report
        self.round = round_


class NoOpRoundError(RuntimeError):
    pass


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class Seeds:
    init: int = 0
    data: int = 0
    head: int = 0

    @classmethod
    def from_base(cls, seed: int) -> "Seeds":
        return cls(init=seed, data=seed + 1000, head=seed + 2000)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    warmup: bool = True
    anneal_at: tuple[float, ...] = (0.4, 0.6, 0.9)
    anneal_factor: float = 5.0
    val_fraction: float = 0.1


@dataclass
class TrainResult:
    val_loss: float
    val_acc: float | None
    best_epoch: int


@dataclass
class Ticket:
    mask: Mask
    initial: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, e in self.mask.entries.items():
            if name not in self.initial:
                raise TransferError(f"ticket mask covers {name!r} but no initial value is stored")
            if tuple(self.initial[name].shape) != e.shape:
                raise TransferError(f"ticket mask/initial shape mismatch for {name!r}")

    @property
    def sparsity_all(self) -> float:
        return prune_rate(self.mask, "all")

    @property
    def sparsity_eligible(self) -> float:
        return prune_rate(self.mask, "eligible")

    def trunk_names(self) -> list[str]:
        head = set(self.provenance.get("head", ("head.weight", "head.bias")))
        return [n for n in self.mask.entries if n not in head]


@dataclass
class RoundRecord:
    round: int
    sparsity_all_pct: float
    sparsity_eligible_pct: float
    partition1_acc_pct: float | None = None
    partition2_acc_pct: float | None = None
    full_acc_pct: float | None = None
    similarity_pct: float | None = None
    wall_s: float = 0.0
    seed: int = 0
    # COLT only: per-partition mask sparsity before the intersection
    partition_sparsity_pct: tuple[float, float] | None = None
    kept_per_layer: dict[str, int] = field(default_factory=dict)


@dataclass
class TicketTrace:
    method: str
    records: list[RoundRecord] = field(default_factory=list)
    masks: list[Mask] = field(default_factory=list)

    def rounds_to(self, target_pct: float, basis: str = "eligible") -> int | None:
        """First round whose mask reaches ``target_pct`` sparsity, or None."""
        target = Fraction(str(target_pct))
        for rec, m in zip(self.records, self.masks):
            if sparsity(m, basis) >= target:
                return rec.round
        return None

    def mask_near(self, target_pct: float, basis: str = "eligible") -> tuple[int, Mask]:
        """Round index and mask whose sparsity is closest to ``target_pct``."""
        if not self.masks:
            raise ValueError("trace holds no masks")
        best = min(range(len(self.masks)),
                   key=lambda i: (abs(float(sparsity(self.masks[i], basis)) - target_pct), i))
        return self.records[best].round, self.masks[best]


# -- training primitives -----------------------------------------------------
def evaluate(model: Model, d: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy (%) of ``model`` on ``d``."""
    total_loss = 0.0
    preds = []
    with no_grad():
        for start in range(0, len(d), batch_size):
            x = d.images[start:start + batch_size]
            y = d.labels[start:start + batch_size]
            logits = model.forward(Tensor(x))
            total_loss += softmax_cross_entropy(logits, y).item() * len(y)
            preds.append(logits.data.argmax(axis=1))
    return total_loss / len(d), accuracy(np.concatenate(preds), d.labels)


def train_model(model: Model, mask: Mask, train: Dataset, val: Dataset | None, cfg: TrainConfig,
                seed: int) -> TrainResult:
    """Train with ``mask`` enforced after every step; keep the lowest-validation-loss epoch."""
    params = model.params
    apply_mask(params, mask)
    opt = OptimizerState(kind=cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum, betas=tuple(cfg.betas),
                         weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, math.ceil(len(train) / cfg.batch_size))
    sched = LRSchedule(cfg.lr, steps_per_epoch, cfg.epochs, cfg.warmup, tuple(cfg.anneal_at), cfg.anneal_factor)
    best: TrainResult | None = None
    best_values = None
    step = 0
    for epoch in range(cfg.epochs):
        for xb, yb in batches(train, cfg.batch_size, seed, epoch):
            zero_grad(params)
            loss = softmax_cross_entropy(model.forward(Tensor(xb)), yb)
            loss.backward()
            mask_gradients(params, mask)
            optimizer_step(params, opt, sched.lr_at(step))
            apply_mask(params, mask)
            step += 1
        if val is not None and len(val):
            vloss, vacc = evaluate(model, val)
            if best is None or vloss < best.val_loss:
                best = TrainResult(vloss, vacc, epoch)
                best_values = {n: t.data.copy() for n, t in params.items()}
    zero_grad(params)
    if best_values is not None:
        params.load_values(best_values)
        return best
    return TrainResult(float("nan"), None, cfg.epochs - 1)


def _check_collapse(mask: Mask, round_: int) -> None:
    report = layer_collapse_report(mask)
    if report.collapse:
        raise LayerCollapseError(report, round_)


def _target_reached(mask: Mask, schedule: PruneSchedule) -> bool:
    return sparsity(mask, schedule.basis) >= Fraction(str(schedule.target_sparsity))


def _record(round_: int, mask: Mask, wall: float, seed: int, **extra) -> RoundRecord:
    return RoundRecord(round_, prune_rate(mask, "all"), prune_rate(mask, "eligible"), wall_s=wall, seed=seed,
                       kept_per_layer={n: mask.entries[n].kept() for n in mask.eligible_names}, **extra)


def _make_ticket(mask: Mask, params: ParameterSet, provenance: dict) -> Ticket:
    initial = {n: params.initial[n].copy() for n in mask.entries}
    prov = {**provenance, "head": list(params.head),
            "sparsity_all_pct": prune_rate(mask, "all"), "sparsity_eligible_pct": prune_rate(mask, "eligible")}
    return Ticket(mask, initial, prov)


def _milestone_hits(milestones: Sequence[float], before: Fraction, after: Fraction) -> bool:
    return any(before < Fraction(str(s)) <= after for s in milestones)


# -- IMP baseline ------------------------------------------------------------
def run_lth(train: Dataset, spec: ModelSpec, schedule: PruneSchedule, cfg: TrainConfig, seeds: Seeds,
            test: Dataset | None = None, eval_milestones: Sequence[float] = (),
            dataset_id: str | None = None) -> tuple[Ticket, TicketTrace]:
    """Train, prune ``schedule.p`` of the remaining weights globally, rewind; repeat to the target."""
    spec = replace(spec, num_classes=train.num_classes, input_shape=train.input_shape)
    model = build_model(spec, seeds.init)
    mask = full_mask(model.params, schedule.eligibility)
    fit, val = validation_split(train, cfg.val_fraction, seeds.data)
    trace = TicketTrace("lth")
    rounds = 0
    while not _target_reached(mask, schedule) and rounds < schedule.max_rounds:
        rounds += 1
        t0 = time.perf_counter()
        rewind(model.params, mask)
        result = train_model(model, mask, fit, val, cfg, seeds.data)
        before = sparsity(mask, schedule.basis)
        mask, k = global_prune(model.params, mask, schedule.p)
        if k == 0:
            raise NoOpRoundError(f"round {rounds}: prune fraction {schedule.p} removes no weights")
        _check_collapse(mask, rounds)
        rec = _record(rounds, mask, time.perf_counter() - t0, seeds.init, full_acc_pct=result.val_acc)
        if test is not None and _milestone_hits(eval_milestones, before, sparsity(mask, schedule.basis)):
            rec.full_acc_pct = evaluate_ticket(_make_ticket(mask, model.params, {}), train, test, cfg, seeds,
                                               spec=spec)
        trace.records.append(rec)
        trace.masks.append(mask)
        log.info("lth round %d: sparsity %.1f%% (eligible %.1f%%)", rounds, rec.sparsity_all_pct,
                 rec.sparsity_eligible_pct)
    rewind(model.params, mask)
    ticket = _make_ticket(mask, model.params, {
        "method": "lth", "source": dataset_id or train.name, "rounds": rounds, "p": schedule.p,
        "seeds": vars(seeds).copy(), "init": model.provenance.get("init"), "num_classes": spec.num_classes,
    })
    return ticket, trace


# -- cyclic overlapping tickets ----------------------------------------------
def _threads() -> int:
    value = os.environ.get("COLT_THREADS", "1")
    if value not in ("1", "2"):
        raise ValueError(f"COLT_THREADS must be 1 or 2, got {value!r}")
    return int(value)


def run_colt(train: Dataset, spec: ModelSpec, schedule: PruneSchedule, cfg: TrainConfig, seeds: Seeds,
             test: Dataset | None = None, eval_milestones: Sequence[float] = (),
             accuracy_target: float | None = None, dataset_id: str | None = None,
             threads: int | None = None) -> tuple[Ticket, TicketTrace]:
    """Generate a cyclic overlapping ticket.

    The class set is split once. Every round both half-class models start from
    the shared masked initialisation, train on their own half, are pruned by
    ``schedule.p`` independently, and only the weights both keep survive into
    the next round. ``accuracy_target`` (percent) additionally stops once the
    ticket, retrained on the full training set, matches it on ``test``.
    """
    spec = replace(spec, num_classes=train.num_classes, input_shape=train.input_shape)
    pair = partition_by_class(train, seeds.data)
    # the trunk is drawn before the head, so all three models share it bit for bit
    full = build_model(spec, seeds.init)
    models = [build_model(replace(spec, num_classes=part.num_classes), seeds.init) for part in pair]
    trunk = [n for n in full.params if not full.params.is_head(n)]
    mask = full_mask(full.params, schedule.eligibility)
    splits = [validation_split(part, cfg.val_fraction, seeds.data + k) for k, part in enumerate(pair, start=1)]
    workers = threads or _threads()
    trace = TicketTrace("colt")
    rounds = 0

    def train_one(k: int):
        m = models[k]
        fit, val = splits[k]
        result = train_model(m, mask.restrict(trunk), fit, val, cfg, seeds.data + k + 1)
        pruned, n = global_prune(m.params, mask.restrict(trunk), schedule.p)
        return result, pruned, n

    while not _target_reached(mask, schedule) and rounds < schedule.max_rounds:
        rounds += 1
        t0 = time.perf_counter()
        for m in models:
            rewind(m.params, mask.restrict(trunk))
        if workers == 2:
            with ThreadPoolExecutor(max_workers=2) as pool:
                outcomes = list(pool.map(train_one, (0, 1)))
        else:
            outcomes = [train_one(0), train_one(1)]
        (r1, m1, n1), (r2, m2, n2) = outcomes
        if n1 == 0 or n2 == 0:
            raise NoOpRoundError(f"round {rounds}: prune fraction {schedule.p} removes no weights")
        merged = intersect(m1, m2)
        before = sparsity(mask, schedule.basis)
        mask = mask.with_entries(merged.entries)
        _check_collapse(mask, rounds)
        rec = _record(rounds, mask, time.perf_counter() - t0, seeds.init,
                      partition1_acc_pct=r1.val_acc, partition2_acc_pct=r2.val_acc,
                      partition_sparsity_pct=(prune_rate(m1, "eligible"), prune_rate(m2, "eligible")))
        wants_eval = accuracy_target is not None or _milestone_hits(
            eval_milestones, before, sparsity(mask, schedule.basis))
        if test is not None and wants_eval:
            rec.full_acc_pct = evaluate_ticket(_make_ticket(mask, full.params, {}), train, test, cfg, seeds,
                                               spec=spec)
        trace.records.append(rec)
        trace.masks.append(mask)
        log.info("colt round %d: sparsity %.1f%% (eligible %.1f%%), partitions %.1f%% / %.1f%%", rounds,
                 rec.sparsity_all_pct, rec.sparsity_eligible_pct, *rec.partition_sparsity_pct)
        if accuracy_target is not None and rec.full_acc_pct is not None and rec.full_acc_pct >= accuracy_target:
            break
    for m in models:
        rewind(m.params, mask.restrict(trunk))
    ticket = _make_ticket(mask, full.params, {
        "method": "colt", "source": dataset_id or train.name, "rounds": rounds, "p": schedule.p,
        "seeds": vars(seeds).copy(), "init": full.provenance.get("init"), "num_classes": spec.num_classes,
        "partition": [list(pair.classes_first), list(pair.classes_second)],
    })
    return ticket, trace


# -- evaluation and transfer -------------------------------------------------
def dense_ticket(spec: ModelSpec, seed: int, eligibility: str = "conv-only") -> Ticket:
    """The all-ones ticket of a freshly initialised model."""
    model = build_model(spec, seed)
    return _make_ticket(full_mask(model.params, eligibility), model.params,
                        {"method": "dense", "seeds": {"init": seed}, "num_classes": spec.num_classes})


def random_ticket(ticket: Ticket, seed: int, scope: str = "global") -> Ticket:
    """Same initialisation and sparsity, kept positions drawn uniformly (see ``shuffle_mask``)."""
    return Ticket(shuffle_mask(ticket.mask, seed, scope), {n: a.copy() for n, a in ticket.initial.items()},
                  {**ticket.provenance, "method": "random", "random_seed": seed, "random_scope": scope})


def _ticket_model(ticket: Ticket, spec: ModelSpec, head_seed: int) -> tuple[Model, Mask]:
    model = build_model(spec, head_seed)
    trunk = ticket.trunk_names()
    target = trunk_signature(model.params)
    mismatched = [n for n in trunk if n not in target or target[n] != ticket.initial[n].shape]
    missing = [n for n in target if n not in trunk]
    if mismatched or missing:
        detail = [f"{n}: ticket {ticket.initial[n].shape} vs model {target.get(n)}" for n in mismatched]
        detail += [f"{n}: absent from ticket" for n in missing]
        raise TransferError("ticket does not fit the target model:\n  " + "\n  ".join(detail))
    tensors = {}
    initial = {}
    for name, t in model.params.items():
        src = ticket.initial[name] if name in trunk else t.data
        tensors[name] = Tensor(src.copy(), requires_grad=True, name=name)
        initial[name] = src
    params = ParameterSet(tensors, model.params.kinds, model.params.head, initial)
    params = replace_head(params, spec.num_classes, head_seed)
    mask = Mask({n: ticket.mask.entries[n] for n in trunk})
    for name in params.head:
        shape = params[name].shape
        mask = mask.with_entries({name: MaskEntry(shape, pack_bits(np.ones(shape, dtype=bool)), False)})
    mask = Mask({n: mask.entries[n] for n in params})
    out = Model(spec, params, ticket.provenance.get("seeds", {}).get("init", 0),
                {"init": ticket.provenance.get("init"), "head_seed": head_seed})
    return out, mask


def train_ticket(ticket: Ticket, train: Dataset, cfg: TrainConfig, seeds: Seeds,
                 spec: ModelSpec | None = None) -> Model:
    spec = _spec_for(ticket, train, spec)
    model, mask = _ticket_model(ticket, spec, seeds.head)
    rewind(model.params, mask)
    fit, val = validation_split(train, cfg.val_fraction, seeds.data)
    train_model(model, mask, fit, val, cfg, seeds.data)
    return model


def _spec_for(ticket: Ticket, d: Dataset, spec: ModelSpec | None) -> ModelSpec:
    if spec is None:
        spec = ticket.provenance.get("spec")
        if spec is None:
            raise TransferError("no model spec given and none recorded in the ticket")
        if isinstance(spec, dict):
            spec = ModelSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in spec.items()})
    return replace(spec, num_classes=d.num_classes, input_shape=d.input_shape)


def evaluate_ticket(ticket: Ticket, train: Dataset, test: Dataset, cfg: TrainConfig, seeds: Seeds,
                    spec: ModelSpec | None = None) -> float:
    """Replace the head, retrain the ticket on ``train`` with its mask fixed, return test accuracy (%)."""
    model = train_ticket(ticket, train, cfg, seeds, spec)
    return accuracy(model.predict(test.images), test.labels)


def transfer_ticket(ticket: Ticket, train: Dataset, test: Dataset, cfg: TrainConfig, seeds: Seeds,
                    spec: ModelSpec | None = None) -> float:
    """Evaluate ``ticket`` on a different dataset; only the trunk shapes have to agree."""
    if spec is not None and ticket.initial:
        first = next(n for n in ticket.trunk_names())
        if spec.arch == "conv3s" and ticket.initial[first].shape[1] != train.input_shape[0]:
            raise TransferError(
                f"{first}: ticket expects {ticket.initial[first].shape[1]} input channels, "
                f"target data has {train.input_shape[0]}")
    acc = evaluate_ticket(ticket, train, test, cfg, seeds, spec)
    ticket.provenance.setdefault("transfers", []).append(
        {"source": ticket.provenance.get("source"), "target": train.name, "accuracy_pct": acc})
    return acc


def run_dense(train: Dataset, test: Dataset, spec: ModelSpec, cfg: TrainConfig, seeds: Seeds,
              eligibility: str = "conv-only") -> float:
    """Unpruned baseline, initialised and head-seeded exactly like a ticket evaluation."""
    spec = replace(spec, num_classes=train.num_classes, input_shape=train.input_shape)
    return evaluate_ticket(dense_ticket(spec, seeds.init, eligibility), train, test, cfg, seeds, spec)
