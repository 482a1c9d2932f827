"""The desk-scale LTH vs COLT comparison, one seed at a time.

Shared by ``scripts/run_desk_comparison.py`` and the acceptance tests so both
measure the same thing.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

from .config import ExperimentConfig
from .metrics import layer_collapse_report, matched_similarities
from .pruning import sparsity
from .tickets import (
    Ticket,
    TicketTrace,
    evaluate_ticket,
    random_ticket,
    run_colt,
    run_dense,
    run_lth,
    transfer_ticket,
)

log = logging.getLogger(__name__)

RANDOM_SEED_OFFSET = 7
TARGET_SEED_OFFSET = 100


@dataclass
class SeedResult:
    seed: int
    dense_acc: float
    colt: TicketTrace
    lth: TicketTrace
    rounds_colt: int | None
    rounds_lth: int | None
    # target sparsity -> (mask sparsity, COLT accuracy, random accuracy)
    at_sparsity: dict[float, tuple[float, float, float]] = field(default_factory=dict)
    transfer_sparsity: float = 0.0
    transfer_colt: float = 0.0
    transfer_random: float = 0.0
    collapsed_rounds: list[int] = field(default_factory=list)
    similarity: list[tuple[float, float, float]] = field(default_factory=list)
    prune_cpu_s: float = 0.0


def seeded(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Derive model, data and head seeds from one base seed; the target set gets its own draw."""
    cfg = cfg.with_seed(seed)
    data = dataclasses.replace(cfg.data, seed=seed)
    target = dataclasses.replace(cfg.target, seed=seed + TARGET_SEED_OFFSET) if cfg.target else None
    return dataclasses.replace(cfg, data=data, target=target)


def _ticket_at(ticket: Ticket, trace: TicketTrace, target: float, basis: str) -> Ticket:
    _, mask = trace.mask_near(target, basis)
    return Ticket(mask, ticket.initial, dict(ticket.provenance))


def run_seed(base: ExperimentConfig, seed: int, eval_at: tuple[float, ...] = (70.0, 89.0),
             colt_target: float = 90.0, lth_target: float = 89.0) -> SeedResult:
    cfg = seeded(base, seed)
    train, test = cfg.load_data()
    spec = cfg.model_spec(train)
    tcfg, seeds = cfg.train_config(), cfg.seed_set()
    basis = cfg.schedule.basis

    dense = run_dense(train, test, spec, tcfg, seeds, cfg.schedule.eligibility)
    log.info("seed %d dense %.2f%%", seed, dense)

    cpu = time.process_time()
    colt_sched = dataclasses.replace(cfg.schedule_for("colt"), target_sparsity=colt_target)
    colt, colt_trace = run_colt(train, spec, colt_sched, tcfg, seeds, dataset_id=cfg.experiment.name)
    lth_sched = dataclasses.replace(cfg.schedule_for("lth"), target_sparsity=lth_target)
    lth, lth_trace = run_lth(train, spec, lth_sched, tcfg, seeds, dataset_id=cfg.experiment.name)
    prune_cpu = time.process_time() - cpu

    result = SeedResult(seed, dense, colt_trace, lth_trace, colt_trace.rounds_to(89.0, basis),
                        lth_trace.rounds_to(89.0, basis), prune_cpu_s=prune_cpu)
    result.collapsed_rounds = [r.round for r, m in zip(colt_trace.records, colt_trace.masks)
                               if layer_collapse_report(m).collapse]
    result.similarity = matched_similarities(lth_trace.masks, colt_trace.masks)

    rnd_seed = seed + RANDOM_SEED_OFFSET
    for target in eval_at:
        t = _ticket_at(colt, colt_trace, target, basis)
        acc = evaluate_ticket(t, train, test, tcfg, seeds, spec)
        rnd = evaluate_ticket(random_ticket(t, rnd_seed), train, test, tcfg, seeds, spec)
        result.at_sparsity[target] = (float(sparsity(t.mask, basis)), acc, rnd)
        log.info("seed %d at %.0f%%: colt %.2f random %.2f", seed, target, acc, rnd)

    if cfg.target is not None:
        t_train, t_test = cfg.load_data("target")
        t_spec = cfg.model_spec(t_train)
        t = _ticket_at(colt, colt_trace, max(eval_at), basis)
        result.transfer_sparsity = float(sparsity(t.mask, basis))
        result.transfer_colt = transfer_ticket(t, t_train, t_test, tcfg, seeds, t_spec)
        result.transfer_random = transfer_ticket(random_ticket(t, rnd_seed), t_train, t_test, tcfg, seeds, t_spec)
    return result
