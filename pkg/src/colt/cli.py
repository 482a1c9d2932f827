"""Command-line entry point: ``colt {dense,lth,colt,eval,transfer,similarity,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint, config as cfgmod
from .metrics import mask_similarity, matched_similarities
from .pruning import AlignmentError, Mask, prune_rate
from .report import read_csv, render_report, row_for, write_csv
from .tickets import (
    LayerCollapseError,
    NoOpRoundError,
    RoundRecord,
    Ticket,
    TransferError,
    evaluate_ticket,
    run_colt,
    run_dense,
    run_lth,
    transfer_ticket,
)

log = logging.getLogger("colt")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_INCOMPATIBLE = 4
EXIT_CORRUPT = 5
EXIT_PRUNING = 6
EXIT_EXISTS = 7


class OutputExistsError(FileExistsError):
    pass


def _claim(paths: list[Path], force: bool) -> None:
    taken = [str(p) for p in paths if p.exists()]
    if taken and not force:
        raise OutputExistsError(f"refusing to overwrite {', '.join(taken)} (pass --force)")
    for p in paths:
        p.parent.mkdir(parents=True, exist_ok=True)


def _load_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.parse_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.target_sparsity is not None:
        cfg.schedule.target_sparsity = args.target_sparsity
    if args.rounds is not None:
        cfg.schedule.max_rounds = args.rounds
    if args.out is not None:
        cfg.output.dir = args.out
    return cfgmod.validate(cfg)


def _load_ticket(path: str) -> Ticket:
    if not Path(path).is_file():
        raise FileNotFoundError(f"ticket file not found: {path}")
    obj = checkpoint.load_checkpoint(path)
    if not isinstance(obj, Ticket):
        raise TransferError(f"{path} holds a {type(obj).__name__}, not a ticket")
    return obj


def cmd_dense(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output.dir)
    csv_path = out / "dense.csv"
    _claim([csv_path], args.force)
    train, test = cfg.load_data()
    acc = run_dense(train, test, cfg.model_spec(train), cfg.train_config(), cfg.seed_set(),
                    cfg.schedule.eligibility)
    rec = RoundRecord(0, 0.0, 0.0, full_acc_pct=acc, seed=cfg.seeds.init)
    write_csv([row_for("dense", rec)], csv_path)
    print(f"dense accuracy {acc:.2f}%")
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _load_config(args)
    method = args.command
    out = Path(cfg.output.dir)
    csv_path, ticket_path = out / f"{method}.csv", out / f"{method}.ticket"
    masks_dir = out / f"{method}_masks"
    _claim([csv_path, ticket_path, masks_dir], args.force)
    train, test = cfg.load_data()
    spec = cfg.model_spec(train)
    run = run_colt if method == "colt" else run_lth
    kwargs = {"test": test, "eval_milestones": cfg.eval.milestones, "dataset_id": cfg.experiment.name}
    if method == "colt" and cfg.eval.accuracy_target >= 0:
        kwargs["accuracy_target"] = cfg.eval.accuracy_target
    ticket, trace = run(train, spec, cfg.schedule_for(method), cfg.train_config(), cfg.seed_set(), **kwargs)
    ticket.provenance["spec"] = {"arch": spec.arch, "widths": list(spec.widths), "norm": spec.norm,
                                 "kernel_size": spec.kernel_size, "num_classes": spec.num_classes,
                                 "input_shape": list(spec.input_shape), "input_shift": spec.input_shift}
    write_csv([row_for(method, r) for r in trace.records], csv_path)
    checkpoint.save_checkpoint(ticket, ticket_path)
    masks_dir.mkdir(exist_ok=True)
    for rec, m in zip(trace.records, trace.masks):
        checkpoint.save_checkpoint(m, masks_dir / f"round_{rec.round:03d}.mask")
    print(f"{method}: {len(trace.records)} rounds, sparsity {ticket.sparsity_all:.1f}% "
          f"(eligible {ticket.sparsity_eligible:.1f}%) -> {ticket_path}")
    return EXIT_OK


def cmd_eval(args, transfer: bool = False) -> int:
    cfg = _load_config(args)
    ticket = _load_ticket(args.ticket)
    name = "transfer" if transfer else "eval"
    csv_path = Path(cfg.output.dir) / f"{name}.csv"
    _claim([csv_path], args.force)
    train, test = cfg.load_data("target" if transfer else "data")
    spec = cfg.model_spec(train)
    fn = transfer_ticket if transfer else evaluate_ticket
    acc = fn(ticket, train, test, cfg.train_config(), cfg.seed_set(), spec)
    rec = RoundRecord(int(ticket.provenance.get("rounds", 0)), ticket.sparsity_all, ticket.sparsity_eligible,
                      full_acc_pct=acc, seed=cfg.seeds.init)
    write_csv([row_for(f"{ticket.provenance.get('method', 'ticket')}-{name}", rec)], csv_path)
    print(f"{name} accuracy {acc:.2f}% at sparsity {ticket.sparsity_all:.1f}%")
    return EXIT_OK


def _masks_from(path: str) -> list[Mask]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.mask"))
        if not files:
            raise FileNotFoundError(f"no .mask files in {path}")
        return [checkpoint.load_checkpoint(f) for f in files]
    if not p.is_file():
        raise FileNotFoundError(f"not found: {path}")
    obj = checkpoint.load_checkpoint(p)
    return [obj.mask if isinstance(obj, Ticket) else obj]


def cmd_similarity(args) -> int:
    a, b = _masks_from(args.a), _masks_from(args.b)
    rows = []
    print("sparsity_a_pct,sparsity_b_pct,similarity_pct")
    if len(a) == 1 and len(b) == 1:
        triples = [(prune_rate(a[0]), prune_rate(b[0]), mask_similarity(a[0], b[0]))]
    else:
        triples = matched_similarities(a, b)
    for i, (sa, sb, sim) in enumerate(triples, start=1):
        print(f"{sa:.1f},{sb:.1f},{sim:.1f}")
        rows.append({"method": "similarity", "round": i, "sparsity_all_pct": sa, "similarity_pct": sim})
    if args.out:
        path = Path(args.out) / "similarity.csv"
        _claim([path], args.force)
        write_csv(rows, path)
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.traces:
        if not Path(path).is_file():
            raise FileNotFoundError(f"trace not found: {path}")
        rows.extend(read_csv(path))
    out = Path(args.out or ".")
    charts = render_report(rows)
    targets = [out / name for name in charts]
    _claim(targets, args.force)
    for target, svg in zip(targets, charts.values()):
        target.write_text(svg, encoding="utf-8")
        print(f"wrote {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="colt", description="Cyclic overlapping lottery tickets at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every pruning round")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="key = value experiment file")
            p.add_argument("--seed", type=int, help="derive init/data/head seeds from one base seed")
            p.add_argument("--target-sparsity", type=float, help="override schedule.target_sparsity (%%)")
            p.add_argument("--rounds", type=int, help="override schedule.max_rounds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    common(sub.add_parser("dense", help="train the unpruned baseline"))
    common(sub.add_parser("lth", help="iterative magnitude pruning baseline"))
    common(sub.add_parser("colt", help="cyclic overlapping lottery ticket"))
    for name in ("eval", "transfer"):
        p = sub.add_parser(name, help=f"{name} a ticket with a fresh output layer")
        common(p)
        p.add_argument("--ticket", required=True)
    p = sub.add_parser("similarity", help="share of positions pruned by both tickets")
    p.add_argument("a")
    p.add_argument("b")
    common(p, needs_config=False)
    p = sub.add_parser("report", help="render trace CSVs to SVG charts")
    p.add_argument("traces", nargs="+")
    common(p, needs_config=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handlers = {
        "dense": cmd_dense, "lth": cmd_prune, "colt": cmd_prune, "eval": cmd_eval,
        "transfer": lambda a: cmd_eval(a, transfer=True), "similarity": cmd_similarity, "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except OutputExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except cfgmod.ConfigFileError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except checkpoint.CheckpointError as exc:
        print(f"corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (TransferError, AlignmentError) as exc:
        print(f"incompatible ticket: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (LayerCollapseError, NoOpRoundError) as exc:
        print(f"pruning aborted: {exc}", file=sys.stderr)
        return EXIT_PRUNING


if __name__ == "__main__":
    sys.exit(main())
