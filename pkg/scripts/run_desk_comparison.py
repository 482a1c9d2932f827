"""LTH vs COLT on the desk configuration over several seeds.

Writes per-round traces, a per-seed summary, LTH-vs-COLT mask similarities and
the two SVG charts into --out.

    python3 scripts/run_desk_comparison.py --config configs/blobs8.cfg --seeds 0 1 2 --out runs/desk
"""

import argparse
import logging
import statistics
from pathlib import Path

from colt.config import parse_config
from colt.desk import run_seed
from colt.report import render_report, trace_rows, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/blobs8.cfg")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = parse_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows, summary, sims = [], [], []
    for seed in args.seeds:
        r = run_seed(cfg, seed)
        for trace in (r.colt, r.lth):
            for row in trace_rows(trace):
                row["seed"] = seed
                rows.append(row)
        line = {"seed": seed, "dense": r.dense_acc, "rounds_colt": r.rounds_colt, "rounds_lth": r.rounds_lth,
                "prune_cpu_s": round(r.prune_cpu_s, 1), "transfer_sparsity": round(r.transfer_sparsity, 2),
                "transfer_colt": r.transfer_colt, "transfer_random": r.transfer_random,
                "collapsed_rounds": len(r.collapsed_rounds)}
        for target, (sp, acc, rnd) in r.at_sparsity.items():
            line.update({f"sparsity_{target:g}": round(sp, 2), f"colt_{target:g}": acc, f"random_{target:g}": rnd})
        summary.append(line)
        sims += [(seed, *t) for t in r.similarity]
        print(line, flush=True)

    write_csv(rows, out / "traces.csv")
    keys = list(summary[0])
    (out / "summary.csv").write_text(
        ",".join(keys) + "\n" + "".join(",".join(str(s[k]) for k in keys) + "\n" for s in summary))
    (out / "similarity.csv").write_text("seed,sparsity_lth_pct,sparsity_colt_pct,similarity_pct\n" + "".join(
        f"{s},{a:.1f},{b:.1f},{c:.1f}\n" for s, a, b, c in sims))
    for name, svg in render_report(rows, "sparsity_eligible_pct").items():
        (out / name).write_text(svg)

    for key in ("dense", "colt_70", "random_70", "colt_89", "random_89", "transfer_colt", "transfer_random"):
        vals = [s[key] for s in summary if key in s]
        if vals:
            print(f"mean {key}: {statistics.mean(vals):.2f}")


if __name__ == "__main__":
    main()
