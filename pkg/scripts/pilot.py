#!/usr/bin/env python3
"""Desk-scale dynamics pilot.

Runs the default lab end to end for one variant and prints the margins
behind each acceptance-style gate (privacy drop, sanitization lift,
event reduction, utility recovery, trade-off ordering, frequency
analysis), so generator and schedule constants can be tuned before
freezing the test suite.

Usage: python scripts/pilot.py [workdir] [--variant mlm|clm] [--seeds N]
"""

import argparse
import sys
import time
from pathlib import Path

from sani import harness as H
from sani import metrics as ME
from sani import model as M


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("workdir", nargs="?", default="pilot_out")
    ap.add_argument("--variant", default="mlm", choices=["mlm", "clm"])
    ap.add_argument("--seeds", type=int, default=1)
    args = ap.parse_args()

    wd = Path(args.workdir)
    t0 = time.time()
    paths = H.write_desk_configs(wd)
    exp = "exp_mlm" if args.variant == "mlm" else "exp_clm"
    cfg = H.load_experiment(paths[exp])
    curves = ("mlm", "ppmlm") if args.variant == "mlm" else ("clm", "ppclm")

    results = {}
    for curve in curves:
        ev = H.cmd_finetune(cfg, curve)
        results[curve] = ev.records
        for r in ev.records:
            print(f"  {r.run} ep{r.epoch:2d} privacy={r.privacy:.3f} regurg={r.regurgitation:.3f} "
                  f"util={r.utility:.3f} events={r.events}")
    print(f"[{time.time()-t0:.0f}s] finetunes done")

    base = curves[0]
    ckpt = cfg.outdir / f"ckpt_{base}_ep{cfg.finetune_epochs}.sani"
    sani_runs = {}
    for strategy in H.U.STRATEGIES:
        for seed in range(args.seeds):
            ev = H.cmd_sanitize(cfg, ckpt, strategy, seed=seed)
            sani_runs[(strategy, seed)] = ev.records
            rs = ev.records
            print(f"  {strategy} s{seed}: " + " ".join(f"ep{r.epoch}:p={r.privacy:.3f}/u={r.utility:.3f}/e={r.events}" for r in rs))
    print(f"[{time.time()-t0:.0f}s] sanitize done")

    ft = {r.epoch: r for r in results[base] if r.phase == "finetune"}
    pp = {r.epoch: r for r in results[curves[1]] if r.phase == "finetune"}
    F = cfg.finetune_epochs

    print("\n=== gate margins ===")
    print(f"C4a privacy drop ({base}): ep0 {ft[0].privacy:.3f} -> ep{F} {ft[F].privacy:.3f} "
          f"(drop {ft[0].privacy - ft[F].privacy:.3f}, need >= 0.10)")
    drift = max(abs(pp[e].privacy - pp[0].privacy) for e in pp)
    print(f"C4b pp privacy drift: max |delta| {drift:.3f} (need <= 0.05)")

    s0 = sani_runs[("sani", 0)]
    fin = ft[F]
    print(f"C5 privacy lift after 1 repair: {s0[1].privacy - fin.privacy:.3f} (need >= 0.15)")
    print(f"C5 event drop after 1 repair: {1 - s0[1].events / max(1, fin.events):.3f} (need >= 0.60)")

    end = {k: v[-1] for k, v in sani_runs.items()}
    for seed in range(args.seeds):
        pr = {s: end[(s, seed)].privacy for s in H.U.STRATEGIES}
        ut = {s: end[(s, seed)].utility for s in H.U.STRATEGIES}
        print(f"C6 s{seed}: privacy sani={pr['sani']:.3f} ro={pr['repair-only']:.3f} pruning={pr['pruning']:.3f} | "
              f"utility ro={ut['repair-only']:.3f} sani={ut['sani']:.3f} pruning={ut['pruning']:.3f}")
    print(f"C7 sani utility at budget end {end[('sani',0)].utility:.3f} vs finetuned {fin.utility:.3f} "
          f"(|diff| {abs(end[('sani',0)].utility - fin.utility):.3f}, need <= 0.03); "
          f"post-erase {s0[0].utility:.3f} (must be < both)")

    if args.variant == "mlm":
        conf_cfg = H.load_experiment(paths["exp_mlm_conf"])
        ev = H.cmd_sanitize(conf_cfg, ckpt, "sani", seed=0)
        tbl_before = ME.read_term_table_csv(cfg.outdir / f"term_{base}_ep{F}_conf.csv")
        fa = ME.frequency_analysis(tbl_before)
        print(f"C8 spearman before unlearning: {fa.spearman:.3f} (need >= 0.5)")
        tbl_after = ev.tables[1]["conf"]
        rows_b = sorted(tbl_before.rows, key=lambda r: -r.repetitions)
        top = rows_b[: max(1, len(rows_b) // 10)]
        after = {r.label: r.events for r in tbl_after.rows}
        eb = sum(r.events for r in top)
        ea = sum(after.get(r.label, 0) for r in top)
        print(f"C8 top-decile events before {eb} after {ea} (drop {1 - ea / max(1, eb):.3f}, need >= 0.80)")
        rare = rows_b[-max(1, len(rows_b) // 10):]
        rb = sum(r.events for r in rare)
        ra = sum(after.get(r.label, 0) for r in rare)
        print(f"C8 rare-decile events before {rb} after {ra} (report only)")

    print(f"\ntotal wall time {time.time()-t0:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
