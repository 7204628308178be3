"""Overhead, dispatcher-decay and energy experiments over the shipped corpus.

Writes JSON/CSV under --out (default results/).
"""
import argparse
import csv
import json
import os

from transkernel.energy import calibrate_dram, energy_report, frange, grid_csv, whatif_grid, WorkloadProfile
from transkernel.engine import run_engine
from transkernel.manifest import corpus_names, load_manifest
from transkernel.xlate import BASELINE, OPTIMIZED, sample_translation


def overhead_rows():
    rows = []
    for name in corpus_names():
        wl = load_manifest(name)
        rec = dict(workload=name)
        for mode in (OPTIMIZED, BASELINE):
            r = run_engine(wl, mode)[0].report
            rec[f"{mode}_host"] = r.host_instructions
            rec[f"{mode}_expansion"] = round(r.expansion_ratio, 3)
            rec[f"{mode}_dispatch"] = r.dispatcher_entries
        rec["guest"] = r.guest_instructions
        rec["gap"] = round(rec["baseline_host"] / rec["optimized_host"], 3)
        rows.append(rec)
    return rows


def decay_rows():
    rows = []
    for n in (10, 100, 1000):
        wl = load_manifest(f"loop_{n}")
        rows.append(dict(n=n, chained=run_engine(wl, OPTIMIZED)[0].report.dispatcher_entries,
                         unchained=run_engine(wl, OPTIMIZED, chaining=False)[0].report.dispatcher_entries))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    rows = overhead_rows()
    with open(os.path.join(args.out, "overhead.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['workload']:15} expansion {r['optimized_expansion']:6.2f} vs {r['baseline_expansion']:6.2f}"
              f"  gap {r['gap']:.2f}x")

    decay = decay_rows()
    for d in decay:
        print(f"loop_{d['n']:<5} dispatcher entries chained={d['chained']} unchained={d['unchained']}")

    sample = {m: [len(t.items) for t in sample_translation(m)[1]] for m in (OPTIMIZED, BASELINE)}
    print("sample host instructions:", {m: sum(v) for m, v in sample.items()})

    cal = calibrate_dram()
    p = cal.params
    with open(os.path.join(args.out, "heatmap.csv"), "w") as f:
        f.write(grid_csv(whatif_grid(p, frange(1, 10, 0.25), frange(0.05, 1, 0.05))))
    rep = energy_report(p, WorkloadProfile.from_usage(0.4), 2.7)
    print(f"dram bg={cal.bg:.3f} c={cal.c} residual at secondary point {cal.residual:+.4f}")
    print(f"usage 0.4, overhead 2.7: ark {rep.rel_ark:.3f}, LITTLE {rep.rel_little:.3f} of native")

    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(dict(overhead=rows, decay=decay, sample=sample,
                       calibration=dict(bg=cal.bg, c=cal.c, exact_c=cal.exact_c, residual=cal.residual),
                       energy=rep.to_dict()), f, indent=2)


if __name__ == "__main__":
    main()
