"""Command-line front end: run, translate, fuzz and heatmap.

Exit codes: 0 ok, 1 divergence, 2 guest fault or step limit, 3 usage error.
"""
from __future__ import annotations

import argparse
import json
import random
import sys

from .energy import calibrate_dram, frange, grid_csv, load_params, report_energy, whatif_grid
from .guest_isa import DecodeError, GuestFault, MemoryFault, disasm, run_oracle
from .host_isa import StepLimit, disasm_host
from .engine import random_schedule, run_engine
from .manifest import ManifestError, corpus_names, load_manifest
from .xlate import MODES, OPTIMIZED, place_block, sample_translation, translate_block

EXIT_OK, EXIT_DIVERGENCE, EXIT_FAULT, EXIT_USAGE = 0, 1, 2, 3
FAULTS = (GuestFault, MemoryFault, DecodeError, StepLimit)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _params(path):
    """Energy parameters: calibrated defaults, with a parameter file applied on top."""
    base = calibrate_dram().params
    if path is None:
        return base
    try:
        with open(path) as f:
            return load_params(text=base.to_text() + f.read())
    except ValueError as e:
        raise UsageError(str(e)) from None


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


def cmd_run(args) -> int:
    wl = load_manifest(args.manifest)
    schedule = None
    if args.seed is not None:
        base = run_oracle(wl, step_limit=args.step_limit)
        horizon = int(base.report.busy_ticks + base.report.idle_ticks) + 1
        schedule = random_schedule(wl, random.Random(args.seed), horizon)
    res, be = run_engine(wl, args.mode, chaining=not args.no_chain, schedule=schedule,
                         step_limit=args.step_limit, fallback_at=args.fallback_at)
    if args.package and be.package is not None:
        _write(args.package, be.package.to_json())
    out = dict(workload=wl.name, schedule=schedule if schedule is not None else wl.schedule,
               report=res.report.to_dict())
    status = EXIT_OK
    if args.oracle or args.fallback_at is not None:
        ref = run_oracle(wl, step_limit=args.step_limit, schedule=schedule)
        diffs = res.same_as(ref)
        out["oracle"] = dict(match=not diffs, differences=diffs,
                             guest_instructions=ref.report.guest_instructions)
        if diffs:
            status = EXIT_DIVERGENCE
    if res.report.expansion_ratio > 0:
        out["energy"] = report_energy(res.report, _params(args.params)).to_dict()
    if args.trace:
        _write(args.trace, res.trace_text())
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    _write(args.report, text)
    if args.report not in (None, "-"):
        r = res.report
        print(f"{wl.name}: {r.mode} guest={r.guest_instructions} host={r.host_instructions} "
              f"expansion={r.expansion_ratio:.2f} dispatch={r.dispatcher_entries} "
              f"fallback={r.fallback or '-'}" + ("" if status == EXIT_OK else " DIVERGED"))
    return status


def _listing(insts, translated) -> str:
    lines = []
    for inst, t in zip(insts, translated):
        host = [disasm_host(h) for h in t.items]
        lines.append(f"{inst.addr:#010x}  {disasm(inst):<32} [{t.rule.key}] {len(host)}")
        lines += [f"{'':12}{h}" for h in host]
    return "\n".join(lines) + "\n"


def cmd_translate(args) -> int:
    chunks = []
    for mode in (MODES if args.mode == "both" else (args.mode,)):
        if args.manifest is None:
            insts, translated = sample_translation(mode)
        else:
            wl = load_manifest(args.manifest)
            from .engine import build_memory, context_layout
            mem = build_memory(wl, len(context_layout(wl)))
            addr = wl.entry if args.addr is None else int(args.addr, 0)
            tb = translate_block(addr, mem, mode, wl.hooks)
            insts, translated = tb.insts, tb.translated
            if args.dump:
                from .host_isa import CodeCacheImage
                cache = CodeCacheImage(mem)
                place_block(tb, cache)
                stem = f"{args.dump}.{mode}" if args.mode == "both" else args.dump
                with open(stem, "wb") as f:
                    f.write(cache.dump())
                _write(stem + ".map", cache.sidecar())
        n = sum(len(t.items) for t in translated)
        chunks.append(f"# {mode}: {len(insts)} guest -> {n} host\n" + _listing(insts, translated))
    _write(args.out, "\n".join(chunks))
    return EXIT_OK


def cmd_fuzz(args) -> int:
    from .fuzz import fuzz
    rep = fuzz(args.seed, args.count, args.mode, workers=args.workers)
    text = json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n"
    _write(args.report, text)
    if args.report not in (None, "-"):
        print(f"fuzz {args.mode} seed={args.seed}: {rep.checked} checked, {rep.divergences} divergences")
    return EXIT_DIVERGENCE if rep.divergences else EXIT_OK


def _range(text: str) -> list:
    try:
        parts = [float(x) for x in text.split(":")]
    except ValueError:
        raise UsageError(f"bad range {text!r}; expected lo:hi:step") from None
    if len(parts) == 1:
        return parts
    if len(parts) != 3:
        raise UsageError(f"bad range {text!r}; expected lo:hi:step")
    try:
        return frange(*parts)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_heatmap(args) -> int:
    overheads, usages = _range(args.overheads), _range(args.usages)
    if not overheads or not usages:
        raise UsageError("empty overhead or usage range")
    if any(u < 0 or u > 1 for u in usages) or any(c <= 0 for c in overheads):
        raise UsageError("usages must lie in [0, 1] and overheads be positive")
    p = _params(args.params)
    csv = grid_csv(whatif_grid(p, overheads, usages))
    _write(args.out, csv)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="transkernel", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a workload translated, optionally against the oracle")
    r.add_argument("manifest", help=f"manifest path or corpus name ({', '.join(corpus_names())})")
    r.add_argument("--mode", choices=MODES, default=OPTIMIZED)
    r.add_argument("--oracle", action="store_true", help="also run the reference interpreter and diff")
    r.add_argument("--fallback-at", type=int, metavar="N", help="force migration at boundary N")
    r.add_argument("--seed", type=int, help="randomise the interrupt schedule")
    r.add_argument("--no-chain", action="store_true", help="disable block chaining")
    r.add_argument("--step-limit", type=int, default=10_000_000)
    r.add_argument("--report", metavar="PATH", help="JSON report (default stdout)")
    r.add_argument("--trace", metavar="PATH", help="event trace")
    r.add_argument("--params", metavar="PATH", help="energy parameter file")
    r.add_argument("--package", metavar="PATH", help="save the migration package if a fallback happens")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("translate", help="show translations of a block or the built-in sample")
    t.add_argument("manifest", nargs="?")
    t.add_argument("--addr", help="guest address (default: entry)")
    t.add_argument("--mode", choices=MODES + ("both",), default="both")
    t.add_argument("--out", metavar="PATH")
    t.add_argument("--dump", metavar="PATH", help="write the placed block and a host->guest map (needs a manifest)")
    t.set_defaults(func=cmd_translate)

    f = sub.add_parser("fuzz", help="per-instruction differential fuzzing")
    f.add_argument("--seed", type=int, default=1)
    f.add_argument("--count", type=int, default=100_000)
    f.add_argument("--mode", choices=MODES, default=OPTIMIZED)
    f.add_argument("--workers", type=int, default=1)
    f.add_argument("--report", metavar="PATH")
    f.set_defaults(func=cmd_fuzz)

    h = sub.add_parser("heatmap", help="relative-energy grid as CSV")
    h.add_argument("--params", metavar="PATH")
    h.add_argument("--overheads", default="1:10:0.5", help="lo:hi:step or a single value")
    h.add_argument("--usages", default="0.1:1:0.1", help="lo:hi:step or a single value")
    h.add_argument("--out", metavar="PATH", help="CSV file (default stdout)")
    h.set_defaults(func=cmd_heatmap)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ManifestError, OSError) as e:
        print(f"transkernel {args.cmd}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FAULTS as e:
        print(f"transkernel {args.cmd}: guest fault: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
