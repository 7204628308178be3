"""Translated -> native migration.

At a boundary or a cold hook the engine freezes every context, rewrites each
code-cache return address it can find (registers and stacks) to the guest
address it stands for, and packs the whole runtime into a MigrationPackage.
:func:`resume_native` rebuilds a runtime on the reference interpreter from the
package; contexts that were in the middle of deferred work or an interrupt
handler continue there as receivers.
"""
from __future__ import annotations

import base64
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional

from .guest_isa import MachineState, Memory
from .host_isa import CACHE_BASE

FORMAT_VERSION = 1
REASONS = ("cold-hook", "alloc-slow-path", "unknown-service", "deadlock", "decode-error", "forced")


class UnmappedReturnSite(Exception):
    def __init__(self, value: int, where: str = ""):
        super().__init__(f"code-cache word {value:#010x} has no return-site mapping {where}".rstrip())
        self.value = value


class PackageError(ValueError):
    pass


@dataclass
class ContextPackage:
    id: str
    kind: str
    status: str
    wake: int
    queue: list
    item: Optional[list]
    regs: Optional[list]
    flags: Optional[list]
    excl: bool
    stack: list                      # [lo, hi)
    rewritten: list = field(default_factory=list)   # [offset, old host addr, new guest addr]


@dataclass
class MigrationPackage:
    reason: str
    phase: str
    workload: str
    contexts: list
    runtime: dict
    memory: dict                     # name -> {lo, kind, data(base64)}
    trace: list
    engine: dict
    version: int = FORMAT_VERSION

    @property
    def rewritten_slots(self) -> int:
        return sum(len(c.rewritten) for c in self.contexts)

    @property
    def pending_work(self) -> list:
        return [(c.id, tuple(q)) for c in self.contexts for q in c.queue]

    @property
    def pending_lines(self) -> list:
        p = self.runtime["pending"]
        return [b for b in range(32) if p >> b & 1]

    @property
    def receivers(self) -> list:
        """Contexts that resume mid-work on the native side."""
        return [c.id for c in self.contexts
                if c.kind != "primary" and (c.item is not None or c.status == "blocked")]

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MigrationPackage":
        d = json.loads(text)
        if d.get("version") != FORMAT_VERSION:
            raise PackageError(f"unsupported package version {d.get('version')!r}")
        d["contexts"] = [ContextPackage(**c) for c in d["contexts"]]
        return cls(**d)


def _in_cache(be, value: int) -> bool:
    return be.cache.contains(value & ~1)


def rewrite_words(buf: bytearray, be, where: str = "", strict: bool = True) -> tuple:
    """Replace every aligned word of ``buf`` that is a code-cache return site.

    The engine only ever hands out return sites (thumb bit set), so any other
    code-cache-range word is either guest data that happens to fall in the
    window or an engine bug.  Stacks are ``strict``: such a word raises
    UnmappedReturnSite.  Elsewhere it is left untouched.
    """
    lo, hi = be.cache.base, be.cache.base + be.cache.size
    done = []
    for off in range(0, len(buf) - 3, 4):
        v = int.from_bytes(buf[off:off + 4], "little")
        if lo <= (v & ~1) < hi:
            g = be.return_map.get(v & ~1) if v & 1 else None
            if g is None:
                if strict:
                    raise UnmappedReturnSite(v, where)
                continue
            buf[off:off + 4] = g.to_bytes(4, "little")
            done.append([off, v, g])
    return buf, done


def rewrite_stack(ctx, be, mem: Memory) -> list:
    """Rewrite the code-cache words of ``ctx``'s stack extent in place."""
    region = mem.region_at(ctx.stack_lo)
    o = ctx.stack_lo - region.lo
    buf = bytearray(region.data[o:o + (ctx.stack_hi - ctx.stack_lo)])
    _, done = rewrite_words(buf, be, f"on {ctx.id} stack")
    region.data[o:o + len(buf)] = buf
    return done


def scan_cache_words(mem: Memory, lo: int, hi: int, cache_base: int = CACHE_BASE,
                     cache_size: int = 1 << 20) -> list:
    """Addresses in [lo, hi) holding a word inside the code-cache range."""
    out = []
    for a in range(lo, hi, 4):
        v = mem.read32(a)
        if cache_base <= (v & ~1) < cache_base + cache_size:
            out.append(a)
    return out


_RT_FIELDS = ("now", "idle", "guest_count", "boundaries", "pending", "enabled", "paused", "irq_active",
              "interrupted", "cur", "rr_last", "heap_next", "sched_i")


def trigger_fallback(reason: str, rt) -> MigrationPackage:
    """Freeze ``rt`` (a Runtime on a DbtBackend) into a self-contained package."""
    if reason not in REASONS:
        raise ValueError(f"unknown fallback reason {reason!r}")
    be = rt.B
    ctxs = []
    for c in rt.contexts:
        regs = flags = None
        if c.state is not None:
            regs, flags = be.guest_regs(c)
            flags = list(flags)
        done = rewrite_stack(c, be, rt.mem)
        ctxs.append(ContextPackage(c.id, c.kind, c.status, c.wake, [list(q) for q in c.queue],
                                   list(c.item) if c.item else None, regs, flags, c.excl,
                                   [c.stack_lo, c.stack_hi], done))
    memory = {}
    for r in rt.mem.regions:
        if r.kind not in ("ram", "code", "stack"):
            continue
        buf, _ = rewrite_words(bytearray(r.data), be, f"in {r.name}", strict=r.kind == "stack")
        r.data[:] = buf
        memory[r.name] = dict(lo=r.lo, kind=r.kind, data=base64.b64encode(bytes(buf)).decode())
    runtime = {k: getattr(rt, k) for k in _RT_FIELDS}
    runtime["since"] = {str(k): v for k, v in rt.since.items()}
    runtime["dev_regs"] = {str(k): v for k, v in rt.dev_regs.items()}
    runtime["sched"] = [list(e) for e in rt.sched]
    runtime["deliveries"] = [dict(d) for d in rt.deliveries]
    trace = [dict(tick=e.tick, kind=e.kind, ctx=e.ctx, args=list(e.args), pos=e.pos, latency=e.latency)
             for e in rt.trace]
    engine = dict(mode=be.mode, host_instructions=be.host_count, dispatcher_entries=be.dispatcher_entries,
                  blocks_translated=be.translations, code_cache_bytes=be.code_bytes,
                  rule_histogram=be.histogram())
    return MigrationPackage(reason, rt.phase, rt.wl.name, ctxs, runtime, memory, trace, engine)


def unpack_memory(pkg: MigrationPackage) -> Memory:
    """Guest memory image carried by ``pkg`` (no MMIO windows)."""
    mem = Memory()
    for name, r in pkg.memory.items():
        data = bytearray(base64.b64decode(r["data"]))
        mem.map(r["lo"], len(data), name, kind=r["kind"], data=data)
    return mem


def resume_native(pkg: MigrationPackage, workload, step_limit: int = 10_000_000):
    """Continue a migrated run on the reference interpreter; returns a RunResult."""
    from .engine import Event, OracleBackend, Runtime
    be = OracleBackend()
    rt = Runtime(workload, be, schedule=[tuple(e) for e in pkg.runtime["sched"]],
                 step_limit=step_limit, _fresh=False)
    mem = unpack_memory(pkg)
    for lo, hi, name in workload.mmio:
        mem.map_mmio(lo, hi, name)
    mem.mmio_handler = rt._mmio
    rt.mem = mem
    be.attach(rt)
    for k in _RT_FIELDS:
        setattr(rt, k, pkg.runtime[k])
    rt.deliveries = [dict(d) for d in pkg.runtime.get("deliveries", [])]
    rt.since = {int(k): v for k, v in pkg.runtime["since"].items()}
    rt.dev_regs = {int(k): v for k, v in pkg.runtime["dev_regs"].items()}
    rt.trace = [Event(e["tick"], e["kind"], e["ctx"], tuple(e["args"]), e["pos"], e["latency"])
                for e in pkg.trace]
    for cp in pkg.contexts:
        c = rt.by_id[cp.id]
        c.status, c.wake = cp.status, cp.wake
        c.queue = deque(tuple(q) for q in cp.queue)
        c.item = tuple(cp.item) if cp.item else None
        if cp.regs is not None:
            st = MachineState(mem=mem)
            st.regs = list(cp.regs)
            st.set_flags(*cp.flags)
            st.exclusive = cp.excl
            c.state = st
    rt.phase = pkg.phase
    rt.fallback_reason = pkg.reason
    res = rt.run()
    rep = res.report
    rep.mode = f"{pkg.engine['mode']}+native"
    rep.host_instructions = pkg.engine["host_instructions"]
    rep.dispatcher_entries = pkg.engine["dispatcher_entries"]
    rep.blocks_translated = pkg.engine["blocks_translated"]
    rep.code_cache_bytes = pkg.engine["code_cache_bytes"]
    rep.rule_histogram = dict(pkg.engine["rule_histogram"])
    rep.fallback = pkg.reason
    rep.translated_guest = pkg.runtime["guest_count"]
    return res
