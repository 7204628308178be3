"""Cooperative kernel-service runtime.

One :class:`Runtime` drives contexts, the scheduler, the timer, the interrupt
controller and the emulated services.  How a context executes guest code is
delegated to a backend: :class:`OracleBackend` interprets A32 directly (the
"native CPU"), :class:`DbtBackend` runs translated Thumb-2 out of a code cache.
Both see exactly the same block boundaries, so they share delivery points,
timestamps and the observable-event order.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional

from .bits import AL, MASK32, cond_passed
from .guest_isa import (DecodeError, GuestFault, MachineState, Memory, execute_guest,
                        fetch_decode)
from .host_isa import (BANK_BASE, CACHE_BASE, CodeCacheImage, HostInstruction, StepLimit,
                       encode_host, run_host)
from .manifest import INTC_NAME, Workload
from .services import COLD, COLD_REASON, EMULATED, IRQ_WAKE_THREAD
from .xlate import (BANK_SLOTS, HIST_KEYS, OPTIMIZED, SCRATCH, SLOT_C, SLOT_N, SLOT_V, SLOT_Z,
                    place_block, scan_block, translate_block)

RETURN_MAGIC = 0x0FFF_FFF0
LR, PC = 14, 15

# interrupt controller register offsets
INTC_RAISE, INTC_ACK, INTC_ENABLE_SET, INTC_ENABLE_CLR, INTC_PENDING, INTC_ENABLE = 0, 4, 8, 12, 16, 20


class FallbackTriggered(Exception):
    def __init__(self, package):
        super().__init__(f"fallback: {package.reason}")
        self.package = package


class Deadlock(GuestFault):
    pass


@dataclass
class Event:
    tick: int
    kind: str          # service | mmio_r | mmio_w | irq
    ctx: str
    args: tuple
    pos: int = 0       # guest-instruction offset inside the running block (0: at a boundary)
    latency: Optional[int] = None

    def key(self) -> tuple:
        return (self.tick, self.kind, self.ctx, self.args)

    def __str__(self) -> str:
        parts = [a if isinstance(a, str) else f"{a:#x}" for a in self.args]
        return " ".join([str(self.tick), self.kind, self.ctx] + parts)


@dataclass
class Context:
    id: str
    kind: str                  # primary | irq | tasklet | workqueue | threaded_irq
    stack_lo: int
    stack_hi: int
    status: str = "waiting"    # ready | blocked | waiting | done
    wake: int = 0
    queue: deque = field(default_factory=deque)
    item: Optional[tuple] = None
    state: Any = None
    excl: bool = False         # shadow exclusive monitor (translated side)


@dataclass
class RunReport:
    mode: str
    guest_instructions: int
    host_instructions: int
    dispatcher_entries: int
    blocks_translated: int
    code_cache_bytes: int
    idle_ticks: float
    busy_ticks: float
    rule_histogram: dict
    boundaries: int = 0
    max_irq_latency: int = 0
    fallback: Optional[str] = None
    translated_guest: Optional[int] = None   # guest instructions run translated, if fewer than all

    @property
    def expansion_ratio(self) -> float:
        """Host instructions per translated guest instruction."""
        g = self.guest_instructions if self.translated_guest is None else self.translated_guest
        return self.host_instructions / g if g else 0.0

    def to_dict(self) -> dict:
        return dict(mode=self.mode, guest_instructions=self.guest_instructions,
                    host_instructions=self.host_instructions, expansion_ratio=self.expansion_ratio,
                    dispatcher_entries=self.dispatcher_entries, blocks_translated=self.blocks_translated,
                    code_cache_bytes=self.code_cache_bytes, idle_ticks=self.idle_ticks,
                    busy_ticks=self.busy_ticks, rule_histogram=dict(self.rule_histogram),
                    boundaries=self.boundaries, max_irq_latency=self.max_irq_latency,
                    fallback=self.fallback, translated_guest=self.translated_guest)


@dataclass
class RunResult:
    regs: list
    flags: tuple
    memory: dict
    trace: list
    report: RunReport
    contexts: dict = field(default_factory=dict)   # id -> guest registers
    deliveries: list = field(default_factory=list)

    def trace_keys(self) -> list:
        return [e.key() for e in self.trace]

    def trace_text(self) -> str:
        return "".join(f"{e}\n" for e in self.trace)

    def same_as(self, other: "RunResult") -> list:
        """Differences in guest-visible outcome (registers, flags, memory, events)."""
        out = []
        for r in range(16):
            if self.regs[r] != other.regs[r]:
                out.append(f"r{r}: {self.regs[r]:#x} != {other.regs[r]:#x}")
        if self.flags != other.flags:
            out.append(f"flags {self.flags} != {other.flags}")
        for name, data in self.memory.items():
            if other.memory.get(name) != data:
                out.append(f"memory region {name} differs")
        a, b = self.trace_keys(), other.trace_keys()
        if a != b:
            k = next((i for i, (x, y) in enumerate(zip(a, b)) if x != y), min(len(a), len(b)))
            out.append(f"event {k} differs: {a[k] if k < len(a) else None} != {b[k] if k < len(b) else None}")
        if self.report.guest_instructions != other.report.guest_instructions:
            out.append(f"guest instructions {self.report.guest_instructions} != "
                       f"{other.report.guest_instructions}")
        return out


def context_layout(wl: Workload) -> list:
    ids = [("primary", "primary"), ("irq", "irq"), ("tasklet", "tasklet")]
    ids += [(f"wq:{n}", "workqueue") for n in wl.workqueues]
    ids += [(f"tirq:{line}", "threaded_irq") for line in sorted(wl.threaded_irq)]
    out = []
    for k, (cid, kind) in enumerate(ids):
        lo = wl.stack_base + k * wl.stack_size
        out.append(Context(cid, kind, lo, lo + wl.stack_size))
    return out


def build_memory(wl: Workload, n_contexts: int) -> Memory:
    mem = Memory()
    for addr, data in wl.segments:
        mem.map(addr, len(data), f"code@{addr:#x}", kind="code", data=bytearray(data))
    for lo, size in wl.ram:
        mem.map(lo, size, f"ram@{lo:#x}", kind="ram")
    mem.map(wl.stack_base, wl.stack_size * n_contexts, "stacks", kind="stack")
    if wl.heap is not None:
        lo, hi = wl.heap
        mem.map(lo, hi - lo, "heap", kind="ram")
    for lo, hi, name in wl.mmio:
        mem.map_mmio(lo, hi, name)
    return mem


class Runtime:
    def __init__(self, workload: Workload, backend, schedule=None, step_limit: int = 10_000_000,
                 fallback_at: Optional[int] = None, _fresh: bool = True):
        self.wl = workload
        self.B = backend
        self.step_limit = step_limit
        self.fallback_at = fallback_at
        self.period = workload.tick_period
        self.hooks = workload.hooks
        self.contexts = context_layout(workload)
        self.by_id = {c.id: c for c in self.contexts}
        self.sched = sorted(schedule if schedule is not None else workload.schedule, key=lambda e: e[0])
        self.sched_i = 0
        self.now = 0
        self.idle = 0
        self.guest_count = 0
        self.boundaries = 0
        self.pending = 0
        self.enabled = sum(1 << line for line, on in workload.irq_lines.items() if on)
        self.paused = 0
        self.irq_active = False
        self.interrupted: Optional[str] = None
        self.cur: Optional[str] = None
        self.rr_last = 0
        self.since: dict = {}
        self.heap_next = workload.heap[0] if workload.heap else 0
        self.dev_regs: dict = {}
        self.trace: list = []
        self.deliveries: list = []        # audit log of interrupt deliveries
        self.phase = "top"
        self.fallback_reason: Optional[str] = None
        if _fresh:
            self.mem = build_memory(workload, len(self.contexts))
            self.mem.mmio_handler = self._mmio
            backend.attach(self)
            primary = self.by_id["primary"]
            regs = {13: primary.stack_hi, 14: RETURN_MAGIC}
            regs.update(workload.init)
            backend.init_context(primary, regs, workload.entry)
            primary.status = "ready"
            self.cur = "primary"

    # -- time --------------------------------------------------------------
    @property
    def tick(self) -> int:
        return self.now // self.period

    def _event(self, kind, args, pos=0, at=None, latency=None, ctx=None):
        t = (self.now if at is None else at) // self.period
        self.trace.append(Event(t, kind, ctx or self.cur or "-", tuple(args), pos, latency))

    def _timer(self):
        tick = self.tick
        while self.sched_i < len(self.sched) and self.sched[self.sched_i][0] <= tick:
            self.pending |= 1 << self.sched[self.sched_i][1]
            self.sched_i += 1
        for c in self.contexts:
            if c.status == "blocked" and c.wake <= tick:
                c.status = "ready"
        self._note_deliverable()

    def _note_deliverable(self, at=None):
        if self.paused or self.irq_active:
            return
        d = self.pending & self.enabled
        while d:
            line = (d & -d).bit_length() - 1
            d &= d - 1
            self.since.setdefault(line, self.guest_count if at is None else at)

    # -- interrupts --------------------------------------------------------
    def _deliver(self) -> bool:
        if self.irq_active or self.paused or self.wl.irq_handler is None:
            return False
        d = self.pending & self.enabled
        if not d:
            return False
        line = (d & -d).bit_length() - 1
        self.pending &= ~(1 << line)
        irq = self.by_id["irq"]
        irq.item = (self.wl.irq_handler, line)
        self._start(irq, {0: line, 13: irq.stack_hi, 14: RETURN_MAGIC}, self.wl.irq_handler)
        self.irq_active = True
        self.interrupted = self.cur
        lat = self.guest_count - self.since.pop(line, self.guest_count)
        it = self.by_id[self.interrupted] if self.interrupted else None
        self.deliveries.append(dict(line=line, tick=self.tick, latency=lat, interrupted=self.interrupted,
                                    at_boundary=it is None or self.B.at_boundary(it),
                                    in_spinlock=self.paused > 0))
        self._event("irq", (line,), latency=lat, ctx="irq")
        self.cur = "irq"
        return True

    def _start(self, ctx, regs, pc):
        self.B.init_context(ctx, regs, pc)
        ctx.status = "ready"

    def _mmio(self, op, addr, size, value):
        pos = self.B.mmio_index()
        here = self.now + pos
        lo, hi, name = next(d for d in self.wl.mmio if d[0] <= addr < d[1])
        off = addr - lo
        result = 0
        if name == INTC_NAME:
            if op == "w":
                if off == INTC_RAISE:
                    self.pending |= 1 << (value & 31)
                elif off == INTC_ACK:
                    self.pending &= ~(1 << (value & 31))
                elif off == INTC_ENABLE_SET:
                    self.enabled |= value
                elif off == INTC_ENABLE_CLR:
                    self.enabled &= ~value
                self._note_deliverable(self.guest_count + pos)
            elif off == INTC_PENDING:
                result = self.pending
            elif off == INTC_ENABLE:
                result = self.enabled
        elif op == "w":
            self.dev_regs[addr] = value
        else:
            result = self.dev_regs.get(addr, 0)
        self._event("mmio_w" if op == "w" else "mmio_r", (addr, value if op == "w" else result),
                    pos=pos, at=here)
        return result

    # -- scheduling --------------------------------------------------------
    def _drained(self) -> bool:
        for c in self.contexts:
            if c.kind == "primary":
                if c.status != "done":
                    return False
            elif c.status != "waiting" or c.queue:
                return False
        return True

    def _pick(self):
        n = len(self.contexts)
        for step in range(1, n + 1):
            k = (self.rr_last + step) % n
            c = self.contexts[k]
            if c.status == "waiting" and c.queue and c.kind != "irq":
                fn, arg = c.queue.popleft()
                c.item = (fn, arg)
                self._start(c, {0: arg, 13: c.stack_hi, 14: RETURN_MAGIC}, fn)
            if c.status == "ready":
                self.rr_last = k
                return c
        return None

    def _current(self):
        if self.cur is not None:
            c = self.by_id[self.cur]
            if c.status == "ready":
                return c
        self.cur = None
        while True:
            c = self._pick()
            if c is not None:
                self.cur = c.id
                return c
            self._timer()
            if self._deliver():
                return self.by_id["irq"]
            if self._drained():
                return None
            if any(c.status == "ready" for c in self.contexts):
                continue
            wakes = [c.wake * self.period for c in self.contexts if c.status == "blocked"]
            if self.sched_i < len(self.sched):
                wakes.append(self.sched[self.sched_i][0] * self.period)
            if not wakes:
                if not self.B.native:
                    self._fallback("deadlock", "top")
                raise Deadlock("no runnable context and no pending wake-up")
            t = min(wakes)
            if t > self.now:
                self.idle += t - self.now
                self.now = t

    def _yield(self, ctx):
        self.rr_last = self.contexts.index(ctx)
        self.cur = None

    def _returned(self, ctx):
        if ctx.kind == "irq":
            line = ctx.item[1]
            if self.B.get_reg(ctx, 0) == IRQ_WAKE_THREAD and line in self.wl.threaded_irq:
                t = self.by_id[f"tirq:{line}"]
                t.queue.append((self.wl.threaded_irq[line], line))
            ctx.status, ctx.item = "waiting", None
            self.irq_active = False
            self.cur = self.interrupted
            self.interrupted = None
            self._note_deliverable()
            return
        if ctx.kind == "primary":
            ctx.status = "done"
        else:
            ctx.status, ctx.item = "waiting", None
        self._yield(ctx)

    # -- services ----------------------------------------------------------
    def _service(self, ctx, name):
        B = self.B
        r0, r1, r2 = (B.get_reg(ctx, r) for r in (0, 1, 2))
        atomic = self.paused > 0 or ctx.kind in ("irq", "tasklet")
        if not B.native:
            if name in COLD:
                self._fallback(COLD_REASON[name], "top")
            if name not in EMULATED:
                self._fallback("unknown-service", "top")
            if name == "msleep" and atomic:
                self._fallback("deadlock", "top")
        self._event("service", (name, r0, r1, r2))
        if name == "halt":
            ctx.status = "done"
            self._yield(ctx)
            return
        B.return_to_lr(ctx)
        if name == "spin_lock":
            self.paused += 1
        elif name == "spin_unlock":
            self.paused = max(0, self.paused - 1)
            self._note_deliverable()
        elif name == "udelay":
            self.now += r0
        elif name == "msleep":
            ctx.status = "blocked"
            ctx.wake = self.tick + max(r0, 1)
            self._yield(ctx)
        elif name == "schedule":
            self._yield(ctx)
        elif name == "tasklet_schedule":
            self._enqueue(self.by_id["tasklet"], r0, r1)
        elif name == "queue_work":
            if r0 >= len(self.wl.workqueues):
                raise GuestFault(f"queue_work on undeclared workqueue {r0}")
            self._enqueue(self.by_id[f"wq:{self.wl.workqueues[r0]}"], r1, r2)
        elif name == "jiffies_read":
            B.set_reg(ctx, 0, self.tick)
        elif name == "alloc_slow":
            B.set_reg(ctx, 0, self._alloc(r0))
        # warn and unknown services are logged no-ops on the native side

    def _enqueue(self, ctx, fn, arg):
        ctx.queue.append((fn, arg))

    def _alloc(self, size: int) -> int:
        if self.wl.heap is None:
            return 0
        size = (size + 7) & ~7
        if self.heap_next + size > self.wl.heap[1]:
            return 0
        p = self.heap_next
        self.heap_next += size
        return p

    # -- fallback ----------------------------------------------------------
    def _fallback(self, reason: str, phase: str):
        from .fallback import trigger_fallback
        self.phase = phase
        self.fallback_reason = reason
        raise FallbackTriggered(trigger_fallback(reason, self))

    # -- main loop ---------------------------------------------------------
    def run(self) -> RunResult:
        B = self.B
        phase, self.phase = self.phase, "top"
        while True:
            if phase == "top":
                ctx = self._current()
                if ctx is None:
                    break
                pc = B.next_pc(ctx)
                if pc in self.hooks:
                    self._service(ctx, self.hooks[pc])
                    continue
                if pc == RETURN_MAGIC:
                    self._returned(ctx)
                    continue
                self.boundaries += 1
                if self.fallback_at is not None and self.boundaries == self.fallback_at:
                    self._fallback("forced", "boundary")
            ctx = self.by_id[self.cur]
            if phase in ("top", "boundary"):
                self._timer()
                if self._deliver():
                    phase = "top"
                    continue
            phase = "top"
            try:
                g = B.run_block(ctx)
            except DecodeError:
                if B.native:
                    raise
                self._fallback("decode-error", "block")
            self.now += g
            self.guest_count += g
            if self.guest_count > self.step_limit:
                raise StepLimit(f"guest step limit {self.step_limit}")
            self._note_deliverable()
        return self.result()

    def result(self) -> RunResult:
        B = self.B
        primary = self.by_id["primary"]
        regs, flags = B.guest_regs(primary)
        ctxs = {c.id: B.guest_regs(c)[0] for c in self.contexts if c.state is not None}
        return RunResult(regs, flags, B.guest_memory(), list(self.trace), self.report(), ctxs,
                         list(self.deliveries))

    def report(self) -> RunReport:
        B = self.B
        lats = [e.latency for e in self.trace if e.kind == "irq" and e.latency is not None]
        busy = self.now - self.idle
        return RunReport(
            mode=B.mode, guest_instructions=self.guest_count, host_instructions=B.host_count,
            dispatcher_entries=B.dispatcher_entries, blocks_translated=B.translations,
            code_cache_bytes=B.code_bytes, idle_ticks=self.idle / self.period,
            busy_ticks=busy / self.period, rule_histogram=B.histogram(), boundaries=self.boundaries,
            max_irq_latency=max(lats, default=0), fallback=self.fallback_reason)


# ---------------------------------------------------------------------------
# Reference-interpreter backend
# ---------------------------------------------------------------------------

def _check_target(target: int):
    if target & 3:
        raise GuestFault(f"interworking/unaligned branch to {target:#x}")


class OracleBackend:
    native = True
    mode = "oracle"
    host_count = dispatcher_entries = translations = code_bytes = 0

    def attach(self, rt: Runtime):
        self.rt = rt
        self.mem = rt.mem
        self.blocks: dict = {}
        self.index = 0

    def init_context(self, ctx, regs, pc):
        st = MachineState(mem=self.mem)
        for r, v in regs.items():
            st.regs[r] = v & MASK32
        st.regs[PC] = pc
        ctx.state = st

    def get_reg(self, ctx, r):
        return ctx.state.regs[r]

    def set_reg(self, ctx, r, v):
        ctx.state.regs[r] = v & MASK32

    def next_pc(self, ctx):
        return ctx.state.regs[PC]

    def return_to_lr(self, ctx):
        lr = ctx.state.regs[LR]
        _check_target(lr)
        ctx.state.regs[PC] = lr

    def run_block(self, ctx) -> int:
        st = ctx.state
        pc = st.regs[PC]
        insts = self.blocks.get(pc)
        if insts is None:
            try:
                insts = scan_block(self.mem, pc)[0]
            except DecodeError:
                # outside the translatable subset: the native CPU still runs it
                self.index = 0
                execute_guest(st, fetch_decode(self.mem, pc))
                return 1
            self.blocks[pc] = insts
        for k, inst in enumerate(insts):
            self.index = k
            execute_guest(st, inst)
        self.index = 0
        return len(insts)

    def mmio_index(self) -> int:
        return self.index

    def at_boundary(self, ctx) -> bool:
        return self.index == 0

    def guest_regs(self, ctx):
        return list(ctx.state.regs), ctx.state.flags()

    def guest_memory(self) -> dict:
        return self.mem.snapshot(("ram", "code", "stack"))

    def histogram(self) -> dict:
        return {k: 0 for k in HIST_KEYS}


# ---------------------------------------------------------------------------
# Translating backend
# ---------------------------------------------------------------------------

@dataclass
class EngineContext:
    st: MachineState
    page: bytearray
    pending: Optional[int] = None       # guest pc awaiting lookup (dispatcher side)
    chain_from: Optional[tuple] = None  # (block, exit index) that led to ``pending``


class DbtBackend:
    native = False

    def __init__(self, mode: str = OPTIMIZED, chaining: bool = True, cache_size: int = 1 << 20):
        self.mode = mode
        self.chaining = chaining
        self.cache_size = cache_size
        self.host_count = 0
        self.dispatcher_entries = 0
        self.translations = 0
        self.package = None              # MigrationPackage of the last fallback

    def attach(self, rt: Runtime):
        self.rt = rt
        self.mem = rt.mem
        self.hooks = rt.hooks
        self.bank = self.mem.map(BANK_BASE, BANK_SLOTS * 4, "bank", kind="bank")
        self.cache = CodeCacheImage(self.mem, CACHE_BASE, self.cache_size)
        self.blocks: dict = {}
        self.entry_tb: dict = {}
        self.entries: set = set()
        self.exit_at: dict = {}
        self.return_map: dict = {}
        self.patch_log: list = []
        self.active = None
        self.cur_tb = None

    @property
    def code_bytes(self) -> int:
        return self.cache.used

    # -- code cache ----------------------------------------------------------
    def lookup_or_translate(self, guest_pc: int) -> int:
        if guest_pc in self.hooks:
            raise ValueError(f"{guest_pc:#x} is a hook: hooks are call targets, never block entries")
        tb = self.blocks.get(guest_pc)
        if tb is not None:
            return tb.host_start
        tb = translate_block(guest_pc, self.mem, self.mode, self.hooks)
        entry = place_block(tb, self.cache)
        self.blocks[guest_pc] = tb
        self.entry_tb[entry] = tb
        self.entries.add(entry)
        for idx, ex in enumerate(tb.exits):
            self.exit_at[ex.host_addr] = (tb, idx)
        self.return_map.update(tb.return_map)
        self.translations += 1
        return entry

    def chain(self, tb, index: int, target: int) -> bool:
        """Patch exit ``index`` of ``tb`` into B.W ``target``; False if already chained."""
        ex = tb.exits[index]
        if ex.kind != "direct":
            raise ValueError("computed exits are never chained")
        if ex.chained is not None:
            return False
        hws = encode_host(HostInstruction("b", target=target, addr=ex.host_addr))
        if len(hws) != 2:
            raise AssertionError("chain patch must be a 32-bit branch")
        self.cache.write_halfwords(ex.host_addr, hws)
        ex.chained = target
        self.patch_log.append((ex.host_addr, target))
        return True

    def histogram(self) -> dict:
        h = {k: 0 for k in HIST_KEYS}
        for tb in self.blocks.values():
            for k, v in tb.histogram().items():
                h[k] += v
        return h

    # -- contexts --------------------------------------------------------------
    def _slot(self, es, slot):
        return int.from_bytes(es.page[4 * slot:4 * slot + 4], "little")

    def _set_slot(self, es, slot, v):
        es.page[4 * slot:4 * slot + 4] = (v & MASK32).to_bytes(4, "little")

    def init_context(self, ctx, regs, pc):
        es = EngineContext(MachineState(mem=self.mem), bytearray(BANK_SLOTS * 4), pending=pc)
        ctx.state = es
        ctx.excl = False
        for r in range(15):
            self.set_reg(ctx, r, regs.get(r, 0))
        if self.active is ctx:
            self.bank.data = es.page

    def _switch(self, ctx):
        if self.active is not ctx:
            self.bank.data = ctx.state.page
            self.active = ctx

    def get_reg(self, ctx, r):
        es = ctx.state
        if self.mode == OPTIMIZED:
            return self._slot(es, SCRATCH) if r == SCRATCH else es.st.regs[r]
        return self._slot(es, r)

    def set_reg(self, ctx, r, v):
        es = ctx.state
        if self.mode == OPTIMIZED and r != SCRATCH:
            es.st.regs[r] = v & MASK32
        else:
            self._set_slot(es, r, v)

    def flags(self, ctx) -> tuple:
        es = ctx.state
        if self.mode == OPTIMIZED:
            return es.st.flags()
        return tuple(bool(self._slot(es, s) >> 31) for s in (SLOT_N, SLOT_Z, SLOT_C, SLOT_V))

    def set_flags(self, ctx, flags):
        es = ctx.state
        if self.mode == OPTIMIZED:
            es.st.set_flags(*flags)
        else:
            for s, f in zip((SLOT_N, SLOT_Z, SLOT_C, SLOT_V), flags):
                self._set_slot(es, s, int(f) << 31)

    # -- dispatcher --------------------------------------------------------
    def _dispatch(self, es, ev):
        self.dispatcher_entries += 1
        es.chain_from = None
        if ev.kind == "exit":
            tb, idx = self.exit_at[ev.addr]
            desc = tb.exits[idx]
            if desc.kind == "direct":
                target = desc.target
                if self.chaining:
                    es.chain_from = (tb, idx)
            else:
                target = es.st.regs[desc.reg]
        elif ev.kind == "branch":
            target = ev.value
        else:
            raise AssertionError(f"unexpected host event {ev}")
        _check_target(target)
        es.pending = target

    def next_pc(self, ctx) -> int:
        es = ctx.state
        while True:
            if es.pending is not None:
                return es.pending
            hpc = es.st.regs[PC]
            tb = self.entry_tb.get(hpc)
            if tb is not None:
                return tb.guest_start
            # between blocks (service return glue): run to the next entry or exit
            self._switch(ctx)
            _, ev, cnt = run_host(es.st, stop_at=self.entries, step_limit=64)
            self.host_count += cnt
            if ev.kind != "entry":
                self._dispatch(es, ev)

    def return_to_lr(self, ctx):
        es = ctx.state
        lr = self.get_reg(ctx, LR)
        es.chain_from = None
        if self.cache.contains(lr & ~1):
            if not lr & 1:
                raise GuestFault(f"return to cache address {lr:#x} without thumb bit")
            es.st.regs[PC] = lr & ~1
            es.pending = None
        else:
            _check_target(lr)
            es.pending = lr

    def run_block(self, ctx) -> int:
        es = ctx.state
        pc = self.next_pc(ctx)
        entry = self.lookup_or_translate(pc)
        if es.chain_from is not None:
            tb0, idx = es.chain_from
            self.chain(tb0, idx, entry)
        es.chain_from = None
        es.pending = None
        st = es.st
        st.regs[PC] = entry
        tb = self.entry_tb[entry]
        self.cur_tb = tb
        self._switch(ctx)
        while True:
            _, ev, cnt = run_host(st, until=_not_mmio, stop_at=self.entries, step_limit=100_000)
            self.host_count += cnt
            if ev.kind == "entry":
                break
            if ev.kind == "service":
                if self.mode == OPTIMIZED:
                    st.regs[LR] = (ev.addr + 4) | 1
                st.regs[PC] = ev.addr + 4
                es.pending = tb.last.target
                break
            self._dispatch(es, ev)
            break
        last = tb.last
        if last.kind in ("ldrex", "strex") and (last.cond == AL or cond_passed(last.cond, *self.flags(ctx))):
            ctx.excl = last.kind == "ldrex"
        self.cur_tb = None
        return tb.guest_count

    def at_boundary(self, ctx) -> bool:
        """True when ``ctx`` is parked between translated blocks."""
        es = ctx.state
        hpc = es.st.regs[PC]
        return es.pending is not None or hpc in self.entry_tb or self.cache.host_to_guest.get(hpc) is None

    def mmio_index(self) -> int:
        tb = self.cur_tb
        if tb is None:
            return 0
        hpc = self.active.state.st.regs[PC]
        g = self.cache.host_to_guest.get(hpc, tb.guest_start)
        return (g - tb.guest_start) // 4

    # -- guest view --------------------------------------------------------
    def guest_pc(self, ctx) -> int:
        es = ctx.state
        if es.pending is not None:
            return es.pending
        hpc = es.st.regs[PC]
        tb = self.entry_tb.get(hpc)
        if tb is not None:
            return tb.guest_start
        if hpc in self.return_map:
            return self.return_map[hpc]
        return self.next_pc(ctx)

    def to_guest(self, value: int) -> int:
        """Map a code-cache return site to its guest address (other values unchanged)."""
        if value & 1 and self.cache.contains(value & ~1):
            return self.return_map.get(value & ~1, value)
        return value

    def guest_regs(self, ctx):
        regs = [self.to_guest(self.get_reg(ctx, r)) for r in range(15)]
        regs.append(self.guest_pc(ctx))
        return regs, self.flags(ctx)

    def guest_memory(self) -> dict:
        from .fallback import rewrite_words
        snap = self.mem.snapshot(("ram", "code", "stack"))
        kinds = {r.name: r.kind for r in self.mem.regions}
        return {name: bytes(rewrite_words(bytearray(data), self, f"in {name}",
                                          strict=kinds[name] == "stack")[0])
                for name, data in snap.items()}


def _not_mmio(ev) -> bool:
    return ev.kind != "mmio"


def random_schedule(workload: Workload, rng, horizon: int, max_events: int = 4) -> list:
    """A random interrupt schedule over the declared lines, ticks in [0, horizon]."""
    lines = sorted(workload.irq_lines)
    if not lines:
        return []
    n = rng.randint(1, max_events)
    return sorted(((rng.randint(0, horizon), rng.choice(lines)) for _ in range(n)),
                  key=lambda e: e[0])


def run_engine(workload: Workload, mode: str = OPTIMIZED, chaining: bool = True, schedule=None,
               step_limit: int = 10_000_000, fallback_at: Optional[int] = None):
    """Run a workload translated.  Returns ``(RunResult, backend)``; on fallback
    the native remainder is executed and its result returned instead."""
    from .fallback import resume_native
    be = DbtBackend(mode, chaining)
    rt = Runtime(workload, be, schedule=schedule, step_limit=step_limit, fallback_at=fallback_at)
    try:
        return rt.run(), be
    except FallbackTriggered as f:
        be.package = f.package
        res = resume_native(f.package, workload, step_limit=step_limit)
        res.report.fallback = f.package.reason
        return res, be
