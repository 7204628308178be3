"""Per-instruction differential fuzzing: translated host code vs the oracle."""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from .bits import AL, MASK32, shift_c
from .guest_isa import (DecodeError, GuestFault, GuestInstruction, MachineState, Memory,
                        MemoryFault, decode_guest, disasm, execute_guest)
from .host_isa import (BANK_BASE, CodeCacheImage, HostEvent, StepLimit, Unencodable,
                       disasm_host, run_host)
from .xlate import (BASELINE, OPTIMIZED, SCRATCH, SLOT_C, SLOT_N, SLOT_V, SLOT_Z, place_block,
                    translate_insts)

CODE_LO, CODE_SIZE = 0x6000, 0x4000
INST_ADDR = 0x8000
DATA_LO, DATA_SIZE = 0x0010_0000, 0x4000
BANK_SIZE = 0x100

# weighted opcode-space templates: (fixed bits, mask of randomised bits)
_TEMPLATES = (
    (0x0000_0000, 0x01FF_FFFF, 6),   # data-processing register / register-shift, mul
    (0x0200_0000, 0x01FF_FFFF, 5),   # data-processing immediate
    (0x0300_0000, 0x004F_FFFF, 1),   # movw / movt
    (0x0400_0000, 0x01FF_FFFF, 4),   # ldr/str immediate
    (0x0600_0000, 0x01FF_FFEF, 3),   # ldr/str register
    (0x0800_0000, 0x01FF_FFFF, 2),   # ldm/stm
    (0x0A00_0000, 0x01FF_FFFF, 1),   # b / bl
    (0x012F_FF10, 0x0000_002F, 1),   # bx / blx
    (0x0190_0F9F, 0x006F_F000, 1),   # ldrex / strex
    (0x0000_0090, 0x003F_FF0F, 1),   # mul / mla
)
_WEIGHTS = [t[2] for t in _TEMPLATES]


def random_instruction(rng: random.Random, addr: int = INST_ADDR) -> GuestInstruction:
    while True:
        fixed, mask, _ = rng.choices(_TEMPLATES, _WEIGHTS)[0]
        cond = AL if rng.random() < 0.6 else rng.randrange(14)
        word = cond << 28 | fixed | (rng.getrandbits(28) & mask)
        try:
            inst = decode_guest(word, addr)
        except DecodeError:
            continue
        if inst.kind != "system":
            return inst


def _mem_offset(inst, regs, c) -> int:
    if inst.rm is None:
        off = inst.imm
    else:
        off = shift_c(regs[inst.rm], inst.shift.kind, inst.shift.amount, c)[0]
    return off if inst.up else -off


def random_state(rng: random.Random, inst: GuestInstruction) -> MachineState:
    mem = Memory()
    code = bytearray(rng.randbytes(CODE_SIZE))
    mem.map(CODE_LO, CODE_SIZE, "code", kind="code", data=code)
    mem.map(DATA_LO, DATA_SIZE, "data", kind="ram", data=bytearray(rng.randbytes(DATA_SIZE)))
    mem.write32(inst.addr, _encode(inst))
    st = MachineState(mem=mem)
    st.regs = [rng.getrandbits(32) for _ in range(16)]
    if rng.random() < 0.3:
        # small and boundary values exercise carries and shifts
        for r in range(15):
            if rng.random() < 0.5:
                st.regs[r] = rng.choice((0, 1, 2, 31, 32, 33, 0x7FFFFFFF, 0x80000000, MASK32, rng.randrange(256)))
    st.regs[15] = inst.addr
    st.set_flags(*(rng.random() < 0.5 for _ in range(4)))
    # translated STREX always succeeds, so every state starts with the monitor open
    st.exclusive = True
    k = inst.kind
    if k in ("mem", "ldrex", "strex"):
        if inst.rm is not None and k == "mem":
            st.regs[inst.rm] = rng.randrange(0, 64) * rng.choice((1, 4))
        word = k != "mem" or not inst.op.endswith("b")
        target = DATA_LO + 0x1000 + rng.randrange(0, 0x2000)
        if word:
            target &= ~3
        if k == "mem" and inst.pre:
            off = _mem_offset(inst, st.regs, st.c)
            if inst.rn == 15:
                pass
            else:
                st.regs[inst.rn] = (target - off) & MASK32
        elif inst.rn != 15:
            st.regs[inst.rn] = target
    elif k == "block":
        st.regs[inst.rn] = (DATA_LO + 0x1000 + rng.randrange(0, 0x2000)) & ~3
    elif k in ("bx", "blx") or (k == "alu" and inst.rd == 15):
        if inst.rm is not None and inst.rm != 15:
            st.regs[inst.rm] = rng.randrange(0x1000, 0x0F00_0000) & ~3
    return st


def _encode(inst):
    from .guest_isa import encode_guest
    return encode_guest(inst)


@dataclass
class GuestView:
    regs: list
    flags: tuple
    memory: dict

    def diff(self, other: "GuestView") -> list:
        out = []
        for r in range(16):
            if self.regs[r] != other.regs[r]:
                out.append(f"r{r}: oracle={self.regs[r]:#010x} host={other.regs[r]:#010x}")
        if self.flags != other.flags:
            out.append(f"nzcv: oracle={self.flags} host={other.flags}")
        for name, data in self.memory.items():
            if other.memory.get(name) != data:
                bad = next(i for i, (a, b) in enumerate(zip(data, other.memory[name])) if a != b)
                out.append(f"memory {name}+{bad:#x} differs")
        return out


def run_translated(inst: GuestInstruction, st: MachineState, mode: str, hooks=None,
                   xlate=translate_insts) -> tuple:
    """Translate ``inst`` alone and run it on the host; returns (GuestView, block)."""
    mem = st.mem.clone()
    mem.map(BANK_BASE, BANK_SIZE, "bank", kind="bank")
    cache = CodeCacheImage(mem, size=0x1000)
    tb = xlate([inst], mode, hooks or {})
    place_block(tb, cache)
    hs = MachineState(mem=mem)
    slots = [0] * (BANK_SIZE // 4)
    if mode == OPTIMIZED:
        hs.regs = list(st.regs)
        hs.regs[SCRATCH] = 0xDEAD_BEEF
        slots[SCRATCH] = st.regs[SCRATCH]
        hs.set_flags(*st.flags())
    else:
        hs.regs = [0xDEAD_0000 | r for r in range(16)]
        hs.regs[13] = 0xDEAD_000D
        slots[:15] = st.regs[:15]
        for slot, f in zip((SLOT_N, SLOT_Z, SLOT_C, SLOT_V), st.flags()):
            slots[slot] = (f << 31) | 0x1234
        hs.set_flags(False, True, False, True)
    for k, v in enumerate(slots):
        mem.write32(BANK_BASE + 4 * k, v)
    hs.regs[15] = tb.host_start
    hs, ev, _ = run_host(hs, step_limit=500)
    view_regs = list(hs.regs)
    if mode == BASELINE:
        view_regs[:15] = [mem.read32(BANK_BASE + 4 * r) for r in range(15)]
        flags = tuple(bool(mem.read32(BANK_BASE + 4 * s) >> 31) for s in (SLOT_N, SLOT_Z, SLOT_C, SLOT_V))
    else:
        view_regs[SCRATCH] = mem.read32(BANK_BASE + 4 * SCRATCH)
        flags = hs.flags()
    view_regs[15] = _guest_pc(ev, tb, hs)
    lr = view_regs[14]
    if (lr & ~1) in tb.return_map and lr & 1:
        view_regs[14] = tb.return_map[lr & ~1]
    return GuestView(view_regs, flags, mem.snapshot(("ram", "code"))), tb


def _guest_pc(ev: HostEvent, tb, hs) -> int:
    if ev.kind == "exit":
        desc = tb.exits[ev.value]
        return desc.target if desc.kind == "direct" else hs.regs[desc.reg]
    if ev.kind == "branch":
        return ev.value
    raise AssertionError(f"unexpected host event {ev}")


def oracle_view(inst, st: MachineState) -> GuestView:
    g = st.copy()
    execute_guest(g, inst)
    return GuestView(list(g.regs), g.flags(), g.mem.snapshot(("ram", "code")))


@dataclass
class FuzzReport:
    seed: int
    count: int
    mode: str
    checked: int = 0
    skipped: int = 0
    divergences: int = 0
    by_kind: dict = field(default_factory=dict)
    first: Optional[dict] = None

    def to_dict(self) -> dict:
        return dict(seed=self.seed, count=self.count, mode=self.mode, checked=self.checked,
                    skipped=self.skipped, divergences=self.divergences, by_kind=self.by_kind,
                    first_divergence=self.first)


def repro(inst, st, mode, tb, diffs) -> dict:
    return dict(word=f"{_encode(inst):#010x}", disasm=disasm(inst), mode=mode,
                regs=[f"{v:#010x}" for v in st.regs], nzcv=list(st.flags()),
                exclusive=st.exclusive,
                host=[disasm_host(h) for h in tb.host] if tb is not None else [],
                diffs=diffs)


CHUNK = 5000


def _fuzz_chunk(seed: int, chunk: int, count: int, mode: str, xlate=translate_insts,
                stop_on_first: bool = False) -> FuzzReport:
    rng = random.Random(f"{seed}:{chunk}")
    rep = FuzzReport(seed, count, mode)
    while rep.checked < count:
        inst = random_instruction(rng)
        for _attempt in range(8):
            st = random_state(rng, inst)
            try:
                want = oracle_view(inst, st)
                break
            except (MemoryFault, GuestFault):
                continue
        else:
            rep.skipped += 1
            continue
        tb = None
        try:
            got, tb = run_translated(inst, st, mode, xlate=xlate)
            diffs = want.diff(got)
        except (MemoryFault, StepLimit, Unencodable, AssertionError, ValueError, IndexError) as e:
            diffs = [f"host error: {type(e).__name__}: {e}"]
        rep.checked += 1
        rep.by_kind[inst.kind] = rep.by_kind.get(inst.kind, 0) + 1
        if diffs:
            rep.divergences += 1
            if rep.first is None:
                rep.first = repro(inst, st, mode, tb, diffs)
                rep.first["case"] = chunk * CHUNK + rep.checked - 1
            if stop_on_first:
                break
    return rep


def _chunk_args(seed, count, mode):
    return [(seed, k, min(CHUNK, count - k * CHUNK), mode) for k in range((count + CHUNK - 1) // CHUNK)]


def _run_chunk(args):
    return _fuzz_chunk(*args)


def fuzz(seed: int, count: int, mode: str = OPTIMIZED, xlate=translate_insts,
         stop_on_first: bool = False, workers: int = 1) -> FuzzReport:
    """Differential check of ``count`` random instructions.

    Work is cut into fixed chunks with their own derived seeds, so the report
    does not depend on ``workers``.
    """
    jobs = _chunk_args(seed, count, mode)
    if workers > 1 and xlate is translate_insts and not stop_on_first:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    else:
        parts = []
        for job in jobs:
            parts.append(_fuzz_chunk(*job, xlate=xlate, stop_on_first=stop_on_first))
            if stop_on_first and parts[-1].divergences:
                break
    rep = FuzzReport(seed, count, mode)
    for p in parts:
        rep.checked += p.checked
        rep.skipped += p.skipped
        rep.divergences += p.divergences
        for k, v in p.by_kind.items():
            rep.by_kind[k] = rep.by_kind.get(k, 0) + v
        if rep.first is None and p.first is not None:
            rep.first = p.first
    rep.by_kind = dict(sorted(rep.by_kind.items()))
    return rep
