"""A32 -> Thumb-2 translation rules, translation blocks and their layout.

Two modes share the block structure:

* ``optimized`` passes guest registers and flags straight through to the host.
  Guest r10 lives in bank slot 10 and host r10 is the dedicated scratch.
* ``baseline`` keeps every guest register and each flag in bank slots and
  works only on host temporaries, the way a QEMU-style TCG port does.

Per-instruction output may contain two layout pseudo-ops that are resolved
into real branches when a block is placed: ``skip`` (B<cond>.W over the next
``imm`` items) and ``bl_skip`` (BL to just past the next ``imm`` items).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from .bits import AL, LSL, MASK32, ROR, RRX, rol, thumb_encode_imm
from .guest_isa import (COMPARE_OPS, LOGICAL_OPS, MOVE_OPS, DecodeError, GuestInstruction,
                        MemoryFault, ShiftSpec, decode_guest)
from .host_isa import (SHIFT_OPS, HostInstruction, Unencodable, _check, dispatcher_exit,
                       encode_host, it_block, service_trap, shrink, slot_load, slot_store)
from .services import COLD, service_id

OPTIMIZED, BASELINE = "optimized", "baseline"
MODES = (OPTIMIZED, BASELINE)
MAX_BLOCK = 32
SCRATCH = 10
SP, LR, PC = 13, 14, 15
SLOT_N, SLOT_Z, SLOT_C, SLOT_V = 16, 17, 18, 19
SPILL_BASE, SPILL_SLOTS = 24, 8
BANK_SLOTS = 64

HIST_KEYS = ("identity", "amend_side_effect", "amend_constant", "amend_shift", "no_counterpart")


@dataclass(frozen=True)
class RuleClass:
    kind: str          # identity | amend | no_counterpart | service_hook | fallback
    detail: str = ""   # amendment category, service name or fallback reason

    @property
    def key(self) -> str:
        if self.kind == "amend":
            return {"side_effect": "amend_side_effect", "constant": "amend_constant",
                    "shift": "amend_shift"}[self.detail]
        return self.kind

    def __str__(self):
        return f"{self.kind}({self.detail})" if self.detail else self.kind


IDENTITY = RuleClass("identity")
SIDE_EFFECT = RuleClass("amend", "side_effect")
CONSTANT = RuleClass("amend", "constant")
SHIFT = RuleClass("amend", "shift")
NO_COUNTERPART = RuleClass("no_counterpart")


@dataclass
class ExitDesc:
    kind: str                  # direct | computed
    target: int = 0            # guest target (direct)
    reg: int = 0               # host register with the guest target (computed, baseline)
    landing: bool = False      # a return site: host address stands for ``target``
    host_addr: int = 0
    chained: Optional[int] = None


@dataclass
class TransInst:
    inst: GuestInstruction
    rule: RuleClass
    items: list
    exits: list = field(default_factory=list)
    body: int = 0              # host instructions that implement the guest op itself

    @property
    def length(self) -> int:
        return len(self.items)


def _inv(cond: int) -> int:
    return cond ^ 1


# ---------------------------------------------------------------------------
# Block scanning and liveness
# ---------------------------------------------------------------------------

def ends_block(inst: GuestInstruction) -> bool:
    return inst.writes_pc or inst.kind in ("ldrex", "strex")


def scan_block(mem, pc: int, cap: int = MAX_BLOCK) -> tuple:
    """Decode the guest block starting at ``pc``.

    Returns ``(insts, stop)`` where ``stop`` says why the block ended:
    'branch', 'exclusive', 'cap' or 'untranslatable' (the next word cannot be
    translated; it becomes the next block start).  Raises DecodeError when the
    very first instruction cannot be translated.
    """
    insts = []
    addr = pc
    while True:
        try:
            inst = decode_guest(mem.read32(addr), addr)
            if inst.kind == "system":
                raise DecodeError("unsupported", mem.read32(addr), addr, "system instruction")
        except (DecodeError, MemoryFault):
            if not insts:
                raise
            return insts, "untranslatable"
        insts.append(inst)
        if inst.writes_pc:
            return insts, "branch"
        if inst.kind in ("ldrex", "strex"):
            return insts, "exclusive"
        if len(insts) >= cap:
            return insts, "cap"
        addr += 4


def liveness(insts) -> list:
    """live_after[k]: guest registers whose value may be read after insts[k]."""
    live = set(range(15))
    out = [None] * len(insts)
    for k in range(len(insts) - 1, -1, -1):
        out[k] = frozenset(live)
        i = insts[k]
        if i.cond == AL:
            live -= i.writes()
        live |= i.reads()
    return out


# ---------------------------------------------------------------------------
# Optimized mode
# ---------------------------------------------------------------------------

_DEAD_ORDER = (9, 8, 7, 6, 5, 4, 11, 12, 3, 2, 1, 0, 14)


class Emitter:
    """Collects the host code for one guest instruction and hands out temps."""

    def __init__(self, inst, live_after=None, last_use=None):
        self.inst = inst
        self.items: list = []
        self.busy = set(inst.reads()) | set(inst.writes()) | {SP, PC}
        self.live_after = live_after
        self.last_use = last_use or {}
        self.scratch_free = True
        self.taken: set = set()
        self.spills: list = []
        self.r10 = None
        self.r10_dirty = False
        self.amends: set = set()
        self.pc_temp = None

    def emit(self, hi: HostInstruction):
        self.items.append(hi)

    def temp(self) -> int:
        if self.scratch_free:
            self.scratch_free = False
            return SCRATCH
        if self.live_after is not None:
            for r in _DEAD_ORDER:
                if r not in self.busy and r not in self.taken and r not in self.live_after:
                    self.taken.add(r)
                    return r
        cands = [r for r in _DEAD_ORDER if r not in self.busy and r not in self.taken]
        cands.sort(key=lambda r: self.last_use.get(r, -1))
        r = cands[0]
        slot = SPILL_BASE + len(self.spills)
        self.emit(slot_store(r, slot))
        self.spills.append((r, slot))
        self.taken.add(r)
        return r

    def const(self, reg: int, value: int):
        value &= MASK32
        if reg == SP:
            self.amends.add("side_effect")
            t = self.temp()
            self.const(t, value)
            self.emit(HostInstruction("mov", rd=SP, rm=t))
            return
        if thumb_encode_imm(value) is not None:
            self.emit(HostInstruction("mov", rd=reg, imm=value))
        elif thumb_encode_imm(~value & MASK32) is not None:
            self.emit(HostInstruction("mvn", rd=reg, imm=~value & MASK32))
        else:
            self.emit(HostInstruction("movw", rd=reg, imm=value & 0xFFFF))
            if value >> 16:
                self.emit(HostInstruction("movt", rd=reg, imm=value >> 16))

    def src(self, g: int) -> int:
        if g == PC:
            t = self.temp()
            self.const(t, self.inst.addr + 8)
            self.amends.add("constant")
            return t
        if g == SCRATCH:
            if self.r10 is None:
                self.r10 = self.temp()
                self.emit(slot_load(self.r10, SCRATCH))
                self.amends.add("side_effect")
            return self.r10
        return g

    def dst(self, g: int) -> int:
        if g == SCRATCH:
            if self.r10 is None:
                self.r10 = self.temp()
            self.r10_dirty = True
            self.amends.add("side_effect")
            return self.r10
        return g

    def op(self, hi: HostInstruction):
        """Emit ``hi``; operands the host cannot name (SP) are re-homed through temps."""
        try:
            _check(hi)
            encode_host(hi)
        except Unencodable:
            hi = self._rehome(hi)
        self.emit(shrink(hi))

    def _rehome(self, hi):
        self.amends.add("side_effect")
        load = hi.op in ("ldr", "ldrb")
        srcs = ["rn", "rm", "ra"] + ([] if load or hi.op not in ("str", "strb") else ["rd"])
        fixed = hi
        for f in srcs:
            if getattr(fixed, f) == SP and not (f == "rn" and hi.op in ("ldr", "str", "ldrb", "strb")):
                t = self.temp()
                self.emit(HostInstruction("mov", rd=t, rm=SP))
                fixed = replace(fixed, **{f: t})
        post = None
        writes_rd = hi.op not in ("str", "strb", "cmp", "cmn", "tst", "teq")
        if writes_rd and fixed.rd == SP:
            t = self.temp()
            if hi.op == "movt":
                self.emit(HostInstruction("mov", rd=t, rm=SP))
            fixed = replace(fixed, rd=t)
            post = HostInstruction("mov", rd=SP, rm=t)
        _check(fixed)
        encode_host(fixed)
        if post is not None:
            self.emit(shrink(fixed))
            return post
        return fixed

    def finish(self):
        if self.r10_dirty:
            self.emit(slot_store(self.r10, SCRATCH))
        for r, slot in reversed(self.spills):
            self.emit(slot_load(r, slot))
        self.spills = []

    def rule(self, base: Optional[RuleClass] = None) -> RuleClass:
        if base is not None:
            return base
        for cat, rc in (("shift", SHIFT), ("constant", CONSTANT), ("side_effect", SIDE_EFFECT)):
            if cat in self.amends:
                return rc
        return IDENTITY


def _alt_single(op: str, k: int):
    """A single non-flag-setting host form for ``op #k`` when k itself is unencodable."""
    neg, inv = (-k) & MASK32, ~k & MASK32
    if op == "add" and thumb_encode_imm(neg) is not None:
        return "sub", neg
    if op == "sub" and thumb_encode_imm(neg) is not None:
        return "add", neg
    if op == "and" and thumb_encode_imm(inv) is not None:
        return "bic", inv
    if op == "bic" and thumb_encode_imm(inv) is not None:
        return "and", inv
    if op == "orr" and thumb_encode_imm(inv) is not None:
        return "orn", inv
    return None


def _opt_alu(E: Emitter, i: GuestInstruction):
    op = i.op
    compare = op in COMPARE_OPS
    logical = op in LOGICAL_OPS
    rn_h = 0 if op in MOVE_OPS else E.src(i.rn)
    if i.rm is None:
        k = i.imm
        enc = thumb_encode_imm(k)
        need_rot_carry = i.s and logical and i.imm_rot != 0
        if enc is not None and (not need_rot_carry or enc[1]):
            operand = dict(imm=k)
        else:
            E.amends.add("constant")
            if op in MOVE_OPS and not i.s:
                rd_h = E.dst(i.rd)
                E.const(rd_h, k if op == "mov" else ~k & MASK32)
                return
            if not i.s and op in ("add", "sub") and k <= 0xFFF:
                E.op(HostInstruction(op + "w", rd=E.dst(i.rd), rn=rn_h, imm=k))
                return
            alt = None if i.s else _alt_single(op, k)
            if alt is not None:
                op, k = alt
                operand = dict(imm=k)
            else:
                t = E.temp()
                if need_rot_carry:
                    E.const(t, rol(k, 1))
                    operand = dict(rm=t, shift=ShiftSpec(ROR, 1))
                else:
                    E.const(t, k)
                    operand = dict(rm=t)
    else:
        rm_h = E.src(i.rm)
        sh = i.shift
        if sh.rs is None:
            operand = dict(rm=rm_h, shift=sh)
        else:
            rs_h = E.src(sh.rs)
            shift_op = SHIFT_OPS[sh.kind]
            if op == "mov":
                E.op(HostInstruction(shift_op, s=i.s, rd=E.dst(i.rd), rn=rm_h, rm=rs_h))
                return
            E.amends.add("shift")
            t = E.temp()
            E.op(HostInstruction(shift_op, s=i.s and logical, rd=t, rn=rm_h, rm=rs_h))
            operand = dict(rm=t)
    rd_h = 0 if compare else E.dst(i.rd)
    E.op(HostInstruction(op, s=i.s or compare, rd=rd_h, rn=rn_h, **operand))


def _opt_mul(E: Emitter, i):
    rn_h, rm_h = E.src(i.rn), E.src(i.rm)
    ra_h = E.src(i.ra) if i.op == "mla" else 0
    rd_h = E.dst(i.rd)
    E.op(HostInstruction(i.op, rd=rd_h, rn=rn_h, rm=rm_h, ra=ra_h))
    if i.s:
        E.amends.add("side_effect")
        E.op(HostInstruction("tst", s=True, rn=rd_h, rm=rd_h))


def _addsub(up: bool, rd, rn, imm=None, rm=None, shift=None) -> HostInstruction:
    if rm is None:
        return HostInstruction("addw" if up else "subw", rd=rd, rn=rn, imm=imm)
    return HostInstruction("add" if up else "sub", rd=rd, rn=rn, rm=rm, shift=shift or ShiftSpec())


def _mem_identity(i) -> bool:
    if i.rn in (PC, SCRATCH) or i.rm == SCRATCH or i.wback:
        return False
    if i.rm is None:
        return i.up or i.imm <= 0xFF
    return i.up and i.shift.kind == LSL and i.shift.amount <= 3


def _opt_mem(E: Emitter, i):
    load = i.op in ("ldr", "ldrb")
    if load and i.rd == PC and not i.wback and not _mem_identity(i):
        E.pc_temp = E.temp()
    if i.rn == PC:
        # literal access: the address is a translation-time constant
        t = E.temp()
        if i.rm is None:
            E.amends.add("constant")
            E.const(t, (i.addr + 8 + (i.imm if i.up else -i.imm)) & MASK32)
            base, acc = t, dict(imm=0)
        else:
            E.amends.add("constant")
            E.const(t, i.addr + 8)
            E.op(_addsub(i.up, t, t, rm=E.src(i.rm), shift=i.shift))
            base, acc = t, dict(imm=0)
        _transfer(E, i, load, base, acc)
        return
    if load and i.rd == PC and i.wback:
        _load_pc_wback(E, i)
        return
    base_h = E.src(i.rn)
    if i.rm is None:
        imm = i.imm
        if not i.wback:
            if i.up:
                acc = dict(imm=imm)
            elif imm <= 0xFF:
                acc = dict(imm=imm, up=False)
            else:
                E.amends.add("constant")
                t = E.temp()
                E.op(_addsub(False, t, base_h, imm=imm))
                base_h, acc = t, dict(imm=0)
            _transfer(E, i, load, base_h, acc)
            return
        E.amends.add("side_effect")
        if i.pre:
            if i.up or imm <= 0xFF:
                _transfer(E, i, load, base_h, dict(imm=imm, up=i.up))
                E.op(_addsub(i.up, E.dst(i.rn), base_h, imm=imm))
            else:
                t = E.temp()
                E.op(_addsub(False, t, base_h, imm=imm))
                _transfer(E, i, load, t, dict(imm=0))
                E.op(HostInstruction("mov", rd=E.dst(i.rn), rm=t))
        else:
            _transfer(E, i, load, base_h, dict(imm=0))
            E.op(_addsub(i.up, E.dst(i.rn), base_h, imm=imm))
        return
    rm_h = E.src(i.rm)
    sh = i.shift
    if not i.wback:
        if i.up and sh.kind == LSL and sh.amount <= 3:
            _transfer(E, i, load, base_h, dict(rm=rm_h, shift=sh))
        else:
            E.amends.add("shift")
            t = E.temp()
            E.op(_addsub(i.up, t, base_h, rm=rm_h, shift=sh))
            _transfer(E, i, load, t, dict(imm=0))
        return
    E.amends.add("side_effect")
    if i.pre or (load and i.rd == i.rm):
        t = E.temp()
        E.op(_addsub(i.up, t, base_h, rm=rm_h, shift=sh))
        _transfer(E, i, load, t if i.pre else base_h, dict(imm=0))
        E.op(HostInstruction("mov", rd=E.dst(i.rn), rm=t))
    else:
        _transfer(E, i, load, base_h, dict(imm=0))
        E.op(_addsub(i.up, E.dst(i.rn), base_h, rm=rm_h, shift=sh))


def _transfer(E, i, load, base_h, acc):
    if load:
        if i.rd == PC:
            if E.pc_temp is None:
                E.finish()
                E.op(HostInstruction(i.op, rd=PC, rn=base_h, **acc))
            else:
                E.op(HostInstruction(i.op, rd=E.pc_temp, rn=base_h, **acc))
                E.finish()
                E.emit(HostInstruction("bx", rm=E.pc_temp, narrow=True))
            return
        E.op(HostInstruction(i.op, rd=E.dst(i.rd), rn=base_h, **acc))
    else:
        E.op(HostInstruction(i.op, rd=E.src(i.rd), rn=base_h, **acc))


def _load_pc_wback(E, i):
    """ldr pc with writeback: the base must be updated before the transfer."""
    if i.rm is None and not i.pre and i.imm <= 0xFF and i.rn != SCRATCH:
        E.op(HostInstruction("ldr", rd=PC, rn=i.rn, imm=i.imm, up=i.up, pre=False, wback=True))
        return
    E.amends.add("side_effect")
    t = E.temp()                     # the dedicated scratch: never spilled
    base_h = E.src(i.rn)
    if i.rm is None:
        step = lambda rd, rn: _addsub(i.up, rd, rn, imm=i.imm)
    else:
        rm_h = E.src(i.rm)
        step = lambda rd, rn: _addsub(i.up, rd, rn, rm=rm_h, shift=i.shift)
    if i.pre:
        E.op(step(t, base_h))
        E.op(HostInstruction("mov", rd=E.dst(i.rn), rm=t))
        E.op(HostInstruction("ldr", rd=t, rn=t, imm=0))
    else:
        E.op(HostInstruction("ldr", rd=t, rn=base_h, imm=0))
        E.op(step(E.dst(i.rn), base_h))
    E.finish()
    E.emit(HostInstruction("bx", rm=t, narrow=True))


def _opt_block(E: Emitter, i):
    regs = [k for k in range(16) if i.reglist >> k & 1]
    n = len(regs)
    load = i.op == "ldm"
    stack_op = i.rn == SP and i.wback and ((load and i.mode == "ia") or (not load and i.mode == "db"))
    if SCRATCH not in regs and i.rn != SCRATCH:
        if stack_op and n == 1:
            r = regs[0]
            narrow = HostInstruction(i.op, rn=SP, wback=True, mode=i.mode, reglist=i.reglist, narrow=True)
            try:
                _check(narrow)
                encode_host(narrow)
                E.emit(narrow)
            except Unencodable:
                if load:
                    E.emit(HostInstruction("ldr", rd=r, rn=SP, imm=4, pre=False, wback=True))
                else:
                    E.emit(HostInstruction("str", rd=r, rn=SP, imm=4, up=False, wback=True))
            return
        if n >= 2 and i.mode in ("ia", "db"):
            E.op(HostInstruction(i.op, rn=i.rn, wback=i.wback, mode=i.mode, reglist=i.reglist))
            return
    E.amends.add("side_effect")
    _expand_block(E, i, regs)


def _expand_block(E: Emitter, i, regs):
    n = len(regs)
    load = i.op == "ldm"
    t = E.temp()                      # address pointer; host r10 when available
    base_h = E.src(i.rn)
    start = {"ia": 0, "ib": 4, "da": -4 * (n - 1), "db": -4 * n}[i.mode]
    if start == 0:
        E.op(HostInstruction("mov", rd=t, rm=base_h))
    else:
        E.op(_addsub(start > 0, t, base_h, imm=abs(start)))
    pc_off = None
    if load and SCRATCH in regs:
        # guest r10 goes straight to its slot through a list register loaded later
        spare = next((r for r in regs if r not in (SCRATCH, PC, i.rn)), None)
        x = spare if spare is not None else E.temp()
        E.op(HostInstruction("ldr", rd=x, rn=t, imm=4 * regs.index(SCRATCH)))
        E.emit(slot_store(x, SCRATCH))
    for k, r in enumerate(regs):
        if r == SCRATCH:
            continue
        if load and r == PC:
            pc_off = 4 * k
            continue
        if load:
            E.op(HostInstruction("ldr", rd=r, rn=t, imm=4 * k))
        else:
            E.op(HostInstruction("str", rd=E.src(r), rn=t, imm=4 * k))
            if r != i.rn:
                E.busy.discard(r)
    if not load and SCRATCH in regs:
        E.op(HostInstruction("str", rd=E.src(SCRATCH), rn=t, imm=4 * regs.index(SCRATCH)))
    if i.wback:
        E.op(_addsub(i.mode[0] == "i", E.dst(i.rn), base_h, imm=4 * n))
    if pc_off is not None:
        if t != SCRATCH:
            raise Unencodable("pc reload needs the dedicated scratch")
        E.op(HostInstruction("ldr", rd=t, rn=t, imm=pc_off))
        E.finish()
        E.emit(HostInstruction("bx", rm=t, narrow=True))


def _opt_body(E: Emitter, i: GuestInstruction) -> Optional[RuleClass]:
    k = i.kind
    if k == "alu":
        _opt_alu(E, i)
    elif k == "mul":
        _opt_mul(E, i)
    elif k == "mem":
        _opt_mem(E, i)
    elif k == "block":
        _opt_block(E, i)
        if i.mode in ("ib", "da"):
            return NO_COUNTERPART
    elif k == "movw":
        E.op(HostInstruction("movw", rd=E.dst(i.rd), imm=i.imm))
    elif k == "movt":
        src = E.src(i.rd)
        E.op(HostInstruction("movt", rd=E.dst(i.rd) if i.rd == SCRATCH else src, imm=i.imm))
    elif k == "ldrex":
        base = E.src(i.rn)
        E.op(HostInstruction("ldr", rd=E.dst(i.rd), rn=base, imm=0))
        return NO_COUNTERPART
    elif k == "strex":
        base, val = E.src(i.rn), E.src(i.rm)
        E.op(HostInstruction("str", rd=val, rn=base, imm=0))
        E.op(HostInstruction("mov", rd=E.dst(i.rd), imm=0))
        return NO_COUNTERPART
    else:
        raise ValueError(f"no body rule for {k}")
    return None


def _wrap_cond(cond: int, body: list, it_ok: bool) -> list:
    if cond == AL:
        return body
    if it_ok and len(body) == 1 and body[0].op not in _PSEUDO and body[0].op not in ("b", "bl", "bx", "blx"):
        return [it_block(cond), body[0]]
    return [HostInstruction("skip", cond=_inv(cond), imm=len(body))] + body


_PSEUDO = frozenset(("svc_trap", "exit", "mmio_trap", "slot_ld", "slot_st", "skip", "bl_skip"))


def _opt_translate(i: GuestInstruction, hooks: dict, live_after=None, last_use=None) -> TransInst:
    k = i.kind
    ft = (i.addr + 4) & MASK32
    if k == "b":
        items = [dispatcher_exit(0)]
        exits = [ExitDesc("direct", i.target)]
        if i.cond != AL:
            items = [HostInstruction("skip", cond=_inv(i.cond), imm=1), dispatcher_exit(0), dispatcher_exit(1)]
            exits.append(ExitDesc("direct", ft))
        return TransInst(i, IDENTITY, items, exits, body=1)
    if k == "bl":
        exits = [ExitDesc("direct", ft, landing=True)]
        if i.target in hooks:
            name = hooks[i.target]
            body = [service_trap(service_id(name))]
            rule = RuleClass("service_hook", name)
        else:
            body = [HostInstruction("bl_skip", imm=1)]
            exits.append(ExitDesc("direct", i.target))
            rule = IDENTITY
        items = body + [dispatcher_exit(0)] + ([dispatcher_exit(1)] if len(exits) > 1 else [])
        if i.cond != AL:
            items = [HostInstruction("skip", cond=_inv(i.cond), imm=len(body))] + items
        return TransInst(i, rule, items, exits, body=1)
    E = Emitter(i, live_after, last_use)
    if k in ("bx", "blx") or (k == "alu" and i.rd == PC):
        m = E.src(i.rm)
        E.finish()
        E.emit(HostInstruction("blx" if k == "blx" else "bx", rm=m, narrow=True))
        body = E.items
        exits = []
        tail = []
        if k == "blx":
            exits = [ExitDesc("direct", ft, landing=True)]
            tail = [dispatcher_exit(0)]
        elif i.cond != AL:
            exits = [ExitDesc("direct", ft)]
            tail = [dispatcher_exit(0)]
        items = _wrap_cond(i.cond, body, False) + tail
        return TransInst(i, E.rule(), items, exits, body=len(body))
    base = _opt_body(E, i)
    E.finish()
    body = E.items
    rule = E.rule(base)
    items = _wrap_cond(i.cond, body, True)
    exits = []
    if i.writes_pc and i.cond != AL:
        items = items + [dispatcher_exit(0)]
        exits = [ExitDesc("direct", ft)]
    return TransInst(i, rule, items, exits, body=len(body))


# ---------------------------------------------------------------------------
# Baseline mode
# ---------------------------------------------------------------------------

T0, T1, T2, T3 = 0, 1, 2, 3


class _Base:
    def __init__(self, inst):
        self.inst = inst
        self.items: list = []

    def emit(self, hi):
        self.items.append(hi)

    def const(self, t, value):
        value &= MASK32
        self.emit(HostInstruction("movw", rd=t, imm=value & 0xFFFF))
        if value >> 16:
            self.emit(HostInstruction("movt", rd=t, imm=value >> 16))

    def ld(self, t, g):
        if g == PC:
            self.const(t, self.inst.addr + 8)
        else:
            self.emit(slot_load(t, g))

    def st(self, g, t):
        self.emit(slot_store(t, g))

    def save_flags(self, which: str):
        self.emit(HostInstruction("mrs", rd=T3))
        for flag, slot, sh in (("n", SLOT_N, 0), ("z", SLOT_Z, 1), ("c", SLOT_C, 2), ("v", SLOT_V, 3)):
            if flag not in which:
                continue
            if sh == 0:
                self.emit(slot_store(T3, slot))
            else:
                self.emit(HostInstruction("mov", rd=T2, rm=T3, shift=ShiftSpec(LSL, sh)))
                self.emit(slot_store(T2, slot))

    def restore_flags(self):
        self.emit(slot_load(T3, SLOT_N))
        self.emit(HostInstruction("and", rd=T3, rn=T3, imm=0x80000000))
        for slot, sh in ((SLOT_Z, 1), (SLOT_C, 2), (SLOT_V, 3)):
            self.emit(slot_load(T2, slot))
            self.emit(HostInstruction("and", rd=T2, rn=T2, imm=0x80000000))
            self.emit(HostInstruction("orr", rd=T3, rn=T3, rm=T2, shift=ShiftSpec(1, sh)))
        self.emit(HostInstruction("msr", rn=T3))


def _needs_flags_in(i: GuestInstruction) -> bool:
    if i.cond != AL:
        return True
    if i.kind == "alu":
        if i.rm is not None and i.shift.kind == RRX:
            return True
        if i.s and i.op in LOGICAL_OPS:
            if i.rm is None:
                return i.imm_rot == 0
            return i.shift.rs is not None or i.shift.is_none or (i.shift.kind == LSL and i.shift.amount == 0)
    if i.kind == "mem" and i.rm is not None and i.shift.kind == RRX:
        return True
    return False


def _base_translate(i: GuestInstruction, hooks: dict) -> TransInst:
    B = _Base(i)
    k = i.kind
    ft = (i.addr + 4) & MASK32
    pre = _Base(i)
    if _needs_flags_in(i):
        pre.restore_flags()
    exits: list = []
    tail: list = []
    if k == "b":
        B.emit(dispatcher_exit(0))
        exits = [ExitDesc("direct", i.target)]
        if i.cond != AL:
            tail = [dispatcher_exit(1)]
            exits.append(ExitDesc("direct", ft))
    elif k == "bl":
        B.const(T0, ft)
        B.st(LR, T0)
        if i.target in hooks:
            B.emit(service_trap(service_id(hooks[i.target])))
            tail = [dispatcher_exit(0)]
            exits = [ExitDesc("direct", ft)]
        else:
            B.emit(dispatcher_exit(0))
            exits = [ExitDesc("direct", i.target)]
            if i.cond != AL:
                tail = [dispatcher_exit(1)]
                exits.append(ExitDesc("direct", ft))
    elif k in ("bx", "blx") or (k == "alu" and i.rd == PC):
        B.ld(T0, i.rm)
        if k == "blx":
            B.const(T1, ft)
            B.st(LR, T1)
        B.emit(dispatcher_exit(0))
        exits = [ExitDesc("computed", reg=T0)]
        if i.cond != AL:
            tail = [dispatcher_exit(1)]
            exits.append(ExitDesc("direct", ft))
    else:
        pc_reg = _base_body(B, i)
        if pc_reg is not None:
            B.emit(dispatcher_exit(0))
            exits = [ExitDesc("computed", reg=pc_reg)]
            if i.cond != AL:
                tail = [dispatcher_exit(1)]
                exits.append(ExitDesc("direct", ft))
    body = B.items
    items = pre.items + _wrap_cond(i.cond, body, False) + tail
    return TransInst(i, classify(i, hooks), items, exits, body=len(body))


def _base_body(B: _Base, i) -> Optional[int]:
    k = i.kind
    if k == "alu":
        op = i.op
        logical = op in LOGICAL_OPS
        if op not in MOVE_OPS:
            B.ld(T1, i.rn)
        if i.rm is None:
            if i.s and logical and i.imm_rot != 0:
                B.const(T2, rol(i.imm, 1))
                operand = dict(rm=T2, shift=ShiftSpec(ROR, 1))
            else:
                B.const(T2, i.imm)
                operand = dict(rm=T2)
        else:
            B.ld(T2, i.rm)
            if i.shift.rs is not None:
                B.ld(T3, i.shift.rs)
                B.emit(HostInstruction(SHIFT_OPS[i.shift.kind], s=i.s and logical, rd=T2, rn=T2, rm=T3))
                operand = dict(rm=T2)
            else:
                operand = dict(rm=T2, shift=i.shift)
        compare = op in COMPARE_OPS
        B.emit(HostInstruction(op, s=i.s or compare, rd=0 if compare else T0,
                               rn=0 if op in MOVE_OPS else T1, **operand))
        if not compare:
            B.st(i.rd, T0)
        if i.s:
            B.save_flags("nzc" if logical else "nzcv")
        return None
    if k == "mul":
        B.ld(T1, i.rn)
        B.ld(T2, i.rm)
        if i.op == "mla":
            B.ld(T3, i.ra)
        B.emit(HostInstruction(i.op, rd=T0, rn=T1, rm=T2, ra=T3 if i.op == "mla" else 0))
        B.st(i.rd, T0)
        if i.s:
            B.emit(HostInstruction("tst", s=True, rn=T0, rm=T0))
            B.save_flags("nz")
        return None
    if k == "mem":
        load = i.op in ("ldr", "ldrb")
        B.ld(T1, i.rn)
        if i.rm is None:
            if i.imm == 0:
                B.emit(HostInstruction("mov", rd=T0, rm=T1))
            else:
                B.emit(_addsub(i.up, T0, T1, imm=i.imm))
        else:
            B.ld(T2, i.rm)
            B.emit(_addsub(i.up, T0, T1, rm=T2, shift=i.shift))
        ea = T0 if i.pre else T1
        if load:
            B.emit(HostInstruction(i.op, rd=T3, rn=ea, imm=0))
        else:
            B.ld(T3, i.rd)
            B.emit(HostInstruction(i.op, rd=T3, rn=ea, imm=0))
        if i.wback:
            B.st(i.rn, T0)
        if load:
            if i.rd == PC:
                return T3
            B.st(i.rd, T3)
        return None
    if k == "block":
        regs = [r for r in range(16) if i.reglist >> r & 1]
        n = len(regs)
        load = i.op == "ldm"
        B.ld(T1, i.rn)
        start = {"ia": 0, "ib": 4, "da": -4 * (n - 1), "db": -4 * n}[i.mode]
        if start == 0:
            B.emit(HostInstruction("mov", rd=T0, rm=T1))
        else:
            B.emit(_addsub(start > 0, T0, T1, imm=abs(start)))
        pc_reg = None
        for j, r in enumerate(regs):
            if load:
                dest = T3 if r == PC else T2
                B.emit(HostInstruction("ldr", rd=dest, rn=T0, imm=4 * j))
                if r == PC:
                    pc_reg = T3
                else:
                    B.st(r, T2)
            else:
                B.ld(T2, r)
                B.emit(HostInstruction("str", rd=T2, rn=T0, imm=4 * j))
        if i.wback:
            B.emit(_addsub(i.mode[0] == "i", T1, T1, imm=4 * n))
            B.st(i.rn, T1)
        return pc_reg
    if k == "movw":
        B.const(T0, i.imm)
        B.st(i.rd, T0)
        return None
    if k == "movt":
        B.ld(T0, i.rd)
        B.emit(HostInstruction("movt", rd=T0, imm=i.imm))
        B.st(i.rd, T0)
        return None
    if k == "ldrex":
        B.ld(T1, i.rn)
        B.emit(HostInstruction("ldr", rd=T0, rn=T1, imm=0))
        B.st(i.rd, T0)
        return None
    if k == "strex":
        B.ld(T1, i.rn)
        B.ld(T2, i.rm)
        B.emit(HostInstruction("str", rd=T2, rn=T1, imm=0))
        B.const(T0, 0)
        B.st(i.rd, T0)
        return None
    raise ValueError(f"no baseline rule for {k}")


# ---------------------------------------------------------------------------
# Public per-instruction API
# ---------------------------------------------------------------------------

def classify(inst: GuestInstruction, hooks: Optional[dict] = None) -> RuleClass:
    """Rule class of ``inst`` (a property of the instruction, not of the mode)."""
    hooks = hooks or {}
    if inst.kind == "system":
        return RuleClass("fallback", "system instruction")
    return _opt_translate(inst, hooks).rule


def translate_inst(inst: GuestInstruction, mode: str = OPTIMIZED, hooks: Optional[dict] = None,
                   live_after=None, last_use=None) -> TransInst:
    hooks = hooks or {}
    if inst.kind == "system":
        raise ValueError("system instructions are not translated (fallback class)")
    if mode == OPTIMIZED:
        return _opt_translate(inst, hooks, live_after, last_use)
    if mode == BASELINE:
        return _base_translate(inst, hooks)
    raise ValueError(f"unknown mode {mode!r}")


def select_scratch(inst: GuestInstruction, live_after, count: int = 2, last_use=None) -> list:
    """Temps an amendment of ``inst`` would get: ('dedicated'|'dead'|'spill', reg)."""
    E = Emitter(inst, live_after, last_use)
    out = []
    for _ in range(count):
        before = len(E.spills)
        was_free = E.scratch_free
        r = E.temp()
        kind = "dedicated" if was_free else ("spill" if len(E.spills) > before else "dead")
        out.append((kind, r))
    return out


# ---------------------------------------------------------------------------
# Translation blocks
# ---------------------------------------------------------------------------

@dataclass
class TransBlock:
    guest_start: int
    insts: list
    mode: str
    translated: list            # TransInst per guest instruction
    items: list                 # (guest_addr, item) before layout
    exits: list
    stop: str
    host_start: int = 0
    host_end: int = 0
    host: list = field(default_factory=list)     # placed HostInstructions
    host_map: dict = field(default_factory=dict)  # host addr -> guest addr
    return_map: dict = field(default_factory=dict)

    @property
    def guest_count(self) -> int:
        return len(self.insts)

    @property
    def host_count(self) -> int:
        return len(self.items)

    @property
    def last(self) -> GuestInstruction:
        return self.insts[-1]

    def histogram(self) -> dict:
        h = {key: 0 for key in HIST_KEYS}
        for t in self.translated:
            if t.rule.key in h:
                h[t.rule.key] += 1
        return h


def translate_insts(insts, mode: str = OPTIMIZED, hooks: Optional[dict] = None,
                    stop: str = "branch") -> TransBlock:
    hooks = hooks or {}
    live = liveness(insts) if mode == OPTIMIZED else [None] * len(insts)
    last_use: dict = {}
    items: list = []
    exits: list = []
    translated = []
    for idx, inst in enumerate(insts):
        t = translate_inst(inst, mode, hooks, live[idx], dict(last_use))
        translated.append(t)
        base = len(exits)
        for it in t.items:
            if it.op == "exit":
                it = replace(it, imm=it.imm + base)
            items.append((inst.addr, it))
        exits.extend(ExitDesc(e.kind, e.target, e.reg, e.landing) for e in t.exits)
        for r in inst.reads() | inst.writes():
            last_use[r] = idx
    last = insts[-1]
    if not last.writes_pc or last.cond != AL and not translated[-1].exits:
        items.append((last.addr, dispatcher_exit(len(exits))))
        exits.append(ExitDesc("direct", (last.addr + 4) & MASK32))
    return TransBlock(insts[0].addr, list(insts), mode, translated, items, exits, stop)


def translate_block(guest_pc: int, mem, mode: str = OPTIMIZED, hooks: Optional[dict] = None,
                    cap: int = MAX_BLOCK) -> TransBlock:
    insts, stop = scan_block(mem, guest_pc, cap)
    return translate_insts(insts, mode, hooks, stop)


def _item_size(it: HostInstruction) -> int:
    if it.op in ("skip", "bl_skip", "exit"):
        return 4
    return it.size


def layout(items, base: int) -> list:
    """Resolve layout pseudo-ops; returns placed HostInstructions."""
    addrs = []
    a = base
    for it in items:
        addrs.append(a)
        a += _item_size(it)
    addrs.append(a)
    out = []
    for k, it in enumerate(items):
        if it.op == "skip":
            out.append(HostInstruction("b", cond=it.cond, target=addrs[k + 1 + it.imm], addr=addrs[k]))
        elif it.op == "bl_skip":
            out.append(HostInstruction("bl", target=addrs[k + 1 + it.imm], addr=addrs[k]))
        else:
            out.append(replace(it, addr=addrs[k]))
    return out


def encode_items(placed) -> list:
    hws = []
    for hi in placed:
        hws.extend(encode_host(hi))
    return hws


def place_block(tb: TransBlock, cache) -> int:
    """Lay out and write ``tb`` at the cache cursor; returns the host entry."""
    raw = [it for _, it in tb.items]
    size = sum(_item_size(it) for it in raw)
    base = cache.reserve(size)
    placed = layout(raw, base)
    cache.write_halfwords(base, encode_items(placed))
    tb.host_start, tb.host_end, tb.host = base, base + size, placed
    for (gaddr, _), hi in zip(tb.items, placed):
        tb.host_map[hi.addr] = gaddr
        cache.host_to_guest[hi.addr] = gaddr
        if hi.op == "exit":
            ex = tb.exits[hi.imm]
            ex.host_addr = hi.addr
            if ex.landing:
                tb.return_map[hi.addr] = ex.target
    return base


def sample_translation(mode: str) -> tuple:
    """The three-instruction sample: side-effect, constant and shift amendments."""
    from .asm import assemble
    src = """
        ldr r3, [r5], #4
        adds r0, r0, #0xf000000f
        add r1, r1, r2, lsr r3
    """
    prog = assemble(src, base=0x8000)
    insts = [decode_guest(w, 0x8000 + 4 * k) for k, w in enumerate(prog.words)]
    return insts, [translate_inst(i, mode) for i in insts]
