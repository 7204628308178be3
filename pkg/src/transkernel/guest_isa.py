"""ARMv7-A (A32) guest subset: decoder, encoder, machine state, reference interpreter.

The interpreter here is the correctness oracle for the translator and is also
what execution resumes on after a migration back to the "CPU".
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .bits import (AL, ASR, COND_NAMES, LSL, LSR, MASK32, ROR, RRX, SHIFT_NAMES,
                   a32_expand_imm, add_with_carry, bit31, cond_passed,
                   decode_imm_shift, encode_imm_shift, reg_name, reglist_str,
                   rol, ror, sext, shift_by_register, shift_c)

SP, LR, PC = 13, 14, 15

DP_OPS = ("and", "eor", "sub", "rsb", "add", "adc", "sbc", "rsc",
          "tst", "teq", "cmp", "cmn", "orr", "mov", "bic", "mvn")
DP_CODE = {name: i for i, name in enumerate(DP_OPS)}
COMPARE_OPS = frozenset(("tst", "teq", "cmp", "cmn"))
MOVE_OPS = frozenset(("mov", "mvn"))
LOGICAL_OPS = frozenset(("and", "eor", "tst", "teq", "orr", "mov", "bic", "mvn"))
ARITH_OPS = frozenset(("sub", "rsb", "add", "cmp", "cmn"))


class DecodeError(Exception):
    """Raised by :func:`decode_guest`; ``kind`` is 'unsupported' or 'undefined'."""

    def __init__(self, kind: str, word: int, addr: int, why: str = ""):
        super().__init__(f"{kind} encoding {word:#010x} at {addr:#x}" + (f": {why}" if why else ""))
        self.kind = kind
        self.word = word
        self.addr = addr


class MemoryFault(Exception):
    def __init__(self, addr: int, pc: Optional[int] = None, why: str = "unmapped"):
        super().__init__(f"memory fault ({why}) at {addr:#x}" + ("" if pc is None else f", pc={pc:#x}"))
        self.addr = addr
        self.pc = pc
        self.why = why


class GuestFault(Exception):
    """Architecturally valid but unsupported behaviour at run time."""


@dataclass(frozen=True)
class ShiftSpec:
    kind: int = LSL          # LSL/LSR/ASR/ROR/RRX
    amount: int = 0          # immediate amount (decoded: LSR #32 is 32)
    rs: Optional[int] = None  # register-sourced amount

    def __str__(self):
        if self.kind == RRX:
            return "rrx"
        if self.rs is not None:
            return f"{SHIFT_NAMES[self.kind]} {reg_name(self.rs)}"
        return f"{SHIFT_NAMES[self.kind]} #{self.amount}"

    @property
    def is_none(self) -> bool:
        return self.rs is None and self.kind == LSL and self.amount == 0


NO_SHIFT = ShiftSpec()


@dataclass(frozen=True)
class GuestInstruction:
    kind: str                 # alu, mul, mem, block, b, bl, bx, blx, movw, movt, ldrex, strex, system
    op: str
    cond: int = AL
    s: bool = False
    rd: int = 0
    rn: int = 0
    rm: Optional[int] = None  # None: operand2 is an immediate
    ra: int = 0
    imm: int = 0
    imm_rot: int = 0          # rotation applied to the 8-bit immediate (alu)
    shift: ShiftSpec = NO_SHIFT
    pre: bool = True
    up: bool = True
    wback: bool = False
    reglist: int = 0
    mode: str = "ia"
    target: int = 0
    addr: int = 0

    # ---- register usage (used by liveness and the translator) ----
    def reads(self) -> frozenset:
        k = self.kind
        r = set()
        if k == "alu":
            if self.op not in MOVE_OPS:
                r.add(self.rn)
            if self.rm is not None:
                r.add(self.rm)
                if self.shift.rs is not None:
                    r.add(self.shift.rs)
        elif k == "mul":
            r.update((self.rn, self.rm))
            if self.op == "mla":
                r.add(self.ra)
        elif k == "mem":
            r.add(self.rn)
            if self.rm is not None:
                r.add(self.rm)
            if self.op in ("str", "strb"):
                r.add(self.rd)
        elif k == "block":
            r.add(self.rn)
            if self.op == "stm":
                r.update(i for i in range(16) if self.reglist >> i & 1)
        elif k in ("bx", "blx"):
            r.add(self.rm)
        elif k == "movt":
            r.add(self.rd)
        elif k == "ldrex":
            r.add(self.rn)
        elif k == "strex":
            r.update((self.rn, self.rm))
        return frozenset(r)

    def writes(self) -> frozenset:
        k = self.kind
        w = set()
        if k == "alu":
            if self.op not in COMPARE_OPS:
                w.add(self.rd)
        elif k in ("mul", "movw", "movt", "ldrex", "strex"):
            w.add(self.rd)
        elif k == "mem":
            if self.op in ("ldr", "ldrb"):
                w.add(self.rd)
            if self.wback:
                w.add(self.rn)
        elif k == "block":
            if self.op == "ldm":
                w.update(i for i in range(16) if self.reglist >> i & 1)
            if self.wback:
                w.add(self.rn)
        elif k in ("bl", "blx"):
            w.add(LR)
        return frozenset(w)

    @property
    def sets_flags(self) -> bool:
        return self.s or (self.kind == "alu" and self.op in COMPARE_OPS)

    @property
    def writes_pc(self) -> bool:
        return self.kind in ("b", "bl", "bx", "blx") or PC in self.writes()

    def __str__(self) -> str:
        return disasm(self)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def _unsupported(word, addr, why=""):
    return DecodeError("unsupported", word, addr, why)


def decode_guest(word: int, addr: int) -> GuestInstruction:
    """Decode one A32 word of the supported subset."""
    if addr & 3:
        raise ValueError(f"unaligned guest address {addr:#x}")
    word &= MASK32
    cond = word >> 28
    if cond == 15:
        raise _unsupported(word, addr, "unconditional space")
    op1 = (word >> 25) & 7
    if op1 <= 1:
        return _decode_dp_misc(word, addr, cond)
    if op1 <= 3:
        return _decode_ldst(word, addr, cond)
    if op1 == 4:
        return _decode_block(word, addr, cond)
    if op1 == 5:
        imm24 = word & 0xFFFFFF
        target = (addr + 8 + (sext(imm24, 24) << 2)) & MASK32
        kind = "bl" if word >> 24 & 1 else "b"
        return GuestInstruction(kind, kind, cond=cond, target=target, addr=addr)
    if op1 == 7 and word >> 24 & 1:
        return GuestInstruction("system", "svc", cond=cond, imm=word & 0xFFFFFF, addr=addr)
    raise _unsupported(word, addr, "coprocessor")


def _decode_dp_misc(word, addr, cond):
    i_bit = word >> 25 & 1
    opcode = word >> 21 & 0xF
    s = bool(word >> 20 & 1)
    rn = word >> 16 & 0xF
    rd = word >> 12 & 0xF
    if not i_bit and word & 0x90 == 0x90:
        return _decode_mul_sync(word, addr, cond)
    if opcode >> 2 == 2 and not s:
        # miscellaneous space: BX/BLX/BKPT, MOVW/MOVT
        if i_bit:
            imm16 = ((word >> 4) & 0xF000) | (word & 0xFFF)
            if opcode == 8:
                kind = "movw"
            elif opcode == 10:
                kind = "movt"
            else:
                raise _unsupported(word, addr, "msr immediate")
            if rd == PC:
                raise _unsupported(word, addr, "movw/movt pc")
            return GuestInstruction(kind, kind, cond=cond, rd=rd, imm=imm16, addr=addr)
        masked = word & 0x0FFFFFF0
        rm = word & 0xF
        if masked in (0x012FFF10, 0x012FFF30):
            if rm == PC:
                raise _unsupported(word, addr, "bx pc")
            kind = "bx" if masked == 0x012FFF10 else "blx"
            return GuestInstruction(kind, kind, cond=cond, rm=rm, addr=addr)
        if word & 0x0FF000F0 == 0x01200070 and cond == AL:
            return GuestInstruction("system", "bkpt", cond=cond,
                                    imm=((word >> 4) & 0xFFF0) | (word & 0xF), addr=addr)
        raise _unsupported(word, addr, "miscellaneous")
    op = DP_OPS[opcode]
    if op in ("adc", "sbc", "rsc"):
        raise _unsupported(word, addr, op)
    if op in COMPARE_OPS and rd != 0:
        raise _unsupported(word, addr, "compare with rd != 0")
    if op in MOVE_OPS and rn != 0:
        raise _unsupported(word, addr, "move with rn != 0")
    kw = dict(cond=cond, s=s or op in COMPARE_OPS, rd=rd, rn=rn, addr=addr)
    if op in COMPARE_OPS:
        kw["s"] = True
    if i_bit:
        rot = (word >> 8 & 0xF) * 2
        inst = GuestInstruction("alu", op, imm=ror(word & 0xFF, rot), imm_rot=rot, **kw)
    elif word >> 4 & 1:
        rs = word >> 8 & 0xF
        rm = word & 0xF
        if PC in (rd, rm, rs) or (op not in MOVE_OPS and rn == PC):
            raise _unsupported(word, addr, "register shift involving pc")
        inst = GuestInstruction("alu", op, rm=rm, shift=ShiftSpec(word >> 5 & 3, 0, rs), **kw)
    else:
        kind, amount = decode_imm_shift(word >> 5 & 3, word >> 7 & 0x1F)
        inst = GuestInstruction("alu", op, rm=word & 0xF, shift=ShiftSpec(kind, amount), **kw)
    if rd == PC and op not in COMPARE_OPS:
        if not (op == "mov" and not s and inst.rm is not None and inst.shift.is_none):
            raise _unsupported(word, addr, "alu write to pc")
    return inst


def _decode_mul_sync(word, addr, cond):
    low = word >> 4 & 0xF
    if low != 0b1001:
        raise _unsupported(word, addr, "extra load/store")
    if word >> 24 & 0xF == 0:
        sub = word >> 21 & 7
        s = bool(word >> 20 & 1)
        rd, ra, rm, rn = word >> 16 & 0xF, word >> 12 & 0xF, word >> 8 & 0xF, word & 0xF
        if sub == 0:
            if ra != 0:
                raise _unsupported(word, addr, "mul with nonzero sbz")
            if PC in (rd, rm, rn):
                raise _unsupported(word, addr, "mul pc")
            return GuestInstruction("mul", "mul", cond=cond, s=s, rd=rd, rn=rn, rm=rm, addr=addr)
        if sub == 1:
            if PC in (rd, rm, rn, ra):
                raise _unsupported(word, addr, "mla pc")
            return GuestInstruction("mul", "mla", cond=cond, s=s, rd=rd, rn=rn, rm=rm, ra=ra, addr=addr)
        raise _unsupported(word, addr, "long multiply")
    if word & 0x0FF00FFF == 0x01900F9F:
        rn, rt = word >> 16 & 0xF, word >> 12 & 0xF
        if PC in (rn, rt):
            raise _unsupported(word, addr, "ldrex pc")
        return GuestInstruction("ldrex", "ldrex", cond=cond, rd=rt, rn=rn, addr=addr)
    if word & 0x0FF00FF0 == 0x01800F90:
        rn, rd, rt = word >> 16 & 0xF, word >> 12 & 0xF, word & 0xF
        if PC in (rn, rd, rt) or rd in (rn, rt):
            raise _unsupported(word, addr, "strex operands")
        return GuestInstruction("strex", "strex", cond=cond, rd=rd, rn=rn, rm=rt, addr=addr)
    raise _unsupported(word, addr, "synchronization primitive")


def _decode_ldst(word, addr, cond):
    i_bit = word >> 25 & 1
    if i_bit and word >> 4 & 1:
        if word & 0x0FF000F0 == 0x07F000F0:
            raise DecodeError("undefined", word, addr, "udf")
        raise _unsupported(word, addr, "media")
    p, u, b, w, load = (bool(word >> k & 1) for k in (24, 23, 22, 21, 20))
    rn, rt = word >> 16 & 0xF, word >> 12 & 0xF
    if not p and w:
        raise _unsupported(word, addr, "unprivileged load/store")
    wback = (not p) or w
    if wback and (rn == PC or rn == rt):
        raise _unsupported(word, addr, "writeback with rn == pc or rn == rt")
    if rt == PC and (b or not load):
        raise _unsupported(word, addr, "pc transfer")
    op = ("ldr" if load else "str") + ("b" if b else "")
    kw = dict(cond=cond, rd=rt, rn=rn, pre=p, up=u, wback=wback, addr=addr)
    if i_bit:
        rm = word & 0xF
        if rm == PC:
            raise _unsupported(word, addr, "pc offset register")
        kind, amount = decode_imm_shift(word >> 5 & 3, word >> 7 & 0x1F)
        return GuestInstruction("mem", op, rm=rm, shift=ShiftSpec(kind, amount), **kw)
    return GuestInstruction("mem", op, imm=word & 0xFFF, **kw)


def _decode_block(word, addr, cond):
    p, u, s, w, load = (bool(word >> k & 1) for k in (24, 23, 22, 21, 20))
    rn = word >> 16 & 0xF
    regs = word & 0xFFFF
    if s:
        raise _unsupported(word, addr, "user-bank block transfer")
    if rn == PC or regs == 0:
        raise _unsupported(word, addr, "block transfer operands")
    if regs >> SP & 1:
        raise _unsupported(word, addr, "sp in register list")
    if w and regs >> rn & 1:
        raise _unsupported(word, addr, "writeback with base in list")
    if load and regs >> PC & 1 and regs >> LR & 1:
        raise _unsupported(word, addr, "lr and pc both loaded")
    if not load and regs >> PC & 1:
        raise _unsupported(word, addr, "pc stored")
    mode = ("i" if u else "d") + ("b" if p else "a")
    return GuestInstruction("block", "ldm" if load else "stm", cond=cond, rn=rn, reglist=regs,
                            mode=mode, wback=w, addr=addr)


# ---------------------------------------------------------------------------
# Encoding (assembler back end; used by tests, the fuzzer and the corpus)
# ---------------------------------------------------------------------------

def encode_guest(inst: GuestInstruction) -> int:
    c = inst.cond << 28
    k = inst.kind
    if k == "alu":
        word = c | DP_CODE[inst.op] << 21 | int(inst.s) << 20 | inst.rn << 16 | inst.rd << 12
        if inst.rm is None:
            imm8 = rol(inst.imm, inst.imm_rot)
            if imm8 > 0xFF or inst.imm_rot & 1:
                raise ValueError(f"immediate {inst.imm:#x} not encodable with rotation {inst.imm_rot}")
            return word | 1 << 25 | (inst.imm_rot // 2) << 8 | imm8
        sh = inst.shift
        if sh.rs is not None:
            return word | sh.rs << 8 | sh.kind << 5 | 1 << 4 | inst.rm
        t, imm5 = encode_imm_shift(sh.kind, sh.amount)
        return word | imm5 << 7 | t << 5 | inst.rm
    if k == "mul":
        a = inst.op == "mla"
        return (c | int(a) << 21 | int(inst.s) << 20 | inst.rd << 16 | (inst.ra if a else 0) << 12
                | inst.rm << 8 | 0x90 | inst.rn)
    if k == "mem":
        load = inst.op.startswith("ldr")
        b = inst.op.endswith("b")
        p = inst.pre
        w = inst.wback and p
        word = (c | 1 << 26 | int(p) << 24 | int(inst.up) << 23 | int(b) << 22 | int(w) << 21
                | int(load) << 20 | inst.rn << 16 | inst.rd << 12)
        if inst.rm is None:
            if not 0 <= inst.imm <= 0xFFF:
                raise ValueError("offset out of range")
            return word | inst.imm
        t, imm5 = encode_imm_shift(inst.shift.kind, inst.shift.amount)
        return word | 1 << 25 | imm5 << 7 | t << 5 | inst.rm
    if k == "block":
        u = inst.mode[0] == "i"
        p = inst.mode[1] == "b"
        return (c | 0b100 << 25 | int(p) << 24 | int(u) << 23 | int(inst.wback) << 21
                | int(inst.op == "ldm") << 20 | inst.rn << 16 | inst.reglist)
    if k in ("b", "bl"):
        off = sext((inst.target - inst.addr - 8) & MASK32, 32)
        if off & 3 or not -(1 << 25) <= off < (1 << 25):
            raise ValueError("branch target out of range")
        return c | 0b101 << 25 | int(k == "bl") << 24 | (off >> 2) & 0xFFFFFF
    if k in ("bx", "blx"):
        return c | (0x012FFF10 if k == "bx" else 0x012FFF30) | inst.rm
    if k in ("movw", "movt"):
        return (c | (0x03000000 if k == "movw" else 0x03400000) | (inst.imm >> 12) << 16
                | inst.rd << 12 | inst.imm & 0xFFF)
    if k == "ldrex":
        return c | 0x01900F9F | inst.rn << 16 | inst.rd << 12
    if k == "strex":
        return c | 0x01800F90 | inst.rn << 16 | inst.rd << 12 | inst.rm
    if k == "system":
        if inst.op == "svc":
            return c | 0x0F000000 | inst.imm & 0xFFFFFF
        return c | 0x01200070 | (inst.imm >> 4) << 8 | inst.imm & 0xF
    raise ValueError(f"cannot encode {k}")


# ---------------------------------------------------------------------------
# Disassembly
# ---------------------------------------------------------------------------

def _imm_str(v):
    return f"#{v}" if v < 10 else f"#{v:#x}"


def disasm(inst: GuestInstruction) -> str:
    c = COND_NAMES[inst.cond]
    k = inst.kind
    if k == "alu":
        s = "s" if inst.s and inst.op not in COMPARE_OPS else ""
        if inst.rm is None:
            op2 = _imm_str(inst.imm)
        else:
            op2 = reg_name(inst.rm)
            if not inst.shift.is_none:
                op2 += ", " + str(inst.shift)
        if inst.op in COMPARE_OPS:
            return f"{inst.op}{c} {reg_name(inst.rn)}, {op2}"
        if inst.op in MOVE_OPS:
            return f"{inst.op}{s}{c} {reg_name(inst.rd)}, {op2}"
        return f"{inst.op}{s}{c} {reg_name(inst.rd)}, {reg_name(inst.rn)}, {op2}"
    if k == "mul":
        s = "s" if inst.s else ""
        extra = f", {reg_name(inst.ra)}" if inst.op == "mla" else ""
        return f"{inst.op}{s}{c} {reg_name(inst.rd)}, {reg_name(inst.rn)}, {reg_name(inst.rm)}{extra}"
    if k == "mem":
        base = reg_name(inst.rn)
        sign = "" if inst.up else "-"
        if inst.rm is None:
            off = f"#{sign}{inst.imm}" if inst.imm < 10 else f"#{sign}{inst.imm:#x}"
            has_off = inst.imm != 0 or not inst.up or inst.wback
        else:
            off = sign + reg_name(inst.rm) + ("" if inst.shift.is_none else ", " + str(inst.shift))
            has_off = True
        if not inst.pre:
            addr = f"[{base}], {off}"
        elif has_off:
            addr = f"[{base}, {off}]" + ("!" if inst.wback else "")
        else:
            addr = f"[{base}]" + ("!" if inst.wback else "")
        return f"{inst.op}{c} {reg_name(inst.rd)}, {addr}"
    if k == "block":
        if inst.rn == SP and inst.wback and ((inst.op == "ldm" and inst.mode == "ia")
                                             or (inst.op == "stm" and inst.mode == "db")):
            return f"{'pop' if inst.op == 'ldm' else 'push'}{c} {reglist_str(inst.reglist)}"
        mode = "" if inst.mode == "ia" else inst.mode
        return f"{inst.op}{mode}{c} {reg_name(inst.rn)}{'!' if inst.wback else ''}, {reglist_str(inst.reglist)}"
    if k in ("b", "bl"):
        return f"{k}{c} #{inst.target:#x}"
    if k in ("bx", "blx"):
        return f"{k}{c} {reg_name(inst.rm)}"
    if k in ("movw", "movt"):
        return f"{k}{c} {reg_name(inst.rd)}, {_imm_str(inst.imm)}"
    if k == "ldrex":
        return f"ldrex{c} {reg_name(inst.rd)}, [{reg_name(inst.rn)}]"
    if k == "strex":
        return f"strex{c} {reg_name(inst.rd)}, {reg_name(inst.rm)}, [{reg_name(inst.rn)}]"
    return f"{inst.op}{c} {_imm_str(inst.imm)}"


# ---------------------------------------------------------------------------
# Memory and machine state
# ---------------------------------------------------------------------------

@dataclass
class Region:
    lo: int
    hi: int            # exclusive
    data: bytearray
    name: str
    kind: str = "ram"  # ram | code | stack | mmio | cache | ctx


MmioHandler = Callable[[str, int, int, int], int]


class Memory:
    """Flat 32-bit address space made of mapped regions.

    Word and byte accesses only; words must be aligned.  Accesses inside an
    MMIO window go to ``mmio_handler(op, addr, size, value)``.
    """

    def __init__(self):
        self.regions: list[Region] = []
        self.mmio: list[tuple[int, int, str]] = []
        self.mmio_handler: Optional[MmioHandler] = None
        self.mmio_hit = None   # (op, addr, value) of the last MMIO access
        self._last: Optional[Region] = None

    def map(self, lo: int, size: int, name: str, kind: str = "ram", data=None) -> Region:
        hi = lo + size
        for r in self.regions:
            if lo < r.hi and r.lo < hi:
                raise ValueError(f"region {name} overlaps {r.name}")
        if data is None:
            data = bytearray(size)
        elif len(data) != size:
            data = bytearray(data) + bytearray(size - len(data))
        region = Region(lo, hi, data if isinstance(data, bytearray) else bytearray(data), name, kind)
        self.regions.append(region)
        self.regions.sort(key=lambda r: r.lo)
        return region

    def map_mmio(self, lo: int, hi: int, name: str):
        self.mmio.append((lo, hi, name))

    def region_at(self, addr: int) -> Optional[Region]:
        r = self._last
        if r is not None and r.lo <= addr < r.hi:
            return r
        for r in self.regions:
            if r.lo <= addr < r.hi:
                self._last = r
                return r
        return None

    def is_mmio(self, addr: int) -> bool:
        for lo, hi, _ in self.mmio:
            if lo <= addr < hi:
                return True
        return False

    def _mmio(self, op, addr, size, value=0):
        if self.mmio_handler is None:
            raise MemoryFault(addr, why="mmio without device")
        result = self.mmio_handler(op, addr, size, value)
        self.mmio_hit = (op, addr, value if op == "w" else result)
        return result

    def read32(self, addr: int) -> int:
        if addr & 3:
            raise MemoryFault(addr, why="misaligned")
        r = self._last
        if r is None or not (r.lo <= addr < r.hi):
            r = self.region_at(addr)
            if r is None:
                if self.mmio and self.is_mmio(addr):
                    return self._mmio("r", addr, 4) & MASK32
                raise MemoryFault(addr)
        o = addr - r.lo
        return int.from_bytes(r.data[o:o + 4], "little")

    def write32(self, addr: int, value: int):
        if addr & 3:
            raise MemoryFault(addr, why="misaligned")
        r = self._last
        if r is None or not (r.lo <= addr < r.hi):
            r = self.region_at(addr)
            if r is None:
                if self.mmio and self.is_mmio(addr):
                    self._mmio("w", addr, 4, value & MASK32)
                    return
                raise MemoryFault(addr)
        o = addr - r.lo
        r.data[o:o + 4] = (value & MASK32).to_bytes(4, "little")

    def read8(self, addr: int) -> int:
        r = self.region_at(addr)
        if r is None:
            if self.mmio and self.is_mmio(addr):
                return self._mmio("r", addr, 1) & 0xFF
            raise MemoryFault(addr)
        return r.data[addr - r.lo]

    def write8(self, addr: int, value: int):
        r = self.region_at(addr)
        if r is None:
            if self.mmio and self.is_mmio(addr):
                self._mmio("w", addr, 1, value & 0xFF)
                return
            raise MemoryFault(addr)
        r.data[addr - r.lo] = value & 0xFF

    def read16(self, addr: int) -> int:
        r = self.region_at(addr)
        if r is None or addr + 2 > r.hi:
            raise MemoryFault(addr)
        o = addr - r.lo
        return r.data[o] | r.data[o + 1] << 8

    def load(self, addr: int, data: bytes):
        for i in range(0, len(data)):
            self.write8(addr + i, data[i])

    def snapshot(self, kinds=("ram", "code", "stack")) -> dict:
        return {r.name: bytes(r.data) for r in self.regions if r.kind in kinds}

    def clone(self) -> "Memory":
        m = Memory()
        for r in self.regions:
            m.regions.append(Region(r.lo, r.hi, bytearray(r.data), r.name, r.kind))
        m.mmio = list(self.mmio)
        return m


@dataclass
class MachineState:
    regs: list = field(default_factory=lambda: [0] * 16)
    n: bool = False
    z: bool = False
    c: bool = False
    v: bool = False
    q: bool = False
    mem: Memory = field(default_factory=Memory)
    icount: int = 0
    exclusive: bool = False   # local exclusive monitor
    it: tuple = ()            # host only: pending IT conditions

    @property
    def pc(self) -> int:
        return self.regs[PC]

    @pc.setter
    def pc(self, value: int):
        self.regs[PC] = value & MASK32

    def flags(self) -> tuple:
        return (self.n, self.z, self.c, self.v)

    def set_flags(self, n, z, c, v):
        self.n, self.z, self.c, self.v = bool(n), bool(z), bool(c), bool(v)

    def apsr(self) -> int:
        return (self.n << 31 | self.z << 30 | self.c << 29 | self.v << 28 | self.q << 27)

    def set_apsr(self, value: int):
        self.n, self.z, self.c, self.v, self.q = (bool(value >> b & 1) for b in (31, 30, 29, 28, 27))

    def copy(self, share_memory: bool = False) -> "MachineState":
        st = copy.copy(self)
        st.regs = list(self.regs)
        if not share_memory:
            st.mem = self.mem.clone()
        return st


# ---------------------------------------------------------------------------
# Reference interpreter
# ---------------------------------------------------------------------------

_decode_cache: dict = {}


def fetch_decode(mem: Memory, addr: int) -> GuestInstruction:
    word = mem.read32(addr)
    key = (word, addr)
    inst = _decode_cache.get(key)
    if inst is None:
        inst = decode_guest(word, addr)
        if len(_decode_cache) > 200_000:
            _decode_cache.clear()
        _decode_cache[key] = inst
    return inst


def _reg(st: MachineState, inst: GuestInstruction, r: int) -> int:
    return (inst.addr + 8) & MASK32 if r == PC else st.regs[r]


def operand2(st: MachineState, inst: GuestInstruction):
    """Return (value, shifter_carry) of a data-processing operand."""
    if inst.rm is None:
        value = inst.imm
        return value, (st.c if inst.imm_rot == 0 else bit31(value))
    rm_val = _reg(st, inst, inst.rm)
    sh = inst.shift
    if sh.rs is not None:
        return shift_by_register(rm_val, sh.kind, st.regs[sh.rs], st.c)
    return shift_c(rm_val, sh.kind, sh.amount, st.c)


def alu_result(op: str, a: int, b: int, carry: bool, c_in: bool):
    """Data-processing result: (value, n?, z?, c, v_or_None)."""
    if op in ("and", "tst"):
        return a & b, carry, None
    if op in ("eor", "teq"):
        return a ^ b, carry, None
    if op == "orr":
        return a | b, carry, None
    if op == "bic":
        return a & ~b & MASK32, carry, None
    if op == "mov":
        return b, carry, None
    if op == "mvn":
        return ~b & MASK32, carry, None
    if op in ("add", "cmn"):
        return add_with_carry(a, b, 0)
    if op in ("sub", "cmp"):
        return add_with_carry(a, ~b & MASK32, 1)
    if op == "rsb":
        return add_with_carry(b, ~a & MASK32, 1)
    raise GuestFault(op)


def _branch_to(st: MachineState, target: int):
    if target & 3:
        raise GuestFault(f"interworking/unaligned branch to {target:#x}")
    st.regs[PC] = target


def step_oracle(st: MachineState) -> MachineState:
    """Execute exactly one guest instruction in place; returns ``st``."""
    pc = st.regs[PC]
    inst = fetch_decode(st.mem, pc)
    execute_guest(st, inst)
    return st


def execute_guest(st: MachineState, inst: GuestInstruction):
    try:
        _execute(st, inst)
    except MemoryFault as e:
        if e.pc is None:
            e.pc = inst.addr
            e.args = (f"{e.args[0]}, pc={inst.addr:#x}",)
        raise


def _execute(st: MachineState, inst: GuestInstruction):
    pc = inst.addr
    st.icount += 1
    r = st.regs
    if inst.cond != AL and not cond_passed(inst.cond, st.n, st.z, st.c, st.v):
        r[PC] = (pc + 4) & MASK32
        return
    next_pc = (pc + 4) & MASK32
    k = inst.kind
    mem = st.mem
    if k == "alu":
        b, carry = operand2(st, inst)
        a = _reg(st, inst, inst.rn)
        result, c_out, v_out = alu_result(inst.op, a, b, carry, st.c)
        if inst.s:
            st.n = bool(result >> 31)
            st.z = result == 0
            st.c = bool(c_out)
            if v_out is not None:
                st.v = bool(v_out)
        if inst.op not in COMPARE_OPS:
            if inst.rd == PC:
                _branch_to(st, result)
                return
            r[inst.rd] = result
    elif k == "mul":
        result = (r[inst.rn] * r[inst.rm] + (r[inst.ra] if inst.op == "mla" else 0)) & MASK32
        r[inst.rd] = result
        if inst.s:
            st.n = bool(result >> 31)
            st.z = result == 0
    elif k == "mem":
        base = _reg(st, inst, inst.rn)
        if inst.rm is None:
            off = inst.imm
        else:
            off, _ = shift_c(r[inst.rm], inst.shift.kind, inst.shift.amount, st.c)
        offset_addr = (base + off if inst.up else base - off) & MASK32
        address = offset_addr if inst.pre else base
        op = inst.op
        if op == "ldr":
            value = mem.read32(address)
        elif op == "ldrb":
            value = mem.read8(address)
        elif op == "str":
            mem.write32(address, r[inst.rd])
        else:
            mem.write8(address, r[inst.rd])
        if inst.wback:
            r[inst.rn] = offset_addr
        if op in ("ldr", "ldrb"):
            if inst.rd == PC:
                _branch_to(st, value)
                return
            r[inst.rd] = value
    elif k == "block":
        n = bin(inst.reglist).count("1")
        base = r[inst.rn]
        mode = inst.mode
        if mode == "ia":
            start = base
        elif mode == "ib":
            start = base + 4
        elif mode == "da":
            start = base - 4 * n + 4
        else:
            start = base - 4 * n
        start &= MASK32
        new_base = (base + 4 * n if mode[0] == "i" else base - 4 * n) & MASK32
        addr = start
        if inst.op == "stm":
            for i in range(16):
                if inst.reglist >> i & 1:
                    mem.write32(addr, r[i])
                    addr += 4
            if inst.wback:
                r[inst.rn] = new_base
        else:
            loaded = []
            for i in range(16):
                if inst.reglist >> i & 1:
                    loaded.append((i, mem.read32(addr)))
                    addr += 4
            if inst.wback:
                r[inst.rn] = new_base
            for i, value in loaded:
                if i == PC:
                    _branch_to(st, value)
                    return
                r[i] = value
    elif k == "b":
        r[PC] = inst.target
        return
    elif k == "bl":
        r[LR] = next_pc
        r[PC] = inst.target
        return
    elif k == "bx":
        _branch_to(st, r[inst.rm])
        return
    elif k == "blx":
        target = r[inst.rm]
        r[LR] = next_pc
        _branch_to(st, target)
        return
    elif k == "movw":
        r[inst.rd] = inst.imm
    elif k == "movt":
        r[inst.rd] = (r[inst.rd] & 0xFFFF) | inst.imm << 16
    elif k == "ldrex":
        r[inst.rd] = mem.read32(r[inst.rn])
        st.exclusive = True
    elif k == "strex":
        if st.exclusive:
            mem.write32(r[inst.rn], r[inst.rm])
            r[inst.rd] = 0
        else:
            r[inst.rd] = 1
        st.exclusive = False
    else:
        raise GuestFault(f"{inst.op} at {pc:#x}: exceptions are not modelled")
    r[PC] = next_pc


def run_oracle(workload, step_limit: int = 10_000_000, schedule=None):
    """Run a workload on the reference interpreter (boundary-deferred interrupts).

    Returns an :class:`~transkernel.engine.RunResult`; see that module for the
    shared kernel-service runtime.
    """
    from .engine import OracleBackend, Runtime
    rt = Runtime(workload, OracleBackend(), schedule=schedule, step_limit=step_limit)
    return rt.run()
