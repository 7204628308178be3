"""ARMv7-M (Thumb-2) host: instruction model, halfword encoder/decoder, interpreter.

Only the forms the translator emits are modelled.  Host-only pseudo-ops use the
permanently undefined wide encoding ``UDF.W #imm16`` (``0xF7F0|imm4, 0xA000|imm12``)
with ``imm16 = kind << 12 | data``:

    kind 0  ServiceTrap(id)          data = service id
    kind 1  DispatcherExit(index)    data = exit index
    kind 2  MmioAssistTrap           data = 0
    kind 3  SlotLoad(rt, slot)       data = rt << 8 | slot
    kind 4  SlotStore(rt, slot)      data = rt << 8 | slot

SlotLoad/SlotStore are loads/stores of the context-banked state page at
``BANK_BASE + 4*slot``; they stand in for the absolute addressing Thumb-2 lacks.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

from .bits import (AL, COND_NAMES, LSL, MASK32, RRX, SHIFT_NAMES, add_with_carry,
                   bit31, cond_passed, encode_imm_shift, decode_imm_shift, reg_name,
                   reglist_str, sext, shift_c, thumb_encode_imm, thumb_expand_imm)
from .guest_isa import NO_SHIFT, MachineState, MemoryFault, ShiftSpec

SP, LR, PC = 13, 14, 15
BANK_BASE = 0x3000_0000
CACHE_BASE = 0x2000_0000

PSEUDO_KINDS = {"svc_trap": 0, "exit": 1, "mmio_trap": 2, "slot_ld": 3, "slot_st": 4}
PSEUDO_BY_KIND = {v: k for k, v in PSEUDO_KINDS.items()}

DP_CODE = {"and": 0, "bic": 1, "orr": 2, "orn": 3, "eor": 4, "add": 8, "sub": 13, "rsb": 14}
DP_BY_CODE = {v: k for k, v in DP_CODE.items()}
COMPARE = {"tst": "and", "teq": "eor", "cmn": "add", "cmp": "sub"}
COMPARE_BY_BASE = {v: k for k, v in COMPARE.items()}
MOVES = {"mov": "orr", "mvn": "orn"}
MOVES_BY_BASE = {v: k for k, v in MOVES.items()}
DP_OPS = frozenset(DP_CODE) | frozenset(COMPARE) | frozenset(MOVES)
SHIFT_OPS = ("lsl", "lsr", "asr", "ror")
MEM_OPS = frozenset(("ldr", "str", "ldrb", "strb"))
PSEUDO_OPS = frozenset(PSEUDO_KINDS)


class Unencodable(ValueError):
    """The requested host form has no Thumb-2 encoding."""


class UndefinedEncoding(Exception):
    def __init__(self, hw, addr):
        super().__init__(f"undefined host encoding {' '.join(f'{h:04x}' for h in hw)} at {addr:#x}")
        self.hw = hw
        self.addr = addr


class StepLimit(Exception):
    pass


@dataclass(frozen=True)
class HostInstruction:
    op: str
    cond: int = AL           # branch condition / IT first condition
    s: bool = False
    rd: int = 0
    rn: int = 0
    rm: Optional[int] = None  # None: immediate operand
    ra: int = 0
    imm: int = 0             # immediate / offset / IT mask / pseudo-op payload
    shift: ShiftSpec = NO_SHIFT
    pre: bool = True
    up: bool = True
    wback: bool = False
    reglist: int = 0
    mode: str = "ia"
    target: int = 0
    narrow: bool = False
    addr: int = 0

    @property
    def size(self) -> int:
        return 2 if self.narrow else 4

    def __str__(self) -> str:
        return disasm_host(self)


@dataclass(frozen=True)
class HostEvent:
    kind: str        # service | exit | mmio_assist | mmio | branch | entry
    value: int = 0   # service id, exit index, branch target, ...
    addr: int = 0    # host pc of the trapping instruction
    detail: tuple = ()


# ---------------------------------------------------------------------------
# Convenience constructors used by the translator
# ---------------------------------------------------------------------------

def service_trap(sid: int) -> HostInstruction:
    return HostInstruction("svc_trap", imm=sid)


def dispatcher_exit(index: int) -> HostInstruction:
    return HostInstruction("exit", imm=index)


def slot_load(rt: int, slot: int) -> HostInstruction:
    return HostInstruction("slot_ld", rd=rt, imm=slot)


def slot_store(rt: int, slot: int) -> HostInstruction:
    return HostInstruction("slot_st", rd=rt, imm=slot)


def it_block(first: int, pattern: str = "") -> HostInstruction:
    """IT instruction for ``first`` followed by a then/else pattern like 'te'."""
    mask = 0
    bit = 3
    for ch in pattern:
        v = (first & 1) if ch == "t" else (first & 1) ^ 1
        mask |= v << bit
        bit -= 1
    mask |= 1 << bit
    return HostInstruction("it", cond=first, imm=mask, narrow=True)


def it_conditions(first: int, mask: int) -> tuple:
    n = 4 - ((mask & -mask).bit_length() - 1)
    conds = [first]
    for i in range(1, n):
        conds.append((first & 0xE) | (mask >> (4 - i) & 1))
    return tuple(conds)


def shrink(inst: HostInstruction) -> HostInstruction:
    """Return the narrow variant when one exists with identical semantics."""
    if inst.narrow:
        return inst
    cand = replace(inst, narrow=True)
    try:
        _check(cand)
        _encode_narrow(cand)
    except Unencodable:
        return inst
    return cand


# ---------------------------------------------------------------------------
# Legality (ARMv7-M operand restrictions)
# ---------------------------------------------------------------------------

_BAD = (SP, PC)


def _check(i: HostInstruction):
    op = i.op
    if op in DP_OPS:
        if i.rm is not None and i.shift.rs is not None:
            raise Unencodable("register-shifted register operand")
        if op in COMPARE and not i.s:
            raise Unencodable("compares always set flags")
        if i.rm is not None and i.rm in _BAD:
            mov_from_sp = (op == "mov" and i.rm == SP and i.shift.is_none and not i.s and i.rd != SP)
            if not (mov_from_sp or (i.narrow and op == "add" and i.rm == SP)):
                raise Unencodable("sp/pc as operand register")
        sp_form = op in ("add", "sub") and i.rn == SP
        if op in COMPARE:
            if i.rn == PC or (i.rn == SP and op not in ("cmp", "cmn")):
                raise Unencodable("bad compare operand")
        elif op in MOVES:
            if i.rd == PC:
                raise Unencodable("mov to pc")
            if i.rd == SP:
                ok = op == "mov" and i.rm is not None and i.shift.is_none and not i.s and i.rm != SP
                if not ok:
                    raise Unencodable("sp destination")
        else:
            if i.rd == PC or i.rn == PC:
                raise Unencodable("pc operand")
            if i.rd == SP and not (sp_form and (i.rm is None or (i.shift.kind == LSL and i.shift.amount <= 3))):
                raise Unencodable("sp destination")
            if i.rn == SP and not (sp_form or (i.narrow and op == "add")):
                raise Unencodable("sp operand")
        if i.s and i.rd == SP and op not in COMPARE:
            raise Unencodable("flag-setting write to sp")
    elif op in ("addw", "subw"):
        if i.rd == PC or i.rn == PC or (i.rd == SP and i.rn != SP):
            raise Unencodable("addw/subw registers")
    elif op in ("movw", "movt"):
        if i.rd in _BAD:
            raise Unencodable("movw/movt sp/pc")
    elif op in SHIFT_OPS or op in ("mul", "mla", "mrs", "msr"):
        regs = [i.rd, i.rn, i.rm or 0] if op not in ("mrs", "msr") else [i.rd if op == "mrs" else i.rn]
        if op == "mla":
            regs.append(i.ra)
        if any(r in _BAD for r in regs):
            raise Unencodable("sp/pc in register-only op")
    elif op in MEM_OPS:
        if i.rn == PC:
            raise Unencodable("literal addressing")
        if i.rm is not None and i.rm in _BAD:
            raise Unencodable("sp/pc index register")
        if op == "str" and i.rd == PC:
            raise Unencodable("str pc")
        if op in ("ldrb", "strb") and i.rd in _BAD:
            raise Unencodable("byte transfer with sp/pc")
        if i.wback and (i.rn == i.rd):
            raise Unencodable("writeback base == rt")
    elif op in ("ldm", "stm"):
        n = bin(i.reglist).count("1")
        if i.rn == PC or i.reglist >> SP & 1:
            raise Unencodable("block transfer operands")
        if op == "stm" and i.reglist >> PC & 1:
            raise Unencodable("stm pc")
        if op == "ldm" and i.reglist >> PC & 1 and i.reglist >> LR & 1:
            raise Unencodable("ldm lr+pc")
        if i.wback and i.reglist >> i.rn & 1:
            raise Unencodable("writeback base in list")
        if n < 2 and not i.narrow:
            raise Unencodable("wide block transfer needs two registers")
        if n < 1:
            raise Unencodable("empty register list")
        if i.mode not in ("ia", "db"):
            raise Unencodable(f"ldm/stm {i.mode}")
    elif op in ("bx", "blx"):
        if i.rm == PC or (op == "blx" and i.rm == PC):
            raise Unencodable("bx pc")


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def _split_imm12(imm12):
    return (imm12 >> 11) & 1, (imm12 >> 8) & 7, imm12 & 0xFF


def _split_imm16(imm16):
    return imm16 >> 12, (imm16 >> 11) & 1, (imm16 >> 8) & 7, imm16 & 0xFF


def _low(*regs):
    return all(0 <= r < 8 for r in regs)


def encode_host(inst: HostInstruction) -> list[int]:
    """Encode to 1 (narrow) or 2 (wide) halfwords, or raise :class:`Unencodable`."""
    _check(inst)
    if inst.narrow:
        return [_encode_narrow(inst)]
    hw1, hw2 = _encode_wide(inst)
    return [hw1, hw2]


def _encode_narrow(i: HostInstruction) -> int:
    op = i.op
    plain_reg = i.rm is not None and i.shift.is_none and not i.s
    if op == "add" and plain_reg and i.rd == i.rn and i.rd != PC and i.rm != PC:
        return 0x4400 | (i.rd >> 3) << 7 | i.rm << 3 | i.rd & 7
    if op == "mov" and plain_reg and i.rd != PC and i.rm != PC:
        return 0x4600 | (i.rd >> 3) << 7 | i.rm << 3 | i.rd & 7
    if op in ("cmp", "tst", "cmn") and i.rm is not None and i.shift.is_none:
        if _low(i.rn, i.rm):
            return {"cmp": 0x4280, "tst": 0x4200, "cmn": 0x42C0}[op] | i.rm << 3 | i.rn
        if op == "cmp" and PC not in (i.rn, i.rm):
            return 0x4500 | (i.rn >> 3) << 7 | i.rm << 3 | i.rn & 7
    if op == "cmp" and i.rm is None and _low(i.rn) and 0 <= i.imm <= 0xFF:
        return 0x2800 | i.rn << 8 | i.imm
    if op in MEM_OPS and i.rm is None and i.pre and i.up and not i.wback and _low(i.rd, i.rn):
        word = op in ("ldr", "str")
        scale = 4 if word else 1
        if i.imm % scale == 0 and i.imm // scale < 32:
            base = 0x6000 if word else 0x7000
            return base | int(op.startswith("ld")) << 11 | (i.imm // scale) << 6 | i.rn << 3 | i.rd
    if op == "stm" and i.rn == SP and i.wback and i.mode == "db" and not i.reglist & 0xBF00:
        return 0xB400 | (i.reglist >> LR & 1) << 8 | i.reglist & 0xFF
    if op == "ldm" and i.rn == SP and i.wback and i.mode == "ia" and not i.reglist & 0x7F00:
        return 0xBC00 | (i.reglist >> PC & 1) << 8 | i.reglist & 0xFF
    if op == "b":
        off = sext((i.target - i.addr - 4) & MASK32, 32)
        if i.cond == AL:
            if -2048 <= off < 2048 and not off & 1:
                return 0xE000 | (off >> 1) & 0x7FF
        elif -256 <= off < 256 and not off & 1:
            return 0xD000 | i.cond << 8 | (off >> 1) & 0xFF
    if op == "bx":
        return 0x4700 | i.rm << 3
    if op == "blx":
        return 0x4780 | i.rm << 3
    if op == "it":
        if not 0 < i.imm < 16 or i.cond == 15:
            raise Unencodable("bad IT")
        if i.cond == AL and any(c != AL for c in it_conditions(i.cond, i.imm)):
            raise Unencodable("IT AL with else slots")
        return 0xBF00 | i.cond << 4 | i.imm
    if op == "nop":
        return 0xBF00
    raise Unencodable(f"no narrow form for {op}")


def _encode_wide(i: HostInstruction):
    op = i.op
    if op in DP_OPS:
        s = i.s
        if op in COMPARE:
            base, rd, rn, s = COMPARE[op], PC, i.rn, True
        elif op in MOVES:
            base, rd, rn = MOVES[op], i.rd, PC
        else:
            base, rd, rn = op, i.rd, i.rn
        code = DP_CODE[base]
        if i.rm is None:
            enc = thumb_encode_imm(i.imm)
            if enc is None:
                raise Unencodable(f"constant {i.imm:#x}")
            imm_i, imm3, imm8 = _split_imm12(enc[0])
            return (0xF000 | imm_i << 10 | code << 5 | int(s) << 4 | rn,
                    imm3 << 12 | rd << 8 | imm8)
        t, imm5 = encode_imm_shift(i.shift.kind, i.shift.amount)
        return (0xEA00 | code << 5 | int(s) << 4 | rn,
                (imm5 >> 2) << 12 | rd << 8 | (imm5 & 3) << 6 | t << 4 | i.rm)
    if op in ("addw", "subw"):
        if not 0 <= i.imm <= 0xFFF:
            raise Unencodable("addw/subw range")
        imm_i, imm3, imm8 = _split_imm12(i.imm)
        return ((0xF200 if op == "addw" else 0xF2A0) | imm_i << 10 | i.rn, imm3 << 12 | i.rd << 8 | imm8)
    if op in ("movw", "movt"):
        if not 0 <= i.imm <= 0xFFFF:
            raise Unencodable("imm16 range")
        imm4, imm_i, imm3, imm8 = _split_imm16(i.imm)
        return ((0xF240 if op == "movw" else 0xF2C0) | imm_i << 10 | imm4, imm3 << 12 | i.rd << 8 | imm8)
    if op in SHIFT_OPS:
        return (0xFA00 | SHIFT_OPS.index(op) << 5 | int(i.s) << 4 | i.rn, 0xF000 | i.rd << 8 | i.rm)
    if op == "mul":
        return 0xFB00 | i.rn, 0xF000 | i.rd << 8 | i.rm
    if op == "mla":
        return 0xFB00 | i.rn, i.ra << 12 | i.rd << 8 | i.rm
    if op in MEM_OPS:
        load = op.startswith("ld")
        word = op in ("ldr", "str")
        if i.rm is not None:
            if not (i.pre and i.up and not i.wback and i.shift.kind == LSL and i.shift.amount <= 3):
                raise Unencodable("register offset form")
            return ((0xF840 if word else 0xF800) | int(load) << 4 | i.rn,
                    i.rd << 12 | i.shift.amount << 4 | i.rm)
        if i.pre and i.up and not i.wback:
            if i.imm > 0xFFF:
                raise Unencodable("offset range")
            return (0xF8C0 if word else 0xF880) | int(load) << 4 | i.rn, i.rd << 12 | i.imm
        if i.imm > 0xFF or (not i.pre and not i.wback):
            raise Unencodable("offset range")
        return ((0xF840 if word else 0xF800) | int(load) << 4 | i.rn,
                i.rd << 12 | 0x800 | int(i.pre) << 10 | int(i.up) << 9 | int(i.wback) << 8 | i.imm)
    if op in ("ldm", "stm"):
        base = {("stm", "ia"): 0xE880, ("ldm", "ia"): 0xE890,
                ("stm", "db"): 0xE900, ("ldm", "db"): 0xE910}[(op, i.mode)]
        return base | int(i.wback) << 5 | i.rn, i.reglist
    if op in ("b", "bl"):
        off = sext((i.target - i.addr - 4) & MASK32, 32)
        if off & 1:
            raise Unencodable("odd branch offset")
        if op == "b" and i.cond != AL:
            if not -(1 << 20) <= off < (1 << 20):
                raise Unencodable("conditional branch range")
            v = off & 0x1FFFFF
            s, j2, j1 = v >> 20 & 1, v >> 19 & 1, v >> 18 & 1
            return (0xF000 | s << 10 | i.cond << 6 | (v >> 12) & 0x3F,
                    0x8000 | j1 << 13 | j2 << 11 | (v >> 1) & 0x7FF)
        if not -(1 << 24) <= off < (1 << 24):
            raise Unencodable("branch range")
        v = off & 0x1FFFFFF
        s, i1, i2 = v >> 24 & 1, v >> 23 & 1, v >> 22 & 1
        j1, j2 = (i1 ^ 1) ^ s, (i2 ^ 1) ^ s
        return (0xF000 | s << 10 | (v >> 12) & 0x3FF,
                (0xD000 if op == "bl" else 0x9000) | j1 << 13 | j2 << 11 | (v >> 1) & 0x7FF)
    if op == "mrs":
        return 0xF3EF, 0x8000 | i.rd << 8
    if op == "msr":
        return 0xF380 | i.rn, 0x8800
    if op in PSEUDO_OPS:
        kind = PSEUDO_KINDS[op]
        if op in ("slot_ld", "slot_st"):
            if not 0 <= i.imm < 256 or not 0 <= i.rd < 16:
                raise Unencodable("slot operands")
            data = i.rd << 8 | i.imm
        else:
            if not 0 <= i.imm < 4096:
                raise Unencodable("trap payload range")
            data = i.imm
        return 0xF7F0 | kind, 0xA000 | data
    raise Unencodable(f"no wide form for {op}")


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def is_wide(hw1: int) -> bool:
    return hw1 >> 11 in (0b11101, 0b11110, 0b11111)


def decode_host(halfwords, addr: int = 0) -> HostInstruction:
    hw = list(halfwords)
    hw1 = hw[0]
    if is_wide(hw1):
        if len(hw) < 2:
            raise UndefinedEncoding(hw, addr)
        inst = _decode_wide(hw1, hw[1], addr)
    else:
        inst = _decode_narrow(hw1, addr)
    try:
        canonical = encode_host(inst) == hw[:len(encode_host(inst))]
    except Unencodable:
        canonical = False
    if not canonical:
        raise UndefinedEncoding(hw, addr)
    return inst


def _decode_narrow(h: int, addr: int) -> HostInstruction:
    H = lambda op, **kw: HostInstruction(op, narrow=True, addr=addr, **kw)
    if h & 0xFF00 == 0x4400:
        rd = (h >> 7 & 1) << 3 | h & 7
        return H("add", rd=rd, rn=rd, rm=h >> 3 & 0xF)
    if h & 0xFF00 == 0x4600:
        return H("mov", rd=(h >> 7 & 1) << 3 | h & 7, rm=h >> 3 & 0xF)
    if h & 0xFFC0 in (0x4280, 0x4200, 0x42C0):
        op = {0x4280: "cmp", 0x4200: "tst", 0x42C0: "cmn"}[h & 0xFFC0]
        return H(op, s=True, rn=h & 7, rm=h >> 3 & 7)
    if h & 0xFF00 == 0x4500:
        rn = (h >> 7 & 1) << 3 | h & 7
        rm = h >> 3 & 0xF
        if _low(rn, rm):
            raise UndefinedEncoding([h], addr)
        return H("cmp", s=True, rn=rn, rm=rm)
    if h & 0xF800 == 0x2800:
        return H("cmp", s=True, rn=h >> 8 & 7, imm=h & 0xFF)
    if h & 0xE000 == 0x6000:
        word = not h & 0x1000
        load = bool(h >> 11 & 1)
        op = ("ldr" if load else "str") + ("" if word else "b")
        return H(op, rd=h & 7, rn=h >> 3 & 7, imm=(h >> 6 & 0x1F) * (4 if word else 1))
    if h & 0xFE00 == 0xB400:
        return H("stm", rn=SP, wback=True, mode="db", reglist=(h >> 8 & 1) << LR | h & 0xFF)
    if h & 0xFE00 == 0xBC00:
        return H("ldm", rn=SP, wback=True, mode="ia", reglist=(h >> 8 & 1) << PC | h & 0xFF)
    if h & 0xF000 == 0xD000 and h >> 8 & 0xF < 14:
        off = sext(h & 0xFF, 8) << 1
        return H("b", cond=h >> 8 & 0xF, target=(addr + 4 + off) & MASK32)
    if h & 0xF800 == 0xE000:
        off = sext(h & 0x7FF, 11) << 1
        return H("b", target=(addr + 4 + off) & MASK32)
    if h & 0xFF87 == 0x4700:
        return H("bx", rm=h >> 3 & 0xF)
    if h & 0xFF87 == 0x4780:
        return H("blx", rm=h >> 3 & 0xF)
    if h == 0xBF00:
        return H("nop")
    if h & 0xFF00 == 0xBF00:
        return H("it", cond=h >> 4 & 0xF, imm=h & 0xF)
    raise UndefinedEncoding([h], addr)


def _decode_wide(h1: int, h2: int, addr: int) -> HostInstruction:
    H = lambda op, **kw: HostInstruction(op, addr=addr, **kw)
    if h1 & 0xFFF0 == 0xF7F0 and h2 & 0xF000 == 0xA000:
        kind = h1 & 0xF
        data = h2 & 0xFFF
        op = PSEUDO_BY_KIND.get(kind)
        if op is None:
            raise UndefinedEncoding([h1, h2], addr)
        if op in ("slot_ld", "slot_st"):
            return H(op, rd=data >> 8, imm=data & 0xFF)
        if op == "mmio_trap" and data:
            raise UndefinedEncoding([h1, h2], addr)
        return H(op, imm=data)
    if h1 & 0xFE00 == 0xEA00:
        code = h1 >> 5 & 0xF
        base = DP_BY_CODE.get(code)
        if base is None or h2 & 0x8000:
            raise UndefinedEncoding([h1, h2], addr)
        s = bool(h1 >> 4 & 1)
        rn, rd, rm = h1 & 0xF, h2 >> 8 & 0xF, h2 & 0xF
        imm5 = (h2 >> 12 & 7) << 2 | h2 >> 6 & 3
        kind, amount = decode_imm_shift(h2 >> 4 & 3, imm5)
        return _dp(H, base, s, rd, rn, dict(rm=rm, shift=ShiftSpec(kind, amount)), [h1, h2], addr)
    if h1 & 0xFA00 == 0xF000 and not h2 & 0x8000:
        code = h1 >> 5 & 0xF
        base = DP_BY_CODE.get(code)
        if base is None:
            raise UndefinedEncoding([h1, h2], addr)
        s = bool(h1 >> 4 & 1)
        rn, rd = h1 & 0xF, h2 >> 8 & 0xF
        imm12 = (h1 >> 10 & 1) << 11 | (h2 >> 12 & 7) << 8 | h2 & 0xFF
        try:
            value, _ = thumb_expand_imm(imm12, False)
        except ValueError:
            raise UndefinedEncoding([h1, h2], addr) from None
        return _dp(H, base, s, rd, rn, dict(imm=value), [h1, h2], addr)
    if h1 & 0xFB50 == 0xF200 and not h2 & 0x8000:
        imm = (h1 >> 10 & 1) << 11 | (h2 >> 12 & 7) << 8 | h2 & 0xFF
        rd = h2 >> 8 & 0xF
        if h1 & 0xFBF0 == 0xF200:
            return H("addw", rd=rd, rn=h1 & 0xF, imm=imm)
        if h1 & 0xFBF0 == 0xF2A0:
            return H("subw", rd=rd, rn=h1 & 0xF, imm=imm)
        raise UndefinedEncoding([h1, h2], addr)
    if h1 & 0xFB70 == 0xF240 and not h2 & 0x8000:
        imm16 = (h1 & 0xF) << 12 | (h1 >> 10 & 1) << 11 | (h2 >> 12 & 7) << 8 | h2 & 0xFF
        return H("movw" if not h1 & 0x80 else "movt", rd=h2 >> 8 & 0xF, imm=imm16)
    if h1 & 0xFF80 == 0xFA00 and h2 & 0xF0F0 == 0xF000:
        return H(SHIFT_OPS[h1 >> 5 & 3], s=bool(h1 >> 4 & 1), rd=h2 >> 8 & 0xF, rn=h1 & 0xF, rm=h2 & 0xF)
    if h1 & 0xFFF0 == 0xFB00 and h2 & 0xF0 == 0:
        ra = h2 >> 12
        if ra == 0xF:
            return H("mul", rd=h2 >> 8 & 0xF, rn=h1 & 0xF, rm=h2 & 0xF)
        return H("mla", rd=h2 >> 8 & 0xF, rn=h1 & 0xF, rm=h2 & 0xF, ra=ra)
    if h1 & 0xFE00 == 0xF800 and h1 & 0xFF60 in (0xF800, 0xF840, 0xF880, 0xF8C0) \
            and h1 & 0xF != 0xF:
        load = bool(h1 >> 4 & 1)
        word = bool(h1 >> 6 & 1)
        op = ("ldr" if load else "str") + ("" if word else "b")
        rn, rt = h1 & 0xF, h2 >> 12
        if h1 & 0x80:
            return H(op, rd=rt, rn=rn, imm=h2 & 0xFFF)
        if h2 & 0x800:
            p, u, w = bool(h2 >> 10 & 1), bool(h2 >> 9 & 1), bool(h2 >> 8 & 1)
            if (p and u and not w) or (not p and not w):
                raise UndefinedEncoding([h1, h2], addr)
            return H(op, rd=rt, rn=rn, imm=h2 & 0xFF, pre=p, up=u, wback=w)
        if h2 & 0xFC0 == 0:
            return H(op, rd=rt, rn=rn, rm=h2 & 0xF, shift=ShiftSpec(LSL, h2 >> 4 & 3))
        raise UndefinedEncoding([h1, h2], addr)
    if h1 & 0xFFD0 in (0xE880, 0xE890, 0xE900, 0xE910) and not h2 & 0x2000:
        load = bool(h1 >> 4 & 1)
        mode = "ia" if h1 & 0x0180 == 0x0080 else "db"
        return H("ldm" if load else "stm", rn=h1 & 0xF, wback=bool(h1 >> 5 & 1), mode=mode, reglist=h2)
    if h1 & 0xF800 == 0xF000 and h2 & 0x8000:
        s = h1 >> 10 & 1
        j1, j2 = h2 >> 13 & 1, h2 >> 11 & 1
        if h2 & 0x5000 == 0x0000:
            cond = h1 >> 6 & 0xF
            if cond >> 1 == 7:
                if h1 == 0xF3EF and h2 & 0xF0FF == 0x8000:
                    return H("mrs", rd=h2 >> 8 & 0xF)
                if h1 & 0xFFF0 == 0xF380 and h2 == 0x8800:
                    return H("msr", rn=h1 & 0xF)
                raise UndefinedEncoding([h1, h2], addr)
            off = sext(s << 20 | j2 << 19 | j1 << 18 | (h1 & 0x3F) << 12 | (h2 & 0x7FF) << 1, 21)
            return H("b", cond=cond, target=(addr + 4 + off) & MASK32)
        if h2 & 0x1000:
            i1, i2 = (j1 ^ s) ^ 1, (j2 ^ s) ^ 1
            off = sext(s << 24 | i1 << 23 | i2 << 22 | (h1 & 0x3FF) << 12 | (h2 & 0x7FF) << 1, 25)
            return H("bl" if h2 & 0x4000 else "b", target=(addr + 4 + off) & MASK32)
    raise UndefinedEncoding([h1, h2], addr)


def _dp(H, base, s, rd, rn, operand, hw, addr):
    if rd == PC and s and base in COMPARE_BY_BASE:
        return H(COMPARE_BY_BASE[base], s=True, rn=rn, **operand)
    if rn == PC and base in MOVES_BY_BASE:
        return H(MOVES_BY_BASE[base], s=s, rd=rd, **operand)
    if rd == PC or rn == PC:
        raise UndefinedEncoding(hw, addr)
    return H(base, s=s, rd=rd, rn=rn, **operand)


# ---------------------------------------------------------------------------
# Disassembly (capstone-like spelling)
# ---------------------------------------------------------------------------

def _imm(v: int) -> str:
    return f"#{v}" if v < 10 else f"#{v:#x}"


def disasm_host(i: HostInstruction) -> str:
    op = i.op
    w = "" if i.narrow else ".w"
    c = "" if i.cond == AL else COND_NAMES[i.cond]
    if op in PSEUDO_OPS:
        names = {"svc_trap": "svctrap", "exit": "dexit", "mmio_trap": "mmiotrap",
                 "slot_ld": "slotld", "slot_st": "slotst"}
        if op in ("slot_ld", "slot_st"):
            return f"{names[op]} {reg_name(i.rd)}, #{i.imm}"
        return f"{names[op]} #{i.imm}"
    if op in DP_OPS:
        s = "s" if i.s and op not in COMPARE else ""
        if i.rm is None:
            op2 = _imm(i.imm)
        else:
            op2 = reg_name(i.rm) + ("" if i.shift.is_none else ", " + str(i.shift))
        if op in COMPARE:
            return f"{op}{w} {reg_name(i.rn)}, {op2}"
        if op in MOVES:
            return f"{op}{s}{w} {reg_name(i.rd)}, {op2}"
        return f"{op}{s}{w} {reg_name(i.rd)}, {reg_name(i.rn)}, {op2}"
    if op in ("addw", "subw", "movw", "movt"):
        if op in ("movw", "movt"):
            return f"{op} {reg_name(i.rd)}, {_imm(i.imm)}"
        return f"{op} {reg_name(i.rd)}, {reg_name(i.rn)}, {_imm(i.imm)}"
    if op in SHIFT_OPS:
        return f"{op}{'s' if i.s else ''}.w {reg_name(i.rd)}, {reg_name(i.rn)}, {reg_name(i.rm)}"
    if op == "mul":
        return f"mul {reg_name(i.rd)}, {reg_name(i.rn)}, {reg_name(i.rm)}"
    if op == "mla":
        return f"mla {reg_name(i.rd)}, {reg_name(i.rn)}, {reg_name(i.rm)}, {reg_name(i.ra)}"
    if op in MEM_OPS:
        base = reg_name(i.rn)
        if i.rm is not None:
            sh = "" if i.shift.is_none else f", lsl #{i.shift.amount}"
            return f"{op}{w} {reg_name(i.rd)}, [{base}, {reg_name(i.rm)}{sh}]"
        off = f"#{'' if i.up else '-'}{i.imm}" if i.imm < 10 else f"#{'' if i.up else '-'}{i.imm:#x}"
        if not i.pre:
            return f"{op}{w} {reg_name(i.rd)}, [{base}], {off}"
        if i.imm or i.wback or not i.up:
            return f"{op}{w} {reg_name(i.rd)}, [{base}, {off}]{'!' if i.wback else ''}"
        return f"{op}{w} {reg_name(i.rd)}, [{base}]"
    if op in ("ldm", "stm"):
        if i.rn == SP and i.wback and (op, i.mode) in (("stm", "db"), ("ldm", "ia")):
            return f"{'push' if op == 'stm' else 'pop'}{w} {reglist_str(i.reglist)}"
        return f"{op}{i.mode if i.mode != 'ia' else ''}{w} {reg_name(i.rn)}{'!' if i.wback else ''}, {reglist_str(i.reglist)}"
    if op in ("b", "bl"):
        return f"{op}{c}{w if op == 'b' else ''} #{i.target:#x}"
    if op in ("bx", "blx"):
        return f"{op} {reg_name(i.rm)}"
    if op == "it":
        conds = it_conditions(i.cond, i.imm)
        pattern = "".join("t" if (x & 1) == (i.cond & 1) else "e" for x in conds[1:])
        return f"it{pattern} {COND_NAMES[i.cond] or 'al'}"
    if op == "mrs":
        return f"mrs {reg_name(i.rd)}, apsr"
    if op == "msr":
        return f"msr apsr_nzcvq, {reg_name(i.rn)}"
    return op


# ---------------------------------------------------------------------------
# Code cache image
# ---------------------------------------------------------------------------

class CodeCacheImage:
    """Append-only buffer of encoded host halfwords at a fixed base address."""

    def __init__(self, mem, base: int = CACHE_BASE, size: int = 1 << 20):
        self.base = base
        self.size = size
        self.region = mem.map(base, size, "code_cache", kind="cache")
        self.cursor = base
        self.host_to_guest: dict[int, int] = {}

    @property
    def used(self) -> int:
        return self.cursor - self.base

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.size

    def write_halfwords(self, addr: int, hws):
        o = addr - self.base
        for k, h in enumerate(hws):
            self.region.data[o + 2 * k:o + 2 * k + 2] = h.to_bytes(2, "little")

    def halfwords_at(self, addr: int, count: int) -> list:
        o = addr - self.base
        return [int.from_bytes(self.region.data[o + 2 * k:o + 2 * k + 2], "little") for k in range(count)]

    def reserve(self, nbytes: int) -> int:
        if self.cursor + nbytes > self.base + self.size:
            raise MemoryError("code cache full")
        addr = self.cursor
        self.cursor += nbytes
        return addr

    def dump(self) -> bytes:
        return bytes(self.region.data[:self.used])

    def sidecar(self) -> str:
        return "".join(f"{h:#010x} -> {g:#010x}\n" for h, g in sorted(self.host_to_guest.items()))


# ---------------------------------------------------------------------------
# Interpreter
# ---------------------------------------------------------------------------

_hdecode: dict = {}


def fetch_host(mem, addr: int) -> HostInstruction:
    hw1 = mem.read16(addr)
    if is_wide(hw1):
        hw2 = mem.read16(addr + 2)
        key = (addr, hw1, hw2)
    else:
        hw2 = None
        key = (addr, hw1)
    inst = _hdecode.get(key)
    if inst is None:
        inst = decode_host([hw1] if hw2 is None else [hw1, hw2], addr)
        if len(_hdecode) > 500_000:
            _hdecode.clear()
        _hdecode[key] = inst
    return inst


def _in_cache(mem, addr: int) -> bool:
    r = mem.region_at(addr)
    return r is not None and r.kind == "cache"


def _host_alu(op, a, b, carry):
    if op in ("and", "tst"):
        return a & b, carry, None
    if op in ("eor", "teq"):
        return a ^ b, carry, None
    if op == "orr":
        return a | b, carry, None
    if op == "orn":
        return a | (~b & MASK32), carry, None
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
    return add_with_carry(b, ~a & MASK32, 1)   # rsb


def _interwork(st, target, ret_event):
    """BX-style transfer: into the cache needs the Thumb bit, anything else traps."""
    if _in_cache(st.mem, target & ~1):
        if not target & 1:
            raise MemoryFault(target, st.regs[PC], "branch to cache without thumb bit")
        st.regs[PC] = target & ~1
        return None
    st.regs[PC] = target
    return HostEvent("branch", target, ret_event)


def step_host(st: MachineState) -> Optional[HostEvent]:
    """Execute one host instruction.  Returns a HostEvent for traps, MMIO and
    branches out of the code cache; None otherwise."""
    pc = st.regs[PC]
    inst = fetch_host(st.mem, pc)
    return execute_host(st, inst)


def execute_host(st: MachineState, i: HostInstruction) -> Optional[HostEvent]:
    r = st.regs
    pc = i.addr
    nxt = pc + (2 if i.narrow else 4)
    op = i.op
    if st.it:
        cond = st.it[0]
        st.it = st.it[1:]
        if not cond_passed(cond, st.n, st.z, st.c, st.v):
            r[PC] = nxt
            return None
    mem = st.mem
    if op in DP_OPS:
        if i.rm is None:
            b, carry = i.imm, st.c
            if i.s and op not in ("add", "sub", "rsb", "cmp", "cmn"):
                enc = thumb_encode_imm(i.imm)
                if enc is not None and enc[1]:
                    carry = bit31(i.imm)
        else:
            b, carry = shift_c(r[i.rm], i.shift.kind, i.shift.amount, st.c)
        a = 0 if op in MOVES else r[i.rn]
        res, c_out, v_out = _host_alu(op, a, b, carry)
        if i.s or op in COMPARE:
            st.n = bool(res >> 31)
            st.z = res == 0
            st.c = bool(c_out)
            if v_out is not None:
                st.v = bool(v_out)
        if op not in COMPARE:
            r[i.rd] = res
    elif op in ("addw", "subw"):
        r[i.rd] = (r[i.rn] + i.imm if op == "addw" else r[i.rn] - i.imm) & MASK32
    elif op == "movw":
        r[i.rd] = i.imm
    elif op == "movt":
        r[i.rd] = (r[i.rd] & 0xFFFF) | i.imm << 16
    elif op in SHIFT_OPS:
        res, c_out = shift_c(r[i.rn], SHIFT_OPS.index(op), r[i.rm] & 0xFF, st.c)
        r[i.rd] = res
        if i.s:
            st.n, st.z, st.c = bool(res >> 31), res == 0, bool(c_out)
    elif op == "mul":
        r[i.rd] = r[i.rn] * r[i.rm] & MASK32
    elif op == "mla":
        r[i.rd] = (r[i.rn] * r[i.rm] + r[i.ra]) & MASK32
    elif op in MEM_OPS:
        base = r[i.rn]
        off = i.imm if i.rm is None else (r[i.rm] << i.shift.amount) & MASK32
        oaddr = (base + off if i.up else base - off) & MASK32
        ea = oaddr if i.pre else base
        mem.mmio_hit = None
        if op == "ldr":
            val = mem.read32(ea)
        elif op == "ldrb":
            val = mem.read8(ea)
        elif op == "str":
            mem.write32(ea, r[i.rd])
        else:
            mem.write8(ea, r[i.rd])
        if i.wback:
            r[i.rn] = oaddr
        ev = None
        if op in ("ldr", "ldrb"):
            if i.rd == PC:
                return _interwork(st, val, pc)
            r[i.rd] = val
        r[PC] = nxt
        if mem.mmio_hit is not None:
            kind, a, v = mem.mmio_hit
            mem.mmio_hit = None
            return HostEvent("mmio", v, pc, (kind, a))
        return ev
    elif op in ("ldm", "stm"):
        n = bin(i.reglist).count("1")
        base = r[i.rn]
        addr = base if i.mode == "ia" else (base - 4 * n) & MASK32
        new_base = (base + 4 * n if i.mode == "ia" else base - 4 * n) & MASK32
        if op == "stm":
            for k in range(16):
                if i.reglist >> k & 1:
                    mem.write32(addr, r[k])
                    addr += 4
            if i.wback:
                r[i.rn] = new_base
        else:
            vals = []
            for k in range(16):
                if i.reglist >> k & 1:
                    vals.append((k, mem.read32(addr)))
                    addr += 4
            if i.wback:
                r[i.rn] = new_base
            for k, v in vals:
                if k == PC:
                    return _interwork(st, v, pc)
                r[k] = v
    elif op == "b":
        if i.cond == AL or cond_passed(i.cond, st.n, st.z, st.c, st.v):
            r[PC] = i.target
            return None
    elif op == "bl":
        r[LR] = nxt | 1
        r[PC] = i.target
        return None
    elif op == "bx":
        return _interwork(st, r[i.rm], pc)
    elif op == "blx":
        target = r[i.rm]
        r[LR] = nxt | 1
        return _interwork(st, target, pc)
    elif op == "it":
        st.it = it_conditions(i.cond, i.imm)
    elif op == "nop":
        pass
    elif op == "mrs":
        r[i.rd] = st.apsr()
    elif op == "msr":
        st.set_apsr(r[i.rn])
    elif op == "slot_ld":
        r[i.rd] = mem.read32(BANK_BASE + 4 * i.imm)
    elif op == "slot_st":
        mem.write32(BANK_BASE + 4 * i.imm, r[i.rd])
    elif op == "svc_trap":
        return HostEvent("service", i.imm, pc)
    elif op == "exit":
        return HostEvent("exit", i.imm, pc)
    elif op == "mmio_trap":
        return HostEvent("mmio_assist", 0, pc)
    else:
        raise UndefinedEncoding([], pc)
    r[PC] = nxt
    return None


def run_host(st: MachineState, until: Optional[Callable[[HostEvent], bool]] = None,
             step_limit: int = 1_000_000, stop_at=None):
    """Run until an event satisfying ``until`` (default: any event).

    ``stop_at`` is a container of host addresses; reaching one of them after at
    least one executed instruction yields ``HostEvent('entry', addr)``.
    Returns ``(state, event, host_instruction_count)``.
    """
    if step_limit <= 0:
        raise StepLimit("step limit 0")
    count = 0
    mem = st.mem
    cache = _hdecode
    regs = st.regs
    while True:
        pc = regs[PC]
        if count and stop_at is not None and pc in stop_at and not st.it:
            return st, HostEvent("entry", pc, pc), count
        if count >= step_limit:
            raise StepLimit(f"host step limit {step_limit} at {pc:#x}")
        hw1 = mem.read16(pc)
        if hw1 >> 11 in (0b11101, 0b11110, 0b11111):
            key = (pc, hw1, mem.read16(pc + 2))
        else:
            key = (pc, hw1)
        inst = cache.get(key)
        if inst is None:
            inst = fetch_host(mem, pc)
        ev = execute_host(st, inst)
        count += 1
        if ev is not None and (until is None or until(ev)):
            return st, ev, count
