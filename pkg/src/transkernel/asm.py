"""A small two-pass assembler for the A32 guest subset.

Accepts the syntax printed by :func:`transkernel.guest_isa.disasm` plus labels,
``.word``, ``.space``, ``li rd, value`` (movw/movt pair), ``ldr rd, label``
(pc-relative literal) and ``nop``.  Branch
operands may be labels or names from an external symbol table (hooks).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .bits import AL, COND_NAMES, SHIFT_NAMES, a32_encode_imm, MASK32
from .guest_isa import (COMPARE_OPS, DP_OPS, MOVE_OPS, GuestInstruction, ShiftSpec,
                        encode_guest, LSL, RRX)

_REGS = {f"r{i}": i for i in range(16)}
_REGS.update(sp=13, lr=14, pc=15, sb=9, sl=10, fp=11, ip=12)
_CONDS = {name: i for i, name in enumerate(COND_NAMES) if name and name != "nv"}
_CONDS.update(cs=2, cc=3, al=AL)


class AsmError(ValueError):
    pass


def _build_mnemonics():
    table = {}
    alu = [op for op in DP_OPS if op not in ("adc", "sbc", "rsc")]
    conds = [("", AL)] + list(_CONDS.items())

    def add(text, entry):
        table.setdefault(text, entry)

    for cname, c in conds:
        # branches first so that "bls" means b + ls
        for base in ("b", "bl", "bx", "blx"):
            add(base + cname, (base, False, c, None))
    for base in alu + ["mul", "mla", "lsl", "lsr", "asr", "ror", "rrx"]:
        for s in ("", "s"):
            if s and base in COMPARE_OPS:
                continue
            for cname, c in conds:
                add(base + s + cname, (base, bool(s), c, None))
    for base in ("ldr", "str", "ldrb", "strb", "movw", "movt", "ldrex", "strex",
                 "push", "pop", "svc", "bkpt", "nop", "li"):
        for cname, c in conds:
            add(base + cname, (base, False, c, None))
    modes = {"ia": "ia", "ib": "ib", "da": "da", "db": "db", "fd": None, "ea": None}
    for base in ("ldm", "stm"):
        for mname, mode in modes.items():
            if mode is None:
                mode = {"ldmfd": "ia", "stmfd": "db", "ldmea": "db", "stmea": "ia"}[base + mname]
            for cname, c in conds:
                add(base + mname + cname, (base, False, c, mode))
                add(base + cname + mname, (base, False, c, mode))
        for cname, c in conds:
            add(base + cname, (base, False, c, "ia"))
    return table


_MNEMONICS = _build_mnemonics()


def _parse_int(text: str) -> int:
    text = text.strip()
    if text.startswith("#"):
        text = text[1:]
    return int(text, 0)


def _reg(text: str) -> int:
    try:
        return _REGS[text.strip().lower()]
    except KeyError:
        raise AsmError(f"bad register {text!r}") from None


def _split_operands(text: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _parse_shift(text: str) -> ShiftSpec:
    text = text.strip().lower()
    if text == "rrx":
        return ShiftSpec(RRX, 1)
    kind_s, _, amt = text.partition(" ")
    kind = SHIFT_NAMES.index(kind_s)
    amt = amt.strip()
    if amt.startswith("#"):
        return ShiftSpec(kind, _parse_int(amt))
    return ShiftSpec(kind, 0, _reg(amt))


def _reglist(text: str) -> int:
    text = text.strip()
    if not (text.startswith("{") and text.endswith("}")):
        raise AsmError(f"bad register list {text!r}")
    mask = 0
    for part in text[1:-1].split(","):
        part = part.strip()
        if "-" in part:
            a, b = (_reg(x) for x in part.split("-"))
            for i in range(a, b + 1):
                mask |= 1 << i
        elif part:
            mask |= 1 << _reg(part)
    return mask


@dataclass
class Program:
    base: int
    words: list = field(default_factory=list)
    labels: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        return b"".join(w.to_bytes(4, "little") for w in self.words)


def assemble(source: str, base: int = 0x8000, symbols: dict | None = None) -> Program:
    """Assemble ``source``; ``symbols`` supplies external addresses (hooks)."""
    symbols = dict(symbols or {})
    lines = []
    labels = {}
    addr = base
    for lineno, raw in enumerate(source.splitlines(), 1):
        line = raw.split(";")[0].split("@")[0].split("//")[0].strip()
        while True:
            m = re.match(r"^([A-Za-z_.$][\w.$]*):\s*(.*)$", line)
            if not m:
                break
            labels[m.group(1)] = addr
            line = m.group(2).strip()
        if not line:
            continue
        size = _size_of(line)
        lines.append((lineno, addr, line))
        addr += size
    prog = Program(base, labels=labels)
    env = {**symbols, **labels}
    for lineno, addr, line in lines:
        try:
            prog.words.extend(_assemble_line(line, addr, env))
        except (AsmError, ValueError, KeyError) as e:
            raise AsmError(f"line {lineno}: {line!r}: {e}") from None
    return prog


def _size_of(line: str) -> int:
    head = line.split(None, 1)[0].lower()
    if head == ".space":
        return (_parse_int(line.split(None, 1)[1]) + 3) & ~3
    if head.startswith("li") and head[2:] in _CONDS or head == "li":
        return 8
    return 4


def _value(text: str, env: dict) -> int:
    text = text.strip()
    if text.startswith("#"):
        text = text[1:]
    m = re.match(r"^([A-Za-z_.$][\w.$]*)\s*([+-]\s*\w+)?$", text)
    if m and m.group(1) in env:
        v = env[m.group(1)]
        if m.group(2):
            v += int(m.group(2).replace(" ", ""), 0)
        return v & MASK32
    return int(text, 0) & MASK32


def _assemble_line(line: str, addr: int, env: dict) -> list[int]:
    parts = line.split(None, 1)
    mnem = parts[0].lower()
    ops = _split_operands(parts[1]) if len(parts) > 1 else []
    if mnem == ".word":
        return [_value(o, env) for o in ops]
    if mnem == ".space":
        return [0] * (((_parse_int(ops[0]) + 3) & ~3) // 4)
    try:
        base, s, cond, mode = _MNEMONICS[mnem]
    except KeyError:
        raise AsmError(f"unknown mnemonic {mnem!r}") from None
    enc = lambda **kw: encode_guest(GuestInstruction(addr=addr, cond=cond, **kw))

    if base == "nop":
        return [enc(kind="alu", op="mov", rd=0, rm=0)]
    if base == "li":
        value = _value(ops[1], env)
        rd = _reg(ops[0])
        return [enc(kind="movw", op="movw", rd=rd, imm=value & 0xFFFF),
                encode_guest(GuestInstruction("movt", "movt", cond=cond, rd=rd, imm=value >> 16,
                                              addr=addr + 4))]
    if base in ("b", "bl"):
        return [enc(kind=base, op=base, target=_value(ops[0], env))]
    if base in ("bx", "blx"):
        return [enc(kind=base, op=base, rm=_reg(ops[0]))]
    if base in ("movw", "movt"):
        return [enc(kind=base, op=base, rd=_reg(ops[0]), imm=_value(ops[1], env) & 0xFFFF)]
    if base in ("svc", "bkpt"):
        return [enc(kind="system", op=base, imm=_parse_int(ops[0]) if ops else 0)]
    if base in ("mul", "mla"):
        regs = [_reg(o) for o in ops]
        kw = dict(kind="mul", op=base, s=s, rd=regs[0], rn=regs[1], rm=regs[2])
        if base == "mla":
            kw["ra"] = regs[3]
        return [enc(**kw)]
    if base in ("lsl", "lsr", "asr", "ror", "rrx"):
        rd, rm = _reg(ops[0]), _reg(ops[1])
        if base == "rrx":
            sh = ShiftSpec(RRX, 1)
        else:
            sh = _parse_shift(f"{base} {ops[2]}")
        return [enc(kind="alu", op="mov", s=s, rd=rd, rm=rm, shift=sh)]
    if base in DP_OPS:
        if base in COMPARE_OPS:
            rd, rn, rest = 0, _reg(ops[0]), ops[1:]
        elif base in MOVE_OPS:
            rd, rn, rest = _reg(ops[0]), 0, ops[1:]
        else:
            rd, rn, rest = _reg(ops[0]), _reg(ops[1]), ops[2:]
        kw = dict(kind="alu", op=base, s=s or base in COMPARE_OPS, rd=rd, rn=rn)
        if rest[0].startswith("#"):
            value = _value(rest[0], env)
            imm12 = a32_encode_imm(value)
            if imm12 is None:
                raise AsmError(f"immediate {value:#x} not encodable")
            kw.update(imm=value, imm_rot=(imm12 >> 8) * 2)
        else:
            kw["rm"] = _reg(rest[0])
            if len(rest) > 1:
                kw["shift"] = _parse_shift(rest[1])
        return [enc(**kw)]
    if base in ("push", "pop"):
        op = "stm" if base == "push" else "ldm"
        return [enc(kind="block", op=op, rn=13, reglist=_reglist(ops[0]), wback=True,
                    mode="db" if base == "push" else "ia")]
    if base in ("ldm", "stm"):
        rn_text = ops[0]
        wback = rn_text.endswith("!")
        return [enc(kind="block", op=base, rn=_reg(rn_text.rstrip("!")), reglist=_reglist(ops[1]),
                    wback=wback, mode=mode)]
    if base == "ldrex":
        return [enc(kind="ldrex", op="ldrex", rd=_reg(ops[0]), rn=_reg(ops[1].strip("[] ")))]
    if base == "strex":
        return [enc(kind="strex", op="strex", rd=_reg(ops[0]), rm=_reg(ops[1]),
                    rn=_reg(ops[2].strip("[] ")))]
    if base in ("ldr", "str", "ldrb", "strb"):
        if not ops[1].startswith("["):
            # pc-relative literal: "ldr rd, label"
            off = _value(ops[1], env) - (addr + 8)
            off = off - (1 << 32) if off >= 1 << 31 else off
            if abs(off) > 0xFFF:
                raise AsmError(f"literal {ops[1]!r} out of range")
            return [enc(kind="mem", op=base, rd=_reg(ops[0]), rn=15, pre=True, imm=abs(off), up=off >= 0)]
        return [enc(kind="mem", op=base, rd=_reg(ops[0]), **_parse_address(ops[1:]))]
    raise AsmError(f"cannot assemble {line!r}")


def _parse_offset(text: str) -> dict:
    text = text.strip()
    if text.startswith("#"):
        v = _parse_int(text)
        up = not text[1:].strip().startswith("-")
        return dict(imm=abs(v), up=up)
    up = not text.startswith("-")
    text = text.lstrip("+-")
    reg_s, _, sh = text.partition(",")
    kw = dict(rm=_reg(reg_s), up=up)
    if sh.strip():
        kw["shift"] = _parse_shift(sh)
    return kw


def _parse_address(ops: list[str]) -> dict:
    first = ops[0]
    if not first.startswith("["):
        raise AsmError("expected [")
    if first.endswith("]!") or first.endswith("]"):
        wback = first.endswith("!")
        inner = _split_operands(first.rstrip("!")[1:-1])
        kw = dict(rn=_reg(inner[0]), pre=True, wback=wback)
        if len(inner) > 1:
            kw.update(_parse_offset(", ".join(inner[1:])))
        if len(ops) > 1:
            # post-indexed: "[rn], off"
            if len(inner) > 1 or wback:
                raise AsmError("bad post-indexed address")
            kw.update(pre=False, wback=True)
            kw.update(_parse_offset(", ".join(ops[1:])))
        return kw
    raise AsmError(f"bad address {first!r}")
