"""Bit-level helpers shared by the guest and host instruction models."""
from __future__ import annotations

MASK32 = 0xFFFFFFFF

# shift kinds, numbered as in the instruction encodings
LSL, LSR, ASR, ROR, RRX = 0, 1, 2, 3, 4
SHIFT_NAMES = ("lsl", "lsr", "asr", "ror", "rrx")

COND_NAMES = ("eq", "ne", "hs", "lo", "mi", "pl", "vs", "vc",
              "hi", "ls", "ge", "lt", "gt", "le", "", "nv")
AL = 14


def ror(value: int, amount: int) -> int:
    amount &= 31
    if amount == 0:
        return value & MASK32
    return ((value >> amount) | (value << (32 - amount))) & MASK32


def rol(value: int, amount: int) -> int:
    return ror(value, (32 - amount) & 31)


def sext(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    value &= (1 << bits) - 1
    return (value ^ sign) - sign


def bit31(value: int) -> bool:
    return bool(value & 0x80000000)


def add_with_carry(x: int, y: int, carry_in: int):
    """Return (result, carry, overflow) of a 32-bit add."""
    unsigned = x + y + carry_in
    result = unsigned & MASK32
    carry = unsigned > MASK32
    sx = x - 0x100000000 if x & 0x80000000 else x
    sy = y - 0x100000000 if y & 0x80000000 else y
    signed = sx + sy + carry_in
    overflow = signed != (result - 0x100000000 if result & 0x80000000 else result)
    return result, carry, overflow


def shift_c(value: int, kind: int, amount: int, carry_in: bool):
    """Shift with carry-out, for an already-decoded amount (0 means no shift).

    RRX ignores ``amount``.  Amounts above 32 are allowed (register shifts).
    """
    if kind == RRX:
        return ((value >> 1) | (0x80000000 if carry_in else 0)), bool(value & 1)
    if amount == 0:
        return value, carry_in
    if kind == LSL:
        if amount < 32:
            return (value << amount) & MASK32, bool((value >> (32 - amount)) & 1)
        if amount == 32:
            return 0, bool(value & 1)
        return 0, False
    if kind == LSR:
        if amount < 32:
            return value >> amount, bool((value >> (amount - 1)) & 1)
        if amount == 32:
            return 0, bit31(value)
        return 0, False
    if kind == ASR:
        if amount >= 32:
            return (MASK32 if value & 0x80000000 else 0), bit31(value)
        signed = sext(value, 32)
        return (signed >> amount) & MASK32, bool((signed >> (amount - 1)) & 1)
    # ROR
    amount &= 31
    if amount == 0:
        return value, bit31(value)
    result = ror(value, amount)
    return result, bit31(result)


def shift_by_register(value: int, kind: int, rs_value: int, carry_in: bool):
    """Register-controlled shift: only the bottom byte of the amount counts."""
    return shift_c(value, kind, rs_value & 0xFF, carry_in)


def decode_imm_shift(kind: int, imm5: int):
    """Map an encoded (type, imm5) pair to (kind, amount)."""
    if kind == LSL:
        return LSL, imm5
    if kind in (LSR, ASR):
        return kind, 32 if imm5 == 0 else imm5
    if imm5 == 0:
        return RRX, 1
    return ROR, imm5


def encode_imm_shift(kind: int, amount: int):
    """Inverse of :func:`decode_imm_shift`; returns (type, imm5)."""
    if kind == RRX:
        return ROR, 0
    if kind == LSL:
        if not 0 <= amount <= 31:
            raise ValueError(f"lsl #{amount}")
        return LSL, amount
    if kind in (LSR, ASR):
        if not 1 <= amount <= 32:
            raise ValueError(f"{SHIFT_NAMES[kind]} #{amount}")
        return kind, amount & 31
    if not 1 <= amount <= 31:
        raise ValueError(f"ror #{amount}")
    return ROR, amount


# --- A32 rotated immediates -------------------------------------------------

def a32_expand_imm(imm12: int, carry_in: bool):
    rot = (imm12 >> 8) * 2
    value = ror(imm12 & 0xFF, rot)
    carry = carry_in if rot == 0 else bit31(value)
    return value, carry


def a32_encode_imm(value: int):
    """Canonical (smallest rotation) A32 imm12 for ``value``, or None."""
    value &= MASK32
    for rot in range(16):
        imm8 = rol(value, rot * 2)
        if imm8 <= 0xFF:
            return (rot << 8) | imm8
    return None


# --- Thumb-2 modified immediates ---------------------------------------------

def thumb_expand_imm(imm12: int, carry_in: bool):
    """ThumbExpandImm_C.  Returns (value, carry).  Raises on unpredictable forms."""
    if imm12 >> 10 == 0:
        imm8 = imm12 & 0xFF
        pattern = (imm12 >> 8) & 3
        if pattern != 0 and imm8 == 0:
            raise ValueError("unpredictable modified immediate")
        if pattern == 0:
            value = imm8
        elif pattern == 1:
            value = (imm8 << 16) | imm8
        elif pattern == 2:
            value = (imm8 << 24) | (imm8 << 8)
        else:
            value = imm8 * 0x01010101
        return value, carry_in
    unrotated = 0x80 | (imm12 & 0x7F)
    value = ror(unrotated, imm12 >> 7)
    return value, bit31(value)


def thumb_encode_imm(value: int):
    """Return (imm12, rotated) for ``value`` or None when unencodable.

    ``rotated`` tells whether the encoding produces a carry-out of bit 31
    (rotated form) or leaves the carry untouched (replicated byte patterns).
    Each value has at most one encoding.
    """
    value &= MASK32
    if value <= 0xFF:
        return value, False
    b = value & 0xFF
    if b and value == (b << 16) | b:
        return 0x100 | b, False
    b = (value >> 8) & 0xFF
    if b and value == (b << 24) | (b << 8):
        return 0x200 | b, False
    b = value & 0xFF
    if b and value == b * 0x01010101:
        return 0x300 | b, False
    for rot in range(8, 32):
        unrotated = rol(value, rot)
        if unrotated <= 0xFF and unrotated & 0x80:
            return (rot << 7) | (unrotated & 0x7F), True
    return None


def popcount(x: int) -> int:
    return bin(x).count("1")


def reglist_str(mask: int) -> str:
    return "{" + ", ".join(reg_name(i) for i in range(16) if mask >> i & 1) + "}"


def reg_name(i: int) -> str:
    return {13: "sp", 14: "lr", 15: "pc"}.get(i, f"r{i}")


def cond_passed(cond: int, n: bool, z: bool, c: bool, v: bool) -> bool:
    base = cond >> 1
    if base == 0:
        result = z
    elif base == 1:
        result = c
    elif base == 2:
        result = n
    elif base == 3:
        result = v
    elif base == 4:
        result = c and not z
    elif base == 5:
        result = n == v
    elif base == 6:
        result = (n == v) and not z
    else:
        return True
    if cond & 1:
        return not result
    return result
