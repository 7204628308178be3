"""Normalise capstone's A32 text to the package's disassembly style."""
import re

_ALIAS = {"sb": "r9", "sl": "r10", "fp": "r11", "ip": "r12"}
_SHIFT_MNEMS = ("lsl", "lsr", "asr", "ror", "rrx")


def _ror(v, r):
    r &= 31
    return ((v >> r) | (v << (32 - r))) & 0xFFFFFFFF if r else v


def _imm(v):
    return f"#{v}" if v < 10 else f"#{v:#x}"


def normalise(mnemonic: str, op_str: str) -> str:
    ops = re.sub(r"\b(sb|sl|fp|ip)\b", lambda m: _ALIAS[m.group(1)], op_str)
    # "#imm8, #rot" spelling of non-canonical rotations
    m = re.search(r"#(\d+), #(\d+)$", ops)
    if m:
        ops = ops[:m.start()] + _imm(_ror(int(m.group(1)), int(m.group(2))))
    # shift aliases of mov: lsrs r1, r2, #3 -> movs r1, r2, lsr #3
    for sh in _SHIFT_MNEMS:
        if mnemonic.startswith(sh):
            rest = mnemonic[len(sh):]
            parts = [p.strip() for p in ops.split(",")]
            if sh == "rrx":
                return f"mov{rest} {parts[0]}, {parts[1]}, rrx"
            amt = parts[2]
            if amt.startswith("#"):
                amt = f"#{int(amt[1:], 0)}"
            return f"mov{rest} {parts[0]}, {parts[1]}, {sh} {amt}"
    return f"{mnemonic} {ops}".strip()


def _canon_imms(t: str) -> str:
    def fix(m):
        v = int(m.group(1), 0)
        if v < 0 and abs(v) >= 0x1000:
            v &= 0xFFFFFFFF
        if v < 0:
            return f"#-{_imm(-v)[1:]}"
        return _imm(v)
    return re.sub(r"#(-?(?:0x[0-9a-f]+|\d+))", fix, t)


def normalise_thumb(mnemonic: str, op_str: str) -> str:
    """Capstone Thumb text -> package spelling (minus ``.w`` width suffixes)."""
    mnemonic = mnemonic.replace(".w", "")
    ops = re.sub(r"\b(sb|sl|fp|ip)\b", lambda m: _ALIAS[m.group(1)], op_str)
    ops = _canon_imms(ops)
    parts = [p.strip() for p in ops.split(",")] if ops else []
    base = mnemonic.rstrip("s") if mnemonic not in ("bics", "rors", "asrs", "lsls", "lsrs") else mnemonic[:-1]
    if mnemonic in ("lsl", "lsr", "asr", "ror", "lsls", "lsrs", "asrs", "rors", "rrx", "rrxs") \
            and len(parts) == 3 and parts[2].startswith("#") or mnemonic.startswith("rrx"):
        sh = mnemonic[:3]
        s = "s" if mnemonic.endswith("s") and len(mnemonic) == 4 else ""
        tail = "rrx" if sh == "rrx" else f"{sh} {parts[2]}"
        return f"mov{s} {parts[0]}, {parts[1]}, {tail}"
    if mnemonic == "add" and len(parts) == 2:
        parts = [parts[0], parts[0], parts[1]]
    if mnemonic == "add" and len(parts) == 3 and parts[1] == "sp" and parts[2] == parts[0]:
        parts = [parts[0], parts[0], "sp"]
    del base
    return (mnemonic + " " + ", ".join(parts)).strip()


def canon_package_thumb(text: str) -> str:
    return _canon_imms(text.replace(".w", ""))
