import random

import pytest
from hypothesis import given, strategies as st

from _capstone_norm import _canon_imms, normalise_thumb
from transkernel.bits import MASK32, a32_encode_imm, thumb_encode_imm

EQ = 0
from transkernel.guest_isa import MachineState, Memory, ShiftSpec
from transkernel.host_isa import (CACHE_BASE, CodeCacheImage, HostInstruction, StepLimit,
                                  Unencodable, decode_host, disasm_host, dispatcher_exit,
                                  encode_host, it_block, run_host, service_trap)

LOW = st.integers(0, 7)
REG = st.sampled_from([r for r in range(15) if r != 13])


def _machine(insts):
    mem = Memory()
    cache = CodeCacheImage(mem, CACHE_BASE, 0x1000)
    mem.map(0x9000, 0x100, "data")
    mem.map_mmio(0x4000_0000, 0x4000_0010, "dev")
    addr = CACHE_BASE
    for i in insts:
        hws = encode_host(i)
        cache.write_halfwords(addr, hws)
        addr += 2 * len(hws)
    s = MachineState(mem=mem)
    s.regs[15] = CACHE_BASE
    return s


def test_add_register_narrow():
    assert len(encode_host(HostInstruction("add", rd=1, rn=1, rm=2, narrow=True))) == 1


def _witness():
    for imm8 in range(256):
        for rot in range(0, 32, 2):
            v = ((imm8 >> rot) | (imm8 << (32 - rot))) & MASK32 if rot else imm8
            if a32_encode_imm(v) is not None and thumb_encode_imm(v) is None:
                return v


def test_unencodable_constant_witness():
    k = _witness()
    assert k is not None
    with pytest.raises(Unencodable):
        encode_host(HostInstruction("mov", rd=0, imm=k))


def test_service_trap_round_trip():
    i = service_trap(3)
    assert decode_host(encode_host(i)) == i


def test_register_shifted_operand_rejected():
    with pytest.raises(Unencodable):
        encode_host(HostInstruction("add", rd=0, rn=1, rm=2, shift=ShiftSpec(1, 0, rs=3)))


def test_it_skips_false_condition():
    s = _machine([it_block(EQ), HostInstruction("add", cond=EQ, rd=0, rn=0, rm=1, narrow=True),
                  dispatcher_exit(0)])
    s.regs[0], s.regs[1] = 5, 7
    s.set_flags(False, False, False, False)
    before = list(s.regs)
    _, ev, n = run_host(s)
    assert ev.kind == "exit" and s.regs[:15] == before[:15]


def test_dispatcher_exit_event():
    s = _machine([dispatcher_exit(0)])
    before = list(s.regs)
    _, ev, n = run_host(s)
    assert (ev.kind, ev.value, n) == ("exit", 0, 1)
    assert s.regs[:15] == before[:15]


def test_mmio_store_event():
    s = _machine([HostInstruction("str", rd=1, rn=2, imm=4), dispatcher_exit(0)])
    s.regs[1], s.regs[2] = 0xAB, 0x4000_0000
    s.mem.mmio_handler = lambda op, addr, size, value: 0
    _, ev, _ = run_host(s, until=lambda e: e.kind == "mmio")
    assert ev.kind == "mmio" and ev.detail == ("w", 0x4000_0004) and ev.value == 0xAB


def test_block_of_seven_counts_seven():
    body = [HostInstruction("add", rd=0, rn=0, imm=1) for _ in range(6)] + [dispatcher_exit(0)]
    s = _machine(body)
    _, ev, n = run_host(s)
    assert n == 7 and s.regs[0] == 6


def test_step_limit_zero():
    with pytest.raises(StepLimit):
        run_host(_machine([dispatcher_exit(0)]), step_limit=0)


def test_service_trap_midway_partial_count():
    s = _machine([HostInstruction("add", rd=0, rn=0, imm=1), service_trap(2),
                  HostInstruction("add", rd=0, rn=0, imm=1), dispatcher_exit(0)])
    _, ev, n = run_host(s)
    assert (ev.kind, ev.value, n) == ("service", 2, 2)


# -- encoder/decoder round trips ---------------------------------------------------

_DP = ("and", "bic", "orr", "eor", "add", "sub", "rsb")


@given(op=st.sampled_from(_DP), s=st.booleans(), rd=REG, rn=REG, rm=REG,
       kind=st.integers(0, 3), amt=st.integers(1, 31))
def test_round_trip_dp_register(op, s, rd, rn, rm, kind, amt):
    i = HostInstruction(op, s=s, rd=rd, rn=rn, rm=rm, shift=ShiftSpec(kind, amt))
    assert decode_host(encode_host(i)) == i


@given(op=st.sampled_from(_DP), s=st.booleans(), rd=REG, rn=REG, v=st.integers(0, MASK32))
def test_round_trip_dp_immediate(op, s, rd, rn, v):
    if thumb_encode_imm(v) is None:
        return
    i = HostInstruction(op, s=s, rd=rd, rn=rn, imm=v)
    assert decode_host(encode_host(i)) == i


@given(op=st.sampled_from(("ldr", "str", "ldrb", "strb")), rd=REG, rn=REG, imm=st.integers(0, 4095))
def test_round_trip_mem_offset(op, rd, rn, imm):
    i = HostInstruction(op, rd=rd, rn=rn, imm=imm)
    assert decode_host(encode_host(i)) == i


@given(rd=st.integers(0, 14).filter(lambda r: r != 13), rm=st.integers(0, 14), op=st.sampled_from(("add", "mov")))
def test_round_trip_narrow(rd, rm, op):
    rn = rd if op == "add" else 0
    i = HostInstruction(op, rd=rd, rn=rn, rm=rm, narrow=True)
    enc = encode_host(i)
    assert len(enc) == 1
    assert decode_host(enc) == i


def test_round_trip_exhaustive_small_ranges():
    n = 0
    for op in _DP:
        for rd in range(0, 15, 3):
            for rn in range(0, 15, 4):
                for imm in (0, 1, 0xFF, 0x100, 0xFF00FF00, 0x80000000, 0xABABABAB):
                    for s in (False, True):
                        i = HostInstruction(op, s=s, rd=rd, rn=rn, imm=imm)
                        if thumb_encode_imm(imm) is None:
                            continue
                        assert decode_host(encode_host(i)) == i
                        n += 1
    assert n > 500


def test_wide_encodings_match_capstone():
    capstone = pytest.importorskip("capstone")
    md = capstone.Cs(capstone.CS_ARCH_ARM, capstone.CS_MODE_THUMB)
    rng = random.Random(2)
    checked = 0
    for _ in range(3000):
        op = rng.choice(_DP)
        i = HostInstruction(op, s=rng.random() < 0.5, rd=rng.choice([0, 1, 5, 9, 12]),
                            rn=rng.choice([2, 3, 8, 11]), rm=rng.choice([4, 6, 7, 14]),
                            shift=ShiftSpec(rng.randrange(4), rng.randrange(1, 32)))
        hws = encode_host(i)
        raw = b"".join(h.to_bytes(2, "little") for h in hws)
        got = list(md.disasm(raw, 0))
        assert len(got) == 1
        assert normalise_thumb(got[0].mnemonic, got[0].op_str) == _canon_imms(disasm_host(i).replace(".w", ""))
        checked += 1
    assert checked == 3000
