"""Write docs/rule_table.md: one row per representative guest form."""
import argparse
import os

from transkernel.asm import assemble
from transkernel.guest_isa import decode_guest, disasm
from transkernel.xlate import BASELINE, OPTIMIZED, classify, translate_inst

FORMS = """
    add r0, r1, r2
    adds r0, r1, #0xff
    mov r3, r4, lsl #7
    ldr r0, [r1, #0x10]
    str r2, [r3, -r4, lsl #2]
    ldrb r5, [r6, #3]
    push {r4, r5, lr}
    pop {r4, pc}
    bx lr
    mul r0, r1, r2
    ldr r3, [r5], #4
    str r0, [r1, #4]!
    add r10, r10, #1
    add r0, sp, r1, lsl #2
    ldr r0, [pc, #8]
    adds r0, r0, #0xf000000f
    orrs r1, r2, #0xff000000
    add r1, r1, r2, lsr r3
    movs r0, r1, ror r2
    ldrex r0, [r1]
    strex r2, r0, [r1]
    ldmib r0, {r1, r2}
    stmda r0!, {r1, r2}
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "docs", "rule_table.md"))
    args = ap.parse_args()
    prog = assemble(FORMS, base=0x8000)
    rows = ["| guest | rule | optimized | baseline |", "|---|---|---:|---:|"]
    for k, w in enumerate(prog.words):
        inst = decode_guest(w, 0x8000 + 4 * k)
        opt = translate_inst(inst, OPTIMIZED)
        base = translate_inst(inst, BASELINE)
        rows.append(f"| `{disasm(inst)}` | {classify(inst).key} | {len(opt.items)} | {len(base.items)} |")
    text = ("# Translation rules by example\n\n"
            "Host instruction counts per guest instruction (generated by scripts/gen_rule_table.py).\n\n"
            + "\n".join(rows) + "\n")
    with open(args.out, "w") as f:
        f.write(text)
    print(text)


if __name__ == "__main__":
    main()
