"""Small builders shared by the test modules."""
from transkernel.asm import assemble
from transkernel.manifest import Workload

HOOKS = {
    0x01F0_0000: "spin_lock", 0x01F0_0010: "spin_unlock", 0x01F0_0020: "udelay",
    0x01F0_0030: "msleep", 0x01F0_0040: "schedule", 0x01F0_0050: "tasklet_schedule",
    0x01F0_0060: "queue_work", 0x01F0_0070: "jiffies_read", 0x01F0_0080: "halt",
    0x01F0_0090: "warn", 0x01F0_00A0: "alloc_slow",
}
INTC = (0x4000_0000, 0x4000_0018, "intc")


def workload(src: str, base: int = 0x8000, hooks=None, irq=None, extra=None, **kw) -> Workload:
    """Assemble ``src`` at ``base`` into a workload with the standard hook table.

    ``extra`` maps addresses to additional assembly segments.  Labels of every
    segment may be used for ``entry``, ``irq_handler`` and ``threaded_irq``.
    """
    hooks = dict(HOOKS if hooks is None else hooks)
    symbols = {n: a for a, n in hooks.items()}
    segs, labels = [], {}
    for at, text in [(base, src)] + sorted((extra or {}).items()):
        prog = assemble(text, base=at, symbols=symbols)
        segs.append((at, prog.to_bytes()))
        labels.update(prog.labels)
    for key in ("entry", "irq_handler"):
        if isinstance(kw.get(key), str):
            kw[key] = labels[kw[key]]
    if "threaded_irq" in kw:
        kw["threaded_irq"] = {k: labels.get(v, v) for k, v in kw["threaded_irq"].items()}
    kw.setdefault("entry", base)
    kw.setdefault("ram", [(0x10_0000, 0x4000)])
    kw.setdefault("stack_size", 0x800)
    if irq is not None:
        kw["irq_lines"] = irq
        kw.setdefault("mmio", [INTC])
    return Workload(name=kw.pop("name", "t"), segments=segs, hooks=hooks, labels=labels, **kw)
