"""Workload manifests: guest image, hooks, devices, interrupts and deferred work.

Format (line oriented, ``#`` comments)::

    name = suspend_like
    entry = 0x8000
    code = suspend_like.bin@0x8000      # raw little-endian segment (repeatable)
    asm = extra.s@0x9000                # or assembled at load time (repeatable)
    ram = 0x100000..0x104000            # repeatable
    stack_base = 0x200000
    stack_size = 0x1000                 # per context
    tick_period = 1000                  # guest-instruction time units per tick
    irq_handler = handle_irq            # hex address or a label of an asm segment
    heap = 0x300000..0x310000           # bump arena for the native alloc_slow path
    include = common.inc                # splice another file in (top level only)

    [hooks]
    0x01f00000 = spin_lock
    [cold]
    0x01f00090 = warn
    [mmio]
    0x40000000..0x40000018 = intc
    [irq]
    3 = enabled
    [workqueues]
    0 = pm
    [threaded_irq]
    5 = thread_fn
    [schedule]
    12 = 3                              # tick = line (repeatable)
    [init]
    r0 = 0x100000
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

from .services import COLD

SECTIONS = ("hooks", "cold", "mmio", "irq", "workqueues", "threaded_irq", "schedule", "init")
INTC_NAME = "intc"


class ManifestError(ValueError):
    pass


@dataclass
class Workload:
    name: str
    entry: int
    segments: list = field(default_factory=list)      # (addr, bytes)
    ram: list = field(default_factory=list)           # (lo, size)
    stack_base: int = 0x0020_0000
    stack_size: int = 0x1000
    tick_period: int = 1000
    irq_handler: Optional[int] = None
    heap: Optional[tuple] = None
    hooks: dict = field(default_factory=dict)         # addr -> service name (cold ones included)
    mmio: list = field(default_factory=list)          # (lo, hi, device)
    irq_lines: dict = field(default_factory=dict)     # line -> enabled at reset
    workqueues: list = field(default_factory=list)    # index -> name
    threaded_irq: dict = field(default_factory=dict)  # line -> thread fn
    schedule: list = field(default_factory=list)      # (tick, line)
    init: dict = field(default_factory=dict)          # reg -> value
    labels: dict = field(default_factory=dict)
    path: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        addrs = list(self.hooks)
        if len(set(addrs)) != len(addrs):
            raise ManifestError("duplicate hook address")
        for a in addrs:
            for lo, data in self.segments:
                if lo <= a < lo + len(data):
                    raise ManifestError(f"hook {a:#x} lies inside a code segment")
        for _, line in self.schedule:
            if line not in self.irq_lines:
                raise ManifestError(f"scheduled irq line {line} is not declared")
        if (self.schedule or self.irq_lines) and self.irq_handler is None:
            raise ManifestError("irq lines declared without irq_handler")

    def with_schedule(self, schedule) -> "Workload":
        from dataclasses import replace
        return replace(self, schedule=sorted(schedule, key=lambda e: e[0]))

    @property
    def cold_hooks(self) -> dict:
        return {a: n for a, n in self.hooks.items() if n in COLD}


def _int(text: str, labels: dict) -> int:
    text = text.strip()
    if text in labels:
        return labels[text]
    return int(text, 0)


def _range(text: str) -> tuple:
    lo, _, hi = text.partition("..")
    return int(lo, 0), int(hi, 0)


def _collect(text: str, base_dir: str, top: list, sections: dict, depth: int):
    if depth > 4:
        raise ManifestError("include nesting too deep")
    cur = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            cur = line[1:-1].strip()
            if cur not in sections:
                raise ManifestError(f"line {lineno}: unknown section [{cur}]")
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ManifestError(f"line {lineno}: expected key = value")
        key, value = key.strip(), value.strip()
        if key == "include" and cur is None:
            with open(os.path.join(base_dir, value)) as f:
                _collect(f.read(), base_dir, top, sections, depth + 1)
            continue
        (top if cur is None else sections[cur]).append((key, value))


def parse_manifest(text: str, base_dir: str = ".", name: Optional[str] = None) -> Workload:
    from .asm import assemble
    top: list = []
    sections = {s: [] for s in SECTIONS}
    _collect(text, base_dir, top, sections, depth=0)

    hooks = {}
    for key, value in sections["hooks"] + sections["cold"]:
        a = int(key, 0)
        if a in hooks:
            raise ManifestError(f"duplicate hook address {a:#x}")
        hooks[a] = value
    for key, value in sections["cold"]:
        if value not in COLD:
            raise ManifestError(f"[cold] hook {value!r} is not a cold service")
    symbols = {n: a for a, n in hooks.items()}

    segments, ram, labels, deferred = [], [], {}, []
    kv = {}
    for key, value in top:
        if key == "code":
            fname, _, at = value.rpartition("@")
            with open(os.path.join(base_dir, fname), "rb") as f:
                segments.append((int(at, 0), f.read()))
        elif key == "asm":
            fname, _, at = value.rpartition("@")
            with open(os.path.join(base_dir, fname)) as f:
                deferred.append((int(at, 0), f.read()))
        elif key == "ram":
            lo, hi = _range(value)
            ram.append((lo, hi - lo))
        else:
            kv[key] = value
    for at, src in deferred:
        prog = assemble(src, base=at, symbols=symbols)
        segments.append((at, prog.to_bytes()))
        labels.update(prog.labels)

    if "entry" not in kv:
        raise ManifestError("missing entry")
    wl = Workload(
        name=kv.get("name", name or "workload"),
        entry=_int(kv["entry"], labels),
        segments=segments,
        ram=ram,
        stack_base=int(kv.get("stack_base", "0x200000"), 0),
        stack_size=int(kv.get("stack_size", "0x1000"), 0),
        tick_period=int(kv.get("tick_period", "1000"), 0),
        irq_handler=_int(kv["irq_handler"], labels) if "irq_handler" in kv else None,
        heap=_range(kv["heap"]) if "heap" in kv else None,
        hooks=hooks,
        mmio=[(*_range(k), v) for k, v in sections["mmio"]],
        irq_lines={int(k, 0): v != "masked" for k, v in sections["irq"]},
        workqueues=[v for _, v in sorted(((int(k, 0), v) for k, v in sections["workqueues"]))],
        threaded_irq={int(k, 0): _int(v, labels) for k, v in sections["threaded_irq"]},
        schedule=sorted(((int(k, 0), int(v, 0)) for k, v in sections["schedule"]), key=lambda e: e[0]),
        init={int(k.lstrip("r")) if k.startswith("r") else {"sp": 13, "lr": 14}[k]: _int(v, labels)
              for k, v in sections["init"]},
        labels=labels,
    )
    return wl


CORPUS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "corpus")


def corpus_names() -> list:
    return sorted(f[:-9] for f in os.listdir(CORPUS_DIR) if f.endswith(".manifest"))


def resolve_manifest(name_or_path: str) -> str:
    """A manifest path, or the name of a shipped corpus workload."""
    if os.path.exists(name_or_path):
        return name_or_path
    cand = os.path.join(CORPUS_DIR, name_or_path + ".manifest")
    if os.path.exists(cand):
        return cand
    raise ManifestError(f"no manifest {name_or_path!r} (corpus: {', '.join(corpus_names())})")


def load_manifest(path: str) -> Workload:
    path = resolve_manifest(path)
    with open(path) as f:
        text = f.read()
    wl = parse_manifest(text, os.path.dirname(os.path.abspath(path)),
                        os.path.splitext(os.path.basename(path))[0])
    wl.path = path
    return wl
