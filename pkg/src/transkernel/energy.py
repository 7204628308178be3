"""System energy model: native (big core), translated (peripheral core) and LITTLE.

Powers are in mW and times in seconds, so energies come out in mJ.  DRAM
power while busy is affine in bandwidth, ``bg + c * MB/s``; while idle the
DRAM sits in self-refresh.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Sequence


class Infeasible(ValueError):
    pass


@dataclass(frozen=True)
class EnergyParams:
    P_cpu_busy: float = 630.0
    P_cpu_idle: float = 80.0
    P_pc_busy: float = 17.0
    P_pc_idle: float = 1.0
    F: float = 6.0                    # big-core clock / peripheral-core clock
    P_mem_sr: float = 1.3
    P_io: float = 5.0
    dram_bg: float = 0.0
    dram_c: float = 0.0               # mW per MB/s
    bw_native: float = 12.0           # 8 read + 4 write
    bw_ark: float = 34.0              # 32 read + 2 write
    P_little_idle: float = 40.0
    little_eff: float = 1.3
    little_clock: float = 0.7

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be a non-negative number, got {v}")
        if self.F <= 1:
            raise ValueError("F must exceed 1")
        if not 0 < self.little_clock <= 1 or self.little_eff <= 0:
            raise ValueError("LITTLE clock must lie in (0, 1] and efficiency be positive")

    def p_mem(self, bw: float) -> float:
        return self.dram_bg + self.dram_c * bw

    def to_text(self) -> str:
        return "".join(f"{k} = {v:g}\n" for k, v in asdict(self).items())


def load_params(path: Optional[str] = None, text: Optional[str] = None) -> EnergyParams:
    """Read ``key = value`` lines over the built-in defaults."""
    if path is not None:
        with open(path) as f:
            text = f.read()
    known = {f.name for f in fields(EnergyParams)}
    over = {}
    for lineno, raw in enumerate((text or "").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq or key not in known:
            raise ValueError(f"params line {lineno}: unknown or malformed entry {raw.strip()!r}")
        over[key] = float(value)
    return replace(EnergyParams(), **over)


@dataclass(frozen=True)
class WorkloadProfile:
    T_busy: float
    T_idle: float
    E_core: Optional[float] = None    # measured native core energy, replaces the modelled one

    def __post_init__(self):
        if self.T_busy < 0 or self.T_idle < 0 or self.T_busy + self.T_idle <= 0:
            raise ValueError("busy and idle times must be non-negative with a positive total")

    @classmethod
    def from_usage(cls, usage: float, total: float = 1.0) -> "WorkloadProfile":
        if not 0 <= usage <= 1:
            raise ValueError(f"usage {usage} outside [0, 1]")
        return cls(usage * total, (1 - usage) * total)

    @classmethod
    def from_report(cls, report, tick_seconds: float = 0.001) -> "WorkloadProfile":
        """Busy/idle ticks of a run, read as native-execution time."""
        return cls(report.busy_ticks * tick_seconds, report.idle_ticks * tick_seconds)

    @property
    def usage(self) -> float:
        return self.T_busy / (self.T_busy + self.T_idle)


@dataclass(frozen=True)
class Breakdown:
    core: float
    dram: float
    io: float

    @property
    def total(self) -> float:
        return self.core + self.dram + self.io


def native_breakdown(p: EnergyParams, w: WorkloadProfile) -> Breakdown:
    core = w.E_core if w.E_core is not None else w.T_busy * p.P_cpu_busy + w.T_idle * p.P_cpu_idle
    return Breakdown(core, w.T_busy * p.p_mem(p.bw_native) + w.T_idle * p.P_mem_sr,
                     (w.T_busy + w.T_idle) * p.P_io)


def ark_breakdown(p: EnergyParams, w: WorkloadProfile, overhead: float) -> Breakdown:
    if overhead <= 0:
        raise ValueError("overhead must be positive")
    busy = w.T_busy * p.F * overhead
    return Breakdown(busy * p.P_pc_busy + w.T_idle * p.P_pc_idle,
                     busy * p.p_mem(p.bw_ark) + w.T_idle * p.P_mem_sr,
                     (busy + w.T_idle) * p.P_io)


def little_breakdown(p: EnergyParams, w: WorkloadProfile) -> Breakdown:
    busy = w.T_busy / p.little_clock
    native_busy_core = w.T_busy * p.P_cpu_busy if w.E_core is None else w.E_core - w.T_idle * p.P_cpu_idle
    # DRAM utilisation assumed as low as the big core's
    return Breakdown(native_busy_core / p.little_eff + w.T_idle * p.P_little_idle,
                     busy * p.p_mem(p.bw_native) + w.T_idle * p.P_mem_sr,
                     (busy + w.T_idle) * p.P_io)


def energy_native(p: EnergyParams, w: WorkloadProfile) -> float:
    return native_breakdown(p, w).total


def energy_ark(p: EnergyParams, w: WorkloadProfile, overhead: float) -> float:
    return ark_breakdown(p, w, overhead).total


def energy_little(p: EnergyParams, w: WorkloadProfile) -> float:
    return little_breakdown(p, w).total


def relative(p: EnergyParams, overhead: float, usage: float) -> float:
    w = WorkloadProfile.from_usage(usage)
    return energy_ark(p, w, overhead) / energy_native(p, w)


@dataclass(frozen=True)
class Calibration:
    params: EnergyParams
    bg: float
    c: float
    exact_c: float                    # unconstrained two-point solution before clamping
    residual: float                   # relative energy at the secondary point minus 1


def _coeffs(p: EnergyParams, overhead: float, usage: float) -> tuple:
    """E_ark - E_native at (overhead, usage) as a0 + a_bg*bg + a_c*c."""
    b, i = usage, 1 - usage
    k = p.F * overhead * b
    a0 = k * (p.P_pc_busy + p.P_io) + i * (p.P_pc_idle + p.P_mem_sr + p.P_io) \
        - b * (p.P_cpu_busy + p.P_io) - i * (p.P_cpu_idle + p.P_mem_sr + p.P_io)
    return a0, k - b, k * p.bw_ark - b * p.bw_native


def calibrate_dram(p: EnergyParams = EnergyParams(), primary=(3.5, 1.0), secondary=(5.2, 0.2)) -> Calibration:
    """Fit ``bg`` so the primary point breaks even, with ``c`` fitted to the
    secondary point when a non-negative solution exists and 0 otherwise."""
    a0, ab, ac = _coeffs(p, *primary)
    b0, bb, bc = _coeffs(p, *secondary)
    det = ab * bc - ac * bb
    exact_c = (-b0 * ab + a0 * bb) / det if det else float("nan")
    exact_bg = (-a0 * bc + b0 * ac) / det if det else float("nan")
    if det and exact_c >= 0 and exact_bg >= 0:
        bg, c = exact_bg, exact_c
    else:
        c = 0.0
        if ab == 0:
            raise Infeasible("break-even does not depend on DRAM background power")
        bg = -a0 / ab
    if bg < 0:
        raise Infeasible(f"no non-negative DRAM background power reaches break-even (bg={bg:.3f})")
    q = replace(p, dram_bg=bg, dram_c=c)
    return Calibration(q, bg, c, exact_c, relative(q, *secondary) - 1)


@dataclass
class EnergyReport:
    E_native: float
    E_ark: float
    E_little: float
    overhead: float
    usage: float
    native: Breakdown
    ark: Breakdown
    little: Breakdown

    @property
    def rel_ark(self) -> float:
        return self.E_ark / self.E_native

    @property
    def rel_little(self) -> float:
        return self.E_little / self.E_native

    def to_dict(self) -> dict:
        return dict(E_native=self.E_native, E_ark=self.E_ark, E_little=self.E_little,
                    relative_ark=self.rel_ark, relative_little=self.rel_little,
                    overhead=self.overhead, usage=self.usage,
                    breakdown={k: asdict(getattr(self, k)) for k in ("native", "ark", "little")})


def energy_report(p: EnergyParams, w: WorkloadProfile, overhead: float) -> EnergyReport:
    n, a, l = native_breakdown(p, w), ark_breakdown(p, w, overhead), little_breakdown(p, w)
    return EnergyReport(n.total, a.total, l.total, overhead, w.usage, n, a, l)


def report_energy(run_report, p: Optional[EnergyParams] = None, overhead: Optional[float] = None,
                  tick_seconds: float = 0.001) -> EnergyReport:
    """Energy projection for a finished run.  The overhead defaults to the
    run's host/guest instruction ratio."""
    if p is None:
        p = calibrate_dram().params
    if overhead is None:
        overhead = run_report.expansion_ratio
    return energy_report(p, WorkloadProfile.from_report(run_report, tick_seconds), overhead)


def whatif_grid(p: EnergyParams, overheads: Sequence[float], usages: Sequence[float]) -> list:
    """Rows of (overhead, usage, E_ark/E_native) over the cross product."""
    overheads, usages = list(overheads), list(usages)
    if not overheads or not usages:
        raise ValueError("overhead and usage ranges must be non-empty")
    return [(c, u, relative(p, c, u)) for u in usages for c in overheads]


def grid_csv(rows) -> str:
    out = ["overhead,usage,relative_energy"]
    out += [f"{c:g},{u:g},{r:.6f}" for c, u, r in rows]
    return "\n".join(out) + "\n"


def frange(lo: float, hi: float, step: float) -> list:
    """Inclusive arithmetic range; empty when ``lo > hi``."""
    if step <= 0:
        raise ValueError("step must be positive")
    n = math.floor((hi - lo) / step + 1e-9)
    return [round(lo + k * step, 10) for k in range(n + 1)] if hi >= lo else []


def break_even(p: EnergyParams, usage: float) -> float:
    """Overhead at which the translated run costs the same as native."""
    a0, _, _ = _coeffs(p, 0.0, usage)
    base = a0 - usage * p.p_mem(p.bw_native)          # difference at zero overhead
    slope = p.F * usage * (p.P_pc_busy + p.P_io + p.p_mem(p.bw_ark))
    return -base / slope if slope else math.inf
