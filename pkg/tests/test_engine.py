"""Runtime behaviour: code cache, chaining, scheduling, services and interrupts."""
import pytest

from helpers import INTC, workload
from transkernel.engine import DbtBackend, Runtime, run_engine
from transkernel.guest_isa import run_oracle
from transkernel.xlate import BASELINE, MODES, OPTIMIZED

INTC_LO = INTC[0]


def services(res, ctx=None):
    return [(e.ctx, e.args) for e in res.trace if e.kind == "service" and (ctx is None or e.ctx == ctx)]


def both(wl, **kw):
    """Run translated in both modes and check each against the oracle."""
    ref = run_oracle(wl, schedule=kw.get("schedule"))
    for mode in MODES:
        res, _ = run_engine(wl, mode, **kw)
        assert res.same_as(ref) == [], mode
    return ref


def _runtime(wl, mode=OPTIMIZED, chaining=True):
    be = DbtBackend(mode, chaining)
    return Runtime(wl, be), be


LOOP = """
    mov r0, #0
loop:
    add r0, r0, #1
    cmp r0, r4
    bne loop
    bl halt
"""


def test_lookup_counts_translations_only_on_miss():
    wl = workload(LOOP, init={4: 3})
    _, be = _runtime(wl)
    a = be.lookup_or_translate(wl.entry)
    assert be.translations == 1
    assert be.lookup_or_translate(wl.entry) == a
    assert be.translations == 1


def test_hook_address_is_never_a_block_entry():
    wl = workload(LOOP, init={4: 3})
    _, be = _runtime(wl)
    with pytest.raises(ValueError, match="hook"):
        be.lookup_or_translate(wl.labels.get("halt", 0x01F0_0080))


def test_chain_is_idempotent_and_computed_exits_refuse():
    # optimized mode keeps a register branch as a host bx; baseline turns it
    # into a computed dispatcher exit
    wl = workload("""
        b next
    next:
        bx lr
    """)
    _, be = _runtime(wl, BASELINE)
    be.lookup_or_translate(wl.entry)
    tb = be.blocks[wl.entry]
    target = be.lookup_or_translate(tb.exits[0].target)
    assert be.chain(tb, 0, target) is True
    assert be.chain(tb, 0, target) is False
    assert len(be.patch_log) == 1
    ret = be.blocks[tb.exits[0].target]
    computed = [k for k, e in enumerate(ret.exits) if e.kind == "computed"]
    assert computed
    with pytest.raises(ValueError):
        be.chain(ret, computed[0], target)


@pytest.mark.parametrize("mode", MODES)
def test_dispatcher_entries_decay_with_chaining(mode):
    chained, plain = [], []
    for n in (10, 100, 1000):
        wl = workload(LOOP, init={4: n})
        chained.append(run_engine(wl, mode)[0].report.dispatcher_entries)
        plain.append(run_engine(wl, mode, chaining=False)[0].report.dispatcher_entries)
        assert plain[-1] >= n
    assert len(set(chained)) == 1 and chained[0] <= 4
    assert plain[2] > 50 * chained[2]


def test_straight_line_guest_count_matches_oracle():
    wl = workload("add r0, r0, #1\n" * 70 + "bl halt\n")
    ref = both(wl)
    assert ref.report.guest_instructions == 71


WQ = dict(workqueues=["a", "b"], tick_period=50)


def test_workqueues_alternate_round_robin():
    wl = workload("""
        mov r0, #0
        li r1, work
        mov r2, #1
        bl queue_work
        mov r0, #1
        li r1, work
        mov r2, #2
        bl queue_work
        mov r0, #20
        bl msleep
        bl halt
    work:
        push {r4, lr}
        mov r4, r0
        mov r0, r4
        bl udelay
        bl schedule
        mov r0, r4
        bl udelay
        bl schedule
        mov r0, r4
        bl udelay
        pop {r4, pc}
    """, **WQ)
    ref = both(wl)
    order = [c for c, a in services(ref) if a[0] == "udelay"]
    assert order == ["wq:a", "wq:b"] * 3


def test_msleep_lets_the_tasklet_run_next():
    wl = workload("""
        li r0, fn
        mov r1, #9
        bl tasklet_schedule
        mov r0, #2
        bl msleep
        bl halt
    fn:
        push {lr}
        bl jiffies_read
        pop {pc}
    """, tick_period=50)
    ref = both(wl)
    s = services(ref)
    k = next(i for i, (c, a) in enumerate(s) if a[0] == "msleep")
    assert s[k + 1][0] == "tasklet"


def test_tasklets_run_fifo_to_completion():
    wl = workload("""
        li r0, fn
        mov r1, #1
        bl tasklet_schedule
        li r0, fn
        mov r1, #2
        bl tasklet_schedule
        mov r0, #2
        bl msleep
        bl halt
    fn:
        push {lr}
        bl udelay
        pop {pc}
    """, tick_period=50)
    ref = both(wl)
    assert [(c, a[1]) for c, a in services(ref) if a[0] == "udelay"] == [("tasklet", 1), ("tasklet", 2)]


def test_queue_work_while_worker_sleeps_runs_after_wake():
    wl = workload("""
        mov r0, #0
        li r1, work
        mov r2, #1
        bl queue_work
        bl schedule
        mov r0, #0
        li r1, work
        mov r2, #2
        bl queue_work
        mov r0, #30
        bl msleep
        bl halt
    work:
        push {r4, lr}
        mov r4, r0
        mov r0, #3
        bl msleep
        mov r0, r4
        bl udelay
        pop {r4, pc}
    """, workqueues=["pm"], tick_period=50)
    ref = both(wl)
    ev = [e for e in ref.trace if e.kind == "service"]
    first_sleep = next(e for e in ev if e.ctx == "wq:pm" and e.args[0] == "msleep")
    second_queue = [e for e in ev if e.args[0] == "queue_work"][1]
    assert ev.index(second_queue) > ev.index(first_sleep)
    udelays = [e for e in ev if e.ctx == "wq:pm" and e.args[0] == "udelay"]
    assert [e.args[1] for e in udelays] == [1, 2]
    assert udelays[0].tick >= first_sleep.tick + 3


HANDLER = """
handler:
    li r1, 0x40000004
    str r0, [r1]
    bx lr
"""


def test_masked_line_waits_for_unmask_write():
    wl = workload("""
        li r1, 0x40000000
        mov r0, #7
        str r0, [r1]
    """ + "add r2, r2, #1\n" * 40 + """
        mov r0, #0x80
        str r0, [r1, #8]
        add r2, r2, #1
        bl halt
    """ + HANDLER, irq={7: False}, irq_handler="handler")
    ref = both(wl)
    kinds = [(e.kind, e.args) for e in ref.trace]
    unmask = kinds.index(("mmio_w", (INTC_LO + 8, 0x80)))
    irq = kinds.index(("irq", (7,)))
    assert irq > unmask
    assert len(ref.deliveries) == 1


def test_no_interrupt_nesting():
    wl = workload("""
        li r1, 0x40000000
        mov r0, #3
        str r0, [r1]
    """ + "add r2, r2, #1\n" * 20 + """
        bl halt
    handler:
        li r1, 0x40000000
        cmp r0, #3
        moveq r2, #5
        streq r2, [r1]
        str r0, [r1, #4]
    """ + "add r3, r3, #1\n" * 10 + """
        bx lr
    """, irq={3: True, 5: True}, irq_handler="handler")
    ref = both(wl)
    assert [d["line"] for d in ref.deliveries] == [3, 5]
    assert all(d["interrupted"] != "irq" for d in ref.deliveries)


def test_spinlock_defers_delivery_until_unlock():
    wl = workload("""
        bl spin_lock
        li r1, 0x40000000
        mov r0, #3
        str r0, [r1]
    """ + "add r2, r2, #1\n" * 40 + """
        bl spin_unlock
        add r2, r2, #1
        bl halt
    """ + HANDLER, irq={3: True}, irq_handler="handler")
    ref = both(wl)
    names = [e.args[0] if e.kind == "service" else e.kind for e in ref.trace]
    assert names.index("irq") == names.index("spin_unlock") + 1
    assert not any(d["in_spinlock"] for d in ref.deliveries)


@pytest.mark.parametrize("mode", MODES)
def test_scheduled_irq_latency_is_bounded_by_block_cap(mode):
    wl = workload("add r2, r2, #1\n" * 300 + "bl halt\n" + HANDLER, irq={3: True},
                  irq_handler="handler", tick_period=7)
    sched = [(t, 3) for t in (1, 9, 20, 33)]
    res, _ = run_engine(wl, mode, schedule=sched)
    assert res.same_as(run_oracle(wl, schedule=sched)) == []
    assert len(res.deliveries) == 4
    assert max(d["latency"] for d in res.deliveries) <= 32
    assert all(d["at_boundary"] for d in res.deliveries)


def test_idle_skip_accounts_idle_ticks():
    wl = workload("""
        bl jiffies_read
        mov r4, r0
        mov r0, #9
        bl msleep
        bl jiffies_read
        sub r5, r0, r4
        bl halt
    """, tick_period=100)
    ref = both(wl)
    assert ref.regs[5] == 9
    r = ref.report
    # time is retired guest instructions plus the skipped idle stretch
    assert r.busy_ticks == pytest.approx(r.guest_instructions / 100)
    assert r.idle_ticks == pytest.approx(9 - 4 / 100)


def test_run_drains_and_terminates_with_idle_workqueue():
    wl = workload("mov r0, #1\nbl halt\n", workqueues=["never"])
    ref = both(wl)
    assert ref.report.guest_instructions == 2


def test_msleep_while_atomic_falls_back_on_translated_side():
    wl = workload("""
        bl spin_lock
        mov r0, #1
        bl msleep
        bl spin_unlock
        bl halt
    """, tick_period=20)
    res, be = run_engine(wl, OPTIMIZED)
    assert res.report.fallback == "deadlock"
    assert be.package is not None


def test_corpus_equivalence_and_overhead_ordering(corpus):
    for name, wl in corpus.items():
        ref = run_oracle(wl)
        ratios = {}
        for mode in MODES:
            res, _ = run_engine(wl, mode)
            assert res.same_as(ref) == [], (name, mode)
            ratios[mode] = res.report.expansion_ratio
        assert ratios[OPTIMIZED] < ratios[BASELINE], name
