import pytest

from transcoh.checkers import entries_from
from transcoh.engine import SimConfig, Simulator
from transcoh.tcoherence import CostModel, check_mode
from transcoh.trace import make_trace


def shared_leaf(mode, cpus=4, vcpus=4, rows=None, **kw):
    """CPU 0 uses gvp 0, CPU 3 uses gvps 1 and 2; all three hang off one nested leaf line."""
    cfg = SimConfig(cpus=cpus, vcpus=vcpus, mode=mode, policy="none", fast_bytes=1 << 20,
                    slow_bytes=1 << 24, **kw)
    sim = Simulator(cfg, debug_events=True)
    sim.run(make_trace(rows or [(0, 0, "load", 0), (3, 0, "load", 1), (3, 0, "load", 2)]))
    return sim


def sizes(sim):
    return [{t.name: len(t) for t in ts.all} for ts in sim.tstructs]


def remap_gvp0(sim, new=999):
    gpp = sim.gpp_of[0]
    n = len(sim.log.lines)
    before = sizes(sim)
    old, cycles = sim.tco.remap_coherence(0, gpp, new, sim.daemon_cpu)
    return before, sizes(sim), cycles, [x.split()[1] for x in sim.log.lines[n:]]


def lost(before, after, cpu):
    return {k: before[cpu][k] - after[cpu][k] for k in before[cpu]}


def test_two_sharers_invalidate_by_cotag():
    sim = shared_leaf("hatric")
    line = sim.pt.nested_leaf_spa(0, sim.gpp_of[0]) >> 6
    assert sim.mem.directory.peek(line).sharer_list() == [0, 3]
    before, after, _, kinds = remap_gvp0(sim)
    assert lost(before, after, 0) == {"l1tlb": 1, "l2tlb": 1, "mmu": 0, "ntlb": 1}
    assert lost(before, after, 3) == {"l1tlb": 2, "l2tlb": 2, "mmu": 0, "ntlb": 2}
    assert kinds.count("Inv") == 2 == kinds.count("InvAck")
    assert "IPI" not in kinds and "VMExit" not in kinds
    assert sim.tco.c.cam_probes == 12         # four structures at both sharers and the initiator


def test_tlb_only_flushes_mmu_cache_and_ntlb():
    sim = shared_leaf("tlb-only")
    before, after, _, _ = remap_gvp0(sim)
    assert lost(before, after, 3) == {"l1tlb": 2, "l2tlb": 2, "mmu": before[3]["mmu"],
                                      "ntlb": before[3]["ntlb"]}
    assert after[3]["mmu"] == after[3]["ntlb"] == 0
    assert sim.tco.c.flushed_entries == before[0]["mmu"] + before[0]["ntlb"] + before[3]["mmu"] + before[3]["ntlb"]


def test_no_sharers_no_fanout():
    sim = shared_leaf("hatric", rows=[(0, 0, "load", 9)])
    gpp = sim.gpp_of[9]
    sim.tco.remap_coherence(0, gpp, 900, sim.daemon_cpu)
    # gvp 0 was never walked: a remap of its leaf line has no one to tell
    sim2 = shared_leaf("hatric", rows=[(0, 0, "load", 600)])
    n = len(sim2.log.lines)
    sim2.map_pages(0, [1000])
    sim2.tco.remap_coherence(0, sim2.gpp_of[1000], 901, sim2.daemon_cpu)
    kinds = [x.split()[1] for x in sim2.log.lines[n:]]
    assert "Inv" not in kinds and sim2.tco.c.invalidated == 0


def test_walker_marks_only_on_first_walk():
    sim = shared_leaf("hatric", rows=[(0, 0, "load", 0)])
    first = sim.tco.c.walker_marks
    assert first > 0
    sim.tstructs[0].flush()
    sim.run(make_trace([(0, 0, "load", 0)]))
    assert sim.tco.c.walker_marks == first
    sw = shared_leaf("sw", rows=[(0, 0, "load", 0)])
    assert sw.tco.c.walker_marks == 0


def test_sw_shootdown_targets_every_vcpu():
    sim = shared_leaf("sw", cpus=4, vcpus=3, rows=[(0, 0, "load", 0), (1, 0, "load", 1)])
    before, after, cycles, kinds = remap_gvp0(sim)
    c = sim.tco.c
    assert (c.ipis, c.vm_exits, c.full_flushes) == (3, 3, 3)
    assert kinds.count("IPI") == 3 and kinds.count("VMExit") == 3
    assert all(sum(a.values()) == 0 for a in after[:3])
    cost = sim.cfg.cost
    assert cycles >= 3 * cost.ipi_cost + cost.vm_exit_cost


def test_sw_spares_cpus_outside_the_vm():
    rows = [(0, 0, "load", 0), (2, 1, "load", 0), (3, 1, "load", 1)]
    sim = shared_leaf("sw", cpus=4, vcpus=2, rows=rows)
    before, after, _, kinds = remap_gvp0(sim)
    assert after[2] == before[2] and after[3] == before[3]
    assert sim.tco.c.ipis == 2
    assert sum(after[0].values()) == sum(after[1].values()) == 0


def test_sw_latency_with_16_vcpus():
    sim = shared_leaf("sw", cpus=16, vcpus=16)
    _, _, cycles, _ = remap_gvp0(sim)
    cost = CostModel()
    assert cycles >= 16 * cost.ipi_cost + cost.vm_exit_cost
    assert sim.tco.c.ipis == 16


def test_guest_remap_pays_interrupts():
    sim = shared_leaf("sw", cpus=2, vcpus=2, rows=[(0, 0, "load", 0), (1, 0, "load", 1)])
    cycles = sim.tco.guest_remap(0, 0, sim.gpp_of[1], 0)
    cost = sim.cfg.cost
    assert 2 * cost.ipi_cost + cost.interrupt_cost <= cycles < 2 * cost.ipi_cost + cost.vm_exit_cost
    assert sim.pt.translate_guest(0, 0) == sim.gpp_of[1]


def test_ideal_is_exact_and_free():
    sim = shared_leaf("ideal")
    spa = sim.pt.nested_leaf_spa(0, sim.gpp_of[0])
    exact = entries_from(sim, spa)
    before, after, _, kinds = remap_gvp0(sim)
    assert sim.tco.c.invalidated == len(exact) == 3
    # the store still invalidates cached copies of the line; translations are never probed
    assert sim.tco.c.cam_probes == 0 and "IPI" not in kinds
    assert lost(before, after, 3) == {"l1tlb": 0, "l2tlb": 0, "mmu": 0, "ntlb": 0}


def test_old_spp_gone_everywhere():
    for mode in ("sw", "hatric", "tlb-only", "ideal"):
        sim = shared_leaf(mode)
        old = sim.pt.translate_nested(0, sim.gpp_of[0])
        remap_gvp0(sim)
        held = [(c, n) for c, ts in enumerate(sim.tstructs) for n, e in ts.entries()
                if e.payload == old and n != "mmu"]
        assert held == [], mode
        sim.run(make_trace([(3, 0, "load", 0)]))
        assert sim.tstructs[3].lookup_tlb(0, 0)[1].payload == 999


def test_cost_model_and_mode_validation():
    with pytest.raises(ValueError):
        CostModel(ipi_cost=-1)
    with pytest.raises(ValueError):
        check_mode("unitd")
    assert CostModel().vm_exit_cost == 1300 and CostModel().interrupt_cost == 640
