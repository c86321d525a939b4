import pytest
from hypothesis import given, settings, strategies as st

from transcoh.engine import EnergyModel, SimConfig, Simulator, Stats, energy_report, run
from transcoh.trace import TraceError, WorkloadSpec, generate, make_trace

from helpers import random_case, tiny_config

SMALL = dict(fast_bytes=1 << 20, slow_bytes=1 << 24)


def test_empty_trace():
    st_ = run(make_trace([]), SimConfig(cpus=2, vcpus=2, **SMALL))
    assert st_.records == st_.cycles == st_.walks == st_.energy_total == 0


def test_single_read_cold():
    sim = Simulator(SimConfig(cpus=2, vcpus=2, **SMALL))
    st_ = sim.run(make_trace([(0, 0, "load", 7)]))
    assert (st_.walks, st_.walk_refs, st_.l2tlb_misses) == (1, 24, 1)
    assert sum(len(ts.l2tlb) for ts in sim.tstructs) == 1
    assert st_.loads == 1 and st_.cycles > 0


def test_native_read_is_four_refs():
    st_ = run(make_trace([(0, 0, "load", 7)]), SimConfig(cpus=1, vcpus=1, virtualized=False, **SMALL))
    assert (st_.walks, st_.walk_refs) == (1, 4)


def test_tlb_hit_skips_walk():
    sim = Simulator(SimConfig(cpus=1, vcpus=1, **SMALL))
    sim.run(make_trace([(0, 0, "load", 7)]))
    st_ = sim.run(make_trace([(0, 0, "store", 7)]))
    assert st_.walks == 1 and st_.l1tlb_hits == 1


def test_neighbour_walk_is_partial():
    sim = Simulator(SimConfig(cpus=1, vcpus=1, policy="none", **SMALL))
    sim.run(make_trace([(0, 0, "load", 7), (0, 0, "load", 8)]))
    assert sim.s.walks == 2 and sim.s.walk_refs == 24 + 5


def test_slow_page_store_faults_when_paging():
    cfg = SimConfig(cpus=1, vcpus=1, fast_bytes=1 << 12, slow_bytes=1 << 24)
    st_ = run(make_trace([(0, 0, "load", 1), (0, 0, "store", 2)]), cfg)
    assert st_.faults == 1 and st_.migrations_in == 1 and st_.migrations_out == 1
    st_ = run(make_trace([(0, 0, "load", 1), (0, 0, "store", 2)]),
              SimConfig(cpus=1, vcpus=1, policy="none", fast_bytes=1 << 12, slow_bytes=1 << 24))
    assert st_.faults == 0 and st_.remaps == 0


def test_unmapped_gvp_is_a_guest_fault():
    sim = Simulator(SimConfig(cpus=1, vcpus=1, **SMALL))
    sim.run(make_trace([(0, 0, "load", 5)]))
    st_ = sim.run(make_trace([(0, 0, "load", 6)]), prepare=False)
    assert st_.guest_faults == 1 and st_.loads == 1


def test_bad_cpu_rejected_with_record_index():
    with pytest.raises(TraceError, match="record 1"):
        run(make_trace([(0, 0, "load", 1), (3, 0, "load", 1)]), SimConfig(cpus=4, vcpus=2, **SMALL))


def test_config_validation():
    for bad in (dict(cpus=33), dict(vcpus=17), dict(cotag_bytes=4), dict(tstruct_mult=3),
                dict(fast_bytes=3 << 20), dict(mode="x"), dict(policy="mru")):
        with pytest.raises(ValueError):
            SimConfig(**bad)
    with pytest.raises(ValueError):
        EnergyModel(message=-1)


def test_mode_equivalence_and_cost_difference():
    tr = generate(WorkloadSpec(archetype="zipfian", footprint="96KiB", records=3000, cpus=3, seed=4))
    states, cycles = {}, {}
    for mode in ("sw", "hatric", "tlb-only"):
        sim = Simulator(tiny_config(mode))
        cycles[mode] = sim.run(tr).cycles
        states[mode] = sim.translation_state()
    assert states["sw"] == states["hatric"] == states["tlb-only"]
    assert cycles["sw"] != cycles["hatric"]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_fused_walk_matches_reference_walker(seed):
    trace, knobs = random_case(seed)
    cfg = tiny_config("hatric", **knobs)
    a, b = Simulator(cfg), Simulator(cfg)
    b._walk = b._walk_reference
    a.ref_log, b.ref_log = [], []
    sa, sb = a.run(trace), b.run(trace)
    assert a.ref_log == b.ref_log
    assert sa == sb


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["sw", "hatric", "tlb-only", "ideal"]))
def test_conservation(seed, mode):
    trace, knobs = random_case(seed)
    st_ = run(trace, tiny_config(mode, **knobs))
    assert st_.l1tlb_hits + st_.l1tlb_misses == st_.translations
    assert st_.l2tlb_hits + st_.l2tlb_misses == st_.l1tlb_misses
    assert st_.tlb_hits + st_.tlb_misses == st_.translations
    assert st_.walks == st_.l2tlb_misses
    assert st_.loads + st_.stores == st_.records == len(trace)
    assert st_.walk_cycles >= st_.walk_refs * 4
    assert st_.remaps == st_.migrations_in + st_.migrations_out + st_.background_remaps
    assert st_.cycles >= 4 * max(1, len(trace) // knobs["cpus"]) or len(trace) == 0


def test_stats_are_monotone_during_a_run():
    tr = generate(WorkloadSpec(archetype="zipfian", footprint="96KiB", records=2000, cpus=3, seed=2))
    sim = Simulator(tiny_config("hatric", background_remap_rate=5000.0))
    prev = None
    for start in range(0, 2000, 250):
        cur = sim.run(tr[start:start + 250], prepare=start == 0)
        if prev is not None:
            for k, v in cur.as_dict().items():
                if k != "mode":
                    assert v >= prev[k], k
        prev = cur.as_dict()


def test_energy_model():
    model = EnergyModel()
    zero = energy_report(Stats(mode="hatric", cycles=100), model, 4, 2)
    assert zero.dynamic == 0 and zero.static == pytest.approx(100 * 4 * (0.05 + 0.01 * 1.04))
    base = Stats(mode="hatric", cycles=1000, cam_probes=50)
    e = [energy_report(base, model, 4, b).total for b in (1, 2, 3)]
    assert e[0] < e[1] < e[2]
    assert energy_report(Stats(mode="sw", cycles=1000), model, 4, 3).static == \
        energy_report(Stats(mode="sw", cycles=1000), model, 4, 1).static


def test_runs_are_deterministic():
    tr = generate(WorkloadSpec(archetype="zipfian", footprint="96KiB", records=2000, cpus=3, seed=8))
    cfg = tiny_config("hatric", background_remap_rate=5000.0, seed=3)
    a, b = Simulator(cfg, debug_events=True), Simulator(cfg, debug_events=True)
    assert a.run(tr).to_kv() == b.run(tr).to_kv()
    assert a.log.text() == b.log.text() and a.log.lines
    assert cfg.config_hash() == tiny_config("hatric", background_remap_rate=5000.0, seed=3).config_hash()
