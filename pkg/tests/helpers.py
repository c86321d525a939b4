"""Small-configuration builders and the fuzz drivers shared by the test modules."""
import copy
import random

import numpy as np

from transcoh.checkers import entries_from, live_entries, stale_entries, undercounted_sharers
from transcoh.coherence import CacheConfig
from transcoh.engine import SimConfig, Simulator
from transcoh.tcoherence import TranslationCoherence
from transcoh.trace import make_trace
from transcoh.tstruct import TstructConfig

# caches and structures shrunk so a 200-record trace exercises every eviction path
TINY_CACHE = CacheConfig(l1_bytes=256, l1_ways=2, l2_bytes=512, l2_ways=2, llc_bytes=4096,
                         llc_ways=4, directory_ways=2, directory_factor=1)
SMALL_CACHE = CacheConfig(l1_bytes=1024, l1_ways=4, l2_bytes=4096, l2_ways=4, llc_bytes=16384,
                          llc_ways=4, directory_ways=4, directory_factor=2)
ROOMY_CACHE = CacheConfig(l1_bytes=8192, l1_ways=2, l2_bytes=65536, l2_ways=4, llc_bytes=262144,
                          llc_ways=8, directory_ways=4, directory_factor=2)
TINY_TSTRUCT = TstructConfig(l1_tlb_entries=4, l1_tlb_ways=2, l2_tlb_entries=8, l2_tlb_ways=2,
                             ntlb_entries=4, mmu_cache_entries=4)
SMALL_TSTRUCT = TstructConfig(l1_tlb_entries=8, l1_tlb_ways=2, l2_tlb_entries=32, l2_tlb_ways=4,
                              ntlb_entries=8, mmu_cache_entries=8)
# full-size structures hold every page of a fuzz trace, so entries live across many remaps
FULL_TSTRUCT = TstructConfig()


def tiny_config(mode="hatric", cpus=3, **kw) -> SimConfig:
    base = dict(cpus=cpus, vcpus=cpus, mode=mode, fast_bytes=4 << 12, slow_bytes=256 << 10,
                policy="lru,daemon", low_watermark=1, high_watermark=2, daemon_interval=16,
                cache=copy.deepcopy(TINY_CACHE), tstruct=copy.deepcopy(TINY_TSTRUCT))
    base.update(kw)
    return SimConfig(**base)


def random_case(seed: int):
    """A random small trace plus the config knobs that vary with it."""
    rng = random.Random(seed)
    cpus = rng.choice((2, 3))
    pages = rng.randint(1, 8)
    n = rng.randint(1, 200)
    gvps = [rng.randrange(1 << 20) for _ in range(pages)]
    rows = [(rng.randrange(cpus), 0, rng.choice(("load", "store")), rng.choice(gvps)) for _ in range(n)]
    knobs = dict(cpus=cpus,
                 cache=copy.deepcopy((TINY_CACHE, SMALL_CACHE, ROOMY_CACHE)[seed % 3]),
                 tstruct=copy.deepcopy((TINY_TSTRUCT, SMALL_TSTRUCT, FULL_TSTRUCT)[seed // 3 % 3]),
                 cotag_bytes=rng.choice((2, 3)),
                 policy=rng.choice(("lru", "lru,daemon", "lru,prefetch", "fifo", "lru,daemon,prefetch")),
                 prefetch_degree=rng.randint(1, 2),
                 background_remap_rate=rng.choice((0.0, 20000.0, 100000.0)),
                 seed=seed)
    return make_trace(rows), knobs


def run_with_remap_checks(trace, cfg):
    """Run ``trace``; after every remap quiesces, collect any stale translation anywhere."""
    sim = Simulator(cfg)
    bad = []

    def on_remap(vm, gpp, old, new):
        bad.extend(stale_entries(sim))

    sim.tco.on_remap = on_remap
    sim.run(trace)
    return sim, bad


def run_with_event_scans(trace, cfg):
    """Scan SWMR, inclusion and sharer-list coverage after every coherence transaction.

    Staleness is not checked mid-transaction (a remap's store precedes its
    shootdown); the full scan after every record covers it.
    """
    sim = Simulator(cfg, check_invariants=True)
    bad = []

    def scan_now():
        bad.extend(sim.mem.check_swmr())
        bad.extend(sim.mem.check_inclusion())
        bad.extend(undercounted_sharers(sim))

    sim.mem.on_transaction = scan_now
    sim.run(trace)
    return sim, bad + sim.violations


def _switch_mode(sim, mode):
    tco = sim.tco
    tco.mode = mode
    tco.hw = mode in ("hatric", "tlb-only")
    sim.mem.pt_aware = tco.hw
    sim.mem.pt_probe = tco._probe if tco.hw else None


def remap_in_mode(sim, mode, vm, gpp, new_spp, cpu):
    """Apply one remap to a copy of ``sim`` under ``mode``; returns (count, invalidated set, copy)."""
    twin = copy.deepcopy(sim)
    _switch_mode(twin, mode)
    before = live_entries(twin)
    n0 = twin.tco.c.invalidated
    TranslationCoherence.remap_coherence(twin.tco, vm, gpp, new_spp, cpu)
    return twin.tco.c.invalidated - n0, before - live_entries(twin), twin


def precision_violations(trace, cfg):
    """Replay every remap of a hatric run under all three modes from the same pre-remap state."""
    sim = Simulator(cfg)
    tco = sim.tco
    bad = []
    checked = [0]
    original = tco.remap_coherence

    def wrapped(vm, gpp, new_spp, cpu):
        spa = sim.pt.nested_leaf_spa(vm, gpp)
        exact = entries_from(sim, spa)
        counts = {}
        for mode in ("hatric", "tlb-only", "sw"):
            counts[mode], gone, _ = remap_in_mode(sim, mode, vm, gpp, new_spp, cpu)
            if mode == "hatric" and not exact <= gone:
                bad.append(f"hatric missed exact stale entries {sorted(exact - gone)}")
        if not counts["hatric"] <= counts["tlb-only"] <= counts["sw"]:
            bad.append(f"remap of gpp {gpp:#x}: counts {counts}")
        checked[0] += 1
        return original(vm, gpp, new_spp, cpu)

    tco.remap_coherence = wrapped
    sim.run(trace)
    return bad, checked[0]


def final_state(trace, cfg):
    sim = Simulator(cfg)
    sim.run(trace)
    return sim.translation_state(), sim


def zipf_top_share(trace) -> float:
    _, counts = np.unique(trace["gvp"], return_counts=True)
    return counts.max() / len(trace)
