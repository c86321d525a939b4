"""Global invariant scans over a simulator: used by debug runs and the test oracles."""
from typing import List, Set, Tuple

from .addr import LINE_SHIFT, PAGE_SHIFT, pt_indices, pte_spa
from .pagetable import PTE_P, PageTableError
from .tstruct import key_vm

_KEY_LOW = (1 << 36) - 1


def _nested_translator(pt):
    """``pt.translate_nested`` memoized for one scan (tables do not change mid-scan)."""
    memo = {}

    def tn(vm: int, gpp: int) -> int:
        k = (vm, gpp)
        try:
            return memo[k]
        except KeyError:
            pass
        memo[k] = v = pt.translate_nested(vm, gpp)
        return v
    return tn


def guest_table_spp(sim, vm: int, gvp: int, level: int, tn=None) -> int:
    """SPP of the level-``level`` guest table on the path to ``gvp``."""
    pt = sim.pt
    tn = tn or pt.translate_nested
    entries = pt.mem.entries
    table_gpp = pt.guest_root[vm]
    for lvl, i in zip((4, 3, 2), pt_indices(gvp)):
        if lvl == level:
            break
        raw = entries.get(pte_spa(tn(vm, table_gpp), i), 0)
        if not raw & PTE_P:
            raise PageTableError(f"no guest table at level {lvl - 1} for {gvp:#x}")
        table_gpp = raw >> PAGE_SHIFT
    return tn(vm, table_gpp)


def expected_payload(sim, name: str, key: int, tn=None) -> int:
    vm = key_vm(key)
    pt = sim.pt
    tn = tn or pt.translate_nested
    if name in ("l1tlb", "l2tlb"):
        page = key & ((1 << 40) - 1)
        if not sim.cfg.virtualized:
            return tn(vm, page)
        return tn(vm, guest_table_spp_leaf(sim, vm, page, tn))
    if name == "ntlb":
        return tn(vm, key & ((1 << 40) - 1))
    level = (key >> 36) & 0xF
    prefix = key & _KEY_LOW
    return guest_table_spp(sim, vm, prefix << (9 * (level - 1)), level - 1, tn)


def guest_table_spp_leaf(sim, vm: int, gvp: int, tn) -> int:
    """GPP that the guest leaf entry of ``gvp`` points at."""
    raw = sim.pt.mem.entries.get(pte_spa(guest_table_spp(sim, vm, gvp, 1, tn), pt_indices(gvp)[3]), 0)
    if not raw & PTE_P:
        raise PageTableError(f"no guest leaf for {gvp:#x}")
    return raw >> PAGE_SHIFT


def stale_entries(sim) -> List[str]:
    """Translation entries whose payload disagrees with the current page tables."""
    bad = []
    memo = {}
    tn = _nested_translator(sim.pt)
    for cpu, ts in enumerate(sim.tstructs):
        for name, e in ts.entries():
            k = (name[-3:], e.key)     # both TLB levels share one expectation
            if k in memo:
                want = memo[k]
            else:
                try:
                    want = expected_payload(sim, name, e.key, tn)
                except PageTableError:
                    want = None
                memo[k] = want
            if want != e.payload:
                bad.append(f"cpu {cpu} {name} key {e.key:#x} holds {e.payload:#x}, tables say "
                           f"{'unmapped' if want is None else hex(want)}")
    return bad


def undercounted_sharers(sim) -> List[str]:
    """Every CPU holding a translation filled from a PT line must be on that line's sharer list."""
    if not sim.tco.hw:
        return []
    directory = sim.mem.directory
    bad = []
    for cpu, ts in enumerate(sim.tstructs):
        for name, e in ts.entries():
            line = e.pte_spa >> LINE_SHIFT
            d = directory.peek(line)
            if d is None or not d.pt or not d.sharers >> cpu & 1:
                bad.append(f"cpu {cpu} {name} entry from line {line:#x} not covered by the directory")
    return bad


def entries_from(sim, spa: int) -> Set[Tuple[int, str, int]]:
    """The exact set of live entries whose fill source is the entry at ``spa``."""
    return {(cpu, name, e.key) for cpu, ts in enumerate(sim.tstructs)
            for name, e in ts.entries() if e.pte_spa == spa}


def live_entries(sim) -> Set[Tuple[int, str, int]]:
    return {(cpu, name, e.key) for cpu, ts in enumerate(sim.tstructs) for name, e in ts.entries()}


def scan(sim, residency: bool = True) -> List[str]:
    bad = sim.mem.check_swmr()
    bad += sim.mem.check_inclusion()
    bad += stale_entries(sim)
    bad += undercounted_sharers(sim)
    if residency:
        bad += sim.hv.check()
    return bad
