"""Translation coherence: software shootdowns, co-tag invalidation and the baselines.

``sw``        IPIs to every vCPU of the VM, VM exits, full flushes at re-entry.
``hatric``    page-table stores flow through the directory; sharers invalidate by co-tag.
``tlb-only``  like hatric for the TLBs (exact reverse lookup); MMU cache and nTLB are flushed.
``ideal``     exact invalidation everywhere at zero cost, for reference runs.
"""
from dataclasses import dataclass, fields
from typing import Dict, List, Optional

from .addr import COTAG_ENTRY_BITS, LINE_SHIFT
from .coherence import EventLog, MemorySystem
from .pagetable import PageTables
from .tstruct import TranslationStructures

MODES = ("sw", "hatric", "tlb-only", "ideal")
HW_MODES = ("hatric", "tlb-only")

PROBE_REMOTE = 0
PROBE_BACKINV = 1
PROBE_LOCAL = 2


@dataclass
class CostModel:
    ipi_cost: int = 1500
    vm_exit_cost: int = 1300
    interrupt_cost: int = 640
    per_inv_cost: int = 2
    fault_handler_cost: int = 1000

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


@dataclass
class VcpuState:
    vcpu: int
    cpu: int
    flush_request: bool = False
    in_vm: bool = True


@dataclass
class TcoCounters:
    remaps: int = 0
    pt_stores: int = 0
    shootdowns: int = 0
    ipis: int = 0
    vm_exits: int = 0
    full_flushes: int = 0
    flushed_entries: int = 0
    selective_invalidations: int = 0
    exact_invalidations: int = 0
    walker_marks: int = 0
    cam_probes: int = 0
    invalidated: int = 0        # every entry removed by coherence, any mechanism


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"unknown coherence mode {mode!r}; expected one of {', '.join(MODES)}")
    return mode


class TranslationCoherence:
    def __init__(self, mode: str, pt: PageTables, mem: MemorySystem,
                 tstructs: List[TranslationStructures], vcpus: Dict[int, List[VcpuState]],
                 cost: Optional[CostModel] = None, cotag_bits: int = 16):
        self.mode = check_mode(mode)
        self.pt = pt
        self.mem = mem
        self.tstructs = tstructs
        self.vcpus = vcpus
        self.cost = cost or CostModel()
        self.cotag_mask = (1 << cotag_bits) - 1
        self.c = TcoCounters()
        self.log: EventLog = mem.log
        self.hw = mode in HW_MODES
        self.on_remap = None     # optional callback(vm, gpp, old_spp, new_spp) after quiescence
        if self.hw:
            mem.pt_aware = True
            mem.pt_probe = self._probe

    # -- hardware fanout target ---------------------------------------------------------
    def _probe(self, t: int, line: int, reason: int):
        ts = self.tstructs[t]
        cotag = (line << (LINE_SHIFT - COTAG_ENTRY_BITS)) & self.cotag_mask
        if self.mode == "hatric":
            n = 0
            for s in ts.all:
                n += s.invalidate_by_cotag(cotag)
            matched = n
            cycles = self.cost.per_inv_cost * 4
            self.c.cam_probes += 4
            self.c.selective_invalidations += n
        else:
            n = ts.l1tlb.invalidate_by_cotag(cotag, exact_line=line)
            n += ts.l2tlb.invalidate_by_cotag(cotag, exact_line=line)
            self.c.selective_invalidations += n
            own = 0
            for s in (ts.mmu, ts.ntlb):
                for e in s.entries():
                    if e.pte_spa >> LINE_SHIFT == line:
                        own += 1
            flushed = ts.mmu.flush() + ts.ntlb.flush()
            self.c.flushed_entries += flushed
            matched = n + own
            n += flushed
            cycles = self.cost.per_inv_cost * 2
            self.c.cam_probes += 2
        self.c.invalidated += n
        self.mem.clocks[t] += cycles
        return matched, cycles

    # -- walker side ----------------------------------------------------------------------
    def walker_mark(self, cpu: int, line: int, kind: int, access_was_set: bool) -> bool:
        """Mark ``line`` as a page-table line at the directory; True if a message was sent."""
        if not self.hw:
            return False
        if access_was_set and self.mem.local_pt_flag(cpu, line):
            return False
        self.mem.walker_mark(cpu, line, kind)
        self.c.walker_marks += 1
        return True

    # -- page-table stores by system software --------------------------------------------
    def pt_store(self, cpu: int, vm: int, spa: int) -> int:
        """Coherence for a store to the page-table entry at ``spa``; returns initiator cycles."""
        self.c.pt_stores += 1
        cycles = self.mem.cpu_write(cpu, spa)
        if self.mode == "ideal":
            cotag = (spa >> COTAG_ENTRY_BITS) & self.cotag_mask
            n = 0
            for ts in self.tstructs:
                for s in ts.all:
                    n += s.invalidate_exact(cotag, spa)
            self.c.exact_invalidations += n
            self.c.invalidated += n
        return cycles

    def remap_coherence(self, vm: int, gpp: int, new_spp: int, cpu: int):
        """Point ``gpp`` at ``new_spp`` and make every CPU forget the old mapping.

        Returns (old spp, initiator-visible cycles).
        """
        old, _ = self.pt.remap_nested(vm, gpp, new_spp)
        spa = self.pt.nested_leaf_spa(vm, gpp)
        self.c.remaps += 1
        if self.log.enabled:
            self.log.emit(self.mem.clocks[cpu], "Remap", spa >> LINE_SHIFT, cpu, cpu)
        cycles = self.pt_store(cpu, vm, spa)
        if self.mode == "sw":
            cycles += self.sw_shootdown(vm, cpu)
        if self.on_remap is not None:
            self.on_remap(vm, gpp, old, new_spp)
        return old, cycles

    def guest_remap(self, vm: int, gvp: int, new_gpp: int, cpu: int) -> int:
        """Guest kernel changes a gPT leaf; sw mode pays interrupts instead of VM exits."""
        self.pt.map_guest(vm, gvp, new_gpp)
        spa = self.pt.guest_leaf_spa(vm, gvp)
        self.c.remaps += 1
        cycles = self.pt_store(cpu, vm, spa)
        if self.mode == "sw":
            cycles += self.sw_shootdown(vm, cpu, guest=True)
        return cycles

    def sw_shootdown(self, vm: int, cpu: int, guest: bool = False) -> int:
        cost = self.cost
        exit_cost = cost.interrupt_cost if guest else cost.vm_exit_cost
        c = self.c
        c.shootdowns += 1
        log = self.log
        clocks = self.mem.clocks
        worst = 0
        vcpus = self.vcpus.get(vm, [])
        for v in vcpus:
            t = v.cpu
            v.flush_request = True
            c.ipis += 1
            if log.enabled:
                log.emit(clocks[cpu], "IPI", 0, cpu, t)
            tc = 0
            if v.in_vm and t != cpu:
                c.vm_exits += 1
                tc = exit_cost
                if log.enabled:
                    log.emit(clocks[t], "VMExit", 0, t, t)
            # flush happens when the vCPU re-enters the guest
            n = self.tstructs[t].flush()
            v.flush_request = False
            c.full_flushes += 1
            c.flushed_entries += n
            c.invalidated += n
            if t != cpu:
                clocks[t] += tc
            if tc > worst:
                worst = tc
        return len(vcpus) * cost.ipi_cost + worst + 2 * self.mem.lat.hop
