"""Two-level memory manager: demand migration into fast memory, CLOCK eviction,
a migration daemon keeping a free pool, and adjacent-page prefetch.

Every move of a page is a nested page-table remap and goes through the
translation-coherence layer.
"""
import random
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .coherence import Dram
from .pagetable import FAST, PTE_A, SLOW, PageTables, PhysMem
from .tcoherence import CostModel, TranslationCoherence

POLICY_FLAGS = ("lru", "fifo", "daemon", "prefetch")


@dataclass
class PagingPolicy:
    enabled: bool = True
    lru: bool = True
    fifo: bool = False
    daemon: bool = False
    prefetch: bool = False
    prefetch_degree: int = 4
    low_watermark: int = 64
    high_watermark: int = 128

    def __post_init__(self):
        if self.fifo:
            self.lru = False
        if (self.daemon or self.prefetch) and not (self.lru or self.fifo):
            raise ValueError("daemon and prefetch need a replacement policy (lru or fifo)")
        if self.low_watermark > self.high_watermark:
            raise ValueError("low watermark above high watermark")
        if self.prefetch_degree < 0:
            raise ValueError("prefetch degree must be non-negative")

    @classmethod
    def parse(cls, text: str, **knobs) -> "PagingPolicy":
        """``lru[,daemon][,prefetch]``, ``fifo[,...]`` or ``none`` (paging disabled)."""
        flags = [f.strip() for f in text.split(",") if f.strip()]
        if flags == ["none"]:
            return cls(enabled=False, lru=False, **knobs)
        bad = [f for f in flags if f not in POLICY_FLAGS]
        if bad or not flags:
            raise ValueError(f"bad paging policy {text!r}")
        return cls(enabled=True, lru="lru" in flags or "fifo" not in flags, fifo="fifo" in flags,
                   daemon="daemon" in flags, prefetch="prefetch" in flags, **knobs)

    def label(self) -> str:
        if not self.enabled:
            return "none"
        parts = ["fifo" if self.fifo else "lru"]
        if self.daemon:
            parts.append("daemon")
        if self.prefetch:
            parts.append("prefetch")
        return ",".join(parts)


@dataclass
class PagingCounters:
    faults: int = 0
    passthrough_faults: int = 0
    migrations_in: int = 0
    migrations_out: int = 0
    daemon_evictions: int = 0
    prefetches: int = 0
    background_remaps: int = 0
    access_clears: int = 0
    fault_cycles: int = 0


class Hypervisor:
    def __init__(self, pt: PageTables, tco: TranslationCoherence, dram: Dram,
                 policy: PagingPolicy, daemon_cpu: int, cost: Optional[CostModel] = None):
        self.pt = pt
        self.mem: PhysMem = pt.mem
        self.tco = tco
        self.dram = dram
        self.policy = policy
        self.daemon_cpu = daemon_cpu
        self.cost = cost or tco.cost
        self.c = PagingCounters()
        self.capacity = self.mem.data_frame_limit(FAST)
        self.slots: List[int] = list(range(self.capacity))
        self.free: List[int] = list(reversed(self.slots))    # pop() hands out low frames first
        self.resident: Dict[int, Tuple[int, int]] = {}
        self.order: "OrderedDict[int, None]" = OrderedDict()  # FIFO arrival order
        self.hand = 0
        self.where: Dict[Tuple[int, int], int] = {}          # (vm, gpp) -> spp
        self.pages: List[Tuple[int, int]] = []

    # -- placement ------------------------------------------------------------------
    def place(self, vm: int, gpp: int, region: int = SLOW) -> int:
        """Pick the initial frame for a data page (slow memory unless asked otherwise)."""
        if region == FAST and self.free:
            spp = self.free.pop()
            self.resident[spp] = (vm, gpp)
            self.order[spp] = None
        else:
            spp = self.mem.alloc_frame(SLOW)
            if spp is None:
                raise MemoryError("slow memory exhausted while placing the footprint")
        self.where[(vm, gpp)] = spp
        self.pages.append((vm, gpp))
        return spp

    def is_fast(self, spp: int) -> bool:
        return spp < self.capacity

    # -- replacement ----------------------------------------------------------------
    def clock_select_victim(self, cpu: int = 0) -> Tuple[Optional[Tuple[int, int, int]], int]:
        """Second-chance sweep over the nested-leaf access bits.

        Clearing a bit is a metadata store: it changes no translation, so it
        needs no translation coherence.  Returns ((vm, gpp, spp) or None, cycles).
        """
        if not self.resident:
            return None, 0
        entries = self.mem.entries
        n = len(self.slots)
        cleared = 0
        for _ in range(2 * n + 1):
            spp = self.slots[self.hand]
            self.hand = (self.hand + 1) % n
            owner = self.resident.get(spp)
            if owner is None:
                continue
            spa = self.pt.nested_leaf_spa(*owner)
            raw = entries[spa]
            if raw & PTE_A:
                entries[spa] = raw & ~PTE_A
                cleared += 1
                continue
            self.c.access_clears += cleared
            return (owner[0], owner[1], spp), cleared * self.cost.per_inv_cost
        raise AssertionError("CLOCK sweep found no victim")

    def _select_victim(self, cpu: int):
        if self.policy.fifo:
            if not self.order:
                return None, 0
            spp = next(iter(self.order))
            vm, gpp = self.resident[spp]
            return (vm, gpp, spp), 0
        return self.clock_select_victim(cpu)

    def evict(self, vm: int, gpp: int, spp: int, cpu: int) -> Optional[int]:
        """Move a resident page back to slow memory; returns cycles or None if no slow frame."""
        dst = self.mem.alloc_frame(SLOW)
        if dst is None:
            return None
        cycles = self.dram.copy_page(spp, dst, self.tco.mem.now)
        _, lat = self.tco.remap_coherence(vm, gpp, dst, cpu)
        cycles += lat
        del self.resident[spp]
        self.order.pop(spp, None)
        self.where[(vm, gpp)] = dst
        self.free.append(spp)
        self.c.migrations_out += 1
        return cycles

    def _take_free(self, cpu: int) -> Tuple[Optional[int], int]:
        cycles = 0
        if not self.free:
            if not (self.policy.lru or self.policy.fifo):
                return None, 0
            victim, cycles = self._select_victim(cpu)
            if victim is None:
                return None, cycles
            lat = self.evict(*victim, cpu)
            if lat is None:
                return None, cycles
            cycles += lat
        return self.free.pop(), cycles

    def _migrate_in(self, vm: int, gpp: int, frame: int, cpu: int) -> int:
        old = self.where[(vm, gpp)]
        cycles = self.dram.copy_page(old, frame, self.tco.mem.now)
        _, lat = self.tco.remap_coherence(vm, gpp, frame, cpu)
        self.mem.free_frame(old)
        self.resident[frame] = (vm, gpp)
        self.order[frame] = None
        self.where[(vm, gpp)] = frame
        self.c.migrations_in += 1
        return cycles + lat

    # -- entry points ---------------------------------------------------------------
    def access_fault(self, vm: int, gpp: int, cpu: int) -> Tuple[List[int], int]:
        """The guest touched a page in slow memory; returns (migrated gpps, cycles)."""
        c = self.c
        c.faults += 1
        cycles = self.cost.vm_exit_cost + self.cost.fault_handler_cost
        pages = [gpp]
        if self.policy.prefetch:
            for i in range(1, self.policy.prefetch_degree + 1):
                spp = self.where.get((vm, gpp + i))
                if spp is not None and not self.is_fast(spp):
                    pages.append(gpp + i)
        moved: List[int] = []
        for p in pages:
            frame, lat = self._take_free(cpu)
            cycles += lat
            if frame is None:
                if p == gpp:
                    c.passthrough_faults += 1
                break
            cycles += self._migrate_in(vm, p, frame, cpu)
            moved.append(p)
            if p != gpp:
                c.prefetches += 1
        c.fault_cycles += cycles
        return moved, cycles

    def migration_daemon_tick(self) -> int:
        """Refill the free pool up to the high watermark once it drops below the low one."""
        pol = self.policy
        if not (pol.enabled and pol.daemon) or len(self.free) >= pol.low_watermark:
            return 0
        cpu = self.daemon_cpu
        clocks = self.tco.mem.clocks
        evicted = 0
        while len(self.free) < pol.high_watermark and self.resident:
            victim, cycles = self._select_victim(cpu)
            clocks[cpu] += cycles
            if victim is None:
                break
            lat = self.evict(*victim, cpu)
            if lat is None:
                break
            clocks[cpu] += lat
            evicted += 1
        self.c.daemon_evictions += evicted
        return evicted

    def background_remap(self, rng: random.Random) -> bool:
        """Relocate one page within its region (defragmentation-style remap)."""
        if not self.pages:
            return False
        vm, gpp = self.pages[rng.randrange(len(self.pages))]
        old = self.where[(vm, gpp)]
        cpu = self.daemon_cpu
        if self.is_fast(old):
            if not self.free:
                return False
            dst = self.free.pop()
        else:
            dst = self.mem.alloc_frame(SLOW)
            if dst is None:
                return False
        clocks = self.tco.mem.clocks
        clocks[cpu] += self.dram.copy_page(old, dst, self.tco.mem.now)
        _, lat = self.tco.remap_coherence(vm, gpp, dst, cpu)
        clocks[cpu] += lat
        if self.is_fast(old):
            del self.resident[old]
            self.order.pop(old, None)
            self.resident[dst] = (vm, gpp)
            self.order[dst] = None
            self.free.append(old)
        else:
            self.mem.free_frame(old)
        self.where[(vm, gpp)] = dst
        self.c.background_remaps += 1
        return True

    # -- invariants -------------------------------------------------------------------
    def check(self) -> List[str]:
        bad = []
        if len(self.resident) + len(self.free) != self.capacity:
            bad.append(f"pool accounting: {len(self.resident)} resident + {len(self.free)} free"
                       f" != {self.capacity}")
        if len(set(self.free)) != len(self.free) or set(self.free) & set(self.resident):
            bad.append("a fast frame is both free and resident, or free twice")
        for (vm, gpp), spp in self.where.items():
            actual = self.pt.translate_nested(vm, gpp)
            if actual != spp:
                bad.append(f"vm {vm} gpp {gpp:#x}: tables say {actual:#x}, pool says {spp:#x}")
            if self.is_fast(spp) and self.resident.get(spp) != (vm, gpp):
                bad.append(f"vm {vm} gpp {gpp:#x} maps fast frame {spp:#x} but is not resident there")
        return bad
