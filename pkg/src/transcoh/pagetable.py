"""Simulated physical memory holding guest and nested 4-level radix page tables.

Entries are stored sparsely as ints keyed by their 8-byte aligned system
physical address.  Guest tables live in guest-physical pages, so reaching a
guest table requires translating its GPP through the nested tree first.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .addr import (LEVEL_MASK, LINE_SHIFT, PAGE_SHIFT, PTE_SIZE, PTES_PER_LINE,
                   line_of, pt_indices, pte_spa)

FAST = 0
SLOW = 1
REGION_NAMES = ("fast", "slow")

PTE_P = 1 << 0
PTE_A = 1 << 5
PTE_D = 1 << 6
PTE_FLAGS = (1 << PAGE_SHIFT) - 1

# guest page-table pages get GPPs from here up; data GPPs stay below
GUEST_TABLE_GPP_BASE = 1 << 34
VPN_LIMIT = 1 << 36

NESTED_ROLES = ("", "nL1", "nL2", "nL3", "nL4")
GUEST_ROLES = ("", "gL1", "gL2", "gL3", "gL4")


class PageTableError(Exception):
    pass


class OutOfTableMemory(PageTableError):
    pass


class MissingMapping(PageTableError):
    pass


class TableFault(PageTableError):
    """Access to an address that is not inside an allocated table page."""


class TranslationFault(PageTableError):
    def __init__(self, role: str, vm: int, page: int):
        super().__init__(f"non-present entry at {role} translating page {page:#x} of vm {vm}")
        self.role = role
        self.level = int(role[2])
        self.vm = vm
        self.page = page


@dataclass(frozen=True)
class Pte:
    target: int = 0
    present: bool = False
    access: bool = False
    dirty: bool = False

    def encode(self) -> int:
        if self.access and not self.present:
            raise ValueError("access bit set on a non-present entry")
        return ((self.target << PAGE_SHIFT) | (PTE_P if self.present else 0)
                | (PTE_A if self.access else 0) | (PTE_D if self.dirty else 0))

    @classmethod
    def decode(cls, raw: int) -> "Pte":
        return cls(raw >> PAGE_SHIFT, bool(raw & PTE_P), bool(raw & PTE_A), bool(raw & PTE_D))


@dataclass
class Fill:
    """A translation produced by a walk, with the entry address its co-tag comes from."""
    kind: str          # "tlb" | "ntlb" | "mmu"
    vm: int
    page: int          # gvp (tlb, mmu) or gpp (ntlb)
    payload: int       # spp (tlb, ntlb) or table spp (mmu)
    src_spa: int
    level: int = 1     # mmu: radix level whose prefix is cached (4, 3 or 2)


@dataclass
class WalkResult:
    refs: List[Tuple[int, str]] = field(default_factory=list)
    first_touch: List[bool] = field(default_factory=list)
    final_spp: int = -1
    gpp: int = -1
    fills: List[Fill] = field(default_factory=list)


class PhysMem:
    """Fast region [0, fast_pages) followed by slow region; sparse PTE storage.

    Data frames are handed out bottom-up and table pages top-down in each region.
    """

    def __init__(self, fast_pages: int, slow_pages: int, tables_fast: bool = False):
        if fast_pages < 0 or slow_pages <= 0:
            raise ValueError("region sizes must be non-negative (slow > 0)")
        self.fast_pages = fast_pages
        self.slow_pages = slow_pages
        self.total_pages = fast_pages + slow_pages
        self.tables_fast = tables_fast
        self.entries: Dict[int, int] = {}
        self.table_pages: Set[int] = set()
        self._next = [0, fast_pages]
        self._top = [fast_pages, self.total_pages]
        self._free: List[List[int]] = [[], []]

    def region(self, spp: int) -> int:
        return FAST if spp < self.fast_pages else SLOW

    def alloc_table_page(self) -> int:
        region = FAST if self.tables_fast else SLOW
        if self._top[region] <= self._next[region]:
            raise OutOfTableMemory(f"no {REGION_NAMES[region]} frame left for a table page")
        self._top[region] -= 1
        spp = self._top[region]
        self.table_pages.add(spp)
        return spp

    def alloc_frame(self, region: int) -> Optional[int]:
        free = self._free[region]
        if free:
            return free.pop()
        if self._next[region] < self._top[region]:
            spp = self._next[region]
            self._next[region] += 1
            return spp
        return None

    def free_frame(self, spp: int) -> None:
        self._free[self.region(spp)].append(spp)

    def data_frame_limit(self, region: int) -> int:
        """Highest frame (exclusive) data can ever use in ``region`` given current tables."""
        return self._top[region]

    def _check(self, spa: int) -> None:
        if spa & (PTE_SIZE - 1):
            raise TableFault(f"{spa:#x} is not 8-byte aligned")
        if (spa >> PAGE_SHIFT) not in self.table_pages:
            raise TableFault(f"{spa:#x} is not inside an allocated table page")

    def read_pte(self, spa: int) -> Pte:
        self._check(spa)
        return Pte.decode(self.entries.get(spa, 0))

    def write_pte(self, spa: int, pte: Pte) -> int:
        """Store ``pte``; the containing line is always reported, even for identical bytes."""
        self._check(spa)
        self.entries[spa] = pte.encode()
        return line_of(spa)

    def line_payload(self, line: int) -> bytes:
        base = line << LINE_SHIFT
        return b"".join(self.entries.get(base + i * PTE_SIZE, 0).to_bytes(8, "little")
                        for i in range(PTES_PER_LINE))


class PageTables:
    """Guest (GVP->GPP) and nested (GPP->SPP) trees for every VM."""

    def __init__(self, mem: PhysMem):
        self.mem = mem
        self.nested_root: Dict[int, int] = {}
        self.guest_root: Dict[int, int] = {}     # guest CR3, a GPP
        self._next_table_gpp: Dict[int, int] = {}
        self._nleaf: Dict[Tuple[int, int], int] = {}
        self._gleaf: Dict[Tuple[int, int], int] = {}

    # -- construction ---------------------------------------------------------------
    def create_vm(self, vm: int) -> List[int]:
        if vm in self.nested_root:
            raise PageTableError(f"vm {vm} already exists")
        self.nested_root[vm] = self.mem.alloc_table_page()
        self._next_table_gpp[vm] = GUEST_TABLE_GPP_BASE
        cr3 = self._alloc_guest_table(vm)
        self.guest_root[vm] = cr3
        return self.map_nested(vm, cr3, self.mem.alloc_table_page())

    def _alloc_guest_table(self, vm: int) -> int:
        gpp = self._next_table_gpp[vm]
        self._next_table_gpp[vm] += 1
        return gpp

    def _vm(self, vm: int) -> int:
        try:
            return self.nested_root[vm]
        except KeyError:
            raise PageTableError(f"unknown vm {vm}") from None

    def map_nested(self, vm: int, gpp: int, spp: int) -> List[int]:
        if not 0 <= gpp < VPN_LIMIT:
            raise ValueError(f"gpp {gpp:#x} outside the 36-bit page space")
        if not 0 <= spp < self.mem.total_pages:
            raise ValueError(f"spp {spp:#x} outside physical memory")
        entries = self.mem.entries
        modified: List[int] = []
        table = self._vm(vm)
        idx = pt_indices(gpp)
        for i in range(3):
            spa = pte_spa(table, idx[i])
            raw = entries.get(spa, 0)
            if raw & PTE_P:
                table = raw >> PAGE_SHIFT
            else:
                new = self.mem.alloc_table_page()
                entries[spa] = (new << PAGE_SHIFT) | PTE_P
                modified.append(spa >> LINE_SHIFT)
                table = new
        spa = pte_spa(table, idx[3])
        self._nleaf[(vm, gpp)] = spa
        raw = entries.get(spa, 0)
        if not (raw & PTE_P and raw >> PAGE_SHIFT == spp):
            entries[spa] = (spp << PAGE_SHIFT) | PTE_P
            modified.append(spa >> LINE_SHIFT)
        return _unique(modified)

    def map_guest(self, vm: int, gvp: int, gpp: int) -> List[int]:
        if not 0 <= gvp < VPN_LIMIT:
            raise ValueError(f"gvp {gvp:#x} outside the 36-bit page space")
        entries = self.mem.entries
        modified: List[int] = []
        self._vm(vm)
        table_gpp = self.guest_root[vm]
        idx = pt_indices(gvp)
        for i in range(3):
            spa = pte_spa(self.translate_nested(vm, table_gpp), idx[i])
            raw = entries.get(spa, 0)
            if raw & PTE_P:
                table_gpp = raw >> PAGE_SHIFT
            else:
                new_gpp = self._alloc_guest_table(vm)
                modified.extend(self.map_nested(vm, new_gpp, self.mem.alloc_table_page()))
                entries[spa] = (new_gpp << PAGE_SHIFT) | PTE_P
                modified.append(spa >> LINE_SHIFT)
                table_gpp = new_gpp
        spa = pte_spa(self.translate_nested(vm, table_gpp), idx[3])
        self._gleaf[(vm, gvp)] = spa
        raw = entries.get(spa, 0)
        if not (raw & PTE_P and raw >> PAGE_SHIFT == gpp):
            entries[spa] = (gpp << PAGE_SHIFT) | PTE_P
            modified.append(spa >> LINE_SHIFT)
        return _unique(modified)

    def remap_nested(self, vm: int, gpp: int, new_spp: int) -> Tuple[int, int]:
        """Point the nested leaf of ``gpp`` at ``new_spp``; access/dirty bits are cleared."""
        spa = self._nleaf.get((vm, gpp))
        raw = self.mem.entries.get(spa, 0) if spa is not None else 0
        if not raw & PTE_P:
            raise MissingMapping(f"gpp {gpp:#x} of vm {vm} has no nested mapping")
        if not 0 <= new_spp < self.mem.total_pages:
            raise ValueError(f"spp {new_spp:#x} outside physical memory")
        self.mem.entries[spa] = (new_spp << PAGE_SHIFT) | PTE_P
        return raw >> PAGE_SHIFT, spa >> LINE_SHIFT

    def clear_access(self, spa: int) -> bool:
        """Clear the access bit of the entry at ``spa``; returns the previous value."""
        raw = self.mem.entries.get(spa, 0)
        if raw & PTE_A:
            self.mem.entries[spa] = raw & ~PTE_A
            return True
        return False

    # -- pure lookups (no access bits) ------------------------------------------
    def nested_leaf_spa(self, vm: int, gpp: int) -> int:
        try:
            return self._nleaf[(vm, gpp)]
        except KeyError:
            raise MissingMapping(f"gpp {gpp:#x} of vm {vm} has no nested mapping") from None

    def guest_leaf_spa(self, vm: int, gvp: int) -> int:
        try:
            return self._gleaf[(vm, gvp)]
        except KeyError:
            raise MissingMapping(f"gvp {gvp:#x} of vm {vm} has no guest mapping") from None

    def translate_nested(self, vm: int, gpp: int) -> int:
        entries = self.mem.entries
        table = self._vm(vm)
        for shift in (27, 18, 9, 0):
            raw = entries.get((table << PAGE_SHIFT) | (((gpp >> shift) & 511) << 3), 0)
            if not raw & PTE_P:
                raise TranslationFault(NESTED_ROLES[shift // 9 + 1], vm, gpp)
            table = raw >> PAGE_SHIFT
        return table

    def translate_guest(self, vm: int, gvp: int) -> int:
        entries = self.mem.entries
        table_gpp = self.guest_root[vm]
        for lvl, i in zip((4, 3, 2, 1), pt_indices(gvp)):
            raw = entries.get(pte_spa(self.translate_nested(vm, table_gpp), i), 0)
            if not raw & PTE_P:
                raise TranslationFault(GUEST_ROLES[lvl], vm, gvp)
            table_gpp = raw >> PAGE_SHIFT
        return table_gpp

    def translate(self, vm: int, gvp: int) -> int:
        return self.translate_nested(vm, self.translate_guest(vm, gvp))

    # -- hardware walks -------------------------------------------------------------
    def walk_2d(self, vm: int, gvp: int, tstructs=None, is_store: bool = False) -> WalkResult:
        """Two-dimensional walk; ``tstructs`` (optional) supplies MMU-cache and nTLB hits.

        ``tstructs`` must provide ``lookup_mmu(vm, gvp) -> (level, table_spp) | None`` and
        ``lookup_ntlb(vm, gpp) -> (spp, src_spa) | None``.
        """
        entries = self.mem.entries
        res = WalkResult()
        refs = res.refs
        first = res.first_touch
        fills = res.fills
        idx = pt_indices(gvp)
        level = 4
        table_spp = -1
        table_gpp = self.guest_root[vm]
        if tstructs is not None:
            hit = tstructs.lookup_mmu(vm, gvp)
            if hit is not None:
                level = hit[0] - 1
                table_spp = hit[1]
        while level >= 1:
            if table_spp < 0:
                table_spp, src = self._nested_walk(vm, table_gpp, tstructs, res, False)
                if level < 4:
                    fills.append(Fill("mmu", vm, gvp >> (9 * level), table_spp, src, level + 1))
            spa = (table_spp << PAGE_SHIFT) | (idx[4 - level] << 3)
            raw = entries.get(spa, 0)
            refs.append((spa, GUEST_ROLES[level]))
            first.append(not raw & PTE_A)
            if not raw & PTE_P:
                raise TranslationFault(GUEST_ROLES[level], vm, gvp)
            raw |= PTE_A
            if level == 1 and is_store:
                raw |= PTE_D
            entries[spa] = raw
            table_gpp = raw >> PAGE_SHIFT
            table_spp = -1
            level -= 1
        res.gpp = table_gpp
        spp, src = self._nested_walk(vm, table_gpp, tstructs, res, is_store)
        res.final_spp = spp
        fills.append(Fill("tlb", vm, gvp, spp, src))
        return res

    def _nested_walk(self, vm, gpp, tstructs, res: WalkResult, is_store: bool):
        if tstructs is not None:
            hit = tstructs.lookup_ntlb(vm, gpp)
            if hit is not None:
                return hit
        entries = self.mem.entries
        refs = res.refs
        first = res.first_touch
        table = self.nested_root[vm]
        spa = 0
        for lvl in (4, 3, 2, 1):
            spa = (table << PAGE_SHIFT) | (((gpp >> (9 * (lvl - 1))) & LEVEL_MASK) << 3)
            raw = entries.get(spa, 0)
            refs.append((spa, NESTED_ROLES[lvl]))
            first.append(not raw & PTE_A)
            if not raw & PTE_P:
                raise TranslationFault(NESTED_ROLES[lvl], vm, gpp)
            raw |= PTE_A
            if lvl == 1 and is_store:
                raw |= PTE_D
            entries[spa] = raw
            table = raw >> PAGE_SHIFT
        res.fills.append(Fill("ntlb", vm, gpp, table, spa))
        return table, spa

    def walk_native(self, vm: int, vpn: int, is_store: bool = False) -> WalkResult:
        """Non-virtualized walk: the nested tree of ``vm`` used directly as a 1-D table."""
        res = WalkResult()
        spp, src = self._nested_walk(vm, vpn, None, res, is_store)
        res.fills.clear()
        res.gpp = vpn
        res.final_spp = spp
        res.fills.append(Fill("tlb", vm, vpn, spp, src))
        return res

    # -- debug ----------------------------------------------------------------------
    def snapshot(self) -> Dict[int, int]:
        return dict(self.mem.entries)

    def dump(self, vm: int) -> str:
        """Line-oriented dump: ``role path -> entry`` for every present entry."""
        out: List[str] = []
        self._dump_tree(out, "n", self.nested_root[vm], 4, ())
        self._dump_guest(out, vm, self.guest_root[vm], 4, ())
        return "\n".join(out) + "\n"

    def _fmt(self, raw: int) -> str:
        return "%#x %s%s%s" % (raw >> PAGE_SHIFT, "P" if raw & PTE_P else "-",
                               "A" if raw & PTE_A else "-", "D" if raw & PTE_D else "-")

    def _dump_tree(self, out, prefix, table_spp, lvl, path):
        for i in range(512):
            raw = self.mem.entries.get(pte_spa(table_spp, i), 0)
            if not raw & PTE_P:
                continue
            p = path + (i,)
            out.append(f"{prefix}L{lvl} {'.'.join(map(str, p))} -> {self._fmt(raw)}")
            if lvl > 1:
                self._dump_tree(out, prefix, raw >> PAGE_SHIFT, lvl - 1, p)

    def _dump_guest(self, out, vm, table_gpp, lvl, path):
        table_spp = self.translate_nested(vm, table_gpp)
        for i in range(512):
            raw = self.mem.entries.get(pte_spa(table_spp, i), 0)
            if not raw & PTE_P:
                continue
            p = path + (i,)
            out.append(f"gL{lvl} {'.'.join(map(str, p))} -> {self._fmt(raw)}")
            if lvl > 1:
                self._dump_guest(out, vm, raw >> PAGE_SHIFT, lvl - 1, p)


def _unique(lines: List[int]) -> List[int]:
    return list(dict.fromkeys(lines))
