"""Per-CPU translation structures: L1/L2 TLB, paging-structure MMU cache and nTLB.

Every entry carries a co-tag derived from the page-table entry it was filled
from.  Invalidation by co-tag is associative over the whole structure,
independent of set indexing, and compares at line granularity.
"""
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Set, Tuple

from .addr import COTAG_ENTRY_BITS, LINE_SHIFT, cotag_of

_VM_SHIFT = 40
_LEVEL_SHIFT = 36


def tlb_key(vm: int, page: int) -> int:
    return (vm << _VM_SHIFT) | page


def mmu_key(vm: int, level: int, prefix: int) -> int:
    return (vm << _VM_SHIFT) | (level << _LEVEL_SHIFT) | prefix


def key_vm(key: int) -> int:
    return key >> _VM_SHIFT


@dataclass(slots=True)
class TranslationEntry:
    key: int
    payload: int
    cotag: int
    pte_spa: int       # full source address; used only by exact-match modes and oracles
    valid: bool = True


@dataclass
class TstructConfig:
    l1_tlb_entries: int = 64
    l2_tlb_entries: int = 512
    ntlb_entries: int = 32
    mmu_cache_entries: int = 48
    size_multiplier: int = 1
    l1_tlb_ways: int = 4
    l2_tlb_ways: int = 8
    ntlb_ways: int = 0          # 0 = fully associative
    mmu_cache_ways: int = 0
    cotag_bits: int = 16

    def __post_init__(self):
        if self.size_multiplier not in (1, 2, 4):
            raise ValueError("size multiplier must be 1, 2 or 4")
        for name in ("l1_tlb_entries", "l2_tlb_entries", "ntlb_entries", "mmu_cache_entries"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class TranslationStructure:
    def __init__(self, name: str, entries: int, ways: int = 0):
        if ways <= 0 or ways > entries:
            ways = entries
        if entries % ways:
            raise ValueError(f"{name}: {entries} entries not divisible into {ways} ways")
        self.name = name
        self.capacity = entries
        self.ways = ways
        self.nsets = entries // ways
        self.sets: List["OrderedDict[int, TranslationEntry]"] = [OrderedDict() for _ in range(self.nsets)]
        self._by_cotag: Dict[int, Set[int]] = {}
        self.valid_count = 0
        self.hits = 0
        self.misses = 0
        self.fills = 0
        self.selective_invalidations = 0
        self.flush_invalidations = 0

    def __len__(self) -> int:
        return self.valid_count

    def peek(self, key: int) -> Optional[TranslationEntry]:
        return self.sets[key % self.nsets].get(key)

    def lookup(self, key: int) -> Optional[TranslationEntry]:
        s = self.sets[key % self.nsets]
        e = s.get(key)
        if e is None:
            self.misses += 1
            return None
        s.move_to_end(key)
        self.hits += 1
        return e

    def fill(self, entry: TranslationEntry) -> Optional[TranslationEntry]:
        """Insert ``entry``; returns the LRU victim of its set, if one was evicted."""
        key = entry.key
        s = self.sets[key % self.nsets]
        self.fills += 1
        old = s.pop(key, None)
        victim = None
        if old is not None:
            self._unindex(old)
        elif len(s) >= self.ways:
            _, victim = s.popitem(last=False)
            self._unindex(victim)
            victim.valid = False
        s[key] = entry
        ck = entry.cotag >> COTAG_ENTRY_BITS
        bucket = self._by_cotag.get(ck)
        if bucket is None:
            self._by_cotag[ck] = {key}
        else:
            bucket.add(key)
        self.valid_count += 1
        return victim

    def _unindex(self, e: TranslationEntry) -> None:
        ck = e.cotag >> COTAG_ENTRY_BITS
        bucket = self._by_cotag[ck]
        bucket.discard(e.key)
        if not bucket:
            del self._by_cotag[ck]
        self.valid_count -= 1

    def _drop(self, keys) -> List[TranslationEntry]:
        out = []
        for k in keys:
            e = self.sets[k % self.nsets].pop(k)
            self._unindex(e)
            e.valid = False
            out.append(e)
        return out

    def matching_cotag(self, cotag: int) -> List[TranslationEntry]:
        bucket = self._by_cotag.get(cotag >> COTAG_ENTRY_BITS)
        if not bucket:
            return []
        return [self.sets[k % self.nsets][k] for k in bucket]

    def invalidate_by_cotag(self, cotag: int, exact_line: Optional[int] = None) -> int:
        """Invalidate entries whose co-tag matches at line granularity.

        With ``exact_line`` the comparison uses the full source address instead
        (a reverse-lookup CAM holding complete addresses).
        """
        bucket = self._by_cotag.get(cotag >> COTAG_ENTRY_BITS)
        if not bucket:
            return 0
        if exact_line is None:
            keys = list(bucket)
        else:
            keys = [k for k in bucket if self.sets[k % self.nsets][k].pte_spa >> LINE_SHIFT == exact_line]
        self._drop(keys)
        self.selective_invalidations += len(keys)
        return len(keys)

    def invalidate_exact(self, cotag: int, spa: int) -> int:
        """Invalidate exactly the entries filled from the entry at ``spa``."""
        bucket = self._by_cotag.get(cotag >> COTAG_ENTRY_BITS)
        if not bucket:
            return 0
        keys = [k for k in bucket if self.sets[k % self.nsets][k].pte_spa == spa]
        self._drop(keys)
        self.selective_invalidations += len(keys)
        return len(keys)

    def flush(self) -> int:
        n = self.valid_count
        if not n:
            return 0
        sets = self.sets
        ns = self.nsets
        for bucket in self._by_cotag.values():
            for k in bucket:
                sets[k % ns].pop(k).valid = False
        self._by_cotag.clear()
        self.valid_count = 0
        self.flush_invalidations += n
        return n

    def entries(self) -> Iterator[TranslationEntry]:
        if self.valid_count:
            for s in self.sets:
                if s:
                    yield from s.values()

    def counters(self) -> Dict[str, int]:
        return {"hits": self.hits, "misses": self.misses, "fills": self.fills,
                "selective_invalidations": self.selective_invalidations,
                "flush_invalidations": self.flush_invalidations}


STRUCTURE_NAMES = ("l1tlb", "l2tlb", "mmu", "ntlb")


class TranslationStructures:
    """The private translation hierarchy of one simulated CPU."""

    def __init__(self, cfg: TstructConfig):
        m = cfg.size_multiplier
        self.cotag_bits = cfg.cotag_bits
        self._mask = (1 << cfg.cotag_bits) - 1
        cotag_of(0, cfg.cotag_bits)     # validates the width
        self.l1tlb = TranslationStructure("l1tlb", cfg.l1_tlb_entries * m, cfg.l1_tlb_ways)
        self.l2tlb = TranslationStructure("l2tlb", cfg.l2_tlb_entries * m, cfg.l2_tlb_ways)
        self.mmu = TranslationStructure("mmu", cfg.mmu_cache_entries * m, cfg.mmu_cache_ways)
        self.ntlb = TranslationStructure("ntlb", cfg.ntlb_entries * m, cfg.ntlb_ways)
        self.all = (self.l1tlb, self.l2tlb, self.mmu, self.ntlb)

    def lookup_tlb(self, vm: int, gvp: int) -> Tuple[int, Optional[TranslationEntry]]:
        """Returns (level that hit: 1, 2 or 0 for a miss, entry)."""
        key = (vm << _VM_SHIFT) | gvp
        e = self.l1tlb.lookup(key)
        if e is not None:
            return 1, e
        e = self.l2tlb.lookup(key)
        if e is not None:
            self.l1tlb.fill(TranslationEntry(key, e.payload, e.cotag, e.pte_spa))
            return 2, e
        return 0, None

    def lookup_mmu(self, vm: int, gvp: int) -> Optional[Tuple[int, int]]:
        """Longest-prefix paging-structure cache lookup: (level, next table spp)."""
        mmu = self.mmu
        base = vm << _VM_SHIFT
        for level in (2, 3, 4):
            key = base | (level << _LEVEL_SHIFT) | (gvp >> (9 * (level - 1)))
            s = mmu.sets[key % mmu.nsets]
            e = s.get(key)
            if e is not None:
                s.move_to_end(key)
                mmu.hits += 1
                return level, e.payload
        mmu.misses += 1
        return None

    def lookup_ntlb(self, vm: int, gpp: int) -> Optional[Tuple[int, int]]:
        e = self.ntlb.lookup((vm << _VM_SHIFT) | gpp)
        if e is None:
            return None
        return e.payload, e.pte_spa

    def fill(self, kind: str, vm: int, page: int, payload: int, src_spa: int, level: int = 1) -> None:
        if src_spa & 7:
            cotag_of(src_spa, self.cotag_bits)   # raises MisalignedAddress
        cotag = (src_spa >> COTAG_ENTRY_BITS) & self._mask
        if kind == "tlb":
            key = (vm << _VM_SHIFT) | page
            self.l2tlb.fill(TranslationEntry(key, payload, cotag, src_spa))
            self.l1tlb.fill(TranslationEntry(key, payload, cotag, src_spa))
        elif kind == "ntlb":
            self.ntlb.fill(TranslationEntry((vm << _VM_SHIFT) | page, payload, cotag, src_spa))
        elif kind == "mmu":
            self.mmu.fill(TranslationEntry(mmu_key(vm, level, page), payload, cotag, src_spa))
        else:
            raise ValueError(f"unknown structure kind {kind!r}")

    def invalidate_by_cotag(self, cotag: int) -> int:
        return sum(t.invalidate_by_cotag(cotag) for t in self.all)

    def flush(self) -> int:
        return sum(t.flush() for t in self.all)

    def valid_count(self) -> int:
        return sum(t.valid_count for t in self.all)

    def entries(self) -> Iterator[Tuple[str, TranslationEntry]]:
        for t in self.all:
            for e in t.entries():
                yield t.name, e
