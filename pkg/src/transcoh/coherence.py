"""Private caches, shared LLC and a directory-based MESI protocol.

The directory tracks the private L2 of every CPU (L1 is inclusive in L2).
When ``pt_aware`` is on, directory entries carry gPT/nPT bits: writes to
such lines also probe the translation structures of every sharer through
``pt_probe``, evictions leave the sharer list untouched (it is corrected
lazily by demotions), and directory evictions back-invalidate translation
structures too.
"""
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

from .addr import LINE_SHIFT, LINES_PER_PAGE, PAGE_SHIFT

I, S, E, M = 0, 1, 2, 3
STATE_NAMES = "ISEM"
PT_FLAG = 4          # local copy of the directory's page-table bit
STATE_MASK = 3

GPT = 1
NPT = 2

DIR = -1             # src/dst id of the directory in event logs


@dataclass
class CacheConfig:
    l1_bytes: int = 32 * 1024
    l1_ways: int = 8
    l2_bytes: int = 256 * 1024
    l2_ways: int = 8
    llc_bytes: int = 20 * 1024 * 1024
    llc_ways: int = 16
    directory_ways: int = 8
    directory_factor: int = 2       # entries = factor x aggregate private L2 lines
    directory_infinite: bool = False


@dataclass
class LatencyModel:
    l1: int = 4
    l2: int = 12
    llc: int = 40
    dram_fast: int = 120
    dram_slow: int = 200
    hop: int = 15                  # one-way on-chip coherence message
    cache_probe: int = 2           # tag probe at an invalidation target
    l2_tlb: int = 7
    cycles_per_line_fast: int = 1  # 4x the bandwidth of the slow region
    cycles_per_line_slow: int = 4


class DirEntry:
    __slots__ = ("sharers", "owner", "pt")

    def __init__(self):
        self.sharers = 0
        self.owner = -1
        self.pt = 0        # GPT | NPT bits

    @property
    def gpt(self) -> bool:
        return bool(self.pt & GPT)

    @property
    def npt(self) -> bool:
        return bool(self.pt & NPT)

    def sharer_list(self) -> List[int]:
        return bits(self.sharers)


def bits(mask: int) -> List[int]:
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return out


def _dir_index(line: int) -> int:
    # fold frame bits into the set index; page-table pages are page aligned and would
    # otherwise pile every table's first line into the same set
    return line ^ (line >> 6) ^ (line >> 15)


class Directory:
    def __init__(self, entries: int, ways: int, infinite: bool = False):
        self.infinite = infinite
        if infinite:
            self.nsets = 1
            self.ways = 0
        else:
            self.ways = max(1, min(ways, entries))
            self.nsets = max(1, entries // self.ways)
        self.sets: List["OrderedDict[int, DirEntry]"] = [OrderedDict() for _ in range(self.nsets)]

    def set_of(self, line: int) -> "OrderedDict[int, DirEntry]":
        return self.sets[(line ^ (line >> 6) ^ (line >> 15)) % self.nsets]     # _dir_index, inlined

    def peek(self, line: int) -> Optional[DirEntry]:
        return self.sets[(line ^ (line >> 6) ^ (line >> 15)) % self.nsets].get(line)

    def remove(self, line: int) -> None:
        self.sets[(line ^ (line >> 6) ^ (line >> 15)) % self.nsets].pop(line, None)

    def items(self):
        for s in self.sets:
            yield from s.items()

    def __len__(self) -> int:
        return sum(len(s) for s in self.sets)


class Dram:
    """Fixed latency per region plus a single-server bandwidth queue per region."""

    def __init__(self, fast_pages: int, lat: LatencyModel):
        self.fast_limit = fast_pages << PAGE_SHIFT
        self.base = (lat.dram_fast, lat.dram_slow)
        self.cpl = (lat.cycles_per_line_fast, lat.cycles_per_line_slow)
        self.next_free = [0, 0]
        self.lines = [0, 0]

    def region(self, spa: int) -> int:
        return 0 if spa < self.fast_limit else 1

    def access(self, spa: int, now: int) -> int:
        r = 0 if spa < self.fast_limit else 1
        nf = self.next_free[r]
        start = nf if nf > now else now
        self.next_free[r] = start + self.cpl[r]
        self.lines[r] += 1
        return self.base[r] + start - now

    def copy_page(self, src_spp: int, dst_spp: int, now: int) -> int:
        rs = self.region(src_spp << PAGE_SHIFT)
        rd = self.region(dst_spp << PAGE_SHIFT)
        start = max(now, self.next_free[rs], self.next_free[rd])
        dur = LINES_PER_PAGE * max(self.cpl[rs], self.cpl[rd])
        self.next_free[rs] = start + dur
        self.next_free[rd] = start + dur
        self.lines[rs] += LINES_PER_PAGE
        self.lines[rd] += LINES_PER_PAGE
        return self.base[rs] + start - now + dur


class EventLog:
    """Line-oriented protocol trace: ``cycle kind line src dst``."""

    def __init__(self, enabled: bool = False):
        self.enabled = enabled
        self.lines: List[str] = []

    def emit(self, cycle: int, kind: str, line: int, src: int, dst: int) -> None:
        self.lines.append(f"{cycle} {kind} {line:#x} {_who(src)} {_who(dst)}")

    def text(self) -> str:
        return "".join(x + "\n" for x in self.lines)


def _who(x: int) -> str:
    return "D" if x == DIR else str(x)


class CoherenceCounters:
    __slots__ = ("l1_hits", "l1_misses", "l2_hits", "l2_misses", "llc_hits", "llc_misses",
                 "dir_lookups", "dir_evictions", "back_invalidations", "inv_messages",
                 "spurious_probes", "demotions", "writebacks", "messages", "walker_marks")

    def __init__(self):
        for k in self.__slots__:
            setattr(self, k, 0)

    def as_dict(self) -> Dict[str, int]:
        return {k: getattr(self, k) for k in self.__slots__}


ProbeHook = Callable[[int, int, int], Tuple[int, int]]


class MemorySystem:
    """Caches + directory for ``ncpus`` CPUs (the last ones may be hypervisor pseudo-CPUs)."""

    def __init__(self, ncpus: int, fast_pages: int, cfg: CacheConfig = None,
                 lat: LatencyModel = None, pt_aware: bool = False,
                 log: EventLog = None, tracked_cpus: Optional[int] = None):
        self.cfg = cfg = cfg or CacheConfig()
        self.lat = lat = lat or LatencyModel()
        self.ncpus = ncpus
        self.pt_aware = pt_aware
        self.log = log or EventLog(False)
        self.c = CoherenceCounters()
        self.n1 = max(1, cfg.l1_bytes // 64 // cfg.l1_ways)
        self.n2 = max(1, cfg.l2_bytes // 64 // cfg.l2_ways)
        self.w1 = cfg.l1_ways
        self.w2 = cfg.l2_ways
        self.l1: List[List[OrderedDict]] = [[OrderedDict() for _ in range(self.n1)] for _ in range(ncpus)]
        self.l2: List[List[OrderedDict]] = [[OrderedDict() for _ in range(self.n2)] for _ in range(ncpus)]
        self.nllc = max(1, cfg.llc_bytes // 64 // cfg.llc_ways)
        self.llc_ways = cfg.llc_ways
        self.llc: List[OrderedDict] = [OrderedDict() for _ in range(self.nllc)]
        tracked = ncpus if tracked_cpus is None else tracked_cpus
        dir_entries = cfg.directory_factor * tracked * self.n2 * self.w2
        self.directory = Directory(dir_entries, cfg.directory_ways, cfg.directory_infinite)
        self.dram = Dram(fast_pages, lat)
        self.clocks: List[int] = [0] * ncpus
        self.now = 0
        # (target cpu, line, reason) -> (translation entries invalidated, probe cycles)
        self.pt_probe: Optional[ProbeHook] = None
        self.on_transaction: Optional[Callable[[], None]] = None

    # -- private cache primitives ------------------------------------------------
    def l2_state(self, cpu: int, line: int) -> int:
        st = self.l2[cpu][line % self.n2].get(line)
        return I if st is None else st & STATE_MASK

    def in_l1(self, cpu: int, line: int) -> bool:
        return line in self.l1[cpu][line % self.n1]

    def _l1_insert(self, cpu: int, line: int, flag: int = 0) -> None:
        # L1 values mirror the L2 copy's page-table flag so walkers can check it on an L1 hit
        s = self.l1[cpu][line % self.n1]
        if line in s:
            s[line] = flag
            s.move_to_end(line)
            return
        if len(s) >= self.w1:
            s.popitem(last=False)
        s[line] = flag

    def _l2_insert(self, cpu: int, line: int, state: int) -> None:
        s = self.l2[cpu][line % self.n2]
        if line in s:
            s[line] = state
            s.move_to_end(line)
            return
        if len(s) >= self.w2:
            vline, vstate = s.popitem(last=False)
            self._on_l2_evict(cpu, vline, vstate)
        s[line] = state

    def _drop_private(self, cpu: int, line: int) -> bool:
        """Remove ``line`` from cpu's L1/L2 (writing back M data); True if it was present."""
        st = self.l2[cpu][line % self.n2].pop(line, None)
        self.l1[cpu][line % self.n1].pop(line, None)
        if st is None:
            return False
        if st & STATE_MASK == M:
            self.c.writebacks += 1
            self._llc_insert(line)
        return True

    def _llc_insert(self, line: int) -> None:
        s = self.llc[line % self.nllc]
        if line in s:
            s.move_to_end(line)
            return
        if len(s) >= self.cfg.llc_ways:
            s.popitem(last=False)
        s[line] = None

    def _fetch(self, line: int) -> int:
        """Latency beyond the LLC/directory lookup to obtain a line from LLC or DRAM."""
        s = self.llc[line % self.nllc]
        if line in s:
            s.move_to_end(line)
            self.c.llc_hits += 1
            return 0
        self.c.llc_misses += 1
        if len(s) >= self.llc_ways:
            s.popitem(last=False)
        s[line] = None
        # Dram.access, inlined
        dram = self.dram
        r = 0 if line << LINE_SHIFT < dram.fast_limit else 1
        now = self.now
        nf = dram.next_free[r]
        start = nf if nf > now else now
        dram.next_free[r] = start + dram.cpl[r]
        dram.lines[r] += 1
        return dram.base[r] + start - now

    # -- directory --------------------------------------------------------------
    def _dir_get(self, line: int) -> DirEntry:
        self.c.dir_lookups += 1
        directory = self.directory
        s = directory.set_of(line)
        d = s.get(line)
        if d is not None:
            s.move_to_end(line)
            return d
        if not directory.infinite and len(s) >= directory.ways:
            self.directory_evict(*next(iter(s.items())))
        d = s[line] = DirEntry()
        return d

    def directory_evict(self, line: int, d: DirEntry) -> int:
        """Evict a directory entry, back-invalidating every sharer; returns entries purged."""
        self.directory.remove(line)
        self.c.dir_evictions += 1
        purged = 0
        log = self.log
        probe = self.pt_probe if (d.pt and self.pt_aware) else None
        for t in bits(d.sharers):
            self.c.back_invalidations += 1
            self.c.messages += 1
            if log.enabled:
                log.emit(self.clocks[t], "BackInv", line, DIR, t)
            self._drop_private(t, line)
            if probe is not None:
                purged += probe(t, line, 1)[0]
        return purged

    # -- protocol operations --------------------------------------------------------
    def cpu_read(self, cpu: int, spa: int, walker: int = 0) -> int:
        """Load ``spa`` into cpu's private caches; ``walker`` is GPT/NPT for walker reads."""
        line = spa >> LINE_SHIFT
        c = self.c
        s1 = self.l1[cpu][line % self.n1]
        if line in s1:
            s1.move_to_end(line)
            c.l1_hits += 1
            return self.lat.l1
        return self.l1_miss(cpu, line, walker)

    def l1_miss(self, cpu: int, line: int, walker: int = 0) -> int:
        """``cpu_read`` after its L1 lookup missed; walkers that probe L1 themselves enter here."""
        c = self.c
        c.l1_misses += 1
        s1 = self.l1[cpu][line % self.n1]
        s2 = self.l2[cpu][line % self.n2]
        st = s2.get(line)
        if st is not None:
            s2.move_to_end(line)
            c.l2_hits += 1
            if len(s1) >= self.w1:
                s1.popitem(last=False)
            s1[line] = st & PT_FLAG
            return self.lat.l2
        c.l2_misses += 1
        lat = self.lat
        cycles = lat.l2 + lat.llc
        # directory lookup, allocating (and possibly evicting) on a miss
        c.dir_lookups += 1
        directory = self.directory
        ds = directory.set_of(line)
        d = ds.get(line)
        if d is not None:
            ds.move_to_end(line)
        else:
            if not directory.infinite and len(ds) >= directory.ways:
                self.directory_evict(*next(iter(ds.items())))
            d = ds[line] = DirEntry()
        c.messages += 1
        log = self.log
        if log.enabled:
            log.emit(self.clocks[cpu], "GetS", line, cpu, DIR)
        if walker and self.pt_aware:
            d.pt |= walker
        bit = 1 << cpu
        owner = d.owner
        if owner >= 0 and owner != cpu:
            so = self.l2[owner][line % self.n2]
            ost = so[line]
            if ost & STATE_MASK == M:
                c.writebacks += 1
                self._llc_insert(line)
            so[line] = (ost & PT_FLAG) | S
            d.owner = -1
            c.messages += 2
            if log.enabled:
                log.emit(self.clocks[cpu], "Fwd", line, DIR, owner)
            cycles += 2 * lat.hop
            state = S
        else:
            sl = self.llc[line % self.nllc]
            if line in sl:              # LLC hit, the common case for page-table lines
                sl.move_to_end(line)
                c.llc_hits += 1
            else:
                cycles += self._fetch(line)
            state = S if d.sharers & ~bit else E
        d.sharers |= bit
        if state == E:
            d.owner = cpu
        flag = PT_FLAG if d.pt else 0
        if len(s2) >= self.w2:
            vline, vstate = s2.popitem(last=False)
            self._on_l2_evict(cpu, vline, vstate)
        s2[line] = state | flag
        if len(s1) >= self.w1:
            s1.popitem(last=False)
        s1[line] = flag
        if self.on_transaction is not None:
            self.on_transaction()
        return cycles

    def cpu_write(self, cpu: int, spa: int) -> int:
        line = spa >> LINE_SHIFT
        c = self.c
        lat = self.lat
        s2 = self.l2[cpu][line % self.n2]
        st = s2.get(line)
        if st is not None and st & STATE_MASK >= E:
            s2[line] = (st & PT_FLAG) | M
            s2.move_to_end(line)
            if line in self.l1[cpu][line % self.n1]:
                c.l1_hits += 1
                cycles = lat.l1
            else:
                c.l1_misses += 1
                c.l2_hits += 1
                cycles = lat.l2
            self._l1_insert(cpu, line, st & PT_FLAG)
            if self.pt_aware and self.pt_probe is not None:
                d = self.directory.peek(line)
                if d is not None and d.pt:
                    self.pt_probe(cpu, line, 2)
            return cycles
        c.l1_misses += 1
        c.l2_misses += 1
        d = self._dir_get(line)
        c.messages += 1
        log = self.log
        if log.enabled:
            log.emit(self.clocks[cpu], "GetM", line, cpu, DIR)
        cycles = lat.l2 + lat.llc
        owner = d.owner
        if st is None:
            if owner >= 0 and owner != cpu:
                cycles += 2 * lat.hop
            else:
                cycles += self._fetch(line)
        probe = self.pt_probe if (d.pt and self.pt_aware) else None
        worst = 0
        for t in bits(d.sharers & ~(1 << cpu)):
            c.inv_messages += 1
            c.messages += 2
            if log.enabled:
                log.emit(self.clocks[cpu], "Inv", line, cpu, t)
            had = self._drop_private(t, line)
            if not had:
                c.spurious_probes += 1
            rt = 2 * lat.hop + lat.cache_probe
            if probe is not None:
                matched, pcycles = probe(t, line, 0)
                rt += pcycles
                if not had and not matched:
                    # nothing left at the target: the ack doubles as a demotion
                    c.demotions += 1
                    if log.enabled:
                        log.emit(self.clocks[t], "Demote", line, t, DIR)
            if log.enabled:
                log.emit(self.clocks[t], "InvAck", line, t, cpu)
            if rt > worst:
                worst = rt
        cycles += worst
        if probe is not None:
            probe(cpu, line, 2)
        d.sharers = 1 << cpu
        d.owner = cpu
        flag = PT_FLAG if d.pt else 0
        self._l2_insert(cpu, line, M | flag)
        self._l1_insert(cpu, line, flag)
        if self.on_transaction is not None:
            self.on_transaction()
        return cycles

    def _on_l2_evict(self, cpu: int, line: int, state: int) -> None:
        self.l1[cpu][line % self.n1].pop(line, None)
        if state & STATE_MASK == M:
            self.c.writebacks += 1
            self._llc_insert(line)
        d = self.directory.peek(line)
        self.c.messages += 1
        if self.log.enabled:
            self.log.emit(self.clocks[cpu], "Evict", line, cpu, DIR)
        if d is None:
            return
        if d.owner == cpu:
            d.owner = -1
        if d.pt and self.pt_aware:
            return
        d.sharers &= ~(1 << cpu)
        if not d.sharers:
            self.directory.remove(line)

    def evict_line(self, cpu: int, line: int) -> None:
        """Evict ``line`` from cpu's private caches (L2 victim path)."""
        st = self.l2[cpu][line % self.n2].pop(line, None)
        if st is None:
            raise KeyError(f"line {line:#x} not valid at cpu {cpu}")
        self._on_l2_evict(cpu, line, st)

    def demote_sharer(self, cpu: int, line: int) -> None:
        d = self.directory.peek(line)
        if d is None:
            return
        d.sharers &= ~(1 << cpu)
        if d.owner == cpu:
            d.owner = -1
        self.c.demotions += 1
        self.c.messages += 1
        if self.log.enabled:
            self.log.emit(self.clocks[cpu], "Demote", line, cpu, DIR)
        if not d.sharers:
            self.directory.remove(line)

    def walker_mark(self, cpu: int, line: int, kind: int) -> None:
        """Walker-originated message setting the gPT/nPT bit of an existing entry."""
        d = self.directory.peek(line)
        self.c.walker_marks += 1
        self.c.messages += 1
        if self.log.enabled:
            self.log.emit(self.clocks[cpu], "WalkerMark", line, cpu, DIR)
        if d is None:
            return
        d.pt |= kind
        d.sharers |= 1 << cpu
        s = self.l2[cpu][line % self.n2]
        st = s.get(line)
        if st is not None:
            s[line] = st | PT_FLAG
            s1 = self.l1[cpu][line % self.n1]
            if line in s1:
                s1[line] = PT_FLAG

    def local_pt_flag(self, cpu: int, line: int) -> bool:
        st = self.l2[cpu][line % self.n2].get(line)
        return st is not None and bool(st & PT_FLAG)

    # -- invariant scans ------------------------------------------------------------
    def holders(self) -> Dict[int, Dict[int, int]]:
        """line -> {cpu: state} for every valid private L2 line."""
        out: Dict[int, Dict[int, int]] = {}
        for cpu in range(self.ncpus):
            for s in self.l2[cpu]:
                for line, st in s.items():
                    out.setdefault(line, {})[cpu] = st & STATE_MASK
        return out

    def check_swmr(self) -> List[str]:
        bad = []
        for line, h in self.holders().items():
            writers = [c for c, st in h.items() if st >= E]
            if len(writers) > 1 or (writers and len(h) > 1):
                bad.append(f"line {line:#x}: states {dict((c, STATE_NAMES[s]) for c, s in h.items())}")
        return bad

    def check_inclusion(self) -> List[str]:
        bad = []
        for cpu in range(self.ncpus):
            for s1 in self.l1[cpu]:
                for line in s1:
                    if line not in self.l2[cpu][line % self.n2]:
                        bad.append(f"cpu {cpu}: L1 line {line:#x} missing from L2")
        for line, h in self.holders().items():
            d = self.directory.peek(line)
            for cpu in h:
                if d is None or not d.sharers >> cpu & 1:
                    bad.append(f"line {line:#x} valid at cpu {cpu} but not in the directory sharer list")
        return bad
