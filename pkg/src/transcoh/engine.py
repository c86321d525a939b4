"""Deterministic trace-driven core tying page tables, translation structures,
caches, translation coherence and the paging hypervisor together.

CPUs consume records in trace order (the generator interleaves them
round-robin); each CPU keeps its own clock and the run's cycle count is the
latest workload-CPU clock.  Hypervisor background work runs on an extra
pseudo-CPU whose clock is not part of the makespan.
"""
import hashlib
import json
import random
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from .addr import LINE_SHIFT, PAGE_SHIFT
from .coherence import GPT, NPT, CacheConfig, EventLog, LatencyModel, MemorySystem
from .hypervisor import Hypervisor, PagingPolicy
from .pagetable import FAST, PTE_A, PTE_D, SLOW, PageTables, PhysMem, TranslationFault
from .tcoherence import CostModel, TranslationCoherence, VcpuState, check_mode
from .trace import PROCESS_SHIFT, STORE, TraceError
from .tstruct import TranslationEntry, TranslationStructures, TstructConfig

GiB = 1 << 30
FILL_KINDS = ("tlb", "mmu", "ntlb")
TABLE_ALIGN = 512        # each process's data GPPs start on a fresh nested leaf table


def _pow2(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


@dataclass
class EnergyModel:
    tstruct_access: float = 1.0
    cam_compare_per_byte: float = 0.05
    l1_access: float = 0.5
    l2_access: float = 1.5
    llc_access: float = 4.0
    directory_access: float = 1.0
    message: float = 2.0
    dram_line_fast: float = 10.0
    dram_line_slow: float = 25.0
    ipi: float = 200.0
    vm_exit: float = 500.0
    static_core: float = 0.05        # per CPU per cycle
    static_tstruct: float = 0.01     # per CPU per cycle
    cotag_static_per_byte: float = 0.02

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


@dataclass
class SimConfig:
    cpus: int = 16
    vcpus: int = 16
    mode: str = "hatric"
    cotag_bytes: int = 2
    tstruct_mult: int = 1
    policy: str = "lru,daemon"
    prefetch_degree: int = 4
    low_watermark: int = 64
    high_watermark: int = 128
    fast_bytes: int = 2 * GiB
    slow_bytes: int = 8 * GiB
    daemon_interval: int = 1000          # records between daemon ticks
    background_remap_rate: float = 0.0   # remaps per million records
    virtualized: bool = True
    seed: int = 0
    tstruct: TstructConfig = field(default_factory=TstructConfig)
    cost: CostModel = field(default_factory=CostModel)
    latency: LatencyModel = field(default_factory=LatencyModel)
    cache: CacheConfig = field(default_factory=CacheConfig)
    energy: EnergyModel = field(default_factory=EnergyModel)

    def __post_init__(self):
        check_mode(self.mode)
        if not 1 <= self.cpus <= 32:
            raise ValueError("cpus must be between 1 and 32")
        if not 1 <= self.vcpus <= self.cpus:
            raise ValueError("vcpus must be between 1 and cpus")
        if self.cotag_bytes not in (1, 2, 3):
            raise ValueError("co-tag width must be 1, 2 or 3 bytes")
        if self.tstruct_mult not in (1, 2, 4):
            raise ValueError("tstruct multiplier must be 1, 2 or 4")
        for name in ("fast_bytes", "slow_bytes"):
            v = getattr(self, name)
            if not (_pow2(v) or (name == "fast_bytes" and v == 0)):
                raise ValueError(f"{name} must be a power of two")
        if self.daemon_interval <= 0:
            raise ValueError("daemon interval must be positive")
        PagingPolicy.parse(self.policy)

    @property
    def fast_pages(self) -> int:
        return self.fast_bytes >> PAGE_SHIFT

    @property
    def slow_pages(self) -> int:
        return self.slow_bytes >> PAGE_SHIFT

    def paging_policy(self) -> PagingPolicy:
        return PagingPolicy.parse(self.policy, prefetch_degree=self.prefetch_degree,
                                  low_watermark=self.low_watermark, high_watermark=self.high_watermark)

    def as_flat_dict(self) -> Dict[str, object]:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    out[f"{k}.{kk}"] = vv
            else:
                out[k] = v
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.as_flat_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class Energy:
    dynamic: float
    static: float
    breakdown: Dict[str, float]

    @property
    def total(self) -> float:
        return self.dynamic + self.static


@dataclass
class Stats:
    mode: str = ""
    cycles: int = 0
    records: int = 0
    loads: int = 0
    stores: int = 0
    translations: int = 0
    tlb_hits: int = 0
    tlb_misses: int = 0
    l1tlb_hits: int = 0
    l1tlb_misses: int = 0
    l2tlb_hits: int = 0
    l2tlb_misses: int = 0
    mmu_hits: int = 0
    mmu_misses: int = 0
    ntlb_hits: int = 0
    ntlb_misses: int = 0
    walks: int = 0
    walk_refs: int = 0
    walk_cycles: int = 0
    walk_fill_drops: int = 0
    guest_faults: int = 0
    remaps: int = 0
    access_clears: int = 0
    shootdowns: int = 0
    ipis: int = 0
    vm_exits: int = 0
    full_flushes: int = 0
    flush_invalidations: int = 0
    selective_invalidations: int = 0
    invalidated_entries: int = 0
    walker_marks: int = 0
    cam_probes: int = 0
    spurious_probes: int = 0
    demotions: int = 0
    inv_messages: int = 0
    back_invalidations: int = 0
    dir_evictions: int = 0
    dir_lookups: int = 0
    messages: int = 0
    l1_hits: int = 0
    l1_misses: int = 0
    l2_hits: int = 0
    l2_misses: int = 0
    llc_hits: int = 0
    llc_misses: int = 0
    dram_fast_lines: int = 0
    dram_slow_lines: int = 0
    faults: int = 0
    passthrough_faults: int = 0
    migrations_in: int = 0
    migrations_out: int = 0
    daemon_evictions: int = 0
    prefetches: int = 0
    background_remaps: int = 0
    fault_cycles: int = 0
    energy_dynamic: float = 0.0
    energy_static: float = 0.0
    energy_total: float = 0.0

    def as_dict(self) -> Dict[str, object]:
        return asdict(self)

    def invalidations_per_remap(self) -> float:
        return self.invalidated_entries / self.remaps if self.remaps else 0.0

    def to_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())


def static_cotag_bytes(mode: str, cotag_bytes: int) -> int:
    if mode == "hatric":
        return cotag_bytes
    if mode == "tlb-only":
        return 8     # full-address reverse CAM
    return 0


def energy_report(stats: Stats, model: EnergyModel, cpus: int, cotag_bytes: int) -> Energy:
    tstruct = (stats.l1tlb_hits + stats.l1tlb_misses + stats.l2tlb_hits + stats.l2tlb_misses
               + stats.mmu_hits + stats.mmu_misses + stats.ntlb_hits + stats.ntlb_misses)
    cam_bytes = static_cotag_bytes(stats.mode, cotag_bytes)
    parts = {
        "tstruct": tstruct * model.tstruct_access,
        "cam": stats.cam_probes * cam_bytes * model.cam_compare_per_byte,
        "l1": (stats.l1_hits + stats.l1_misses) * model.l1_access,
        "l2": (stats.l2_hits + stats.l2_misses) * model.l2_access,
        "llc": (stats.llc_hits + stats.llc_misses) * model.llc_access,
        "directory": stats.dir_lookups * model.directory_access,
        "messages": stats.messages * model.message,
        "dram": stats.dram_fast_lines * model.dram_line_fast + stats.dram_slow_lines * model.dram_line_slow,
        "ipi": stats.ipis * model.ipi,
        "vm_exit": stats.vm_exits * model.vm_exit,
    }
    per_cycle = model.static_core + model.static_tstruct * (1 + model.cotag_static_per_byte * cam_bytes)
    static = stats.cycles * cpus * per_cycle
    return Energy(sum(parts.values()), static, parts)


class Simulator:
    def __init__(self, cfg: SimConfig, debug_events: bool = False, check_invariants: bool = False):
        self.cfg = cfg
        self.physmem = PhysMem(cfg.fast_pages, cfg.slow_pages)
        self.pt = PageTables(self.physmem)
        n = cfg.cpus + 1
        self.daemon_cpu = cfg.cpus
        self.log = EventLog(debug_events)
        self.mem = MemorySystem(n, cfg.fast_pages, cfg.cache, cfg.latency, log=self.log,
                                tracked_cpus=cfg.cpus)
        tcfg = TstructConfig(**{**asdict(cfg.tstruct), "size_multiplier": cfg.tstruct_mult,
                                "cotag_bits": 8 * cfg.cotag_bytes})
        self.tstructs = [TranslationStructures(tcfg) for _ in range(n)]
        self.vcpus: Dict[int, List[VcpuState]] = {}
        self.tco = TranslationCoherence(cfg.mode, self.pt, self.mem, self.tstructs, self.vcpus,
                                        cfg.cost, 8 * cfg.cotag_bytes)
        self.policy = cfg.paging_policy()
        self.hv = Hypervisor(self.pt, self.tco, self.mem.dram, self.policy, self.daemon_cpu, cfg.cost)
        self.gpp_of: Dict[int, int] = {}
        self.leaf_of: Dict[int, int] = {}     # nested leaf entry holding the page's reference bit
        self.next_gpp: Dict[int, int] = {}
        self.check_invariants = check_invariants
        self.ref_log: Optional[List[int]] = None     # set to a list to record walk references
        self.violations: List[str] = []
        self.rng = random.Random(cfg.seed)
        self.s = Stats(mode=cfg.mode)
        self.records_done = 0
        self._bg_acc = 0.0

    # -- setup ----------------------------------------------------------------------
    def add_vm(self, vm: int) -> None:
        if vm in self.vcpus:
            return
        self.pt.create_vm(vm)
        v = self.cfg.vcpus
        self.vcpus[vm] = [VcpuState(i, (vm * v + i) % self.cfg.cpus) for i in range(v)]
        self.next_gpp[vm] = 0

    def map_pages(self, vm: int, gvps, region: int = SLOW) -> None:
        """Give each GVP a dense GPP (per-process ranges start on a new leaf table).

        ``region=FAST`` uses free fast frames first and falls back to slow memory.
        """
        self.add_vm(vm)
        last_proc = None
        for gvp in sorted(set(int(g) for g in gvps)):
            key = (vm << 40) | gvp
            if key in self.gpp_of:
                continue
            proc = gvp >> PROCESS_SHIFT
            if proc != last_proc:
                nxt = self.next_gpp[vm]
                self.next_gpp[vm] = -(-nxt // TABLE_ALIGN) * TABLE_ALIGN
                last_proc = proc
            gpp = gvp if not self.cfg.virtualized else self.next_gpp[vm]
            self.next_gpp[vm] = gpp + 1
            spp = self.hv.place(vm, gpp, region)
            self.pt.map_nested(vm, gpp, spp)
            if self.cfg.virtualized:
                self.pt.map_guest(vm, gvp, gpp)
            self.gpp_of[key] = gpp
            self.leaf_of[key] = self.pt.nested_leaf_spa(vm, gpp)

    def prepare(self, trace: np.ndarray) -> None:
        """Map every page the trace touches.

        With paging on, pages go to fast memory in GVP order while frames are
        free (first-touch allocation) and to slow memory after that; with
        paging off everything is slow.
        """
        if len(trace) == 0:
            return
        region = FAST if self.policy.enabled else SLOW
        vms = trace["vm"]
        for vm in np.unique(vms).tolist():
            self.map_pages(vm, np.unique(trace["gvp"][vms == vm]).tolist(), region)
            hosts = np.array(sorted({v.cpu for v in self.vcpus[vm]}))
            sel = np.nonzero(vms == vm)[0]
            stray = sel[~np.isin(trace["cpu"][sel], hosts)]
            if len(stray):
                i = int(stray[0])
                raise TraceError(f"record {i}: cpu {trace['cpu'][i]} runs no vCPU of vm {vm}"
                                 f" ({self.cfg.vcpus} vCPUs configured)")

    # -- per-record work ------------------------------------------------------------------
    def _walk(self, cpu: int, ts: TranslationStructures, vm: int, gvp: int, store: bool):
        """Two-dimensional walk fused with its cache accesses and walker marking.

        Issues the same references in the same order as ``PageTables.walk_2d``;
        fills are applied after the walk, and only from lines the directory
        still tracks for this CPU.
        """
        if not self.cfg.virtualized:
            return self._walk_reference(cpu, ts, vm, gvp, store)
        s = self.s
        mem = self.mem
        entries = self.physmem.entries
        l1 = mem.l1[cpu]
        n1 = mem.n1
        lat_l1 = mem.lat.l1
        mc = mem.c
        miss = mem.l1_miss
        hw = self.tco.hw
        mark = mem.walker_mark
        local_flag = mem.local_pt_flag
        nested_root = self.pt.nested_root[vm]
        record = self.ref_log
        lat = 0
        nrefs = 0
        fills = []
        tco_c = self.tco.c

        def nested(gpp, leaf_store):
            nonlocal lat, nrefs
            hit = ts.lookup_ntlb(vm, gpp)
            if hit is not None:
                return hit
            table = nested_root
            spa = 0
            for shift in (27, 18, 9, 0):
                spa = (table << 12) | (((gpp >> shift) & 511) << 3)
                raw = entries.get(spa, 0)
                line = spa >> 6
                nrefs += 1
                if record is not None:
                    record.append(spa)
                st = l1[line % n1]
                flag = st.get(line)
                if flag is not None:
                    st.move_to_end(line)
                    mc.l1_hits += 1
                    lat += lat_l1
                else:
                    lat += miss(cpu, line, NPT)
                    flag = local_flag(cpu, line) if hw else 0
                if hw and (not raw & PTE_A or not flag):
                    mark(cpu, line, NPT)
                    tco_c.walker_marks += 1
                if not raw & 1:
                    raise TranslationFault("nL%d" % (shift // 9 + 1), vm, gpp)
                raw |= PTE_A
                if shift == 0 and leaf_store:
                    raw |= PTE_D
                entries[spa] = raw
                table = raw >> 12
            fills.append((2, gpp, table, spa, 1))
            return table, spa

        try:
            level = 4
            table_spp = -1
            table_gpp = self.pt.guest_root[vm]
            hit = ts.lookup_mmu(vm, gvp)
            if hit is not None:
                level = hit[0] - 1
                table_spp = hit[1]
            while level >= 1:
                if table_spp < 0:
                    table_spp, src = nested(table_gpp, False)
                    if level < 4:
                        fills.append((1, gvp >> (9 * level), table_spp, src, level + 1))
                spa = (table_spp << 12) | (((gvp >> (9 * (level - 1))) & 511) << 3)
                raw = entries.get(spa, 0)
                line = spa >> 6
                nrefs += 1
                if record is not None:
                    record.append(spa)
                st = l1[line % n1]
                flag = st.get(line)
                if flag is not None:
                    st.move_to_end(line)
                    mc.l1_hits += 1
                    lat += lat_l1
                else:
                    lat += miss(cpu, line, GPT)
                    flag = local_flag(cpu, line) if hw else 0
                if hw and (not raw & PTE_A or not flag):
                    mark(cpu, line, GPT)
                    tco_c.walker_marks += 1
                if not raw & 1:
                    raise TranslationFault("gL%d" % level, vm, gvp)
                raw |= PTE_A
                if level == 1 and store:
                    raw |= PTE_D
                entries[spa] = raw
                table_gpp = raw >> 12
                table_spp = -1
                level -= 1
            spp, src = nested(table_gpp, store)
        except TranslationFault:
            s.walks += 1
            s.guest_faults += 1
            s.walk_refs += nrefs
            s.walk_cycles += lat
            return None, lat
        fills.append((0, gvp, spp, src, 1))
        directory = mem.directory
        for kind, page, payload, src_spa, lvl in fills:
            if hw:
                d = directory.peek(src_spa >> 6)
                if d is None or not d.pt or not d.sharers >> cpu & 1:
                    s.walk_fill_drops += 1
                    continue
            ts.fill(FILL_KINDS[kind], vm, page, payload, src_spa, lvl)
        s.walks += 1
        s.walk_refs += nrefs
        s.walk_cycles += lat
        return spp, lat

    def _walk_reference(self, cpu: int, ts: TranslationStructures, vm: int, gvp: int, store: bool):
        """Walk via ``PageTables.walk_2d`` and then replay its references."""
        s = self.s
        try:
            if self.cfg.virtualized:
                res = self.pt.walk_2d(vm, gvp, ts, store)
            else:
                res = self.pt.walk_native(vm, gvp, store)
        except TranslationFault:
            s.walks += 1
            s.guest_faults += 1
            return None, 0
        mem = self.mem
        read = mem.cpu_read
        hw = self.tco.hw
        lat = 0
        for (spa, role), first in zip(res.refs, res.first_touch):
            kind = GPT if role[0] == "g" else NPT
            lat += read(cpu, spa, kind)
            if self.ref_log is not None:
                self.ref_log.append(spa)
            if hw:
                self.tco.walker_mark(cpu, spa >> LINE_SHIFT, kind, not first)
        directory = mem.directory
        for f in res.fills:
            if hw:
                d = directory.peek(f.src_spa >> LINE_SHIFT)
                if d is None or not d.pt or not d.sharers >> cpu & 1:
                    s.walk_fill_drops += 1
                    continue
            ts.fill(f.kind, f.vm, f.page, f.payload, f.src_spa, f.level)
        s.walks += 1
        s.walk_refs += len(res.refs)
        s.walk_cycles += lat
        return res.final_spp, lat

    def translate_and_access(self, cpu: int, vm: int, op: int, gvp: int, idx: int = 0) -> int:
        s = self.s
        ts = self.tstructs[cpu]
        key = (vm << 40) | gvp
        paging = self.policy.enabled
        fast_pages = self.cfg.fast_pages
        lat = 0
        faulted = False
        while True:
            s.translations += 1
            e = ts.l1tlb.lookup(key)
            if e is not None:
                spp = e.payload
            else:
                lat += self.cfg.latency.l2_tlb
                e = ts.l2tlb.lookup(key)
                if e is not None:
                    spp = e.payload
                    ts.l1tlb.fill(TranslationEntry(key, spp, e.cotag, e.pte_spa))
                else:
                    spp, wlat = self._walk(cpu, ts, vm, gvp, op == STORE)
                    lat += wlat
                    if spp is None:
                        return lat + self.cfg.latency.l1
            if paging and spp >= fast_pages and not faulted:
                faulted = True
                moved, flat = self.hv.access_fault(vm, self.gpp_of[key], cpu)
                lat += flat
                if moved:
                    continue
            break
        # reference bit for CLOCK, kept current on every access (not only on walks)
        leaf = self.leaf_of[key]
        entries = self.physmem.entries
        entries[leaf] = entries[leaf] | PTE_A
        spa = (spp << PAGE_SHIFT) | ((((idx * 2654435761) >> 12) & 63) << LINE_SHIFT)
        if op == STORE:
            s.stores += 1
            lat += self.mem.cpu_write(cpu, spa)
        else:
            s.loads += 1
            lat += self.mem.cpu_read(cpu, spa)
        return lat

    # -- main loop ---------------------------------------------------------------------
    def run(self, trace: np.ndarray, prepare: bool = True, chunk: int = 1 << 16) -> Stats:
        cfg = self.cfg
        if prepare:
            self.prepare(trace)
        clocks = self.mem.clocks
        ncpu = cfg.cpus
        daemon = self.policy.enabled and self.policy.daemon
        interval = cfg.daemon_interval
        bg_step = cfg.background_remap_rate / 1e6
        step = self.translate_and_access
        check = self.check_invariants
        mem = self.mem
        i = self.records_done
        for start in range(0, len(trace), chunk):
            for cpu, vm, op, gvp, _pid in trace[start:start + chunk].tolist():
                if cpu >= ncpu:
                    raise TraceError(f"record {i}: cpu {cpu} >= {ncpu} configured CPUs")
                if (i & 63) == 0:
                    mem.now = sum(clocks[:ncpu]) // ncpu
                clocks[cpu] += step(cpu, vm, op, gvp, i)
                i += 1
                if daemon and i % interval == 0:
                    self.hv.migration_daemon_tick()
                if bg_step:
                    self._bg_acc += bg_step
                    while self._bg_acc >= 1.0:
                        self._bg_acc -= 1.0
                        self.hv.background_remap(self.rng)
                if check:
                    self.check_all(f"after record {i - 1}")
        self.records_done = i
        return self.stats()

    # -- reporting ---------------------------------------------------------------------------
    def stats(self) -> Stats:
        s = self.s
        cfg = self.cfg
        s.records = self.records_done
        s.cycles = max(self.mem.clocks[:cfg.cpus]) if cfg.cpus else 0
        for name in ("l1tlb", "l2tlb", "mmu", "ntlb"):
            hits = sum(getattr(ts, name).hits for ts in self.tstructs)
            misses = sum(getattr(ts, name).misses for ts in self.tstructs)
            setattr(s, f"{name}_hits", hits)
            setattr(s, f"{name}_misses", misses)
        s.tlb_hits = s.l1tlb_hits + s.l2tlb_hits
        s.tlb_misses = s.l2tlb_misses
        s.flush_invalidations = sum(t.flush_invalidations for ts in self.tstructs for t in ts.all)
        s.selective_invalidations = sum(t.selective_invalidations for ts in self.tstructs for t in ts.all)
        tc = self.tco.c
        for k in ("remaps", "shootdowns", "ipis", "vm_exits", "full_flushes",
                  "walker_marks", "cam_probes"):
            setattr(s, k, getattr(tc, k))
        s.invalidated_entries = tc.invalidated
        mc = self.mem.c
        for k in ("spurious_probes", "demotions", "inv_messages", "back_invalidations",
                  "dir_evictions", "dir_lookups", "messages", "l1_hits", "l1_misses", "l2_hits",
                  "l2_misses", "llc_hits", "llc_misses"):
            setattr(s, k, getattr(mc, k))
        s.dram_fast_lines, s.dram_slow_lines = self.mem.dram.lines
        hc = self.hv.c
        for k in ("faults", "passthrough_faults", "migrations_in", "migrations_out",
                  "daemon_evictions", "prefetches", "background_remaps", "access_clears", "fault_cycles"):
            setattr(s, k, getattr(hc, k))
        e = energy_report(s, cfg.energy, cfg.cpus, cfg.cotag_bytes)
        s.energy_dynamic = round(e.dynamic, 3)
        s.energy_static = round(e.static, 3)
        s.energy_total = round(e.total, 3)
        return Stats(**asdict(s))

    def translation_state(self) -> Dict[Tuple[int, int], int]:
        """Pure walk result for every mapped GVP; used to compare final states across modes."""
        out = {}
        for key in sorted(self.gpp_of):
            vm, gvp = key >> 40, key & ((1 << 40) - 1)
            if self.cfg.virtualized:
                out[(vm, gvp)] = self.pt.translate(vm, gvp)
            else:
                out[(vm, gvp)] = self.pt.translate_nested(vm, gvp)
        return out

    def check_all(self, where: str = "") -> List[str]:
        from .checkers import scan
        bad = scan(self)
        if bad:
            self.violations.extend(f"{where}: {b}" for b in bad)
        return bad


def run(trace: np.ndarray, cfg: SimConfig, debug_events: bool = False) -> Stats:
    return Simulator(cfg, debug_events=debug_events).run(trace)
