"""Trace records, text/binary trace files and the synthetic workload generator."""
import os
import re
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, Optional

import numpy as np

from .addr import PAGE_SHIFT

RECORD_DTYPE = np.dtype([("cpu", "<u2"), ("vm", "<u2"), ("op", "u1"), ("gvp", "<u8"), ("pid", "<u2")])
LOAD, STORE = 0, 1
OP_NAMES = ("load", "store")
ARCHETYPES = ("streaming", "pseudo-random", "zipfian", "small-footprint")
PROCESS_SHIFT = 27          # each process gets its own 512 GiB slice of guest-virtual space
BINARY_MAGIC = b"TCTRACE1"
MAX_FOOTPRINT = 1 << 40


class TraceError(ValueError):
    pass


def empty_trace(n: int = 0) -> np.ndarray:
    return np.zeros(n, dtype=RECORD_DTYPE)


def make_trace(rows: Iterable) -> np.ndarray:
    """Build a trace from (cpu, vm, op, gvp[, pid]) tuples; op may be 0/1 or load/store."""
    out = []
    for r in rows:
        op = r[2]
        if isinstance(op, str):
            op = OP_NAMES.index(op)
        out.append((r[0], r[1], op, r[3], r[4] if len(r) > 4 else 0))
    return np.array(out, dtype=RECORD_DTYPE)


_SIZE = re.compile(r"^\s*(\d+)\s*([kmgt]i?b?|b|pages?)?\s*$", re.I)


def parse_size(text) -> int:
    """Bytes from ``4096``, ``64K``, ``512MiB``, ``2G`` or ``100pages``."""
    if isinstance(text, int):
        return text
    m = _SIZE.match(str(text))
    if not m:
        raise ValueError(f"bad size {text!r}")
    n = int(m.group(1))
    unit = (m.group(2) or "").lower()
    if unit.startswith("page"):
        return n << PAGE_SHIFT
    if unit and unit[0] in "kmgt":
        return n << (10 * ("kmgt".index(unit[0]) + 1))
    return n


@dataclass
class WorkloadSpec:
    archetype: str = "zipfian"
    footprint: int = 64 << 20
    records: int = 100_000
    cpus: int = 16
    vm: int = 0
    processes: int = 1
    store_fraction: float = 0.3
    zipf_s: float = 1.0
    burst: int = 1                        # consecutive records a CPU issues per page visit
    background_remap_rate: float = 0.0    # remaps per million records
    seed: int = 0

    def __post_init__(self):
        self.footprint = parse_size(self.footprint)
        if self.archetype not in ARCHETYPES:
            raise ValueError(f"unknown archetype {self.archetype!r}")
        if self.footprint <= 0 or self.footprint > MAX_FOOTPRINT:
            raise ValueError(f"footprint {self.footprint} outside (0, {MAX_FOOTPRINT}]")
        if self.processes < 1 or self.cpus < self.processes:
            raise ValueError("need at least one CPU per process")
        if self.records < 0:
            raise ValueError("record count must be non-negative")
        if self.burst < 1:
            raise ValueError("burst must be at least 1")
        if not 0.0 <= self.store_fraction <= 1.0:
            raise ValueError("store fraction must be in [0, 1]")
        if self.background_remap_rate < 0:
            raise ValueError("background remap rate must be non-negative")

    @property
    def pages(self) -> int:
        return max(1, self.footprint >> PAGE_SHIFT)

    def pages_per_process(self) -> int:
        return max(1, self.pages // self.processes)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "WorkloadSpec":
        kv = parse_kv(text)
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(types)
        if unknown:
            raise ValueError(f"unknown workload keys: {', '.join(sorted(unknown))}")
        args = {}
        for k, v in kv.items():
            t = types[k]
            if k == "footprint":
                args[k] = parse_size(v)
            elif t in (int, "int"):
                args[k] = int(v, 0)
            elif t in (float, "float"):
                args[k] = float(v)
            else:
                args[k] = v
        return cls(**args)


def parse_kv(text: str) -> Dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _zipf_ranks(rng: np.random.Generator, n: int, s: float, size: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** s
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, rng.random(size), side="right"), n - 1)


def generate(spec: WorkloadSpec) -> np.ndarray:
    """Deterministic synthetic trace; CPUs take turns, one record each.

    Process ``p`` runs on CPUs ``p, p + P, ...`` and touches GVPs ``[p << 27, (p << 27) + pages)``.
    Streaming walks the footprint in order across the process; the other
    archetypes give each CPU its own sequence of page visits, ``burst``
    records per visit.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.records
    tr = empty_trace(n)
    if n == 0:
        return tr
    idx = np.arange(n, dtype=np.int64)
    cpu = idx % spec.cpus
    pid = cpu % spec.processes
    tr["cpu"] = cpu
    tr["vm"] = spec.vm
    tr["pid"] = pid
    tr["op"] = (rng.random(n) < spec.store_fraction).astype(np.uint8)
    pages = spec.pages_per_process()
    page = np.empty(n, dtype=np.int64)
    burst = spec.burst
    for p in range(spec.processes):
        sel = pid == p
        k = int(sel.sum())
        q = np.arange(k, dtype=np.int64)
        if spec.archetype == "streaming":
            seq = (q // burst) % pages
        else:
            m = len(range(p, spec.cpus, spec.processes))     # CPUs running this process
            own = -(-k // m)                                  # records per CPU, rounded up
            per_cpu = -(-own // burst)                        # page visits per CPU
            if spec.archetype == "zipfian":
                perm = rng.permutation(pages)
                visits = perm[_zipf_ranks(rng, pages, spec.zipf_s, m * per_cpu)]
            else:
                visits = rng.integers(0, pages, size=m * per_cpu)
            seq = visits.reshape(m, per_cpu)[q % m, (q // m) // burst]
        page[sel] = seq + (p << PROCESS_SHIFT)
    tr["gvp"] = page
    return tr


def write_text(path, trace: np.ndarray) -> None:
    with open(path, "w") as f:
        for cpu, vm, op, gvp, pid in trace.tolist():
            f.write(f"{cpu} {vm} {OP_NAMES[op]} {gvp:#x} {pid}\n")


def write_binary(path, trace: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(BINARY_MAGIC)
        f.write(np.uint64(len(trace)).tobytes())
        f.write(np.ascontiguousarray(trace, dtype=RECORD_DTYPE).tobytes())


def write(path, trace: np.ndarray) -> None:
    """Binary for ``.bin``/``.trc`` paths, text otherwise."""
    if str(path).endswith((".bin", ".trc")):
        write_binary(path, trace)
    else:
        write_text(path, trace)


def read(path, cpus: Optional[int] = None) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(len(BINARY_MAGIC))
    if head == BINARY_MAGIC:
        tr = _read_binary(path)
    else:
        with open(path) as f:
            tr = parse_text(f, cpus)
    if cpus is not None and len(tr):
        bad = np.nonzero(tr["cpu"] >= cpus)[0]
        if len(bad):
            raise TraceError(f"record {bad[0]}: cpu {tr['cpu'][bad[0]]} >= {cpus} configured CPUs")
    return tr


def _read_binary(path) -> np.ndarray:
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        f.read(len(BINARY_MAGIC))
        n = int(np.frombuffer(f.read(8), dtype="<u8")[0])
        want = len(BINARY_MAGIC) + 8 + n * RECORD_DTYPE.itemsize
        if size != want:
            raise TraceError(f"binary trace holds {size} bytes, header promises {want}")
        return np.frombuffer(f.read(), dtype=RECORD_DTYPE, count=n).copy()


def parse_text(lines: Iterable[str], cpus: Optional[int] = None) -> np.ndarray:
    rows = []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (4, 5):
            raise TraceError(f"line {n}: expected 'cpu vm op gvp [pid]', got {line!r}")
        try:
            cpu, vm = int(parts[0]), int(parts[1])
            op = OP_NAMES.index(parts[2])
            gvp = int(parts[3], 16)
            pid = int(parts[4]) if len(parts) == 5 else 0
        except ValueError:
            raise TraceError(f"line {n}: malformed record {line!r}") from None
        if min(cpu, vm, gvp, pid) < 0 or gvp >> 36:
            raise TraceError(f"line {n}: field out of range in {line!r}")
        if cpus is not None and cpu >= cpus:
            raise TraceError(f"line {n}: cpu {cpu} >= {cpus} configured CPUs")
        rows.append((cpu, vm, op, gvp, pid))
    return np.array(rows, dtype=RECORD_DTYPE) if rows else empty_trace()
