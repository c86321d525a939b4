"""Batch experiment harness: single runs, sweep matrices, CSV results and static plots.

Sweep axes take comma-separated values on the command line or in the config
file (``mode=sw,hatric``); the cross product of all axes is run, plus a
``no-hbm`` baseline cell (paging off, every page in slow memory) that the
``norm_runtime`` column is relative to.
"""
import argparse
import csv
import io
import itertools
import os
import sys
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import trace as tracemod
from .engine import SimConfig, Simulator, Stats
from .hypervisor import PagingPolicy
from .tcoherence import check_mode
from .trace import TraceError, WorkloadSpec, parse_kv, parse_size

AXES = ("mode", "vcpus", "cotag_bytes", "tstruct_mult", "policy")
BASELINE = "no-hbm"
DEFAULT_CAP = 64
DEFAULT_RECORD_BUDGET = 10_000_000
STAT_COLUMNS = [f.name for f in fields(Stats)]
CONFIG_COLUMNS = ["cell", "config_hash"] + list(AXES) + ["seed", "cpus", "fast_bytes", "slow_bytes"]
DERIVED_COLUMNS = ["invalidations_per_remap", "norm_runtime", "norm_energy"]
CSV_COLUMNS = CONFIG_COLUMNS + [c for c in STAT_COLUMNS if c != "mode"] + DERIVED_COLUMNS

# scalar SimConfig fields settable from a config file or --set
_SIM_KEYS = {f.name: f.type for f in fields(SimConfig)
             if f.name not in ("tstruct", "cost", "latency", "cache", "energy") and f.name not in AXES}
_SIZE_KEYS = ("fast_bytes", "slow_bytes")


class ConfigError(ValueError):
    pass


@dataclass
class Experiment:
    name: str = "run"
    base: SimConfig = field(default_factory=SimConfig)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    trace_path: Optional[str] = None
    axes: Dict[str, list] = field(default_factory=dict)
    baseline: str = BASELINE
    out: str = "out"
    cap: int = DEFAULT_CAP
    record_budget: int = DEFAULT_RECORD_BUDGET
    emit_plots: bool = False
    debug_events: bool = False

    def cells(self) -> List[Dict[str, object]]:
        for k, vals in self.axes.items():
            if k not in AXES:
                raise ConfigError(f"unknown sweep axis {k!r}")
            if not vals:
                raise ConfigError(f"sweep axis {k!r} is empty")
        names = [k for k in AXES if k in self.axes]
        combos = list(itertools.product(*(self.axes[k] for k in names)))
        if len(combos) > self.cap:
            raise ConfigError(f"sweep has {len(combos)} cells, cap is {self.cap}")
        return [dict(zip(names, c)) for c in combos]


def cell_label(cell: Dict[str, object]) -> str:
    return ";".join(f"{k}={v}" for k, v in cell.items()) or "base"


def _convert(key: str, value: str, typ):
    if key in _SIZE_KEYS:
        return parse_size(value)
    if typ in (bool, "bool"):
        low = value.lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return low in ("1", "true", "yes")
    if typ in (int, "int"):
        return int(value, 0)
    if typ in (float, "float"):
        return float(value)
    return value


def _axis_values(key: str, text: str) -> list:
    if key == "policy":
        # policies contain commas themselves; alternatives are separated by '|'
        vals = [v.strip() for v in text.split("|") if v.strip()]
        for v in vals:
            PagingPolicy.parse(v)
        return vals
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if key == "mode":
        return [check_mode(v) for v in vals]
    try:
        return [int(v, 0) for v in vals]
    except ValueError:
        raise ConfigError(f"{key}: expected integers, got {text!r}") from None


def build_experiment(settings: Dict[str, str]) -> Experiment:
    """Turn flat key=value settings (config file merged with flags) into an Experiment."""
    exp = Experiment()
    sim: Dict[str, object] = {}
    work: Dict[str, str] = {}
    for key, value in settings.items():
        key = key.replace("-", "_")
        if key in AXES:
            exp.axes[key] = _axis_values(key, value)
        elif key.startswith("workload."):
            work[key.split(".", 1)[1]] = value
        elif key in _SIM_KEYS:
            sim[key] = _convert(key, value, _SIM_KEYS[key])
        elif key == "trace":
            exp.trace_path = value or None
        elif key in ("out", "name", "baseline"):
            setattr(exp, key, value)
        elif key in ("cap", "record_budget"):
            setattr(exp, key, int(value, 0))
        elif key in ("emit_plots", "debug_events"):
            setattr(exp, key, _convert(key, value, bool))
        else:
            raise ConfigError(f"unknown setting {key!r}")
    first = {k: v[0] for k, v in exp.axes.items()}
    try:
        exp.base = SimConfig(**sim, **first)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if "seed" not in work:
        work["seed"] = str(exp.base.seed)
    try:
        exp.workload = WorkloadSpec.from_text("".join(f"{k}={v}\n" for k, v in work.items()))
    except ValueError as e:
        raise ConfigError(f"workload: {e}") from None
    return exp


class _TraceCache:
    """Loads the trace once, or generates one per vCPU count (records only on the VM's vCPUs)."""

    def __init__(self, exp: Experiment):
        self.exp = exp
        self.loaded = None
        self.generated: Dict[int, np.ndarray] = {}

    def get(self, cfg: SimConfig) -> np.ndarray:
        exp = self.exp
        if exp.trace_path:
            if self.loaded is None:
                tr = tracemod.read(exp.trace_path, cfg.cpus)
                self.loaded = tr[:exp.record_budget]
            return self.loaded
        n = cfg.vcpus
        if n not in self.generated:
            spec = replace(exp.workload, cpus=n, records=min(exp.workload.records, exp.record_budget))
            self.generated[n] = tracemod.generate(spec)
        return self.generated[n]


def _row(label: str, cfg: SimConfig, st: Stats) -> Dict[str, object]:
    row: Dict[str, object] = {"cell": label, "config_hash": cfg.config_hash()}
    for k in AXES + ("seed", "cpus", "fast_bytes", "slow_bytes"):
        row[k] = getattr(cfg, k)
    d = st.as_dict()
    d.pop("mode")
    row.update(d)
    row["invalidations_per_remap"] = round(st.invalidations_per_remap(), 6)
    return row


def run_experiment(exp: Experiment, log=None, events: Optional[List[str]] = None) -> List[Dict[str, object]]:
    """Run every cell plus its baseline; returns rows with normalized runtime and energy.

    The ``no-hbm`` baseline is run once per vCPU count in the sweep (the trace
    differs per count), and each row is normalized to the baseline with the
    same vCPU count.  With ``exp.debug_events`` each cell's event log is
    appended to ``events``.
    """
    cells = exp.cells()
    varying = [k for k, v in exp.axes.items() if len(v) > 1]     # single-valued axes stay out of labels
    labels = [cell_label({k: c[k] for k in varying}) for c in cells]
    configs = [replace(exp.base, **c) for c in cells]
    plan = []
    if exp.baseline == BASELINE:
        counts = sorted({c.vcpus for c in configs})
        for n in counts:
            label = BASELINE if len(counts) == 1 else f"{BASELINE};vcpus={n}"
            plan.append((label, replace(exp.base, policy="none", vcpus=n)))
    elif exp.baseline not in labels:
        raise ConfigError(f"baseline cell {exp.baseline!r} is not in the sweep")
    plan += list(zip(labels, configs))
    traces = _TraceCache(exp)
    rows = []
    for label, cfg in plan:
        sim = Simulator(cfg, debug_events=exp.debug_events)
        st = sim.run(traces.get(cfg))
        if log:
            print(f"{label}: {st.records} records, {st.cycles} cycles", file=log)
        rows.append(_row(label, cfg, st))
        if exp.debug_events and events is not None:
            events.append(f"# cell {label}\n" + sim.log.text())
    if exp.baseline == BASELINE:
        base = {r["vcpus"]: r for r in rows[:len(plan) - len(cells)]}
    else:
        named = next(r for r in rows if r["cell"] == exp.baseline)
        base = {r["vcpus"]: named for r in rows}
    for r in rows:
        b = base[r["vcpus"]]
        r["norm_runtime"] = round(r["cycles"] / b["cycles"], 6) if b["cycles"] else 0.0
        r["norm_energy"] = round(r["energy_total"] / b["energy_total"], 6) if b["energy_total"] else 0.0
    return rows


def to_csv(rows: Sequence[Dict[str, object]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in CSV_COLUMNS})
    return buf.getvalue()


@dataclass
class FigureSpec:
    kind: str            # "bar" (grouped) or "scatter"
    x: str
    y: str
    group: Optional[str] = None
    title: str = ""
    filename: str = "figure.png"


def default_figures(rows) -> List[FigureSpec]:
    return [
        FigureSpec("bar", "cell", "norm_runtime", "mode", "Runtime normalized to no-hbm", "runtime.png"),
        FigureSpec("scatter", "norm_runtime", "norm_energy", "mode", "Runtime vs energy", "energy.png"),
        FigureSpec("bar", "cell", "invalidations_per_remap", "mode", "Invalidations per remap",
                   "invalidations.png"),
    ]


def plot(rows: Sequence[Dict[str, object]], spec: FigureSpec, out_dir: str) -> str:
    if not rows:
        raise ValueError("cannot plot an empty table")
    cols = [spec.x, spec.y] + ([spec.group] if spec.group else [])
    if any(not c for c in cols):
        raise ValueError("figure needs non-empty x and y columns")
    for c in cols:
        if c not in rows[0]:
            raise ValueError(f"unknown column {c!r}")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4), dpi=100)
    groups = list(dict.fromkeys(str(r[spec.group]) for r in rows)) if spec.group else [None]
    if spec.kind == "bar":
        xs = list(dict.fromkeys(str(r[spec.x]) for r in rows))
        width = 0.8 / len(groups)
        for gi, g in enumerate(groups):
            vals = {str(r[spec.x]): float(r[spec.y]) for r in rows
                    if g is None or str(r[spec.group]) == g}
            pos = [i + gi * width for i, x in enumerate(xs) if x in vals]
            ax.bar(pos, [vals[x] for x in xs if x in vals], width, label=g)
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(xs))])
        ax.set_xticklabels(xs, rotation=30, ha="right", fontsize=7)
    elif spec.kind == "scatter":
        for g in groups:
            sel = [r for r in rows if g is None or str(r[spec.group]) == g]
            ax.scatter([float(r[spec.x]) for r in sel], [float(r[spec.y]) for r in sel], label=g)
    else:
        raise ValueError(f"unknown figure kind {spec.kind!r}")
    ax.set_xlabel(spec.x)
    ax.set_ylabel(spec.y)
    if spec.title:
        ax.set_title(spec.title)
    if spec.group:
        ax.legend(fontsize=7)
    fig.tight_layout()
    path = os.path.join(out_dir, spec.filename)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def write_outputs(exp: Experiment, rows, events: Sequence[str] = ()) -> List[str]:
    os.makedirs(exp.out, exist_ok=True)
    written = []
    path = os.path.join(exp.out, "results.csv")
    with open(path, "w") as f:
        f.write(to_csv(rows))
    written.append(path)
    if exp.debug_events:
        path = os.path.join(exp.out, "events.log")
        with open(path, "w") as f:
            f.write("".join(events))
        written.append(path)
    if exp.emit_plots:
        for spec in default_figures(rows):
            written.append(plot(rows, spec, exp.out))
    return written


def read_config(path: str) -> Dict[str, str]:
    try:
        with open(path) as f:
            return parse_kv(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transcoh",
                                description="Translation-coherence simulator for virtualized two-level memory.")
    p.add_argument("--config", help="key=value file; any flag below may appear as a key")
    p.add_argument("--trace", help="trace file (text or binary); generated from workload.* keys if omitted")
    p.add_argument("--mode", help="sw, hatric, tlb-only, ideal (comma list to sweep)")
    p.add_argument("--vcpus", help="vCPUs per VM (comma list to sweep)")
    p.add_argument("--cotag-bytes", help="co-tag width 1, 2 or 3 (comma list to sweep)")
    p.add_argument("--tstruct-mult", help="translation structure size multiplier 1, 2 or 4")
    p.add_argument("--policy", help="lru[,daemon][,prefetch], fifo[,...] or none; '|' separates sweep values")
    p.add_argument("--seed", help="simulation and workload seed")
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--emit-plots", action="store_true", default=None)
    p.add_argument("--debug-events", action="store_true", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any other config key, e.g. workload.records=100000 or fast_bytes=128M")
    p.add_argument("--save-trace", metavar="PATH", help="also write the generated trace here")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = read_config(args.config) if args.config else {}
        for kv in args.set:
            settings.update(parse_kv(kv))
        for key in ("trace", "mode", "vcpus", "cotag_bytes", "tstruct_mult", "policy", "seed", "out"):
            v = getattr(args, key)
            if v is not None:
                settings[key] = v
        for key in ("emit_plots", "debug_events"):
            if getattr(args, key):
                settings[key] = "true"
        exp = build_experiment(settings)
        if args.save_trace:
            tracemod.write(args.save_trace, _TraceCache(exp).get(exp.base))
        events: List[str] = []
        rows = run_experiment(exp, log=sys.stderr, events=events)
        for path in write_outputs(exp, rows, events):
            print(path)
    except (ConfigError, TraceError, ValueError) as e:
        print(f"transcoh: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
