"""Per-rank execution traces and run configuration files.

A trace is one JSON-lines file per rank: a header line, then tensor
declarations and node records in schedule (topological) order.  The
format is self-describing and designed for three consumers at once —
replay simulators, spreadsheet-style analysis, and this package's own
reader, which reconstructs per-rank statistics without the graph.

Layout decisions that downstream tools rely on:

* Node records reference earlier records only (``data_deps`` point
  backward within the same file); cross-rank ordering is carried purely
  by matching Send/Recv ``tag`` values, never by record ids.
* Ranks that run the same pipeline stage share every record except
  communication-group membership and point-to-point peers, so the writer
  renders each stage's line stream once and patches the rank-specific
  fields — 1024-rank jobs cost little more than their distinct stages.
* JSON numbers are kept within the 2**53 range every parser can trust;
  anything larger is written as a decimal string, flagged in the header.
* Reruns of the same configuration produce byte-identical files: keys
  are sorted, floats use shortest round-trip form, and nothing
  time-, path-, or machine-dependent enters a record.
* Each rank file has exactly one writer; concurrent generation must
  partition ranks, never share a file.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import yaml

from .concrete import Calibration, ConcreteGraph, StatsReport
from .errors import (
    CorruptRecordError,
    InvalidSpecError,
    VersionMismatchError,
)
from .graph import CommNode, OpNode, STGraph, GRADIENT, OPT_STATE, WEIGHT
from .models import ModelSpec, TrainingSpec
from .partition import (
    PipelinePlan,
    comm_group,
    pipeline_peer,
    rank_coords,
    stage_schedule,
)
from .shard import ParallelConfig, ShardingPlan
from .symbols import SymbolTable

__all__ = [
    "RankTrace",
    "RunConfig",
    "TensorRecord",
    "TraceManifest",
    "TraceRecord",
    "TRACE_VERSION",
    "inject_profile",
    "load_calibration",
    "load_config",
    "read_trace",
    "record_signature",
    "save_config",
    "stats_from_trace",
    "write_trace",
]

TRACE_VERSION = 1

#: largest integer stored as a JSON number; beyond this, decimal strings
MAX_SAFE_INT = 2 ** 53

#: environment variables that override configured output locations
ENV_TRACE_DIR = "SYMTRACE_TRACE_DIR"
ENV_REPORT = "SYMTRACE_REPORT"


# --- run configuration -----------------------------------------------------

def _section(cls, data, name: str):
    if not isinstance(data, Mapping):
        raise InvalidSpecError(f"config section {name!r} must be a mapping")
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise InvalidSpecError(
            f"unknown keys in config section {name!r}: {sorted(unknown)}")
    kw = dict(data)
    if "mesh_order" in kw and kw["mesh_order"] is not None:
        kw["mesh_order"] = tuple(kw["mesh_order"])
    return cls(**kw)


@dataclass(frozen=True)
class RunConfig:
    """Everything one generation run needs, in file form.

    ``bindings`` overrides symbol values by name after the model's own
    are applied (an experiment knob, e.g. a shorter sequence).  Output
    paths may be overridden per run by the environment variables
    ``SYMTRACE_TRACE_DIR`` and ``SYMTRACE_REPORT`` at load time.
    """

    model: ModelSpec = field(default_factory=ModelSpec)
    parallel: ParallelConfig = field(default_factory=ParallelConfig)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    bindings: Mapping[str, int] = field(default_factory=dict)
    trace_dir: str = "traces"
    report: str = "report.json"
    calibration: Optional[Calibration] = None

    @staticmethod
    def from_dict(d: Mapping) -> "RunConfig":
        if not isinstance(d, Mapping):
            raise InvalidSpecError(
                f"run config must be a mapping, got {type(d).__name__}")
        known = {"model", "parallel", "training", "bindings", "outputs",
                 "calibration"}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpecError(
                f"unknown top-level config keys: {sorted(unknown)}")
        outs = d.get("outputs", {})
        if not isinstance(outs, Mapping):
            raise InvalidSpecError("config section 'outputs' must be a mapping")
        bad = set(outs) - {"trace_dir", "report"}
        if bad:
            raise InvalidSpecError(
                f"unknown keys in config section 'outputs': {sorted(bad)}")
        bindings = d.get("bindings", {})
        if not isinstance(bindings, Mapping):
            raise InvalidSpecError("config section 'bindings' must be a "
                                   "mapping of symbol name to integer")
        calib = d.get("calibration")
        return RunConfig(
            model=_section(ModelSpec, d.get("model", {}), "model"),
            parallel=_section(ParallelConfig, d.get("parallel", {}),
                              "parallel"),
            training=_section(TrainingSpec, d.get("training", {}),
                              "training"),
            bindings=dict(bindings),
            trace_dir=outs.get("trace_dir", "traces"),
            report=outs.get("report", "report.json"),
            calibration=Calibration.from_dict(calib)
            if calib is not None else None,
        )

    def to_dict(self) -> Dict:
        d = {
            "model": asdict(self.model),
            "parallel": asdict(self.parallel),
            "training": asdict(self.training),
            "bindings": dict(self.bindings),
            "outputs": {"trace_dir": self.trace_dir, "report": self.report},
        }
        d["parallel"]["mesh_order"] = list(self.parallel.mesh_order)
        if self.calibration is not None:
            d["calibration"] = self.calibration.to_dict()
        return d

    def workload_hash(self) -> str:
        """Digest of everything that shapes the traces (not output paths)."""
        d = self.to_dict()
        d.pop("outputs")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace_outputs(self, trace_dir: Optional[str] = None,
                        report: Optional[str] = None) -> "RunConfig":
        return RunConfig(model=self.model, parallel=self.parallel,
                         training=self.training, bindings=self.bindings,
                         trace_dir=trace_dir or self.trace_dir,
                         report=report or self.report,
                         calibration=self.calibration)


def load_config(path: str, apply_env: bool = True) -> RunConfig:
    with open(path) as f:
        data = yaml.safe_load(f)
    cfg = RunConfig.from_dict(data or {})
    if apply_env:
        cfg = cfg.replace_outputs(trace_dir=os.environ.get(ENV_TRACE_DIR),
                                  report=os.environ.get(ENV_REPORT))
    return cfg


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)


def load_calibration(path: str) -> Calibration:
    with open(path) as f:
        return Calibration.from_dict(yaml.safe_load(f) or {})


# --- wire encoding ---------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def _enc(v: int):
    return v if -MAX_SAFE_INT < v < MAX_SAFE_INT else str(v)


def _dec(v) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, str)):
        raise ValueError(f"expected an integer field, got {v!r}")
    return int(v)


def _node_type(node: OpNode) -> str:
    if isinstance(node, CommNode):
        if node.kind == "Send":
            return "COMM_SEND"
        if node.kind == "Recv":
            return "COMM_RECV"
        return "COMM_COLL"
    return "COMP"


def _tensor_rec(g: STGraph, view: ConcreteGraph, name: str) -> Dict:
    t = g.tensor(name)
    local = view.mem_bytes(name)
    dedup = local
    if local:
        for i in range(len(t.dims)):
            dedup *= t.dist.shard_degree(i, view.degrees)
    return {"tensor": name, "role": t.role,
            "materialized": bool(t.materialized),
            "bytes": _enc(local), "dedup_bytes": _enc(dedup)}


def _node_rec(g: STGraph, view: ConcreteGraph, node: OpNode,
              axis_of_sym: Mapping, emitted: set) -> Dict:
    deps: List[int] = []
    for t in node.ins:
        pid = g.producer.get(t)
        if pid is not None and pid in emitted and pid not in deps:
            deps.append(pid)
    attrs: Dict = {"phase": node.phase, "mb": node.mb, "region": node.region}
    if isinstance(node, CommNode):
        attrs["comm"] = node.kind
        attrs["comm_bytes"] = _enc(view.comm_bytes(node))
        if node.kind in ("Send", "Recv"):
            attrs["peer_stage"] = node.peer
            attrs["tag"] = node.tag
        else:
            attrs["group_axis"] = axis_of_sym[node.symbol]
    else:
        attrs["op"] = node.kind
        detail = node.args_text()
        if detail:
            attrs["detail"] = detail
    return {
        "id": node.id,
        "name": node.out,
        "node_type": _node_type(node),
        "category": node.category,
        "ins": list(node.ins),
        "shapes": {"ins": [list(view.local_shape(t)) for t in node.ins],
                   "out": list(view.local_shape(node.out))},
        "flops": _enc(view.node_flops(node)),
        "est_time": node.est_time,
        "data_deps": deps,
        "ctrl_deps": [],
        "attrs": attrs,
    }


# --- writing ---------------------------------------------------------------

@dataclass
class TraceManifest:
    """What one generation run produced."""

    paths: Dict[int, str] = field(default_factory=dict)
    records: int = 0
    bytes: int = 0
    config_hash: str = ""


def _stage_entries(g: STGraph, view: ConcreteGraph, sched: Sequence[OpNode],
                   axis_of_sym: Mapping) -> Tuple[List, int]:
    """Render one stage's record stream, rank-specific fields left open.

    Entries are ``("line", text)`` for rank-invariant records and
    ``("coll"|"p2p", record)`` for those needing per-rank patching.
    """
    entries: List = []
    declared: set = set()
    emitted: set = set()
    count = 0
    for node in sched:
        for t in node.ins + (node.out,):
            if t not in declared:
                declared.add(t)
                entries.append(("line", _dumps(_tensor_rec(g, view, t))))
                count += 1
        rec = _node_rec(g, view, node, axis_of_sym, emitted)
        if isinstance(node, CommNode):
            entries.append(("p2p" if node.kind in ("Send", "Recv")
                            else "coll", rec))
        else:
            entries.append(("line", _dumps(rec)))
        emitted.add(node.id)
        count += 1
    return entries, count


def write_trace(out_dir: str, g: STGraph, plan: ShardingPlan,
                pplan: PipelinePlan, table: SymbolTable, config: RunConfig,
                ranks: Optional[Sequence[int]] = None,
                view: Optional[ConcreteGraph] = None) -> TraceManifest:
    """Write one trace file per rank under ``out_dir``.

    ``ranks`` restricts output to a subset (each rank's file has exactly
    one writer, so concurrent callers partition the rank space).
    """
    cfg = plan.config
    view = view or ConcreteGraph(g, table)
    axis_of_sym = {s: a for a, s in plan.syms.items()}
    all_ranks = list(ranks) if ranks is not None else list(range(cfg.ranks))
    chash = config.workload_hash()
    os.makedirs(out_dir, exist_ok=True)

    by_stage: Dict[int, List[int]] = {}
    for r in all_ranks:
        by_stage.setdefault(rank_coords(r, cfg)["pp"], []).append(r)

    manifest = TraceManifest(config_hash=chash)
    for stage in sorted(by_stage):
        sched = stage_schedule(g, pplan, stage)
        entries, per_rank = _stage_entries(g, view, sched, axis_of_sym)
        for r in sorted(by_stage[stage]):
            groups: Dict[str, List[int]] = {}
            peers: Dict[int, int] = {}
            path = os.path.join(out_dir, f"rank-{r:05d}.jsonl")
            with open(path, "w") as f:
                f.write(_dumps({"version": TRACE_VERSION, "rank": r,
                                "stage": stage, "ranks": cfg.ranks,
                                "config_hash": chash,
                                "big_ints": "decimal-string"}))
                for entry in entries:
                    if entry[0] == "line":
                        f.write(entry[1])
                        continue
                    rec = dict(entry[1])
                    attrs = dict(rec["attrs"])
                    if entry[0] == "coll":
                        axis = attrs["group_axis"]
                        if axis not in groups:
                            groups[axis] = comm_group(r, axis, cfg)
                        attrs["group"] = groups[axis]
                    else:
                        ps = attrs["peer_stage"]
                        if ps not in peers:
                            peers[ps] = pipeline_peer(r, ps, cfg)
                        attrs["peer"] = peers[ps]
                    rec["attrs"] = attrs
                    f.write(_dumps(rec))
                manifest.bytes += f.tell()
            manifest.paths[r] = path
            manifest.records += per_rank + 1
    return manifest


# --- reading ---------------------------------------------------------------

@dataclass
class TensorRecord:
    name: str
    role: str
    materialized: bool
    bytes: int
    dedup_bytes: int


@dataclass
class TraceRecord:
    id: int
    name: str
    node_type: str
    category: str
    ins: Tuple[str, ...]
    shapes: Dict
    flops: int
    est_time: Optional[float]
    data_deps: Tuple[int, ...]
    ctrl_deps: Tuple[int, ...]
    attrs: Dict


@dataclass
class RankTrace:
    header: Dict
    tensors: Dict[str, TensorRecord]
    nodes: List[TraceRecord]

    @property
    def rank(self) -> int:
        return self.header["rank"]


_NODE_KEYS = ("id", "name", "node_type", "category", "ins", "shapes",
              "flops", "est_time", "data_deps", "ctrl_deps", "attrs")
_NODE_TYPES = ("COMP", "COMM_COLL", "COMM_SEND", "COMM_RECV")


def read_trace(path: str) -> RankTrace:
    """Parse one rank file back into records.

    Raises :class:`VersionMismatchError` for a file written by a
    different format version and :class:`CorruptRecordError`, naming the
    1-based line number, for anything malformed.
    """
    tensors: Dict[str, TensorRecord] = {}
    nodes: List[TraceRecord] = []
    header: Optional[Dict] = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                raise CorruptRecordError(f"{path} line {lineno}: empty line")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorruptRecordError(
                    f"{path} line {lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise CorruptRecordError(
                    f"{path} line {lineno}: record is not an object")
            if lineno == 1:
                if "version" not in obj or "rank" not in obj \
                        or "config_hash" not in obj:
                    raise CorruptRecordError(
                        f"{path} line 1: missing header fields")
                if obj["version"] != TRACE_VERSION:
                    raise VersionMismatchError(
                        f"{path}: format version {obj['version']!r}, "
                        f"reader supports {TRACE_VERSION}")
                header = obj
                continue
            try:
                if "tensor" in obj:
                    rec = TensorRecord(
                        name=obj["tensor"], role=obj["role"],
                        materialized=bool(obj["materialized"]),
                        bytes=_dec(obj["bytes"]),
                        dedup_bytes=_dec(obj["dedup_bytes"]))
                    tensors[rec.name] = rec
                    continue
                missing = [k for k in _NODE_KEYS if k not in obj]
                if missing:
                    raise ValueError(f"missing fields {missing}")
                if obj["node_type"] not in _NODE_TYPES:
                    raise ValueError(f"unknown node_type {obj['node_type']!r}")
                nodes.append(TraceRecord(
                    id=_dec(obj["id"]), name=obj["name"],
                    node_type=obj["node_type"], category=obj["category"],
                    ins=tuple(obj["ins"]), shapes=obj["shapes"],
                    flops=_dec(obj["flops"]), est_time=obj["est_time"],
                    data_deps=tuple(_dec(d) for d in obj["data_deps"]),
                    ctrl_deps=tuple(_dec(d) for d in obj["ctrl_deps"]),
                    attrs=obj["attrs"]))
            except (KeyError, ValueError, TypeError) as e:
                raise CorruptRecordError(
                    f"{path} line {lineno}: {e}") from e
    if header is None:
        raise CorruptRecordError(f"{path}: empty file, no header")
    return RankTrace(header=header, tensors=tensors, nodes=nodes)


def stats_from_trace(trace: RankTrace) -> StatsReport:
    """Rebuild the per-rank statistics purely from trace records.

    Mirrors the live-graph census: weights and optimizer state are
    counted when resident (read but never produced in this rank's
    stream); gradient state is what the update-step nodes consume.
    """
    r = StatsReport()
    produced = {n.name for n in trace.nodes}
    weight_names: set = set()
    opt_names: set = set()
    grad_names: set = set()
    for n in trace.nodes:
        if n.node_type == "COMP":
            r.op_counts[n.category] = r.op_counts.get(n.category, 0) + 1
            r.flops += n.flops
            r.flops_by_category[n.category] = \
                r.flops_by_category.get(n.category, 0) + n.flops
            if n.attrs.get("phase") == "opt":
                for t in n.ins:
                    rec = trace.tensors.get(t)
                    if rec is not None and rec.role == GRADIENT:
                        grad_names.add(t)
        else:
            kind = n.attrs["comm"]
            r.comm_counts[kind] = r.comm_counts.get(kind, 0) + 1
            r.comm_mb[kind] = (r.comm_mb.get(kind, 0.0)
                               + _dec(n.attrs["comm_bytes"]) / 1e6)
        for t in n.ins + (n.name,):
            if t in produced:
                continue
            rec = trace.tensors[t]
            if rec.role == WEIGHT and rec.materialized:
                weight_names.add(t)
            elif rec.role == OPT_STATE and rec.materialized:
                opt_names.add(t)
    for t in sorted(weight_names):
        r.param_bytes += trace.tensors[t].bytes
        r.param_bytes_dedup += trace.tensors[t].dedup_bytes
    r.opt_bytes = sum(trace.tensors[t].bytes for t in sorted(opt_names))
    r.grad_bytes = sum(trace.tensors[t].bytes for t in sorted(grad_names))
    return r


# --- measured-profile injection -------------------------------------------

def record_signature(rec: TraceRecord) -> str:
    """The shape key measured profiles are matched on."""
    def one(shape) -> str:
        return "x".join(str(s) for s in shape) if shape else "1"
    return (",".join(one(s) for s in rec.shapes["ins"])
            + "->" + one(rec.shapes["out"]))


def inject_profile(trace: RankTrace,
                   profile: Mapping[str, Mapping[str, float]]) -> float:
    """Overwrite ``est_time`` on nodes a measured profile covers.

    ``profile`` maps operator category -> shape signature -> seconds,
    the same layout as a calibration lookup table.  Returns the hit
    rate: covered compute nodes over all compute nodes.  An empty
    profile changes nothing and scores zero.
    """
    total = hits = 0
    for n in trace.nodes:
        if n.node_type != "COMP":
            continue
        total += 1
        table = profile.get(n.category)
        if table is None:
            continue
        sec = table.get(record_signature(n))
        if sec is not None:
            n.est_time = float(sec)
            hits += 1
    return hits / total if total else 0.0
