"""Numeric instantiation: local shapes, flops, payload bytes, memory, time.

Everything upstream of this module is symbolic.  Here the symbol table
binds every dimension to an integer and the placement divides it down to
per-rank extents, turning a scheduled graph into numbers:

* operator flop counts (contractions from their index space, elementwise
  work per output element, scans with their log-depth factor),
* collective payload sizes (the local input shard, for every kind),
* a liveness-replay memory timeline over a schedule (allocate at the
  producer, free after the last consumer; weights and optimizer state
  persist), and
* a compute-time estimate: measured lookup-table entries keyed by
  operator category and shape signature where available, a calibrated
  roofline everywhere else.  Communication nodes are deliberately left
  untimed — network behavior belongs to downstream simulators that
  consume the emitted traces.

Counting conventions, load-bearing and used consistently everywhere:
flops for a contraction are ``2 * product of distinct index extents``
over the *local* index space; payload bytes for a communication node are
the local shard bytes of its input (not algorithm-expanded ring
traffic); megabytes are decimal (1e6 bytes); point-to-point transfers
are attributed to the sender, and a receive carries the same payload as
its matching send.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .errors import (
    MalformedCalibrationError,
    NonIntegralDimError,
    UnboundSymbolError,
)
from .graph import (
    CommNode,
    Einsum,
    Elementwise,
    Fused,
    OpNode,
    PScan,
    STGraph,
    GRADIENT,
    OPT_STATE,
    WEIGHT,
    elementwise_flops,
)
from .symbols import DimExpr, Symbol, SymbolTable

__all__ = [
    "Calibration",
    "ConcreteGraph",
    "MemoryReport",
    "StatsReport",
    "TimeReport",
    "analyze_memory",
    "critical_path_seconds",
    "estimate_time",
    "node_seconds",
    "shape_signature",
    "summarize",
]


# --- evaluated view --------------------------------------------------------

class ConcreteGraph:
    """A graph seen through concrete symbol bindings.

    Wraps shape evaluation with caches so repeated queries over large
    expanded graphs stay cheap: dimension expressions are hashable and
    shared between clones, so the extent cache hits almost always.
    """

    def __init__(self, g: STGraph, table: SymbolTable):
        self.g = g
        self.table = table
        #: degree of every parallel symbol any placement mentions
        self.degrees: Dict[Symbol, int] = {}
        for t in g.tensors.values():
            for s in t.dist.symbols():
                if s in self.degrees:
                    continue
                v = table.get(s)
                if v is None:
                    raise UnboundSymbolError(
                        f"parallel symbol {s.name} shards {t.name} but has "
                        "no bound degree")
                self.degrees[s] = v
        self._extent: Dict[DimExpr, int] = {}
        self._shape: Dict[str, Tuple[int, ...]] = {}

    # -- shapes --

    def extent(self, dim: DimExpr, where: str = "") -> int:
        got = self._extent.get(dim)
        if got is None:
            got = self._extent[dim] = dim.evaluate(self.table, where)
        return got

    def local_shape(self, name: str) -> Tuple[int, ...]:
        got = self._shape.get(name)
        if got is not None:
            return got
        t = self.g.tensor(name)
        shape = []
        for i, d in enumerate(t.dims):
            n = self.extent(d, name)
            k = t.dist.shard_degree(i, self.degrees)
            if n % k:
                raise NonIntegralDimError(
                    f"{name} dim {i} has extent {n}, not divisible by its "
                    f"shard degree {k}")
            shape.append(n // k)
        got = self._shape[name] = tuple(shape)
        return got

    def elems(self, name: str) -> int:
        return math.prod(self.local_shape(name))

    def mem_bytes(self, name: str) -> int:
        """Bytes the tensor occupies locally; zero if never materialized."""
        t = self.g.tensor(name)
        if not t.materialized:
            return 0
        return self.elems(name) * t.dtype_bytes

    # -- per-node work --

    def node_flops(self, node: OpNode) -> int:
        if isinstance(node, Fused):
            return sum(self.node_flops(m) for m in node.members)
        if isinstance(node, Einsum):
            return self._einsum_flops(node)
        if isinstance(node, PScan):
            return self._pscan_flops(node)
        if isinstance(node, Elementwise):
            return elementwise_flops(node.fn) * self.elems(node.out)
        return 0  # communication and slicing do no math

    def _einsum_flops(self, node: Einsum) -> int:
        spec = node.spec
        letter_dims, _ = spec.infer_dims(
            [self.g.tensor(i).dims for i in node.ins], where=node.out)
        # which parallel symbols divide each index: union over every
        # operand and output position that binds it (consistent after
        # collective insertion)
        sharded: Dict[str, set] = {}
        for letters, name in zip(spec.inputs + (spec.output,),
                                 node.ins + (node.out,)):
            dist = self.g.tensor(name).dist
            for p, letter in enumerate(letters):
                syms = dist.shards_of_dim(p)
                if syms:
                    sharded.setdefault(letter, set()).update(syms)
        letters = (node.flop_subset if node.flop_subset is not None
                   else letter_dims.keys())
        total = 2
        for letter in sorted(letters):
            n = self.extent(letter_dims[letter], node.out)
            k = math.prod(self.degrees[s] for s in sharded.get(letter, ()))
            if n % k:
                raise NonIntegralDimError(
                    f"index {letter} of {node.out} has extent {n}, not "
                    f"divisible by its shard degree {k}")
            total *= n // k
        return total

    def _pscan_flops(self, node: PScan) -> int:
        shape = self.local_shape(node.out)
        span = shape[node.scan_dim]
        depth = max(1, math.ceil(math.log2(span))) if span > 1 else 1
        return 2 * math.prod(shape) * depth

    def comm_bytes(self, node: OpNode) -> int:
        """Local payload a rank contributes to a communication node."""
        if not isinstance(node, CommNode):
            return 0
        return sum(self.elems(i) * self.g.tensor(i).dtype_bytes
                   for i in node.ins)

    def moved_bytes(self, node: OpNode) -> int:
        """Memory traffic of a compute node: materialized ins plus out."""
        total = self.mem_bytes(node.out)
        for i in node.ins:
            total += self.mem_bytes(i)
        return total


# --- memory ----------------------------------------------------------------

@dataclass
class MemoryReport:
    """Liveness timeline over one rank's schedule.

    ``births``/``deaths`` give each produced tensor's allocation index
    and the index after which it is freed (``len(schedule)`` for tensors
    that survive to the end).  ``events`` is the full alloc/free stream
    when requested.
    """

    peak_bytes: int
    persistent_bytes: int
    final_bytes: int
    peak_index: int                   # schedule position where peak occurs
    persistent_by_role: Dict[str, int] = field(default_factory=dict)
    births: Dict[str, int] = field(default_factory=dict)
    deaths: Dict[str, int] = field(default_factory=dict)
    events: Optional[List[Tuple[int, str, str, int]]] = None


def analyze_memory(g: STGraph, table: SymbolTable,
                   nodes: Sequence[OpNode],
                   view: Optional[ConcreteGraph] = None,
                   record_events: bool = False) -> MemoryReport:
    """Replay a schedule and track live bytes.

    Tensors the schedule reads but never produces (weights, optimizer
    state, inputs) are resident for the whole step.  A produced tensor is
    allocated when its producer runs and freed right after its last
    consumer in the schedule; never-consumed products (outputs, final
    states) stay live to the end.
    """
    view = view or ConcreteGraph(g, table)
    produced = {n.out for n in nodes}
    last_use: Dict[str, int] = {}
    for i, n in enumerate(nodes):
        for t in n.ins:
            last_use[t] = i

    persistent = 0
    by_role: Dict[str, int] = {}
    seen = set()
    for n in nodes:
        for t in n.ins + (n.out,):
            if t in seen or t in produced:
                continue
            seen.add(t)
            b = view.mem_bytes(t)
            if b:
                persistent += b
                role = g.tensor(t).role
                by_role[role] = by_role.get(role, 0) + b

    events: Optional[List[Tuple[int, str, str, int]]] = \
        [] if record_events else None
    births: Dict[str, int] = {}
    deaths: Dict[str, int] = {}
    end = len(nodes)
    live = persistent
    peak = persistent
    peak_at = -1
    for i, n in enumerate(nodes):
        b = view.mem_bytes(n.out)
        births[n.out] = i
        deaths[n.out] = last_use.get(n.out, end)
        live += b
        if events is not None and b:
            events.append((i, "alloc", n.out, b))
        if live > peak:
            peak, peak_at = live, i
        for t in set(n.ins):
            if t in produced and last_use[t] == i:
                fb = view.mem_bytes(t)
                live -= fb
                if events is not None and fb:
                    events.append((i, "free", t, fb))
    return MemoryReport(peak_bytes=peak, persistent_bytes=persistent,
                        final_bytes=live, peak_index=peak_at,
                        persistent_by_role=by_role, births=births,
                        deaths=deaths, events=events)


# --- time ------------------------------------------------------------------

def shape_signature(view: ConcreteGraph, node: OpNode) -> str:
    """Local input/output shapes as a lookup key, e.g. ``8x64,64x32->8x32``."""
    def one(name: str) -> str:
        shape = view.local_shape(name)
        return "x".join(map(str, shape)) if shape else "1"
    return ",".join(one(i) for i in node.ins) + "->" + one(node.out)


@dataclass(frozen=True)
class Calibration:
    """Compute-cost model: measured lookup table over a roofline.

    ``lut`` maps operator category -> shape signature -> measured
    seconds; a hit overrides the roofline exactly.  ``efficiency`` maps
    category -> achievable fraction of ``peak_flops`` (absent: 1.0).
    Communication nodes are never timed by this model.
    """

    peak_flops: float = 312e12        # flop/s ceiling
    mem_bandwidth: float = 1.6e12     # byte/s ceiling
    efficiency: Mapping[str, float] = field(default_factory=dict)
    lut: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("peak_flops", "mem_bandwidth"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) \
                    or not v > 0:
                raise MalformedCalibrationError(
                    f"{name} must be a positive number, got {v!r}")
        for cat, eff in self.efficiency.items():
            if not isinstance(cat, str) or not isinstance(eff, (int, float)) \
                    or isinstance(eff, bool) or not 0 < eff <= 1:
                raise MalformedCalibrationError(
                    f"efficiency[{cat!r}] = {eff!r}: expected a fraction "
                    "in (0, 1]")
        for cat, table in self.lut.items():
            if not isinstance(cat, str) or not isinstance(table, Mapping):
                raise MalformedCalibrationError(
                    f"lut[{cat!r}] must map shape signatures to seconds")
            for sig, sec in table.items():
                if not isinstance(sig, str) or sec is True or sec is False \
                        or not isinstance(sec, (int, float)) or sec < 0:
                    raise MalformedCalibrationError(
                        f"lut[{cat!r}][{sig!r}] = {sec!r}: expected "
                        "non-negative seconds")

    @staticmethod
    def from_dict(d: Mapping) -> "Calibration":
        if not isinstance(d, Mapping):
            raise MalformedCalibrationError(
                f"calibration must be a mapping, got {type(d).__name__}")
        known = {"peak_flops", "mem_bandwidth", "efficiency", "lut"}
        unknown = set(d) - known
        if unknown:
            raise MalformedCalibrationError(
                f"unknown calibration keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("efficiency", "lut"):
            if key in kw and not isinstance(kw[key], Mapping):
                raise MalformedCalibrationError(f"{key} must be a mapping")
        if "lut" in kw:
            kw["lut"] = {c: dict(t) if isinstance(t, Mapping) else t
                         for c, t in kw["lut"].items()}
        return Calibration(**kw)

    def to_dict(self) -> Dict:
        out: Dict = {"peak_flops": self.peak_flops,
                     "mem_bandwidth": self.mem_bandwidth}
        if self.efficiency:
            out["efficiency"] = dict(self.efficiency)
        if self.lut:
            out["lut"] = {c: dict(t) for c, t in self.lut.items()}
        return out


def node_seconds(view: ConcreteGraph, node: OpNode,
                 calib: Calibration) -> Optional[float]:
    """Estimated seconds for a compute node; None for communication."""
    if isinstance(node, CommNode):
        return None
    table = calib.lut.get(node.category)
    if table is not None:
        hit = table.get(shape_signature(view, node))
        if hit is not None:
            return float(hit)
    eff = calib.efficiency.get(node.category, 1.0)
    math_s = view.node_flops(node) / (eff * calib.peak_flops)
    mem_s = view.moved_bytes(node) / calib.mem_bandwidth
    return max(math_s, mem_s)


@dataclass
class TimeReport:
    """Serialized compute time of one rank's schedule.

    Communication nodes are untimed and excluded; ``lut_hits`` counts
    nodes whose cost came from a measured entry rather than the
    roofline.
    """

    total_seconds: float
    by_category: Dict[str, float] = field(default_factory=dict)
    nodes_timed: int = 0
    lut_hits: int = 0


def estimate_time(g: STGraph, table: SymbolTable, nodes: Sequence[OpNode],
                  calib: Optional[Calibration] = None,
                  view: Optional[ConcreteGraph] = None) -> TimeReport:
    """Annotate ``est_time`` on every compute node and total it up."""
    calib = calib or Calibration()
    view = view or ConcreteGraph(g, table)
    total = 0.0
    by_cat: Dict[str, float] = {}
    timed = hits = 0
    for n in nodes:
        s = node_seconds(view, n, calib)
        n.est_time = s
        if s is None:
            continue
        timed += 1
        lut = calib.lut.get(n.category)
        if lut is not None and shape_signature(view, n) in lut:
            hits += 1
        total += s
        by_cat[n.category] = by_cat.get(n.category, 0.0) + s
    return TimeReport(total_seconds=total, by_category=by_cat,
                      nodes_timed=timed, lut_hits=hits)


def critical_path_seconds(g: STGraph, table: SymbolTable,
                          calib: Optional[Calibration] = None,
                          view: Optional[ConcreteGraph] = None) -> float:
    """Longest compute chain through the whole graph, in seconds.

    A lower bound on step time with unlimited overlap: dependency edges
    pass through communication nodes (including cross-stage send and
    receive pairs, so pipeline depth shows up) but only compute nodes
    contribute time.
    """
    calib = calib or Calibration()
    view = view or ConcreteGraph(g, table)
    finish: Dict[str, float] = {}
    best = 0.0
    for n in g.topo_order():
        start = 0.0
        for t in n.ins:
            got = finish.get(t)
            if got is not None and got > start:
                start = got
        end = start + (node_seconds(view, n, calib) or 0.0)
        finish[n.out] = end
        if end > best:
            best = end
    return best


# --- census ----------------------------------------------------------------

@dataclass
class StatsReport:
    """Counts, payloads, flops, and state sizes for one rank's schedule."""

    op_counts: Dict[str, int] = field(default_factory=dict)
    comm_counts: Dict[str, int] = field(default_factory=dict)
    comm_mb: Dict[str, float] = field(default_factory=dict)
    flops: int = 0
    flops_by_category: Dict[str, int] = field(default_factory=dict)
    param_bytes: int = 0           # local shard bytes of weights
    param_bytes_dedup: int = 0     # shard-degree-folded (logical share)
    grad_bytes: int = 0            # largest-footprint gradient state
    opt_bytes: int = 0

    def comm_mb_total(self) -> float:
        return sum(self.comm_mb.values())

    def table_counts(self) -> Dict[str, int]:
        """Communication counts with Send/Recv folded into one P2P column.

        Point-to-point transfers are attributed to the sender, so P2P is
        the Send count; receives are the matching halves and would double
        it.
        """
        out = {k: v for k, v in self.comm_counts.items()
               if k not in ("Send", "Recv")}
        if "Send" in self.comm_counts:
            out["P2P"] = self.comm_counts["Send"]
        return out

    def table_volumes_mb(self) -> Dict[str, float]:
        """Payload megabytes with all-to-all decomposed into Send/Recv.

        Runtimes implement all-to-all as point-to-point sends and
        receives, so its payload reports in both directions' columns;
        its count keeps a separate column in :meth:`table_counts`.
        """
        out = {k: v for k, v in self.comm_mb.items() if k != "AllToAll"}
        a2a = self.comm_mb.get("AllToAll", 0.0)
        if a2a:
            out["Send"] = out.get("Send", 0.0) + a2a
            out["Recv"] = out.get("Recv", 0.0) + a2a
        return out


def summarize(g: STGraph, table: SymbolTable, nodes: Sequence[OpNode],
              view: Optional[ConcreteGraph] = None) -> StatsReport:
    view = view or ConcreteGraph(g, table)
    r = StatsReport()
    produced = {n.out for n in nodes}
    weight_names: set = set()
    opt_names: set = set()
    for n in nodes:
        if isinstance(n, CommNode):
            r.comm_counts[n.kind] = r.comm_counts.get(n.kind, 0) + 1
            r.comm_mb[n.kind] = (r.comm_mb.get(n.kind, 0.0)
                                 + view.comm_bytes(n) / 1e6)
        else:
            cat = n.category
            r.op_counts[cat] = r.op_counts.get(cat, 0) + 1
            f = view.node_flops(n)
            r.flops += f
            r.flops_by_category[cat] = r.flops_by_category.get(cat, 0) + f
        for t in n.ins + (n.out,):
            if t in produced:
                continue  # gathered copies live transiently, not resident
            st = g.tensor(t)
            if st.role == WEIGHT and st.materialized:
                weight_names.add(t)
            elif st.role == OPT_STATE and st.materialized:
                opt_names.add(t)

    for t in sorted(weight_names):
        st = g.tensor(t)
        local = view.mem_bytes(t)
        r.param_bytes += local
        r.param_bytes_dedup += local * math.prod(
            st.dist.shard_degree(i, view.degrees)
            for i in range(len(st.dims)))
    r.opt_bytes = sum(view.mem_bytes(t) for t in sorted(opt_names))
    # gradient state at the step boundary: the accumulated (and, where
    # needed, synchronized) gradient each update step reads
    grad_names = {t for n in nodes
                  if n.phase == "opt" and not isinstance(n, CommNode)
                  for t in n.ins if g.tensor(t).role == GRADIENT}
    r.grad_bytes = sum(view.mem_bytes(t) for t in sorted(grad_names))
    return r
