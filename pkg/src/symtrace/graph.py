"""Symbolic tensor graphs.

A graph pairs a table of symbolic tensors with a list of operation nodes.
Tensor shapes are tuples of :class:`~symtrace.symbols.DimExpr`, so a graph
describes *every* problem size at once; binding the symbols to integers is
deferred to the concretization pass.  Placement is carried separately by each
tensor's :class:`~symtrace.dist.Distribution`.

Invariants maintained here:

* every tensor has at most one producing node (enforced at ``add_node`` time);
* the graph is acyclic (``topo_order`` raises :class:`CycleError` otherwise);
* node ids are assigned sequentially in creation order, so two runs that
  build the same graph assign identical ids and ``topo_order`` is
  deterministic (ties broken by id).

Node kinds
----------

``Einsum``
    Contraction described by a spec string such as ``"bm,mn->bn"``.  The
    arrow part may be omitted (``"bsd,d"``); the output is then taken to have
    the first operand's indices, which makes the spec a broadcast multiply.
``Elementwise``
    Anything that maps/combines tensors element by element (``add``,
    ``gelu``, ``softmax``, ...).  Pure data-movement functions (``transpose``,
    ``reshape``...) use the same node kind but report category ``Others``.
``PScan``
    Parallel prefix scan along one axis (state-space models).  Costed as a
    logarithmic-depth tree of multiply-adds.
``SliceOp``
    Local narrowing of one axis to the caller's shard — the zero-traffic
    step a replicated-to-sharded transition needs.
``Fused``
    A region executed as one kernel (e.g. flash attention).  Member nodes
    keep their own ids but are not scheduled individually, and tensors
    interior to the region are never materialized.
``CommNode``
    A collective or point-to-point transfer.  ``symbol`` names the parallel
    axis whose group communicates; ``dim`` is the tensor axis being gathered
    or scattered (``src_dim`` additionally for all-to-all); ``peer``/``tag``
    are filled in for send/recv once ranks exist.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .dist import Distribution
from .errors import (
    CycleError,
    InvalidSpecError,
    RankMismatchError,
    ShapeConflictError,
    UndefinedTensorError,
)
from .symbols import DimExpr, Symbol

# --- tensor roles ---

WEIGHT = "weight"
ACTIVATION = "activation"
GRADIENT = "gradient"
OPT_STATE = "optimizer-state"
INPUT = "input"
OUTPUT = "output"

ROLES = (WEIGHT, ACTIVATION, GRADIENT, OPT_STATE, INPUT, OUTPUT)

# --- operation categories ---

GEMM = "GeMM"
ATTN = "Attn"
ELEMENTWISE = "ElementWise"
OTHERS = "Others"

#: elementwise functions that only move data; they cost no flops and are
#: reported under the ``Others`` category.
MOVEMENT_FNS = frozenset(
    {"transpose", "reshape", "permute", "identity", "shift", "concat",
     "split", "narrow", "pad"}
)

#: default flop cost per output element; anything absent costs 1.
ELEMENTWISE_FLOPS: Dict[str, int] = {
    "add": 1,
    "sub": 1,
    "mul": 1,
    "div": 1,
    "residual": 1,
    "scale": 1,
    "dropout": 1,
    "relu": 1,
    "softmax": 5,
    "rmsnorm": 6,
    "layernorm": 6,
    "gelu": 8,
    "silu": 8,
    "swiglu": 9,
    "sigmoid": 4,
    "exp": 4,
    "topk": 2,
}


def elementwise_flops(fn: str, overrides: Optional[Dict[str, int]] = None) -> int:
    if overrides and fn in overrides:
        return overrides[fn]
    if fn in MOVEMENT_FNS:
        return 0
    return ELEMENTWISE_FLOPS.get(fn, 1)


@dataclass(frozen=True)
class SymTensor:
    """A named symbolic tensor: logical shape + placement + bookkeeping."""

    name: str
    dims: Tuple[DimExpr, ...]
    dist: Distribution = field(default_factory=Distribution.replicated)
    role: str = ACTIVATION
    dtype_bytes: int = 2
    #: False for tensors that never occupy memory (one-hot encodings the
    #: compiler reads as index lookups, dead gradients, fused-region interiors).
    materialized: bool = True

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidSpecError(f"unknown tensor role {self.role!r}")
        self.dist.check()

    @property
    def rank(self) -> int:
        return len(self.dims)

    def with_dist(self, dist: Distribution) -> "SymTensor":
        return replace(self, dist=dist)

    def with_dims(self, dims: Sequence[DimExpr]) -> "SymTensor":
        return replace(self, dims=tuple(dims))

    def annotate(self) -> str:
        """Render ``name[dims-with-sharding]`` the way templates write it."""
        return f"{self.name}[{self.dist.annotate([str(d) for d in self.dims])}]"


# --- einsum specs ---


@dataclass(frozen=True)
class EinsumSpec:
    """Index spec of a contraction, e.g. inputs ('bm', 'mn'), output 'bn'."""

    inputs: Tuple[str, ...]
    output: str

    @staticmethod
    def parse(text: str) -> "EinsumSpec":
        text = text.replace(" ", "")
        if "->" in text:
            lhs, _, out = text.partition("->")
        else:
            # Arrow-free form: the output carries the first operand's indices,
            # making the spec a broadcast multiply against that operand.
            lhs, out = text, text.split(",")[0]
        ins = tuple(lhs.split(","))
        if not all(ins) or any(not part.isalpha() for part in ins + (out,) if part):
            raise InvalidSpecError(f"malformed einsum spec {text!r}")
        seen = set(c for part in ins for c in part)
        for c in out:
            if c not in seen:
                raise InvalidSpecError(
                    f"einsum spec {text!r}: output index {c!r} appears in no input"
                )
        return EinsumSpec(ins, out)

    def __str__(self):
        return ",".join(self.inputs) + "->" + self.output

    @property
    def indices(self) -> Tuple[str, ...]:
        """All distinct indices, in first-appearance order."""
        out: List[str] = []
        for part in self.inputs + (self.output,):
            for c in part:
                if c not in out:
                    out.append(c)
        return tuple(out)

    @property
    def contracted(self) -> Tuple[str, ...]:
        return tuple(c for c in self.indices if c not in self.output)

    def infer_dims(self, operands: Sequence[Sequence[DimExpr]],
                   where: str = "") -> Tuple[Dict[str, DimExpr], Tuple[DimExpr, ...]]:
        """Unify operand shapes against the spec.

        Returns the index -> extent binding and the output shape.  Raises
        RankMismatchError when an operand's rank disagrees with its index
        string and ShapeConflictError when one index is bound to two
        different extents.
        """
        if len(operands) != len(self.inputs):
            raise RankMismatchError(
                f"{where}einsum {self} takes {len(self.inputs)} operands, "
                f"got {len(operands)}"
            )
        bind: Dict[str, DimExpr] = {}
        for pos, (spec, dims) in enumerate(zip(self.inputs, operands)):
            if len(spec) != len(dims):
                raise RankMismatchError(
                    f"{where}operand {pos} of einsum {self} has rank "
                    f"{len(dims)}, spec {spec!r} wants {len(spec)}"
                )
            for c, d in zip(spec, dims):
                if c in bind and bind[c] != d:
                    raise ShapeConflictError(
                        f"{where}index {c!r} of einsum {self} bound to both "
                        f"{bind[c]} and {d}"
                    )
                bind.setdefault(c, d)
        return bind, tuple(bind[c] for c in self.output)

    def backward(self, wrt: int) -> "EinsumSpec":
        """Spec of the gradient w.r.t. operand ``wrt``.

        Swap the differentiated operand with the output: the gradient is a
        contraction of the output gradient with the remaining operands.
        """
        ins = (self.output,) + tuple(
            s for i, s in enumerate(self.inputs) if i != wrt
        )
        return EinsumSpec(ins, self.inputs[wrt])


def infer_einsum_dist(spec: EinsumSpec, dists: Sequence[Distribution],
                      where: str = "") -> Distribution:
    """Placement of an einsum's output given its operands' placements.

    Each output index inherits the sharding of that index in the operands.
    An operand that leaves the index unsharded is compatible with any
    sharding of it — the kernel reads the replicated copy in slices — but
    two operands sharding one index differently conflict.  A contracted
    index sharded anywhere makes the output a partial sum over those
    symbols, as does any operand that is already partial.
    """
    index_shards: Dict[str, Tuple[Symbol, ...]] = {}
    partial: set = set()
    for pos, (ispec, dist) in enumerate(zip(spec.inputs, dists)):
        partial |= set(dist.partial_sums)
        for dim, c in enumerate(ispec):
            shards = dist.shards_of_dim(dim)
            if not shards:
                index_shards.setdefault(c, ())
            elif index_shards.get(c):
                if index_shards[c] != shards:
                    raise ShapeConflictError(
                        f"{where}index {c!r} sharded as "
                        f"{index_shards[c]} and {shards} by different operands"
                    )
            else:
                index_shards[c] = shards
    for c in spec.contracted:
        partial |= set(index_shards.get(c, ()))
    dim_shards = {
        dim: index_shards[c]
        for dim, c in enumerate(spec.output)
        if index_shards.get(c)
    }
    return Distribution.make(dim_shards, partial)


# --- nodes ---


class OpNode:
    """Base class for graph nodes; subclasses add their own attributes.

    ``phase`` ("fwd" / "bwd" / "recompute" / "opt") and ``region`` (an
    assembler tag such as ``"layer3"`` or ``"head"``) drive recompute
    rewriting and pipeline partitioning; both default to forward/untagged.
    """

    kind = "Op"

    def __init__(self, id: int, out: str, ins: Sequence[str]):
        self.id = int(id)
        self.out = out
        self.ins = tuple(ins)
        self.phase = "fwd"
        self.region: Optional[str] = None
        #: for a backward node, the id of the forward node it differentiates
        #: (sharding rules follow the forward assignment through it)
        self.src: Optional[int] = None
        #: microbatch index once the graph is expanded; None for per-step
        #: work (weight updates, gradient synchronization)
        self.mb: Optional[int] = None
        #: estimated seconds once a cost model has run; communication
        #: nodes stay None — their timing belongs to downstream tools
        self.est_time: Optional[float] = None

    @property
    def category(self) -> str:
        return OTHERS

    def args_text(self) -> str:
        return ""

    def __repr__(self):
        attr = self.args_text()
        attr = f"[{attr}]" if attr else ""
        return f"#{self.id} {self.out} = {self.kind}{attr}({', '.join(self.ins)})"


class Einsum(OpNode):
    kind = "einsum"

    def __init__(self, id, out, ins, spec: EinsumSpec,
                 flop_subset: Optional[frozenset] = None):
        super().__init__(id, out, ins)
        self.spec = spec
        #: when set, only these indices enter the flop product (used for
        #: contractions over indicator tensors, where the contraction is
        #: really a lookup and the full index product over-counts).
        self.flop_subset = flop_subset

    @property
    def category(self) -> str:
        # Matrix-multiply-like work contracts at least one index and
        # produces at least a matrix.  An einsum with no summed index is a
        # broadcast product (a norm's gain), and one reducing to a vector
        # or scalar (a gain gradient, a dot product) is vector work, not
        # a GeMM; both are tallied as elementwise.
        if self.spec.contracted and len(self.spec.output) >= 2:
            return GEMM
        return ELEMENTWISE

    def args_text(self) -> str:
        return str(self.spec)


class Elementwise(OpNode):
    kind = "elementwise"

    def __init__(self, id, out, ins, fn: str, params: Tuple = ()):
        super().__init__(id, out, ins)
        self.fn = fn
        #: function-specific constants (an axis, a permutation, a narrow
        #: window, a symbolic scale factor) — see the numeric registry.
        self.params = tuple(params)

    @property
    def category(self) -> str:
        return OTHERS if self.fn in MOVEMENT_FNS else ELEMENTWISE

    def args_text(self) -> str:
        return self.fn


class PScan(OpNode):
    kind = "pscan"

    def __init__(self, id, out, ins, scan_dim: int, reverse: bool = False):
        super().__init__(id, out, ins)
        self.scan_dim = int(scan_dim)
        self.reverse = bool(reverse)

    @property
    def category(self) -> str:
        return OTHERS

    def args_text(self) -> str:
        return f"dim={self.scan_dim}" + (",rev" if self.reverse else "")


class SliceOp(OpNode):
    kind = "Slice"

    def __init__(self, id, out, ins, dim: int, symbol: Symbol):
        super().__init__(id, out, ins)
        self.dim = int(dim)
        self.symbol = symbol

    @property
    def category(self) -> str:
        return OTHERS

    def args_text(self) -> str:
        return f"{self.symbol.name}@{self.dim}"


class Fused(OpNode):
    kind = "fused"

    def __init__(self, id, out, ins, members: Sequence[OpNode], category: str):
        super().__init__(id, out, ins)
        self.members = tuple(members)
        self._category = category

    @property
    def category(self) -> str:
        return self._category

    @property
    def member_ids(self) -> Tuple[int, ...]:
        return tuple(m.id for m in self.members)

    def args_text(self) -> str:
        return self._category


class CommNode(OpNode):
    """A communication step; ``kind`` is set per instance."""

    def __init__(self, id, out, ins, kind: str, symbol: Optional[Symbol],
                 dim: Optional[int] = None, src_dim: Optional[int] = None,
                 peer: Optional[int] = None, tag: Optional[int] = None):
        super().__init__(id, out, ins)
        self.kind = kind
        self.symbol = symbol
        self.dim = dim
        self.src_dim = src_dim
        self.peer = peer
        self.tag = tag

    @property
    def category(self) -> str:
        return self.kind

    def args_text(self) -> str:
        return self.symbol.name if self.symbol is not None else ""


COMM_KINDS = ("AllReduce", "AllGather", "ReduceScatter", "AllToAll",
              "Send", "Recv")
COLLECTIVES = COMM_KINDS[:4]


# --- the graph ---


class STGraph:
    """Tensor table + node list with single-producer and DAG invariants."""

    def __init__(self):
        self.tensors: Dict[str, SymTensor] = {}
        self.nodes: List[OpNode] = []
        self._by_id: Dict[int, OpNode] = {}
        self.producer: Dict[str, int] = {}
        self.outputs: List[str] = []
        self._next_id = 0

    # - construction -

    def fresh_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def add_tensor(self, t: SymTensor, allow_existing: bool = False) -> SymTensor:
        old = self.tensors.get(t.name)
        if old is not None:
            if allow_existing:
                return old
            raise InvalidSpecError(f"tensor {t.name!r} declared twice")
        self.tensors[t.name] = t
        return t

    def set_tensor(self, t: SymTensor) -> None:
        """Replace a tensor's record (same name) — used by sharding passes."""
        if t.name not in self.tensors:
            raise UndefinedTensorError(t.name)
        self.tensors[t.name] = t

    def add_node(self, node: OpNode, register_members: bool = True) -> OpNode:
        for name in node.ins + (node.out,):
            if name not in self.tensors:
                raise UndefinedTensorError(
                    f"node #{node.id} references unknown tensor {name!r}"
                )
        if node.out in self.producer:
            raise InvalidSpecError(
                f"tensor {node.out!r} produced twice "
                f"(nodes #{self.producer[node.out]} and #{node.id})"
            )
        self.nodes.append(node)
        self._by_id[node.id] = node
        self.producer[node.out] = node.id
        if register_members and isinstance(node, Fused):
            for m in node.members:
                self._by_id[m.id] = m
        return node

    def node(self, nid: int) -> OpNode:
        return self._by_id[nid]

    def tensor(self, name: str) -> SymTensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise UndefinedTensorError(name) from None

    # - queries -

    def consumers(self, name: str) -> List[OpNode]:
        return [n for n in self.nodes if name in n.ins]

    def edges(self) -> List[Tuple[Optional[int], int, str]]:
        """(producer node id or None, consumer node id, tensor name)."""
        out = []
        for n in self.nodes:
            for name in n.ins:
                out.append((self.producer.get(name), n.id, name))
        return out

    def graph_inputs(self) -> List[str]:
        consumed = {name for n in self.nodes for name in n.ins}
        return [name for name in self.tensors
                if name in consumed and name not in self.producer]

    # - validation -

    def validate(self) -> None:
        for n in self.nodes:
            for name in n.ins + (n.out,):
                if name not in self.tensors:
                    raise UndefinedTensorError(name)
        for name in self.outputs:
            if name not in self.tensors:
                raise UndefinedTensorError(f"declared output {name!r}")
        self.topo_order()

    def topo_order(self) -> List[OpNode]:
        """Deterministic topological order (Kahn's algorithm, id tie-break)."""
        remaining_deps: Dict[int, int] = {}
        waiters: Dict[int, List[int]] = {}
        for n in self.nodes:
            deps = {self.producer[t] for t in n.ins if t in self.producer}
            deps.discard(n.id)
            remaining_deps[n.id] = len(deps)
            for d in deps:
                waiters.setdefault(d, []).append(n.id)
        import heapq

        ready = [nid for nid, cnt in remaining_deps.items() if cnt == 0]
        heapq.heapify(ready)
        order: List[OpNode] = []
        while ready:
            nid = heapq.heappop(ready)
            order.append(self._by_id[nid])
            for w in waiters.get(nid, ()):
                remaining_deps[w] -= 1
                if remaining_deps[w] == 0:
                    heapq.heappush(ready, w)
        if len(order) != len(self.nodes):
            stuck = sorted(nid for nid, cnt in remaining_deps.items() if cnt > 0)
            cycle = self._find_cycle(stuck)
            raise CycleError(
                f"graph contains a cycle through nodes {cycle}", cycle
            )
        return order

    def _find_cycle(self, stuck: List[int]) -> List[int]:
        stuck_set = set(stuck)
        succ: Dict[int, List[int]] = {nid: [] for nid in stuck}
        for n in self.nodes:
            if n.id not in stuck_set:
                continue
            for t in n.ins:
                p = self.producer.get(t)
                if p in stuck_set:
                    succ[p].append(n.id)
        seen: Dict[int, int] = {}
        path: List[int] = []
        node = stuck[0]
        while node not in seen:
            seen[node] = len(path)
            path.append(node)
            nxt = succ.get(node) or []
            if not nxt:
                break
            node = nxt[0]
        return path[seen.get(node, 0):]

    # - convenience builders (allocate ids from this graph's counter) -

    def einsum(self, out: str, spec: str, ins: Sequence[str],
               flop_subset: Optional[Iterable[str]] = None) -> Einsum:
        node = Einsum(self.fresh_id(), out, ins, EinsumSpec.parse(spec),
                      frozenset(flop_subset) if flop_subset else None)
        return self.add_node(node)

    def elementwise(self, out: str, fn: str, ins: Sequence[str],
                    params: Tuple = ()) -> Elementwise:
        return self.add_node(Elementwise(self.fresh_id(), out, ins, fn,
                                         params))

    def describe(self) -> str:
        lines = [f"{len(self.tensors)} tensors, {len(self.nodes)} nodes"]
        for n in self.nodes:
            lines.append(repr(n))
        return "\n".join(lines)
