"""Parallelization strategies: placement authoring and collective insertion.

``apply_strategy`` decides, for every tensor and operator slot in a
differentiated model graph, where data lives on the device mesh: each
einsum gets an assignment of its index letters to parallel symbols, each
elementwise/scan/fused node a placement rule, and every tensor a stored
distribution.  ``insert_collectives`` then compares what each consumer
slot requires against what the producer left behind and lets the layout
matcher synthesize the conversion chain — AllReduce, AllGather,
ReduceScatter, AllToAll, or a free local slice — wherever they disagree.

Nothing in the comm structure is scripted per strategy; the familiar
patterns all fall out of placement alone:

* tensor parallelism with sequence sharding: gathers at block entry,
  reduce-scatters at block exit, re-gathers for backward weight
  gradients — 6 AllGathers + 4 ReduceScatters per layer per microbatch;
  without sequence sharding the same mismatches resolve to 4 AllReduces;
* fully sharded weights: a per-use AllGather of each weight in forward
  and again in backward, and a per-microbatch ReduceScatter of each
  weight gradient;
* expert parallelism: the dispatch/combine AllToAll quartet per MoE
  layer, from trading a batch shard for an expert shard and back;
* context parallelism: sequence-gathers into the fused attention region
  and a partial-sum reduce-scatter of its input gradient.

Backward nodes inherit the forward assignment through their ``src`` link,
so one authored forward placement induces the whole training pattern.
Data-parallel gradient synchronization is *not* inserted here: gradients
accumulate across microbatches and the per-step reduction is placed by
the pipeline expansion.  The exception is fully-sharded mode, whose
per-microbatch gradient reduce-scatters belong to the backward stream and
are inserted like any other mismatch.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .dist import Distribution
from .errors import InvalidSpecError, RuleGapError
from .graph import (
    ATTN,
    CommNode,
    Einsum,
    Elementwise,
    Fused,
    GRADIENT,
    OpNode,
    PScan,
    STGraph,
    SliceOp,
    SymTensor,
    WEIGHT,
)
from .matcher import ALL_TO_ALL, SLICE, apply_step, match_collective
from .models import BuiltModel
from .symbols import DimExpr, Symbol

#: matmuls whose weight splits along its output-feature dimension
COLUMN_SUFFIXES = (".qkv", ".up", ".gate", ".xin", ".gatelin")
#: matmuls whose weight splits along its contracted dimension
ROW_SUFFIXES = (".out", ".down", ".mix", ".proj")

#: dedup scope for inserted conversions: recomputation shares the
#: backward stream's gathers, the two forward/backward streams never share
PHASE_GROUP = {"fwd": "fwd", "recompute": "bwd", "bwd": "bwd", "opt": "opt"}

MESH_AXES = ("pp", "dp", "ep", "cp", "tp")


@dataclass(frozen=True)
class ParallelConfig:
    """Degrees for each mesh axis plus strategy toggles.

    ``ranks = pp * dp * ep * cp * tp``.  ``sp`` shards the sequence
    dimension of stored activations across the tensor-parallel group;
    ``fsdp`` shards every weight and its optimizer state across the
    data-parallel group.  Expert parallelism is its own mesh axis: the
    batch splits across ``dp * ep`` while only expert weights split
    across ``ep``.
    """

    dp: int = 1
    tp: int = 1
    pp: int = 1
    cp: int = 1
    ep: int = 1
    sp: bool = False
    fsdp: bool = False
    mesh_order: Tuple[str, ...] = MESH_AXES

    def __post_init__(self):
        for axis in MESH_AXES:
            if getattr(self, axis) < 1:
                raise InvalidSpecError(f"{axis} degree must be >= 1")
        if sorted(self.mesh_order) != sorted(MESH_AXES):
            raise InvalidSpecError(
                f"mesh_order must permute {MESH_AXES}, got {self.mesh_order}")
        if self.sp and self.tp == 1:
            raise InvalidSpecError("sequence sharding requires tp > 1")
        if self.fsdp and self.dp == 1:
            raise InvalidSpecError("fully sharded weights require dp > 1")

    @property
    def ranks(self) -> int:
        return self.dp * self.tp * self.pp * self.cp * self.ep

    def degrees(self) -> Dict[str, int]:
        return {"pp": self.pp, "dp": self.dp, "ep": self.ep,
                "cp": self.cp, "tp": self.tp}

    def dist_axes(self) -> List[str]:
        """Axes that shard tensors (pipeline splits the graph instead)."""
        deg = self.degrees()
        return [a for a in self.mesh_order if a != "pp" and deg[a] > 1]

    @property
    def data_width(self) -> int:
        """Ways the global batch is split: dp * ep."""
        return self.dp * self.ep


@dataclass
class ShardingPlan:
    config: ParallelConfig
    syms: Dict[str, Symbol]          # active axis name -> parallel symbol
    mesh: List[Symbol]               # active symbols in mesh order
    out_dist: Dict[int, Distribution] = field(default_factory=dict)
    #: per node, per input slot, the required distribution; None means the
    #: slot accepts anything (gradient slots whose synchronization is
    #: deferred to the optimizer-step boundary)
    in_req: Dict[int, Tuple[Optional[Distribution], ...]] = field(
        default_factory=dict)


def _suffix_of(name: str, suffixes: Tuple[str, ...]) -> Optional[str]:
    for s in suffixes:
        if name.endswith(s):
            return s
    return None


class _Author:
    """Walks the graph once, assigning distributions and requirements."""

    def __init__(self, built: BuiltModel, cfg: ParallelConfig):
        self.g = built.graph
        self.cfg = cfg
        self.ax: Dict[str, Symbol] = {
            a: built.registry.declare_parallel(a) for a in cfg.dist_axes()}
        self.plan = ShardingPlan(
            config=cfg, syms=dict(self.ax),
            mesh=[self.ax[a] for a in cfg.mesh_order if a in self.ax])
        ms = built.syms
        self.B, self.S, self.E = ms["B"], ms["S"], ms["E"]
        if "cp" in self.ax and built.model.block == "ssm":
            raise RuleGapError(
                "context parallelism would split the scan dimension of "
                "state-space layers; no rule covers the cross-chunk carry")

    # -- shard vocabulary ------------------------------------------------

    def batch_shards(self, expert_node: bool = False) -> List[Symbol]:
        out = []
        if "dp" in self.ax:
            out.append(self.ax["dp"])
        if "ep" in self.ax and not expert_node:
            out.append(self.ax["ep"])
        return out

    def seq_shards(self, at_matmul: bool = False) -> List[Symbol]:
        """Sequence shards: stored activations additionally carry the
        tensor-parallel shard when sequence sharding is on; matmul-like
        ops compute on the tensor-parallel-gathered sequence."""
        out = []
        if "cp" in self.ax:
            out.append(self.ax["cp"])
        if self.cfg.sp and "tp" in self.ax and not at_matmul:
            out.append(self.ax["tp"])
        return out

    def letter_class(self, dim: DimExpr) -> str:
        if dim.contains(self.B):
            return "batch"
        if dim.contains(self.S):
            return "seq"
        if dim.contains(self.E):
            return "expert"
        return "feature"

    def stored_activation(self, dims: Sequence[DimExpr]) -> Distribution:
        shards = {}
        for i, d in enumerate(dims):
            cls = self.letter_class(d)
            if cls == "batch":
                shards[i] = self.batch_shards()
            elif cls == "seq":
                shards[i] = self.seq_shards()
        return Distribution.make(shards, [])

    # -- einsums ---------------------------------------------------------

    def einsum_assignment(self, node: Einsum) -> Dict[str, List[Symbol]]:
        """Index letter -> shard symbols, from the node's role in a layer.

        Column/row matmuls are recognized by output-name suffix; the
        tensor-parallel letter is derived set-theoretically from which
        letters the weight operand shares with the output (column) or with
        the data operand (row).  Everything else gets the generic rule:
        batch and sequence letters follow the stored-activation layout,
        features stay whole.
        """
        g = self.g
        spec = node.spec
        name = node.out
        idx_dims, _ = spec.infer_dims(
            [g.tensor(t).dims for t in node.ins], where=name)
        expert_mm = ".moe." in name and bool(
            _suffix_of(name, (".up", ".mix")))
        col = _suffix_of(name, COLUMN_SUFFIXES)
        row = _suffix_of(name, ROW_SUFFIXES)
        matmul_like = bool(col or row or name.endswith(".disp"))

        asg: Dict[str, List[Symbol]] = {}
        for letter, dim in idx_dims.items():
            cls = self.letter_class(dim)
            if cls == "batch":
                asg[letter] = self.batch_shards(expert_node=expert_mm)
            elif cls == "seq":
                asg[letter] = self.seq_shards(at_matmul=matmul_like)
            elif cls == "expert" and expert_mm and "ep" in self.ax:
                asg[letter] = [self.ax["ep"]]
            else:
                asg[letter] = []

        tp = self.ax.get("tp")
        wk = self._weight_slot(node)
        if tp is not None and wk is not None and (col or row):
            w_letters = set(spec.inputs[wk])
            data_letters: set = set()
            for i in range(len(spec.inputs)):
                if i != wk:
                    data_letters |= set(spec.inputs[i])
            if col:
                chosen = (w_letters & set(spec.output)) - data_letters
            else:
                chosen = (w_letters & data_letters) - set(spec.output)
            for letter in sorted(chosen):
                if self.letter_class(idx_dims[letter]) == "feature":
                    asg[letter] = asg.get(letter, []) + [tp]
        return asg

    def _weight_slot(self, node: OpNode) -> Optional[int]:
        for k, t in enumerate(node.ins):
            if self.g.tensor(t).role == WEIGHT:
                return k
        return None

    def einsum_dists(self, node: Einsum, asg: Dict[str, List[Symbol]]
                     ) -> Tuple[Distribution, List[Distribution]]:
        spec = node.spec
        out_shards = {i: asg[letter]
                      for i, letter in enumerate(spec.output)
                      if asg.get(letter)}
        partial: List[Symbol] = []
        for letter in spec.contracted:
            for sym in asg.get(letter, ()):
                if sym not in partial:
                    partial.append(sym)
        out = Distribution.make(out_shards, partial)
        reqs = []
        for op_letters in spec.inputs:
            shards = {i: asg[letter]
                      for i, letter in enumerate(op_letters)
                      if asg.get(letter)}
            reqs.append(Distribution.make(shards, []))
        return out, reqs

    # -- weights ---------------------------------------------------------

    def weight_dist(self, t: SymTensor) -> Distribution:
        name = t.name
        shards: Dict[int, List[Symbol]] = {}
        tp = self.ax.get("tp")
        ep = self.ax.get("ep")
        is_expert = ".moe." in name and name.endswith((".w_up", ".w_down"))
        if is_expert and ep is not None:
            shards[0] = [ep]
        if tp is not None:
            if is_expert and name.endswith(".w_up"):
                shards[t.rank - 1] = [tp]
            elif is_expert and name.endswith(".w_down"):
                shards[1] = [tp]
            elif name.endswith((".w_qkv", ".w_up", ".w_gate", ".w_in")):
                shards[t.rank - 1] = [tp]
            elif name.endswith((".w_out", ".w_down")):
                shards[0] = [tp]
        if self.cfg.fsdp:
            shards[0] = shards.get(0, []) + [self.ax["dp"]]
        return Distribution.make(shards, [])


def apply_strategy(built: BuiltModel, cfg: ParallelConfig) -> ShardingPlan:
    """Author stored distributions and per-slot requirements in place."""
    au = _Author(built, cfg)
    g = built.graph
    plan = au.plan

    order = g.topo_order()
    by_id = {n.id: n for n in order}

    # pure fused-region interiors keep replicated distributions (their
    # dims are rewritten to local extents at the end instead)
    interior = set()
    for n in order:
        if isinstance(n, Fused):
            ext = set(n.ins) | {n.out}
            for m in n.members:
                for t in (m.out,) + tuple(m.ins):
                    if t not in ext:
                        interior.add(t)

    for name, t in list(g.tensors.items()):
        if name in g.producer or name in interior:
            continue
        if t.role == WEIGHT:
            d = au.weight_dist(t)
        elif t.role == "optimizer-state":
            continue  # set when its update node is authored
        elif name.endswith((".headmap", ".seed")):
            d = Distribution.replicated()
        else:
            d = au.stored_activation(t.dims)
        g.set_tensor(t.with_dist(d))

    assignments: Dict[int, Dict[str, List[Symbol]]] = {}
    for node in order:
        src = by_id.get(node.src) if node.src is not None else None
        if isinstance(node, Einsum):
            if src is not None and src.id in assignments:
                asg = assignments[src.id]
            else:
                asg = au.einsum_assignment(node)
            assignments[node.id] = asg
            out, reqs = au.einsum_dists(node, asg)
            plan.out_dist[node.id] = out
            plan.in_req[node.id] = tuple(reqs)
        elif isinstance(node, Fused):
            _author_fused(au, node, src, plan)
        elif isinstance(node, (Elementwise, PScan)):
            _author_pointwise(au, node, plan)
        elif isinstance(node, (CommNode, SliceOp)):
            d = g.tensor(node.ins[0]).dist
            plan.out_dist[node.id] = d
            plan.in_req[node.id] = (d,)
        else:
            raise RuleGapError(
                f"no placement rule for node kind {node.kind!r} "
                f"(#{node.id} -> {node.out})")
        out_t = g.tensor(node.out)
        g.set_tensor(out_t.with_dist(plan.out_dist[node.id]))

    _localize_attention_interiors(au)
    return plan


def _author_pointwise(au: _Author, node: OpNode, plan: ShardingPlan) -> None:
    g = au.g
    if node.phase == "opt":
        _author_opt(au, node, plan)
        return
    fn = getattr(node, "fn", "")
    if fn == "residual":
        # the junction where a layer's output must land back in the
        # stored layout; this is what forces the block-exit reduction
        d = au.stored_activation(g.tensor(node.out).dims)
        plan.out_dist[node.id] = d
        plan.in_req[node.id] = tuple(d for _ in node.ins)
        return
    if fn == "cross_entropy":
        reqs = tuple(g.tensor(t).dist for t in node.ins)
        partial = sorted({s for d in reqs for s in d.symbols()},
                         key=lambda s: s.name)
        plan.out_dist[node.id] = Distribution.make({}, partial)
        plan.in_req[node.id] = reqs
        return
    # generic pointwise: output follows the first operand dimension by
    # dimension; gradient operands of matching rank must arrive the same
    # way, anything else is accepted where it already lives
    first = g.tensor(node.ins[0]).dist
    out_rank = g.tensor(node.out).rank
    shards = {i: list(sh) for i, sh in first.shard_map().items()
              if i < out_rank}
    plan.out_dist[node.id] = Distribution.make(shards, first.partial_sums)
    first_rank = g.tensor(node.ins[0]).rank
    reqs: List[Optional[Distribution]] = [first]
    for t in node.ins[1:]:
        tt = g.tensor(t)
        if tt.role == GRADIENT and tt.rank == first_rank:
            reqs.append(first)
        else:
            reqs.append(tt.dist)
    plan.in_req[node.id] = tuple(reqs)


def _weight_base(node: OpNode) -> str:
    out = node.out  # w.next | w.m.next | w.v.next
    for suffix in (".m.next", ".v.next", ".next"):
        if out.endswith(suffix):
            return out[:-len(suffix)]
    raise RuleGapError(f"optimizer node #{node.id} writes {out!r}")


def _author_opt(au: _Author, node: OpNode, plan: ShardingPlan) -> None:
    """Optimizer updates run in the weight's stored layout.

    Gradient slots require that same layout only in fully-sharded mode,
    where satisfying them inserts the per-microbatch reduce-scatter;
    otherwise they are left open for the step-boundary synchronization.
    """
    g = au.g
    wdist = g.tensor(_weight_base(node)).dist
    reqs: List[Optional[Distribution]] = []
    for t in node.ins:
        tt = g.tensor(t)
        if tt.role == GRADIENT:
            reqs.append(wdist if au.cfg.fsdp else None)
        else:
            g.set_tensor(tt.with_dist(wdist))
            reqs.append(wdist)
    plan.out_dist[node.id] = wdist
    plan.in_req[node.id] = tuple(reqs)


def _author_fused(au: _Author, node: Fused, src: Optional[OpNode],
                  plan: ShardingPlan) -> None:
    """Fused attention is opaque: authored boundary placements.

    The projected qkv arrives batch-sharded and head-sharded but with the
    sequence gathered (keys and values need every position); the region
    output is stored with the query sequence context-sharded.  The
    backward region emits its input gradient as a context-parallel
    partial sum, which the downstream requirement turns into a
    reduce-scatter.
    """
    if node.category != ATTN:
        raise RuleGapError(
            f"no placement rule for fused category {node.category!r}")
    tp = au.ax.get("tp")
    cp = au.ax.get("cp")

    def boundary(seq_shards: List[Symbol],
                 partial: List[Symbol]) -> Distribution:
        shards: Dict[int, List[Symbol]] = {0: au.batch_shards()}
        if seq_shards:
            shards[1] = seq_shards
        if tp is not None:
            shards[2] = [tp]
        return Distribution.make(shards, partial)

    qkv_req = boundary([], [])
    extras = tuple(Distribution.replicated() for _ in node.ins[1:])
    if node.phase != "bwd" or src is None:  # forward or recomputation
        plan.in_req[node.id] = (qkv_req,) + extras
        plan.out_dist[node.id] = boundary([cp] if cp else [], [])
    else:  # backward: ins = primal ins + dy
        dy_req = plan.out_dist[src.id]
        plan.in_req[node.id] = (qkv_req,) + extras[:-1] + (dy_req,)
        plan.out_dist[node.id] = boundary([], [cp] if cp else [])


#: fused attention member parts and the (axis, dim) pairs dividing them:
#: head-count dims split across tp, query-sequence dims across cp
_ATTN_LOCAL_RULES = {
    "q2": (("cp", 1), ("tp", 2)),
    "k2": (("tp", 2),),
    "v2": (("tp", 2),),
    "q": (("cp", 1), ("tp", 2)),
    "k": (("tp", 2),),
    "v": (("tp", 2),),
    "kx": (("tp", 2),),
    "vx": (("tp", 2),),
    "scores": (("tp", 1), ("cp", 2)),
    "scaled_scores": (("tp", 1), ("cp", 2)),
    "probs": (("tp", 1), ("cp", 2)),
    "ctx": (("cp", 1), ("tp", 2)),
    "att": (("cp", 1), ("tp", 2)),
}

_ATTN_PART_RE = re.compile(
    r"\.(q2|k2|v2|kx|vx|q|k|v|scores|scaled_scores|probs|ctx|att)(?=\.|$)")


def _localize_attention_interiors(au: _Author) -> None:
    """Divide fused-member dims so per-member flop/byte math is per-rank.

    Interior tensors stay replicated; their dimension expressions pick up
    the parallel divisors instead (head counts over tp, query sequence
    over cp).  Exterior tensors keep logical dims plus a real
    distribution, so they are skipped.
    """
    g = au.g
    tp = au.ax.get("tp")
    cp = au.ax.get("cp")
    if tp is None and cp is None:
        return
    fused = [n for n in g.nodes
             if isinstance(n, Fused) and n.category == ATTN]
    # a recompute clone shares its member list with the original node, so
    # gather every node's boundary tensors before rewriting anything
    exterior = set()
    for node in fused:
        exterior |= set(node.ins) | {node.out}
    done = set()
    for node in fused:
        for m in node.members:
            for name in (m.out,) + tuple(m.ins):
                if name in done or name in exterior or name not in g.tensors:
                    continue
                done.add(name)
                hit = _ATTN_PART_RE.search(name)
                if hit is None:
                    continue
                t = g.tensor(name)
                dims = list(t.dims)
                for axis, pos in _ATTN_LOCAL_RULES[hit.group(1)]:
                    sym = tp if axis == "tp" else cp
                    if sym is None or pos >= len(dims):
                        continue
                    dims[pos] = dims[pos].div_parallel(sym)
                g.set_tensor(t.with_dims(tuple(dims)))


@dataclass
class InsertReport:
    inserted: List[OpNode] = field(default_factory=list)
    reused: int = 0

    def by_kind(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for n in self.inserted:
            out[n.kind] = out.get(n.kind, 0) + 1
        return out


def find_mismatches(g: STGraph, plan: ShardingPlan
                    ) -> List[Tuple[OpNode, int, Distribution, Distribution]]:
    """(consumer, slot, have, want) for every slot needing conversion."""
    out = []
    for node in g.topo_order():
        reqs = plan.in_req.get(node.id)
        if not reqs:
            continue
        for k, t in enumerate(node.ins):
            want = reqs[k] if k < len(reqs) else None
            if want is None:
                continue
            have = g.tensor(t).dist
            if have != want:
                out.append((node, k, have, want))
    return out


def insert_collectives(g: STGraph, plan: ShardingPlan) -> InsertReport:
    """Materialize the conversion chain for every requirement mismatch.

    Chains are shared between consumers asking for the same tensor in the
    same layout within the same phase group (forward, or backward joined
    with recomputation); backward re-requests are deliberately distinct
    comms, because gathered temporaries do not survive from forward.
    """
    report = InsertReport()
    cache: Dict[Tuple[str, str, str], str] = {}
    for node in g.topo_order():
        reqs = plan.in_req.get(node.id)
        if not reqs:
            continue
        group = PHASE_GROUP.get(node.phase, node.phase)
        for k, t in enumerate(node.ins):
            want = reqs[k] if k < len(reqs) else None
            if want is None:
                continue
            have = g.tensor(t).dist
            if have == want:
                continue
            key = (t, str(want), group)
            got = cache.get(key)
            if got is None:
                got = _materialize_chain(g, plan, t, have, want, node, report)
                cache[key] = got
            else:
                report.reused += 1
            ins = list(node.ins)
            ins[k] = got
            node.ins = tuple(ins)
    return report


def _materialize_chain(g: STGraph, plan: ShardingPlan, tensor: str,
                       have: Distribution, want: Distribution,
                       consumer: OpNode, report: InsertReport) -> str:
    producer_id = g.producer.get(tensor)
    phase = consumer.phase
    if phase == "opt" and producer_id is not None:
        # the gradient's last hop (e.g. the fully-sharded reduce-scatter)
        # runs in the stream that produced it, once per microbatch
        phase = g.node(producer_id).phase
    base = g.tensor(tensor)
    cur_name, cur_dist = tensor, have
    for step in match_collective(have, want, plan.mesh):
        cur_dist = apply_step(cur_dist, step)
        nid = g.fresh_id()
        out_name = f"{tensor}.{step.kind.lower()}{nid}"
        g.add_tensor(SymTensor(out_name, base.dims, cur_dist, role=base.role,
                               dtype_bytes=base.dtype_bytes,
                               materialized=base.materialized))
        if step.kind == SLICE:
            n: OpNode = SliceOp(nid, out_name, (cur_name,), step.dim,
                                step.symbol)
        else:
            dim = step.dst_dim if step.kind == ALL_TO_ALL else step.dim
            n = CommNode(nid, out_name, (cur_name,), step.kind, step.symbol,
                         dim=dim, src_dim=step.src_dim)
        n.phase = phase
        n.region = consumer.region
        if n.region is None and producer_id is not None:
            n.region = g.node(producer_id).region
        g.add_node(n)
        report.inserted.append(n)
        cur_name = out_name
    return cur_name
