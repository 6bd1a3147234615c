"""Pipeline staging, microbatch expansion, and rank placement.

The sharded graph describes one microbatch on one data-parallel replica.
This module turns it into the full training step:

* ``plan_pipeline`` maps regions (``embed`` / ``layer{i}`` / ``head``) to
  contiguous, balanced pipeline stages;
* ``expand_microbatches`` replicates the forward/recompute/backward
  streams once per microbatch into a fresh graph, accumulates each weight
  gradient across microbatches, and appends the per-step gradient
  synchronization (an AllReduce chain over whatever partial-sum symbols
  the accumulated gradient still carries — none when the backward stream
  already reduce-scattered them, as in fully-sharded mode);
* ``connect_stages`` materializes a matched Send/Recv pair for every
  tensor that crosses a stage boundary, tagged so both ends agree;
* ``stage_schedule`` orders one stage's nodes for execution: every
  microbatch's forward, then the recompute+backward stream, then the
  optimizer — with cross-stage dependencies left to the trace consumer.

Rank arithmetic lives here too: ranks are mixed-radix coordinates over
the mesh axes in ``mesh_order`` (first axis slowest), so a collective
over one symbol runs in the group of ranks sharing every other
coordinate, and pipeline peers differ only in the ``pp`` coordinate.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .dist import Distribution
from .errors import (
    InvalidSpecError,
    TooManyStagesError,
    UnplacedNodeError,
)
from .graph import (
    CommNode,
    Elementwise,
    Fused,
    GRADIENT,
    OpNode,
    STGraph,
    SymTensor,
)
from .matcher import apply_step, match_collective
from .shard import ParallelConfig, ShardingPlan

#: Send/Recv tag bit layout (must match the trace format note):
#: bit 0 = direction (0 forward, 1 backward), bits 1..12 = microbatch,
#: bits 13..22 = boundary index (the lower of the two stages)
_TAG_MB_BITS = 12
_TAG_BOUNDARY_BITS = 10


def pack_tag(mb: int, boundary: int, backward: bool) -> int:
    if not 0 <= mb < (1 << _TAG_MB_BITS):
        raise InvalidSpecError(f"microbatch index {mb} exceeds tag field")
    if not 0 <= boundary < (1 << _TAG_BOUNDARY_BITS):
        raise InvalidSpecError(f"stage boundary {boundary} exceeds tag field")
    return (boundary << (_TAG_MB_BITS + 1)) | (mb << 1) | int(backward)


def unpack_tag(tag: int) -> Tuple[int, int, bool]:
    return ((tag >> 1) & ((1 << _TAG_MB_BITS) - 1),
            tag >> (_TAG_MB_BITS + 1),
            bool(tag & 1))


def region_of_weight(name: str) -> str:
    """Weight tensors are named for their region: L3.* lives in layer3."""
    head = name.split(".", 1)[0]
    if head.startswith("L") and head[1:].isdigit():
        return f"layer{head[1:]}"
    if head in ("embed", "head"):
        return head
    raise UnplacedNodeError(f"cannot place weight {name!r} in a region")


@dataclass
class PipelinePlan:
    pp: int
    stage_of_region: Dict[str, int]

    def stage_of(self, node: OpNode) -> int:
        region = node.region
        if region is None:
            raise UnplacedNodeError(
                f"node #{node.id} ({node.kind} -> {node.out}) has no region")
        stage = self.stage_of_region.get(region)
        if stage is None:
            raise UnplacedNodeError(
                f"region {region!r} of node #{node.id} is not in the plan")
        return stage


def plan_pipeline(layers: int, pp: int) -> PipelinePlan:
    """Contiguous balanced stages; embedding joins the first, head the last.

    Earlier stages take the remainder layers, so stage sizes differ by at
    most one.
    """
    if pp < 1:
        raise InvalidSpecError("pipeline degree must be >= 1")
    if pp > layers:
        raise TooManyStagesError(
            f"{pp} pipeline stages need at least {pp} layers, got {layers}")
    stages = {"embed": 0, "head": pp - 1}
    base, rem = divmod(layers, pp)
    layer = 0
    for s in range(pp):
        for _ in range(base + (1 if s < rem else 0)):
            stages[f"layer{layer}"] = s
            layer += 1
    return PipelinePlan(pp, stages)


# --- microbatch expansion -------------------------------------------------

_STREAM_PHASES = ("fwd", "recompute", "bwd")


@dataclass
class ExpandReport:
    n_microbatches: int
    cloned_nodes: int = 0
    grad_accumulations: int = 0
    sync_comms: List[OpNode] = field(default_factory=list)


def _per_microbatch_input(t: SymTensor, batch_sym) -> bool:
    """Producer-less tensors that carry data, not structure: each
    microbatch gets its own (token ids, labels, the loss seed)."""
    if t.name.endswith(".seed"):
        return True
    return any(d.contains(batch_sym) for d in t.dims)


def expand_microbatches(g: STGraph, plan: ShardingPlan, batch_sym,
                        n_mb: int) -> Tuple[STGraph, ExpandReport]:
    """Build the per-step graph: streams replicated per microbatch.

    Weights, optimizer state, and structural constants are shared; every
    activation, gradient, and stream node is cloned per microbatch with
    ``.mb{j}`` names.  Optimizer nodes are carried over once, reading
    accumulated (and, where still partial, step-synchronized) gradients.
    """
    if n_mb < 1:
        raise InvalidSpecError("need at least one microbatch")
    from .autodiff import _clone_node  # shared node-copy helper

    report = ExpandReport(n_microbatches=n_mb)
    out = STGraph()

    stream = [n for n in g.nodes if n.phase in _STREAM_PHASES]
    step = [n for n in g.nodes if n.phase == "opt"]
    produced = set(g.producer)
    # member outs look producer-less (only the enclosing fused node is in
    # the producer map) but are interiors: every clone shares them
    member_outs = {m.out for n in g.nodes if isinstance(n, Fused)
                   for m in n.members}
    per_mb_inputs = {name for name, t in g.tensors.items()
                     if name not in produced and name not in member_outs
                     and _per_microbatch_input(t, batch_sym)}
    per_mb = per_mb_inputs | {n.out for n in stream}

    # shared tensors once (weights, optimizer state, constants, and the
    # interior/member tensors only fused regions reference)
    for name, t in g.tensors.items():
        if name not in per_mb and not name.endswith(".next"):
            out.add_tensor(t)

    for j in range(n_mb):
        ren = {name: f"{name}.mb{j}" for name in per_mb}
        # all of this microbatch's tensors first: node insertion order is
        # emission order, not topological
        for name in sorted(per_mb):
            t = g.tensors[name]
            out.add_tensor(SymTensor(ren[name], t.dims, t.dist, role=t.role,
                                     dtype_bytes=t.dtype_bytes,
                                     materialized=t.materialized))
        for n in stream:
            clone = _clone_node(n, out.fresh_id(), ren[n.out],
                                tuple(ren.get(i, i) for i in n.ins))
            if isinstance(n, Fused):
                # fresh per-microbatch member copies: the surfaced member
                # out is a per-microbatch tensor, and reused ids would
                # collide with this graph's
                clone.members = tuple(
                    _clone_node(m, out.fresh_id(), ren.get(m.out, m.out),
                                tuple(ren.get(i, i) for i in m.ins))
                    for m in n.members)
            clone.phase = n.phase
            clone.region = n.region
            clone.mb = j
            out.add_node(clone)
            report.cloned_nodes += 1
    out.outputs = [f"{o}.mb{j}" for j in range(n_mb) for o in g.outputs]

    # optimizer nodes once, over accumulated gradients
    acc_of: Dict[str, str] = {}
    for n in step:
        region = region_of_weight(n.out)
        ins = []
        for name in n.ins:
            if g.tensors[name].role == GRADIENT:
                ins.append(_accumulate(out, plan, g.tensors[name], name,
                                       n_mb, region, acc_of, report))
            else:
                ins.append(name)
        t = g.tensors[n.out]
        out.add_tensor(SymTensor(n.out, t.dims, t.dist, role=t.role,
                                 dtype_bytes=t.dtype_bytes,
                                 materialized=t.materialized))
        clone = _clone_node(n, out.fresh_id(), n.out, tuple(ins))
        clone.phase = "opt"
        clone.region = region
        out.add_node(clone)
    return out, report


def _accumulate(out: STGraph, plan: ShardingPlan, grad: SymTensor,
                name: str, n_mb: int, region: str,
                acc_of: Dict[str, str], report: ExpandReport) -> str:
    """Sum a gradient over microbatches, then resolve leftover partials.

    The per-step synchronization: whatever partial-sum symbols survive the
    backward stream (the data-parallel sum always, plus sequence/context
    shards for replicated small weights) become one AllReduce chain here.
    Fully-sharded gradients arrive already reduce-scattered per
    microbatch, so the chain is empty and only the shard sum remains.
    """
    got = acc_of.get(name)
    if got is not None:
        return got
    parts = tuple(f"{name}.mb{j}" for j in range(n_mb))
    cur = parts[0]
    # a chain of running sums rather than one wide add: each microbatch's
    # gradient is folded in as soon as its backward finishes, so at most
    # one stale per-microbatch copy is ever live
    for j in range(1, n_mb):
        nxt = f"{name}.acc" if j == n_mb - 1 else f"{name}.acc{j}"
        out.add_tensor(SymTensor(nxt, grad.dims, grad.dist, role=GRADIENT,
                                 dtype_bytes=grad.dtype_bytes,
                                 materialized=True))
        acc = Elementwise(out.fresh_id(), nxt, (cur, parts[j]), "add")
        acc.phase = "bwd"
        acc.region = region
        acc.mb = j
        out.add_node(acc)
        cur = nxt
    if n_mb > 1:
        report.grad_accumulations += 1

    have = grad.dist
    want = Distribution.make(
        {d: list(s) for d, s in have.shard_map().items()}, [])
    cur_dist = have
    for step in match_collective(have, want, plan.mesh):
        cur_dist = apply_step(cur_dist, step)
        nid = out.fresh_id()
        nxt = f"{name}.sync{nid}"
        out.add_tensor(SymTensor(nxt, grad.dims, cur_dist, role=GRADIENT,
                                 dtype_bytes=grad.dtype_bytes,
                                 materialized=True))
        comm = CommNode(nid, nxt, (cur,), step.kind, step.symbol,
                        dim=step.dim, src_dim=step.src_dim)
        comm.phase = "opt"
        comm.region = region
        out.add_node(comm)
        report.sync_comms.append(comm)
        cur = nxt
    acc_of[name] = cur
    return cur


# --- stage connection -----------------------------------------------------

@dataclass
class P2PReport:
    pairs: List[Tuple[CommNode, CommNode]] = field(default_factory=list)

    def sends_from(self, stage: int, plan: PipelinePlan) -> List[CommNode]:
        return [s for s, _ in self.pairs if plan.stage_of(s) == stage]


def connect_stages(g: STGraph, plan: PipelinePlan) -> P2PReport:
    """Insert a Send/Recv pair for every stage-crossing tensor use.

    One transfer serves every consumer of the tensor on the receiving
    stage.  The pair shares a tag (microbatch, boundary, direction); the
    receive depends on the send, so cross-rank ordering is explicit in
    the graph.  Counting convention: a pair is attributed to its sender.
    """
    report = P2PReport()
    if plan.pp == 1:
        return report
    moved: Dict[Tuple[str, int], str] = {}
    for node in list(g.nodes):
        if node.phase == "opt":
            continue  # weights and their updates never cross stages
        sc = plan.stage_of(node)
        for k, t in enumerate(node.ins):
            pid = g.producer.get(t)
            if pid is None:
                continue
            producer = g.node(pid)
            sp = plan.stage_of(producer)
            if sp == sc:
                continue
            key = (t, sc)
            got = moved.get(key)
            if got is None:
                got = _send_recv(g, plan, t, producer, sp, sc, report)
                moved[key] = got
            ins = list(node.ins)
            ins[k] = got
            node.ins = tuple(ins)
    return report


def _send_recv(g: STGraph, plan: PipelinePlan, tensor: str, producer: OpNode,
               sp: int, sc: int, report: P2PReport) -> str:
    t = g.tensor(tensor)
    mb = producer.mb if producer.mb is not None else 0
    tag = pack_tag(mb, min(sp, sc), backward=sc < sp)

    sid = g.fresh_id()
    sent = f"{tensor}.send{sid}"
    g.add_tensor(SymTensor(sent, t.dims, t.dist, role=t.role,
                           dtype_bytes=t.dtype_bytes, materialized=False))
    send = CommNode(sid, sent, (tensor,), "Send", None, peer=sc, tag=tag)
    send.phase = producer.phase
    send.region = producer.region
    send.mb = producer.mb
    g.add_node(send)

    rid = g.fresh_id()
    recv_out = f"{tensor}.recv{rid}"
    g.add_tensor(SymTensor(recv_out, t.dims, t.dist, role=t.role,
                           dtype_bytes=t.dtype_bytes,
                           materialized=t.materialized))
    recv = CommNode(rid, recv_out, (sent,), "Recv", None, peer=sp, tag=tag)
    recv.phase = producer.phase
    # the receive runs on the consuming stage: borrow a region there
    recv.region = _region_on_stage(plan, sc)
    recv.mb = producer.mb
    g.add_node(recv)

    report.pairs.append((send, recv))
    return recv_out


def _region_on_stage(plan: PipelinePlan, stage: int) -> str:
    for region, s in sorted(plan.stage_of_region.items()):
        if s == stage:
            return region
    raise UnplacedNodeError(f"stage {stage} owns no region")


# --- per-stage schedule ---------------------------------------------------

_PHASE_ORDER = {"fwd": 0, "recompute": 1, "bwd": 1, "opt": 2}


def stage_schedule(g: STGraph, plan: PipelinePlan, stage: int) -> List[OpNode]:
    """Topological order of one stage's nodes, microbatch-pipelined:
    every microbatch's forward first, then the backward stream in the
    same microbatch order, then per-step work.  Dependencies on other
    stages (a Recv's matching Send) are treated as externally satisfied.
    """
    mine = [n for n in g.nodes if plan.stage_of(n) == stage]
    ids = {n.id for n in mine}
    big = 1 << 30

    def key(n: OpNode) -> Tuple[int, int, int]:
        return (_PHASE_ORDER.get(n.phase, 3),
                n.mb if n.mb is not None else big, n.id)

    local_users: Dict[int, List[OpNode]] = {}
    indeg: Dict[int, int] = {}
    for n in mine:
        deps = 0
        for t in n.ins:
            pid = g.producer.get(t)
            if pid is not None and pid in ids:
                deps += 1
                local_users.setdefault(pid, []).append(n)
        indeg[n.id] = deps

    ready = [(key(n), n.id, n) for n in mine if indeg[n.id] == 0]
    heapq.heapify(ready)
    order: List[OpNode] = []
    while ready:
        _, _, n = heapq.heappop(ready)
        order.append(n)
        for user in local_users.get(n.id, ()):  # may repeat per dup input
            indeg[user.id] -= 1
            if indeg[user.id] == 0:
                heapq.heappush(ready, (key(user), user.id, user))
    if len(order) != len(mine):
        raise UnplacedNodeError(
            f"stage {stage} schedule is cyclic: ordered {len(order)} of "
            f"{len(mine)} nodes")
    return order


# --- rank arithmetic ------------------------------------------------------

def rank_coords(rank: int, cfg: ParallelConfig) -> Dict[str, int]:
    """Mixed-radix decomposition over mesh_order, first axis slowest."""
    if not 0 <= rank < cfg.ranks:
        raise InvalidSpecError(f"rank {rank} outside 0..{cfg.ranks - 1}")
    deg = cfg.degrees()
    coords: Dict[str, int] = {}
    rem = rank
    for axis in reversed(cfg.mesh_order):
        coords[axis] = rem % deg[axis]
        rem //= deg[axis]
    return coords


def coords_rank(coords: Dict[str, int], cfg: ParallelConfig) -> int:
    deg = cfg.degrees()
    rank = 0
    for axis in cfg.mesh_order:
        rank = rank * deg[axis] + coords[axis]
    return rank


def comm_group(rank: int, axis: str, cfg: ParallelConfig) -> List[int]:
    """Ranks participating in a collective over ``axis`` with ``rank``."""
    coords = rank_coords(rank, cfg)
    group = []
    for i in range(cfg.degrees()[axis]):
        c = dict(coords)
        c[axis] = i
        group.append(coords_rank(c, cfg))
    return group


def pipeline_peer(rank: int, stage: int, cfg: ParallelConfig) -> int:
    """The rank holding ``stage`` in this rank's pipeline."""
    coords = rank_coords(rank, cfg)
    coords["pp"] = stage
    return coords_rank(coords, cfg)
