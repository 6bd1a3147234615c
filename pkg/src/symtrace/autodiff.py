"""Reverse-mode differentiation, optimizer synthesis, and recompute rewriting.

``build_backward`` appends gradient nodes to a forward graph, walking it in
reverse topological order.  The pass is purely structural: it decides *which*
operations exist, not where their data lives — gradient tensors start with
their primal's placement and later passes re-resolve placements and insert
whatever communication the placements require.

Conventions:

* An einsum gets one backward einsum **per operand**, formed by swapping
  that operand with the output: gradients are emitted even when nothing
  consumes them (e.g. the gradient of an indicator input), because the
  synthesized workload should show the operations a framework would run
  before its dead-code elimination.
* An elementwise op gets one backward node per *differentiable* input.
  Plus-like ops (``add``/``residual``) and ``identity`` are transparent:
  the output gradient is aliased to each input rather than copied through
  a node.  Data-movement ops invert themselves.  A function in
  ``NON_DIFFERENTIABLE`` raises :class:`NonDifferentiableOpError` if the
  loss depends on it.
* Where several consumers contribute gradients to one tensor, a single
  n-ary ``add`` accumulates them.
* A fused region differentiates as one fused node: its members recompute
  the region's interior values (kernels like flash attention do exactly
  this) and then run the member adjoints, so the region's cost model
  reflects the recompute-in-backward reality.
* A prefix scan ``h[t] = a[t] * h[t-1] + b[t]`` has the classic adjoint:
  run the scan in reverse over the shifted gates to get ``db``, then
  ``da[t] = db[t] * h[t-1]``.
* Explicit communication nodes take their adjoint kind: AllReduce pairs
  with AllReduce, AllGather with ReduceScatter (and vice versa), AllToAll
  with the reversed AllToAll, a local slice with AllGather.

``build_optimizer`` appends update nodes per weight: plain SGD is one node;
Adam is three (first moment, second moment, update) plus two persistent
state tensors shaped and placed like the weight.  Updates write in place,
so the "next" tensors occupy no memory.

``apply_recompute`` drops every activation interior to a layer after its
forward pass and re-derives it in the backward phase from the layer's
boundary input, trading compute for peak memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import NoLossError, NonDifferentiableOpError
from .graph import (
    CommNode,
    Einsum,
    Elementwise,
    Fused,
    GRADIENT,
    INPUT,
    MOVEMENT_FNS,
    OPT_STATE,
    OpNode,
    PScan,
    STGraph,
    SliceOp,
    SymTensor,
    WEIGHT,
)

#: elementwise functions whose backward consumes the primal *output*;
#: everything else differentiable consumes the primal input.
USES_OUTPUT = frozenset({"softmax", "sigmoid", "exp"})

#: transparent ops: dL/din is dL/dout itself, no node needed.
TRANSPARENT = frozenset({"add", "residual", "identity", "dropout"})

NON_DIFFERENTIABLE = frozenset({"argmax", "floor", "round", "sign"})

#: elementwise ops that only differentiate their first input (the rest are
#: index-like constants: targets, masks, routing indicators).
FIRST_INPUT_ONLY = frozenset({"cross_entropy", "topk_gate"})

ADJOINT_COMM = {
    "AllReduce": "AllReduce",
    "AllGather": "ReduceScatter",
    "ReduceScatter": "AllGather",
    "AllToAll": "AllToAll",
}

_MOVEMENT_INVERSE = {"shift": "shift", "transpose": "transpose",
                     "reshape": "reshape", "narrow": "pad", "pad": "narrow",
                     "permute": "permute"}


@dataclass
class GradInfo:
    """What ``build_backward`` produced."""

    graph: STGraph
    loss: str
    seed: str
    #: primal tensor name -> gradient tensor name (resolved, accumulated)
    grads: Dict[str, str] = field(default_factory=dict)


class _Emitter:
    """Node sink: either the graph itself or a fused region's member list."""

    def __init__(self, g: STGraph, members: Optional[List[OpNode]] = None,
                 region: Optional[str] = None, phase: str = "bwd",
                 src: Optional[int] = None):
        self.g = g
        self.members = members
        self.region = region
        self.phase = phase
        self.src = src

    def emit(self, node: OpNode) -> OpNode:
        node.phase = self.phase
        node.region = self.region
        node.src = self.src
        if self.members is None:
            self.g.add_node(node)
        else:
            self.members.append(node)
            self.g._by_id[node.id] = node
        return node


class _Backward:
    def __init__(self, g: STGraph):
        self.g = g
        self.contribs: Dict[str, List[str]] = {}
        self.resolved: Dict[str, str] = {}
        #: tensor -> region of its first forward consumer; gradient sums
        #: are placed there, so a region-boundary gradient is reduced on
        #: the consuming side and crosses the boundary once
        self.use_region: Dict[str, Optional[str]] = {}

    # - gradient tensor bookkeeping -

    def grad_tensor(self, primal: SymTensor, name: str,
                    interior: bool = False) -> SymTensor:
        t = SymTensor(name, primal.dims, primal.dist, role=GRADIENT,
                      dtype_bytes=primal.dtype_bytes,
                      materialized=primal.materialized and not interior)
        return self.g.add_tensor(t)

    def contribute(self, tensor: str, grad_name: str) -> None:
        self.contribs.setdefault(tensor, []).append(grad_name)

    def resolve(self, tensor: str, emitter: _Emitter) -> Optional[str]:
        """Accumulated gradient of ``tensor``, or None when nothing flows."""
        if tensor in self.resolved:
            return self.resolved[tensor]
        parts = self.contribs.get(tensor, [])
        if not parts:
            return None
        if len(parts) == 1:
            name = parts[0]
        else:
            name = f"{tensor}.grad"
            primal = self.g.tensor(tensor)
            self.grad_tensor(primal, name,
                             interior=not primal.materialized)
            node = Elementwise(self.g.fresh_id(), name, tuple(parts), "add")
            emitter.emit(node)
            if tensor in self.use_region:
                node.region = self.use_region[tensor]
        self.resolved[tensor] = name
        return name

    # - per-kind rules -

    def back_node(self, node: OpNode, dy: str, em: _Emitter) -> None:
        if isinstance(node, Einsum):
            self._back_einsum(node, dy, em)
        elif isinstance(node, Fused):
            self._back_fused(node, dy, em)
        elif isinstance(node, PScan):
            self._back_pscan(node, dy, em)
        elif isinstance(node, CommNode):
            self._back_comm(node, dy, em)
        elif isinstance(node, SliceOp):
            gname = f"{node.ins[0]}.g{self.g.fresh_id()}"
            self.grad_tensor(self.g.tensor(node.ins[0]), gname)
            em.emit(CommNode(self.g.fresh_id(), gname, (dy,), "AllGather",
                             node.symbol, dim=node.dim))
            self.contribute(node.ins[0], gname)
        elif isinstance(node, Elementwise):
            self._back_elementwise(node, dy, em)
        else:
            raise NonDifferentiableOpError(
                f"no backward rule for node kind {node.kind!r}")

    def _gname(self, primal_name: str) -> str:
        return f"{primal_name}.g{self.g.fresh_id()}"

    def _back_einsum(self, node: Einsum, dy: str, em: _Emitter) -> None:
        for k, operand in enumerate(node.ins):
            spec = node.spec.backward(k)
            others = tuple(t for i, t in enumerate(node.ins) if i != k)
            gname = self._gname(operand)
            primal = self.g.tensor(operand)
            self.grad_tensor(primal, gname)
            em.emit(Einsum(self.g.fresh_id(), gname, (dy,) + others, spec,
                           node.flop_subset))
            self.contribute(operand, gname)

    def _back_elementwise(self, node: Elementwise, dy: str,
                          em: _Emitter) -> None:
        fn = node.fn
        if fn in TRANSPARENT:
            for name in node.ins:
                self.contribute(name, dy)
            return
        if fn in NON_DIFFERENTIABLE:
            raise NonDifferentiableOpError(
                f"loss depends on non-differentiable op {fn!r} "
                f"(node #{node.id})")
        if fn == "mul":
            a, b = node.ins
            for wrt, other in ((a, b), (b, a)):
                gname = self._gname(wrt)
                self.grad_tensor(self.g.tensor(wrt), gname)
                em.emit(Elementwise(self.g.fresh_id(), gname, (dy, other),
                                    "mul"))
                self.contribute(wrt, gname)
            return
        if fn == "sub":
            a, b = node.ins
            self.contribute(a, dy)
            gname = self._gname(b)
            self.grad_tensor(self.g.tensor(b), gname)
            em.emit(Elementwise(self.g.fresh_id(), gname, (dy,), "neg"))
            self.contribute(b, gname)
            return
        if fn in MOVEMENT_FNS:
            inv = _MOVEMENT_INVERSE.get(fn)
            if inv is None:
                raise NonDifferentiableOpError(
                    f"movement op {fn!r} has no inverse rule")
            src = node.ins[0]
            gname = self._gname(src)
            self.grad_tensor(self.g.tensor(src), gname)
            em.emit(Elementwise(self.g.fresh_id(), gname, (dy,), inv,
                                _invert_params(node)))
            self.contribute(src, gname)
            return
        if fn == "scale":
            src = node.ins[0]
            gname = self._gname(src)
            self.grad_tensor(self.g.tensor(src), gname)
            em.emit(Elementwise(self.g.fresh_id(), gname, (dy,), "scale",
                                node.params))
            self.contribute(src, gname)
            return
        # general unary-style rule: fn_bwd(primal, dy [, extra constants])
        wrt = node.ins[:1] if fn in FIRST_INPUT_ONLY else node.ins
        for src in wrt:
            primal_arg = node.out if fn in USES_OUTPUT else src
            extra = tuple(t for t in node.ins if t != src) \
                if fn in FIRST_INPUT_ONLY else ()
            gname = self._gname(src)
            self.grad_tensor(self.g.tensor(src), gname)
            em.emit(Elementwise(self.g.fresh_id(), gname,
                                (primal_arg,) + extra + (dy,),
                                f"{fn}_bwd", node.params))
            self.contribute(src, gname)

    def _back_pscan(self, node: PScan, dy: str, em: _Emitter) -> None:
        gates, values = node.ins
        axis = node.scan_dim
        ahead = 1 if node.reverse else -1
        shifted_gates = f"{gates}.ahead{self.g.fresh_id()}"
        self.grad_tensor(self.g.tensor(gates), shifted_gates)
        em.emit(Elementwise(self.g.fresh_id(), shifted_gates, (gates,),
                            "shift", (axis, ahead)))
        dvalues = self._gname(values)
        self.grad_tensor(self.g.tensor(values), dvalues)
        em.emit(PScan(self.g.fresh_id(), dvalues, (shifted_gates, dy),
                      axis, reverse=not node.reverse))
        self.contribute(values, dvalues)

        prev_state = f"{node.out}.prev{self.g.fresh_id()}"
        self.grad_tensor(self.g.tensor(node.out), prev_state)
        em.emit(Elementwise(self.g.fresh_id(), prev_state, (node.out,),
                            "shift", (axis, -ahead)))
        dgates = self._gname(gates)
        self.grad_tensor(self.g.tensor(gates), dgates)
        em.emit(Elementwise(self.g.fresh_id(), dgates,
                            (dvalues, prev_state), "mul"))
        self.contribute(gates, dgates)

    def _back_comm(self, node: CommNode, dy: str, em: _Emitter) -> None:
        kind = ADJOINT_COMM.get(node.kind)
        if kind is None:
            raise NonDifferentiableOpError(
                f"cannot differentiate through {node.kind}")
        src = node.ins[0]
        gname = self._gname(src)
        self.grad_tensor(self.g.tensor(src), gname)
        if node.kind == "AllToAll":
            em.emit(CommNode(self.g.fresh_id(), gname, (dy,), kind,
                             node.symbol, dim=node.src_dim,
                             src_dim=node.dim))
        else:
            em.emit(CommNode(self.g.fresh_id(), gname, (dy,), kind,
                             node.symbol, dim=node.dim))
        self.contribute(src, gname)

    def _back_fused(self, node: Fused, dy: str, em: _Emitter) -> None:
        # Recompute the interior from the region's inputs, then run the
        # member adjoints; the whole thing is one backward fused node.
        produced = {m.out for m in node.members}
        rc: Dict[str, str] = {}
        members: List[OpNode] = []
        sub_em = _Emitter(self.g, members, region=em.region, phase=em.phase)
        for m in node.members:
            clone_out = f"{m.out}.rc{self.g.fresh_id()}"
            rc[m.out] = clone_out
            self.grad_tensor(self.g.tensor(m.out), clone_out, interior=True)
            ins = tuple(rc.get(t, t) for t in m.ins)
            sub_em.emit(_clone_node(m, self.g.fresh_id(), clone_out, ins))

        sub = _Backward(self.g)
        sub.contribs[rc[node.out]] = [dy]
        for m in reversed(node.members):
            g_out = sub.resolve(rc[m.out], sub_em)
            if g_out is None:
                continue
            clone = _clone_node(m, m.id, rc[m.out],
                                tuple(rc.get(t, t) for t in m.ins))
            sub.back_node(clone, g_out, sub_em)
        # Gradients that landed on region inputs become this node's result.
        # Indicator inputs (unmaterialized constants like a head-group map)
        # collect dead operand gradients from the einsum rule; a fused node
        # has one output, so those are discarded here rather than surfaced.
        ext_grads = [(t, sub.resolve(t, sub_em)) for t in node.ins
                     if sub.contribs.get(t) and not _is_indicator(
                         self.g.tensor(t))]
        ext_grads = [(t, g) for t, g in ext_grads if g is not None]
        if len(ext_grads) != 1:
            raise NonDifferentiableOpError(
                f"fused region #{node.id} must yield exactly one exterior "
                f"gradient, got {len(ext_grads)}")
        primal_in, inner_grad = ext_grads[0]
        gname = self._gname(primal_in)
        self.grad_tensor(self.g.tensor(primal_in), gname)
        # surface the inner result under the fused node's own output name
        members.append(Elementwise(self.g.fresh_id(), gname, (inner_grad,),
                                   "identity"))
        self.g._by_id[members[-1].id] = members[-1]
        fused = Fused(self.g.fresh_id(), gname, (node.ins + (dy,)),
                      members, node.category)
        em.emit(fused)
        self.contribute(primal_in, gname)


def _is_indicator(t: SymTensor) -> bool:
    """A constant selection tensor (one-hot, group map): fed, never stored."""
    return t.role == INPUT and not t.materialized


def _invert_params(node: Elementwise) -> Tuple:
    if node.fn == "shift":
        axis, delta = node.params
        return (axis, -delta)
    if node.fn in ("transpose", "permute"):
        perm = node.params
        inv = [0] * len(perm)
        for i, p in enumerate(perm):
            inv[p] = i
        return tuple(inv)
    # reshape/narrow/pad adjoints read their geometry from the tensors
    return node.params


def _clone_node(m: OpNode, new_id: int, out: str, ins: Tuple[str, ...]) -> OpNode:
    if isinstance(m, Einsum):
        n = Einsum(new_id, out, ins, m.spec, m.flop_subset)
    elif isinstance(m, Elementwise):
        n = Elementwise(new_id, out, ins, m.fn, m.params)
    elif isinstance(m, PScan):
        n = PScan(new_id, out, ins, m.scan_dim, m.reverse)
    elif isinstance(m, SliceOp):
        n = SliceOp(new_id, out, ins, m.dim, m.symbol)
    elif isinstance(m, CommNode):
        n = CommNode(new_id, out, ins, m.kind, m.symbol, dim=m.dim,
                     src_dim=m.src_dim, peer=m.peer, tag=m.tag)
    elif isinstance(m, Fused):
        n = Fused(new_id, out, ins, m.members, m.category)
    else:
        raise NonDifferentiableOpError(f"cannot clone node kind {m.kind!r}")
    n.phase = m.phase
    n.region = m.region
    return n


def find_loss(g: STGraph) -> str:
    """The unique scalar output tensor, or NoLossError."""
    scalars = [name for name in (g.outputs or g.tensors)
               if name in g.tensors and g.tensor(name).rank == 0
               and name in g.producer]
    if len(scalars) == 1:
        return scalars[0]
    if not scalars:
        raise NoLossError(
            "backward requested but the graph produces no scalar loss")
    raise NoLossError(
        f"backward requested but several scalar outputs exist: {scalars}")


def build_backward(g: STGraph, loss: Optional[str] = None) -> GradInfo:
    """Append the gradient computation for ``loss`` to ``g``."""
    if loss is None:
        loss = find_loss(g)
    elif loss not in g.producer:
        raise NoLossError(f"{loss!r} is not produced by the graph")

    order = g.topo_order()
    loss_t = g.tensor(loss)
    seed = f"{loss}.seed"
    g.add_tensor(SymTensor(seed, loss_t.dims, loss_t.dist, role=GRADIENT,
                           dtype_bytes=loss_t.dtype_bytes))

    bw = _Backward(g)
    bw.contribs[loss] = [seed]
    for node in order:
        for t in node.ins:
            bw.use_region.setdefault(t, node.region)
    for node in reversed(order):
        acc_em = _Emitter(g, region=node.region)
        dy = bw.resolve(node.out, acc_em)
        if dy is None:
            continue
        bw.back_node(node, dy, _Emitter(g, region=node.region, src=node.id))

    grads: Dict[str, str] = {}
    final_em = _Emitter(g)
    for name in list(g.tensors):
        if name in bw.contribs and name not in g.producer:
            got = bw.resolve(name, final_em)
            if got is not None:
                grads[name] = got
    # also expose gradients of produced tensors that were resolved
    for name, gname in bw.resolved.items():
        grads.setdefault(name, gname)
    return GradInfo(graph=g, loss=loss, seed=seed, grads=grads)


# --- optimizer synthesis ---


def build_optimizer(g: STGraph, grads: Dict[str, str],
                    kind: str = "adam") -> List[OpNode]:
    """Append per-weight update nodes; returns them in emission order.

    Updates are in-place (the ``.next`` results occupy no memory); Adam
    carries two persistent fp32 state tensors per weight, shaped and
    placed exactly like the weight.
    """
    if kind not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {kind!r}")
    created: List[OpNode] = []

    def emit(node: OpNode):
        node.phase = "opt"
        g.add_node(node)
        created.append(node)

    for name in list(g.tensors):
        t = g.tensors[name]
        if t.role != WEIGHT or name not in grads:
            continue
        gname = grads[name]
        if kind == "sgd":
            nxt = g.add_tensor(SymTensor(f"{name}.next", t.dims, t.dist,
                                         role=WEIGHT, dtype_bytes=t.dtype_bytes,
                                         materialized=False))
            emit(Elementwise(g.fresh_id(), nxt.name, (name, gname),
                             "sgd_update"))
            continue
        m = g.add_tensor(SymTensor(f"{name}.m", t.dims, t.dist,
                                   role=OPT_STATE, dtype_bytes=4))
        v = g.add_tensor(SymTensor(f"{name}.v", t.dims, t.dist,
                                   role=OPT_STATE, dtype_bytes=4))
        m2 = g.add_tensor(SymTensor(f"{name}.m.next", t.dims, t.dist,
                                    role=OPT_STATE, dtype_bytes=4,
                                    materialized=False))
        v2 = g.add_tensor(SymTensor(f"{name}.v.next", t.dims, t.dist,
                                    role=OPT_STATE, dtype_bytes=4,
                                    materialized=False))
        nxt = g.add_tensor(SymTensor(f"{name}.next", t.dims, t.dist,
                                     role=WEIGHT, dtype_bytes=t.dtype_bytes,
                                     materialized=False))
        emit(Elementwise(g.fresh_id(), m2.name, (m.name, gname), "adam_m"))
        emit(Elementwise(g.fresh_id(), v2.name, (v.name, gname), "adam_v"))
        emit(Elementwise(g.fresh_id(), nxt.name,
                         (name, m2.name, v2.name), "adam_update"))
    return created


# --- recompute rewriting ---


def apply_recompute(g: STGraph) -> int:
    """Recompute layer-interior activations in the backward phase.

    For every region tagged ``layer*`` that has backward nodes: activations
    produced in its forward pass and consumed only inside the region are
    dropped after forward; clones of the forward nodes re-derive them just
    before the region's backward nodes, which are rewired onto the clones.
    Returns the number of cloned nodes (0 leaves the graph untouched, e.g.
    in inference graphs).
    """
    regions: Dict[str, List[OpNode]] = {}
    for n in g.nodes:
        if n.region and n.region.startswith("layer"):
            regions.setdefault(n.region, []).append(n)

    consumers: Dict[str, List[OpNode]] = {}
    for n in g.nodes:
        for t in n.ins:
            consumers.setdefault(t, []).append(n)

    total = 0
    for region, nodes in regions.items():
        fwd = [n for n in nodes if n.phase == "fwd"]
        bwd = [n for n in nodes if n.phase == "bwd"]
        if not bwd:
            continue
        interior = set()
        for n in fwd:
            users = consumers.get(n.out, [])
            if users and all(u.region == region for u in users):
                interior.add(n.out)
        # tensors a backward node actually reads
        needed = {t for n in bwd for t in n.ins if t in interior}
        if not needed:
            continue
        # clone forward producers of anything needed, transitively
        to_clone: List[OpNode] = []
        pending = set(needed)
        for n in reversed(fwd):
            if n.out in pending:
                to_clone.append(n)
                pending |= {t for t in n.ins if t in interior}
        to_clone.reverse()
        rc = {}
        for n in to_clone:
            clone_out = f"{n.out}.rc"
            primal = g.tensor(n.out)
            g.add_tensor(SymTensor(clone_out, primal.dims, primal.dist,
                                   role=primal.role,
                                   dtype_bytes=primal.dtype_bytes,
                                   materialized=primal.materialized))
            clone = _clone_node(n, g.fresh_id(), clone_out,
                                tuple(rc.get(t, t) for t in n.ins))
            clone.phase = "recompute"
            clone.region = region
            clone.src = n.id
            g.add_node(clone)
            rc[n.out] = clone_out
            total += 1
        for n in bwd:
            n.ins = tuple(rc.get(t, t) for t in n.ins)
    return total
