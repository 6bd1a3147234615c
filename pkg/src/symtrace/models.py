"""Model builders: symbolic forward graphs for transformer-family networks.

``build_model`` assembles one microbatch of a decoder network — embedding,
a stack of pre-norm blocks (attention + dense FFN, mixture-of-experts, or a
state-space mixer), final norm, output projection, and in training mode a
cross-entropy loss.  Everything is expressed over model-dimension symbols
(``B`` microbatch sequences, ``S`` sequence length, ``H`` hidden, ``F`` FFN
hidden, ``V`` vocabulary, …), so one graph serves every parallelization and
batch configuration; numbers enter only at instantiation time through
``bindings_for``.

Modeling conventions, chosen so the synthesized operator stream matches
what per-kernel traces of these networks show:

* Attention runs as one fused region per layer: the packed QKV projection
  and the output projection are standalone matmuls, while the
  narrow/reshape/score/softmax/context chain between them is a single
  fused node of category ``Attn`` whose backward recomputes the interior
  (the flash-attention execution shape).  Grouped-query attention expands
  the KV heads inside the region through a constant head-group indicator.
* Token and label one-hots are indicator inputs: never stored, and their
  (dead) gradients are emitted by the einsum rule exactly as an eager
  framework would before dead-code elimination.
* The embedding lookup is an einsum against the token one-hot with its
  flop accounting restricted to ``b·s·h`` — a gather, not a true matmul —
  while the output projection pays the full ``b·s·h·v`` cost.
* Norm layers split into the normalization proper (elementwise) and the
  learned gain (a broadcast einsum, so the gain gradient reduces
  correctly).
* Mixture-of-experts layers route through an explicit `[B,S,E,C]`
  dispatch indicator with per-expert capacity ``C = S·k/E``; dispatch and
  combine einsums carry copy-cost flop subsets, expert matmuls full cost.
* The causal mask and position handling are omitted: they change no
  operator counts and no tensor shapes at this granularity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .dist import Distribution
from .errors import InvalidSpecError, UnknownComponentError
from .graph import (
    ACTIVATION,
    ATTN,
    Einsum,
    EinsumSpec,
    Elementwise,
    Fused,
    INPUT,
    OpNode,
    PScan,
    STGraph,
    SymTensor,
    WEIGHT,
)
from .symbols import DimExpr, Symbol, SymbolRegistry, SymbolTable

MODEL_SYMBOL_NAMES = ("B", "S", "H", "F", "V", "E", "C", "P")

COMPONENTS = ("mha", "gqa", "ffn_updown", "ffn_gateup", "rmsnorm",
              "layernorm", "moe", "moe_shared", "ssm_block", "embedding",
              "lm_head")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters (symbol bindings and block choices)."""

    name: str = "model"
    layers: int = 2
    hidden: int = 1024
    heads: int = 16
    kv_heads: Optional[int] = None      # None: same as heads
    ffn_hidden: Optional[int] = None    # None: 4 * hidden
    vocab: int = 50257
    seq: int = 2048
    norm: str = "rmsnorm"               # rmsnorm | layernorm
    ffn: str = "ffn_updown"             # ffn_updown | ffn_gateup
    block: str = "transformer"          # transformer | ssm
    n_experts: int = 0                  # 0: dense FFN everywhere
    experts_per_token: int = 2
    moe_every: int = 1                  # every k-th layer is MoE
    shared_expert: bool = False
    state_dim: Optional[int] = None     # ssm inner width; None: 2 * hidden
    dtype_bytes: int = 2

    def __post_init__(self):
        if self.norm not in ("rmsnorm", "layernorm"):
            raise InvalidSpecError(f"unknown norm {self.norm!r}")
        if self.ffn not in ("ffn_updown", "ffn_gateup"):
            raise InvalidSpecError(f"unknown ffn kind {self.ffn!r}")
        if self.block not in ("transformer", "ssm"):
            raise InvalidSpecError(f"unknown block kind {self.block!r}")
        if self.hidden % self.heads:
            raise InvalidSpecError("hidden must divide evenly into heads")
        kv = self.kv_heads
        if kv is not None and self.heads % kv:
            raise InvalidSpecError("heads must be a multiple of kv_heads")

    @property
    def kv(self) -> int:
        return self.kv_heads if self.kv_heads is not None else self.heads

    @property
    def ffn_width(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else 4 * self.hidden

    def is_moe_layer(self, i: int) -> bool:
        return self.n_experts > 0 and (i % self.moe_every
                                       == self.moe_every - 1)


@dataclass(frozen=True)
class TrainingSpec:
    """Run regime: batching, mode, optimizer, recompute."""

    batch: int = 64                 # global batch, in sequences
    microbatch: int = 1
    #: "replica": ``microbatch`` is the per-data-parallel-replica size;
    #: "global": it is the whole-job microbatch, split across replicas.
    microbatch_scope: str = "replica"
    mode: str = "training"          # training | inference
    optimizer: str = "adam"         # adam | sgd
    recompute: bool = False

    def __post_init__(self):
        if self.mode not in ("training", "inference"):
            raise InvalidSpecError(f"unknown mode {self.mode!r}")
        if self.microbatch_scope not in ("replica", "global"):
            raise InvalidSpecError(
                f"unknown microbatch scope {self.microbatch_scope!r}")

    def replica_microbatch(self, dp: int) -> int:
        if self.microbatch_scope == "global":
            if self.microbatch % dp:
                raise InvalidSpecError(
                    f"global microbatch {self.microbatch} not divisible by "
                    f"dp={dp}")
            return self.microbatch // dp
        return self.microbatch

    def n_microbatches(self, dp: int) -> int:
        per = self.replica_microbatch(dp) * dp
        if self.batch % per:
            raise InvalidSpecError(
                f"batch {self.batch} not divisible by dp*microbatch={per}")
        return self.batch // per


@dataclass
class BuiltModel:
    graph: STGraph
    registry: SymbolRegistry
    model: ModelSpec
    train: TrainingSpec
    syms: Dict[str, Symbol] = field(default_factory=dict)
    loss: Optional[str] = None
    logits: str = ""


class _Builder:
    """Accumulates nodes into a graph under a current region tag."""

    def __init__(self, model: ModelSpec, registry: SymbolRegistry):
        self.g = STGraph()
        self.model = model
        self.reg = registry
        self.region: Optional[str] = None
        self.sym = {n: registry.lookup(n) for n in MODEL_SYMBOL_NAMES}
        self.R = Distribution.replicated()

    # dim shorthand --

    def d(self, name: str) -> DimExpr:
        return DimExpr.of(self.sym[name])

    def dscaled(self, name: str, num: int, den: int = 1) -> DimExpr:
        from fractions import Fraction
        return DimExpr.build(Fraction(num, den), {self.sym[name]: 1})

    @property
    def head_dim(self) -> DimExpr:
        return self.dscaled("H", 1, self.model.heads)

    # tensors --

    def tensor(self, name: str, dims: Sequence[DimExpr], role=ACTIVATION,
               materialized: bool = True, dtype_bytes: Optional[int] = None
               ) -> SymTensor:
        return self.g.add_tensor(SymTensor(
            name, tuple(dims), self.R, role=role,
            dtype_bytes=self.model.dtype_bytes if dtype_bytes is None
            else dtype_bytes,
            materialized=materialized))

    def weight(self, name: str, dims: Sequence[DimExpr]) -> SymTensor:
        return self.tensor(name, dims, role=WEIGHT)

    def indicator(self, name: str, dims: Sequence[DimExpr]) -> SymTensor:
        return self.tensor(name, dims, role=INPUT, materialized=False)

    # nodes (region-tagged) --

    def _tag(self, node: OpNode) -> OpNode:
        node.region = self.region
        return node

    def einsum(self, out: str, spec_text: str, ins: Sequence[str],
               subset: Optional[Sequence[str]] = None,
               materialized: bool = True) -> str:
        spec = EinsumSpec.parse(spec_text)
        if out not in self.g.tensors:
            _, out_dims = spec.infer_dims(
                [self.g.tensor(t).dims for t in ins], where=out)
            self.tensor(out, out_dims, materialized=materialized)
        node = Einsum(self.g.fresh_id(), out, tuple(ins), spec,
                      frozenset(subset) if subset else None)
        self.g.add_node(self._tag(node))
        return out

    def ew(self, out: str, fn: str, ins: Sequence[str], params: Tuple = (),
           dims: Optional[Sequence[DimExpr]] = None,
           materialized: bool = True) -> str:
        if out not in self.g.tensors:
            d = tuple(dims) if dims is not None \
                else self.g.tensor(ins[0]).dims
            self.tensor(out, d, materialized=materialized)
        self.g.add_node(self._tag(Elementwise(self.g.fresh_id(), out,
                                              tuple(ins), fn, params)))
        return out

    # components --

    def norm(self, prefix: str, x: str) -> str:
        fn = self.model.norm
        core = self.ew(f"{prefix}.{fn}", fn, (x,), materialized=False)
        self.weight(f"{prefix}.gain", (self.d("H"),))
        return self.einsum(f"{prefix}.scaled", "bsh,h",
                           (core, f"{prefix}.gain"))

    def attention(self, prefix: str, x: str) -> str:
        m = self.model
        heads, kv = m.heads, m.kv
        hd = self.head_dim
        B, S, H = self.d("B"), self.d("S"), self.d("H")
        kv_width = self.dscaled("H", kv, heads)          # kv heads * head dim
        qkv_width = self.dscaled("H", heads + 2 * kv, heads)

        self.weight(f"{prefix}.w_qkv", (H, qkv_width))
        qkv = self.einsum(f"{prefix}.qkv", "bsd,de->bse",
                          (x, f"{prefix}.w_qkv"))

        mk: List[OpNode] = []
        p = prefix

        def member(node: OpNode) -> OpNode:
            self._tag(node)
            mk.append(node)
            return node

        def mtensor(name, dims):
            self.tensor(name, dims, materialized=False)
            return name

        nq = mtensor(f"{p}.q2", (B, S, H))
        nk = mtensor(f"{p}.k2", (B, S, kv_width))
        nv = mtensor(f"{p}.v2", (B, S, kv_width))
        member(Elementwise(self.g.fresh_id(), nq, (qkv,), "narrow",
                           (2, 0, H)))
        member(Elementwise(self.g.fresh_id(), nk, (qkv,), "narrow",
                           (2, H, kv_width)))
        member(Elementwise(self.g.fresh_id(), nv, (qkv,),
                           "narrow", (2, self.dscaled("H", heads + kv, heads),
                                      kv_width)))
        q = mtensor(f"{p}.q", (B, S, DimExpr.const(heads), hd))
        k = mtensor(f"{p}.k", (B, S, DimExpr.const(kv), hd))
        v = mtensor(f"{p}.v", (B, S, DimExpr.const(kv), hd))
        for flat, shaped in ((nq, q), (nk, k), (nv, v)):
            member(Elementwise(self.g.fresh_id(), shaped, (flat,), "reshape"))

        fused_ins = [qkv]
        if kv != heads:
            gmap = f"{p}.headmap"
            self.indicator(gmap, (DimExpr.const(kv), DimExpr.const(heads)))
            fused_ins.append(gmap)
            kx = mtensor(f"{p}.kx", (B, S, DimExpr.const(heads), hd))
            vx = mtensor(f"{p}.vx", (B, S, DimExpr.const(heads), hd))
            member(Einsum(self.g.fresh_id(), kx, (k, gmap),
                          EinsumSpec.parse("btgd,gn->btnd"),
                          frozenset("btnd")))
            member(Einsum(self.g.fresh_id(), vx, (v, gmap),
                          EinsumSpec.parse("btgd,gn->btnd"),
                          frozenset("btnd")))
            k, v = kx, vx

        scores = mtensor(f"{p}.scores",
                         (B, DimExpr.const(heads), S, S))
        member(Einsum(self.g.fresh_id(), scores, (q, k),
                      EinsumSpec.parse("bsnd,btnd->bnst")))
        scaled = mtensor(f"{p}.scaled_scores", self.g.tensor(scores).dims)
        member(Elementwise(self.g.fresh_id(), scaled, (scores,), "scale",
                           ("rsqrt_of", hd)))
        probs = mtensor(f"{p}.probs", self.g.tensor(scores).dims)
        member(Elementwise(self.g.fresh_id(), probs, (scaled,), "softmax",
                           (-1,)))
        ctx = mtensor(f"{p}.ctx", (B, S, DimExpr.const(heads), hd))
        member(Einsum(self.g.fresh_id(), ctx, (probs, v),
                      EinsumSpec.parse("bnst,btnd->bsnd")))
        att = f"{p}.att"
        self.tensor(att, (B, S, H))
        member(Elementwise(self.g.fresh_id(), att, (ctx,), "reshape"))

        self.g.add_node(self._tag(Fused(self.g.fresh_id(), att,
                                        tuple(fused_ins), mk, ATTN)))

        self.weight(f"{p}.w_out", (H, H))
        return self.einsum(f"{p}.out", "bsd,de->bse", (att, f"{p}.w_out"))

    def ffn(self, prefix: str, x: str) -> str:
        H, F = self.d("H"), self.d("F")
        p = prefix
        if self.model.ffn == "ffn_updown":
            self.weight(f"{p}.w_up", (H, F))
            self.weight(f"{p}.w_down", (F, H))
            up = self.einsum(f"{p}.up", "bsh,hf->bsf", (x, f"{p}.w_up"))
            act = self.ew(f"{p}.act", "gelu", (up,))
            return self.einsum(f"{p}.down", "bsf,fh->bsh",
                               (act, f"{p}.w_down"))
        self.weight(f"{p}.w_gate", (H, F))
        self.weight(f"{p}.w_up", (H, F))
        self.weight(f"{p}.w_down", (F, H))
        gate = self.einsum(f"{p}.gate", "bsh,hf->bsf", (x, f"{p}.w_gate"))
        up = self.einsum(f"{p}.up", "bsh,hf->bsf", (x, f"{p}.w_up"))
        act = self.ew(f"{p}.act", "silu", (gate,))
        prod = self.ew(f"{p}.prod", "mul", (act, up))
        return self.einsum(f"{p}.down", "bsf,fh->bsh", (prod, f"{p}.w_down"))

    def moe(self, prefix: str, x: str) -> str:
        m = self.model
        B, S, H, F = self.d("B"), self.d("S"), self.d("H"), self.d("F")
        E, C = self.d("E"), self.d("C")
        p = prefix
        self.weight(f"{p}.w_router", (H, E))
        router = self.einsum(f"{p}.router", "bsh,he->bse",
                             (x, f"{p}.w_router"))
        route = self.ew(f"{p}.route", "topk_gate", (router,),
                        (m.experts_per_token,), dims=(B, S, E, C),
                        materialized=False)
        disp = self.einsum(f"{p}.disp", "bsh,bsec->bech", (x, route),
                           subset="bech")
        self.weight(f"{p}.w_up", (E, H, F))
        self.weight(f"{p}.w_down", (E, F, H))
        up = self.einsum(f"{p}.up", "bech,ehf->becf", (disp, f"{p}.w_up"))
        act = self.ew(f"{p}.act", "gelu", (up,))
        dn = self.einsum(f"{p}.mix", "becf,efh->bech", (act, f"{p}.w_down"))
        out = self.einsum(f"{p}.combine", "bech,bsec->bsh", (dn, route),
                          subset="bech")
        if m.shared_expert:
            saved_ffn = self.model
            self.model = replace(self.model, ffn="ffn_gateup")
            shared = self.ffn(f"{p}.shared", x)
            self.model = saved_ffn
            return self.ew(f"{p}.mixed", "add", (out, shared))
        return out

    def ssm(self, prefix: str, x: str) -> str:
        P = self.d("P")
        H = self.d("H")
        p = prefix
        self.weight(f"{p}.w_in", (H, P))
        self.weight(f"{p}.w_gate", (H, P))
        self.weight(f"{p}.w_out", (P, H))
        xin = self.einsum(f"{p}.xin", "bsh,hp->bsp", (x, f"{p}.w_in"))
        gl = self.einsum(f"{p}.gatelin", "bsh,hp->bsp", (x, f"{p}.w_gate"))
        gates = self.ew(f"{p}.gates", "sigmoid", (gl,))
        h = f"{p}.scan"
        self.tensor(h, self.g.tensor(xin).dims)
        self.g.add_node(self._tag(PScan(self.g.fresh_id(), h,
                                        (gates, xin), 1)))
        mixed = self.ew(f"{p}.gated", "mul", (h, gates))
        return self.einsum(f"{p}.proj", "bsp,ph->bsh",
                           (mixed, f"{p}.w_out"))

    def embedding(self, prefix: str) -> str:
        B, S, V, H = self.d("B"), self.d("S"), self.d("V"), self.d("H")
        tokens = f"{prefix}.tokens"
        self.indicator(tokens, (B, S, V))
        self.weight(f"{prefix}.w_embed", (V, H))
        return self.einsum(f"{prefix}.hidden", "bsv,vh->bsh",
                           (tokens, f"{prefix}.w_embed"), subset="bsh")

    def lm_head(self, prefix: str, x: str, training: bool) -> Tuple[str, Optional[str]]:
        V, H = self.d("V"), self.d("H")
        B, S = self.d("B"), self.d("S")
        self.weight(f"{prefix}.w_unembed", (V, H))
        logits = self.einsum(f"{prefix}.logits", "bsh,vh->bsv",
                             (x, f"{prefix}.w_unembed"))
        if not training:
            return logits, None
        labels = f"{prefix}.labels"
        self.indicator(labels, (B, S, V))
        self.tensor("loss", (), dtype_bytes=4)
        self.ew("loss", "cross_entropy", (logits, labels))
        return logits, "loss"

    def layer(self, i: int, x: str) -> str:
        self.region = f"layer{i}"
        p = f"L{i}"
        if self.model.block == "ssm":
            n1 = self.norm(f"{p}.norm", x)
            mix = self.ssm(f"{p}.ssm", n1)
            return self.ew(f"{p}.res", "residual", (x, mix))
        n1 = self.norm(f"{p}.norm1", x)
        a = self.attention(f"{p}.attn", n1)
        r1 = self.ew(f"{p}.res1", "residual", (x, a))
        n2 = self.norm(f"{p}.norm2", r1)
        if self.model.is_moe_layer(i):
            f = self.moe(f"{p}.moe", n2)
        else:
            f = self.ffn(f"{p}.ffn", n2)
        return self.ew(f"{p}.res2", "residual", (r1, f))


def build_module(component: str, builder: _Builder, prefix: str,
                 x: Optional[str] = None) -> str:
    """One named subnetwork appended to the builder's graph."""
    if component not in COMPONENTS:
        raise UnknownComponentError(
            f"unknown component {component!r}; expected one of "
            f"{', '.join(COMPONENTS)}")
    b = builder
    if component == "embedding":
        return b.embedding(prefix)
    if component == "lm_head":
        return b.lm_head(prefix, x, training=False)[0]
    if component in ("rmsnorm", "layernorm"):
        b.model = replace(b.model, norm=component)
        return b.norm(prefix, x)
    if component in ("ffn_updown", "ffn_gateup"):
        b.model = replace(b.model, ffn=component)
        return b.ffn(prefix, x)
    if component == "mha":
        b.model = replace(b.model, kv_heads=None)
        return b.attention(prefix, x)
    if component == "gqa":
        if b.model.kv == b.model.heads:
            b.model = replace(b.model, kv_heads=max(1, b.model.heads // 4))
        return b.attention(prefix, x)
    if component == "moe":
        b.model = replace(b.model, shared_expert=False)
        return b.moe(prefix, x)
    if component == "moe_shared":
        b.model = replace(b.model, shared_expert=True)
        return b.moe(prefix, x)
    if component == "ssm_block":
        return b.ssm(prefix, x)
    raise UnknownComponentError(component)


def build_model(model: ModelSpec, train: TrainingSpec,
                parallel_names: Sequence[str] = ()) -> BuiltModel:
    """The forward graph for one microbatch."""
    reg = SymbolRegistry(parallel=parallel_names, model=MODEL_SYMBOL_NAMES)
    b = _Builder(model, reg)
    training = train.mode == "training"

    b.region = "embed"
    x = b.embedding("embed")
    for i in range(model.layers):
        x = b.layer(i, x)
    b.region = "head"
    xf = b.norm("head.norm", x)
    logits, loss = b.lm_head("head", xf, training)
    b.g.outputs = [loss if training else logits]
    b.g.validate()
    return BuiltModel(graph=b.g, registry=reg, model=model, train=train,
                      syms=dict(b.sym), loss=loss, logits=logits)


def bindings_for(built: BuiltModel, degrees: Optional[Dict[str, int]] = None,
                 dp: int = 1) -> SymbolTable:
    """Concrete values for every symbol the graph's dimensions mention.

    ``degrees`` binds parallel symbols (axis name -> degree); dimensions
    divided by an axis then evaluate to per-rank shard extents.  The
    batch symbol is the whole-job microbatch over ``dp`` replicas: batch
    dimensions carry the data-parallel shard annotation, so the division
    down to the per-replica size happens through the placement like
    every other axis.
    """
    m, t = built.model, built.train
    table = SymbolTable()
    s = built.syms
    table.bind(s["B"], t.replica_microbatch(dp) * dp)
    table.bind(s["S"], m.seq)
    table.bind(s["H"], m.hidden)
    table.bind(s["F"], m.ffn_width)
    table.bind(s["V"], m.vocab)
    if m.n_experts:
        cap = m.seq * m.experts_per_token
        if cap % m.n_experts:
            raise InvalidSpecError(
                f"capacity S*k/E = {m.seq}*{m.experts_per_token}/"
                f"{m.n_experts} is not integral")
        table.bind(s["E"], m.n_experts)
        table.bind(s["C"], cap // m.n_experts)
    table.bind(s["P"], m.state_dim if m.state_dim is not None
               else 2 * m.hidden)
    for name, deg in (degrees or {}).items():
        sym = built.registry.get_parallel(name)
        if sym is not None:
            table.bind(sym, deg)
    return table
