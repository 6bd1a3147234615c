"""Model-builder structure and end-to-end numeric gradient checks."""

from collections import Counter

import numpy as np
import pytest

from symtrace.autodiff import build_backward, build_optimizer
from symtrace.errors import InvalidSpecError, UnknownComponentError
from symtrace.graph import ATTN, Einsum, Fused, GEMM, PScan
from symtrace.models import (
    BuiltModel,
    ModelSpec,
    TrainingSpec,
    _Builder,
    bindings_for,
    build_model,
    build_module,
)
from symtrace.numeric import Evaluator, finite_diff_grad
from symtrace.symbols import SymbolRegistry

TRAIN = TrainingSpec(batch=8, microbatch=1)


def tiny(**kw) -> ModelSpec:
    base = dict(layers=1, hidden=4, heads=2, vocab=5, seq=2,
                ffn_hidden=6, norm="layernorm")
    base.update(kw)
    return ModelSpec(**base)


def onehot_rows(rng, rows, width):
    out = np.zeros(rows + (width,))
    idx = rng.integers(0, width, size=rows)
    for pos in np.ndindex(*rows):
        out[pos + (idx[pos],)] = 1.0
    return out


def model_feeds(built: BuiltModel, rng, scale=0.4):
    table = bindings_for(built)
    ev = Evaluator(built.graph, table, {})
    feeds = {}
    for name in built.graph.graph_inputs():
        shape = ev.shape_of(name)
        t = built.graph.tensor(name)
        if name.endswith(".tokens") or name.endswith(".labels"):
            feeds[name] = onehot_rows(rng, shape[:-1], shape[-1])
        elif name.endswith(".headmap"):
            kv, heads = shape
            m = np.zeros(shape)
            for n in range(heads):
                m[n * kv // heads, n] = 1.0
            feeds[name] = m
        elif name.endswith(".gain"):
            feeds[name] = rng.uniform(0.5, 1.5, size=shape)
        else:
            feeds[name] = rng.normal(0.0, scale, size=shape)
    return table, feeds


class TestCensus:
    def test_layer_counts_match_training_conventions(self):
        # 24-layer network, one microbatch: 4 matmuls/layer forward plus
        # embedding and head, tripled by backward; 2 attention kernels/layer
        m = ModelSpec(layers=24, hidden=4096, heads=32, vocab=50257,
                      seq=2048, norm="layernorm")
        built = build_model(m, TrainingSpec(batch=128, microbatch=1))
        g = built.graph
        fwd = Counter(n.category for n in g.nodes)
        assert fwd["GeMM"] == 24 * 4 + 2
        assert fwd["Attn"] == 24
        build_backward(g, built.loss)
        full = Counter(n.category for n in g.nodes)
        assert full["GeMM"] == 24 * 12 + 3 + 3
        assert full["Attn"] == 24 * 2

    def test_weight_census(self):
        m = tiny(layers=3)
        built = build_model(m, TRAIN)
        weights = [t for t in built.graph.tensors.values()
                   if t.role == "weight"]
        # per layer: 2 gains, qkv, out, up, down; plus embed, head gain,
        # unembed
        assert len(weights) == 3 * 6 + 3

    def test_inference_mode_has_no_loss(self):
        built = build_model(tiny(), TrainingSpec(batch=8, mode="inference"))
        assert built.loss is None
        assert built.graph.outputs == ["head.logits"]
        assert "head.labels" not in built.graph.tensors


class TestGradientsThroughFullModel:
    def fd_check(self, built, wrt_names, rtol=1e-4, seed=3):
        g = built.graph
        info = build_backward(g, built.loss)
        rng = np.random.default_rng(seed)
        table, feeds = model_feeds(built, rng)
        feeds[info.seed] = np.array(1.0)
        env = Evaluator(g, table, feeds).run()
        for name in wrt_names:
            got = env[info.grads[name]]
            want = finite_diff_grad(g, table, feeds, built.loss, name)
            denom = max(np.max(np.abs(want)), 1e-8)
            err = np.max(np.abs(got - want)) / denom
            assert err < rtol, f"{name}: rel err {err:.3g}"

    def test_mha_gpt_style(self):
        built = build_model(tiny(), TRAIN)
        self.fd_check(built, ["L0.attn.w_qkv", "L0.norm1.gain",
                              "embed.w_embed", "L0.ffn.w_down"])

    def test_gqa_llama_style(self):
        built = build_model(tiny(kv_heads=1, norm="rmsnorm",
                                 ffn="ffn_gateup"), TRAIN)
        self.fd_check(built, ["L0.attn.w_qkv", "L0.ffn.w_gate",
                              "head.w_unembed"])

    def test_ssm_block_model(self):
        built = build_model(tiny(block="ssm"), TRAIN)
        self.fd_check(built, ["L0.ssm.w_in", "L0.ssm.w_gate"])


class TestMoE:
    def spec(self):
        return tiny(layers=2, n_experts=2, experts_per_token=1,
                    moe_every=2, seq=4)

    def test_moe_structure(self):
        built = build_model(self.spec(), TRAIN)
        g = built.graph
        names = set(g.tensors)
        assert "L1.moe.router" in names and "L1.moe.combine" in names
        assert "L0.ffn.down" in names  # layer 0 stays dense
        route = g.tensor("L1.moe.route")
        assert not route.materialized
        build_backward(g, built.loss)
        g.validate()
        g.topo_order()

    def test_shared_expert_adds_dense_branch(self):
        built = build_model(tiny(n_experts=2, experts_per_token=1,
                                 seq=4, shared_expert=True), TRAIN)
        assert "L0.moe.shared.down" in built.graph.tensors
        assert "L0.moe.mixed" in built.graph.tensors

    def test_capacity_must_divide(self):
        built = build_model(tiny(n_experts=3, experts_per_token=1, seq=2),
                            TRAIN)
        with pytest.raises(InvalidSpecError):
            bindings_for(built)


class TestBuildModule:
    def test_unknown_component(self):
        reg = SymbolRegistry(model=["B", "S", "H"])
        b = _Builder(tiny(), reg)
        with pytest.raises(UnknownComponentError):
            build_module("conv2d", b, "x")

    def test_each_component_builds(self):
        from symtrace.models import MODEL_SYMBOL_NAMES
        for comp in ("mha", "gqa", "ffn_updown", "ffn_gateup", "rmsnorm",
                     "layernorm", "ssm_block", "moe", "moe_shared"):
            reg = SymbolRegistry(model=MODEL_SYMBOL_NAMES)
            b = _Builder(tiny(seq=4, n_experts=2, experts_per_token=1), reg)
            x = b.tensor("x", (b.d("B"), b.d("S"), b.d("H")))
            out = build_module(comp, b, "m", "x")
            assert out in b.g.tensors
            b.g.validate()

    def test_embedding_and_head(self):
        from symtrace.models import MODEL_SYMBOL_NAMES
        reg = SymbolRegistry(model=MODEL_SYMBOL_NAMES)
        b = _Builder(tiny(), reg)
        h = build_module("embedding", b, "emb")
        out = build_module("lm_head", b, "head", h)
        assert b.g.tensor(out).rank == 3


class TestMicrobatchAccounting:
    def test_replica_scope(self):
        t = TrainingSpec(batch=128, microbatch=1)
        assert t.replica_microbatch(dp=8) == 1
        assert t.n_microbatches(dp=8) == 16
        assert t.n_microbatches(dp=1) == 128

    def test_global_scope(self):
        t = TrainingSpec(batch=128, microbatch=8,
                         microbatch_scope="global")
        assert t.replica_microbatch(dp=8) == 1
        assert t.n_microbatches(dp=8) == 16

    def test_indivisible_raises(self):
        with pytest.raises(InvalidSpecError):
            TrainingSpec(batch=10, microbatch=3).n_microbatches(dp=1)


class TestFusedAttentionShape:
    def test_attention_region_members(self):
        built = build_model(tiny(), TRAIN)
        fused = [n for n in built.graph.nodes if isinstance(n, Fused)]
        assert len(fused) == 1
        node = fused[0]
        assert node.category == ATTN
        kinds = [getattr(m, "fn", m.kind) for m in node.members]
        assert kinds.count("narrow") == 3
        assert kinds.count("softmax") == 1
        assert kinds.count("einsum") == 2  # scores and context
        assert node.out == "L0.attn.att"
        # interior stays unmaterialized
        for m in node.members[:-1]:
            assert not built.graph.tensor(m.out).materialized

    def test_gqa_expands_inside_region(self):
        built = build_model(tiny(kv_heads=1), TRAIN)
        node = [n for n in built.graph.nodes if isinstance(n, Fused)][0]
        assert "L0.attn.headmap" in node.ins
        es = [m for m in node.members if isinstance(m, Einsum)]
        assert len(es) == 4  # two expansions + scores + context
