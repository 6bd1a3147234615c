"""Template format: parsing, inference, nested collectives, round-trips.

The fixture fragments exercise every grammar feature on realistic sharded
kernels: a state-space block (nested AllReduce, pscan, arrow-free einsum,
names shadowing size symbols), a fully-sharded linear layer (AllGather /
ReduceScatter pair with partial annotations), an interleaved
data/tensor-parallel MLP (declared AllToAll), and a distributed tensor-train
contraction (nested ReduceScatter(AllGather(...)) chains without explicit
symbols).
"""

import pytest

from symtrace.dist import Distribution
from symtrace.errors import (
    InvalidSpecError,
    RankMismatchError,
    ShapeConflictError,
    TemplateSyntaxError,
    UndefinedTensorError,
)
from symtrace.graph import CommNode, Einsum, Elementwise, PScan
from symtrace.template import parse

SSM = """\
# selective state-space block, batch and channel sharded
Inputs:
x[B/p1,S,D/p2]
wdt1[D/p2,R], wdt2[R,D/p2]
A[D/p2,P], B[B/p1,S,P]
C[B/p1,S,P], D[D/p2]
Output:
y[B/p1,S,D]
Compute:
dt1[B/p1,S,R] = AllReduce(einsum[bsd,de->bse](x, wdt1))
dt[B/p1,S,D/p2] = einsum[bse,ed->bsd](dt1, wdt2)
dA[B/p1,S,D/p2,P] = einsum[dp,bsd->bsdp](A, dt)
dB[B/p1,S,D/p2,P] = einsum[bsp,bsd->bsdp](B, dt)
deltaB[B/p1,S,D/p2,P] = einsum[bsdp,bsd->bsdp](dB, x)
hs[B/p1,S,D/p2,P] = pscan[dim=1](dA, deltaB)
y0[B/p1,S,D/p2] = einsum[bsdp,bsp->bsd](hs, C)
y[B/p1,S,D/p2] = einsum[bsd,d](y0, D)
"""

FSTP = """\
Inputs:
X[Batch/dp, D1/tp]
Weights:
W[D1/tp, D2]
Output:
Y[Batch/dp, D2/tp]
Compute:
X*[Batch/dp, D1] = AllGather[tp](X)
Y*[Batch/dp, D2@1/tp] = einsum[bm,mn->bn](X*, W)
Y[Batch/dp, D2/tp] = ReduceScatter[tp](Y*)
"""

INTERLEAVED = """\
Inputs:
X0[Batch/p, D1]
Weights:
W1[D1, D2], W2[D2/p, D3]
Output:
X2[Batch, D3]
Compute:
X1[Batch/p, D2] = einsum[bm,mn->bn](X0, W1)
X1*[Batch, D2/p] = AllToAll(X1)
X2[Batch, D3@1/p] = einsum[bm,mn->bn](X1*, W2)
"""

TENSOR_TRAIN = """\
Inputs:
G1[R0, M1, R1/p1], G2[R1/p1, M2/p2, R2]
G3[R2/p1, M3/p2, R3], G4[R3/p1, M4/p2, R4]
Output:
X*[R0/p1, M1, M2, M3, M4/p2, R4]
Compute:
T1[R0, M1, M2/p2, R2@1/p1] = einsum[amb,bnc->amnc](G1, G2)
T1*[R0, M1, M2, R2/p1] = ReduceScatter(AllGather(T1))
T2[R0, M1, M2, M3/p2, R3@1/p1] = einsum[amnc,cod->amnod](T1*, G3)
T2*[R0, M1, M2, M3, R3/p1] = ReduceScatter(AllGather(T2))
X[R0, M1, M2, M3, M4/p2, R4@1/p1] = einsum[amnod,dpe->amnope](T2*, G4)
X*[R0/p1, M1, M2, M3, M4/p2, R4] = ReduceScatter(X)
"""


def kinds(t):
    out = []
    for n in t.graph.nodes:
        out.append(n.kind if not isinstance(n, CommNode) else n.kind)
    return out


class TestSSM:
    def test_node_census(self):
        t = parse(SSM)
        ein = [n for n in t.graph.nodes if isinstance(n, Einsum)]
        scans = [n for n in t.graph.nodes if isinstance(n, PScan)]
        comms = [n for n in t.graph.nodes if isinstance(n, CommNode)]
        assert len(ein) == 7
        assert len(scans) == 1
        assert len(comms) == 1
        assert comms[0].kind == "AllReduce"
        assert comms[0].symbol.name == "p2"

    def test_scan_dim(self):
        t = parse(SSM)
        scan = next(n for n in t.graph.nodes if isinstance(n, PScan))
        assert scan.scan_dim == 1
        assert scan.ins == ("dA", "deltaB")

    def test_tensor_name_shadows_size_symbol(self):
        t = parse(SSM)
        bt = t.graph.tensor("B")
        assert [str(d) for d in bt.dims] == ["B", "S", "P"]

    def test_nested_einsum_result_is_partial_before_the_allreduce(self):
        t = parse(SSM)
        comm = next(n for n in t.graph.nodes if isinstance(n, CommNode))
        inner = t.graph.tensor(comm.ins[0])
        p2 = t.registry.get_parallel("p2")
        assert inner.dist.partial_sums == frozenset({p2})
        assert comm.ins[0] in t.inline

    def test_arrow_free_einsum_broadcasts(self):
        t = parse(SSM)
        node = t.graph.node(t.graph.producer["y"])
        assert str(node.spec) == "bsd,d->bsd"

    def test_interface_lists(self):
        t = parse(SSM)
        assert t.inputs == ["x", "wdt1", "wdt2", "A", "B", "C", "D"]
        assert t.outputs == ["y"]


class TestFSTP:
    def test_gather_compute_scatter(self):
        t = parse(FSTP)
        tp = t.registry.get_parallel("tp")
        dp = t.registry.get_parallel("dp")
        ag, rs = (n for n in t.graph.nodes if isinstance(n, CommNode))
        assert (ag.kind, ag.symbol, ag.dim) == ("AllGather", tp, 1)
        assert (rs.kind, rs.symbol, rs.dim) == ("ReduceScatter", tp, 1)
        mid = t.graph.tensor("Y*")
        assert mid.dist == Distribution.make({0: [dp]}, [tp])

    def test_weights_section_sets_role(self):
        t = parse(FSTP)
        assert t.graph.tensor("W").role == "weight"
        assert t.graph.tensor("X").role == "input"
        assert t.weights == ["W"]


class TestInterleaved:
    def test_declared_all_to_all(self):
        t = parse(INTERLEAVED)
        ein = [n for n in t.graph.nodes if isinstance(n, Einsum)]
        comms = [n for n in t.graph.nodes if isinstance(n, CommNode)]
        assert len(ein) == 2
        assert len(comms) == 1
        a2a = comms[0]
        assert a2a.kind == "AllToAll"
        assert a2a.symbol.name == "p"
        assert (a2a.src_dim, a2a.dim) == (0, 1)


class TestTensorTrain:
    def test_chain_census(self):
        t = parse(TENSOR_TRAIN)
        ein = [n for n in t.graph.nodes if isinstance(n, Einsum)]
        comms = [n for n in t.graph.nodes if isinstance(n, CommNode)]
        assert len(ein) == 3
        assert [c.kind for c in comms] == [
            "AllGather", "ReduceScatter",
            "AllGather", "ReduceScatter",
            "ReduceScatter",
        ]

    def test_nested_symbols_inferred_from_distributions(self):
        t = parse(TENSOR_TRAIN)
        p1 = t.registry.get_parallel("p1")
        p2 = t.registry.get_parallel("p2")
        comms = [n for n in t.graph.nodes if isinstance(n, CommNode)]
        assert [(c.kind, c.symbol) for c in comms[:2]] == [
            ("AllGather", p2), ("ReduceScatter", p1)]
        final = comms[-1]
        assert (final.kind, final.symbol, final.dim) == (
            "ReduceScatter", p1, 0)

    def test_contraction_over_shared_sharded_index_yields_partial(self):
        t = parse(TENSOR_TRAIN)
        p1 = t.registry.get_parallel("p1")
        t1 = t.graph.tensor("T1")
        assert t1.dist.partial_sums == frozenset({p1})


class TestRoundTrip:
    @pytest.mark.parametrize("src", [SSM, FSTP, INTERLEAVED, TENSOR_TRAIN],
                             ids=["ssm", "fstp", "interleaved", "tt"])
    def test_print_parse_print_is_stable(self, src):
        once = str(parse(src))
        twice = str(parse(once))
        assert once == twice

    def test_reparse_preserves_structure(self):
        t1 = parse(TENSOR_TRAIN)
        t2 = parse(str(t1))
        assert [n.kind for n in t1.graph.nodes] == [
            n.kind for n in t2.graph.nodes]
        for n1, n2 in zip(t1.graph.nodes, t2.graph.nodes):
            if isinstance(n1, CommNode):
                assert (n1.symbol, n1.dim, n1.src_dim) == (
                    n2.symbol, n2.dim, n2.src_dim)


class TestErrors:
    def test_unknown_tensor_reports_line(self):
        with pytest.raises(UndefinedTensorError) as e:
            parse("Compute:\ny = gelu(x)\n")
        assert "line 2" in str(e.value)

    def test_missing_equals(self):
        with pytest.raises(TemplateSyntaxError) as e:
            parse("Compute:\ngelu(x)\n")
        assert e.value.line == 2

    def test_statement_outside_section(self):
        with pytest.raises(TemplateSyntaxError) as e:
            parse("x[B] = gelu(y)\n")
        assert e.value.line == 1

    def test_unclosed_paren_has_column(self):
        with pytest.raises(TemplateSyntaxError) as e:
            parse("Inputs:\nx[B]\nCompute:\ny[B] = gelu(x\n")
        assert e.value.line == 4
        assert e.value.col is not None

    def test_rank_mismatch(self):
        src = "Inputs:\nx[B,S]\nw[S]\nCompute:\ny[B] = einsum[bs,st->bt](x, w)\n"
        with pytest.raises(RankMismatchError):
            parse(src)

    def test_extent_conflict(self):
        src = ("Inputs:\nx[B,S]\nw[T,U]\n"
               "Compute:\ny[B,U] = einsum[bs,su->bu](x, w)\n")
        with pytest.raises(ShapeConflictError):
            parse(src)

    def test_double_declaration(self):
        with pytest.raises(InvalidSpecError):
            parse("Inputs:\nx[B]\nx[B]\n")

    def test_bare_collective_without_target_annotation(self):
        src = "Inputs:\nx[B/tp]\nCompute:\ny = AllGather(x)\n"
        with pytest.raises(TemplateSyntaxError):
            parse(src)

    def test_collective_that_contradicts_annotations(self):
        src = ("Inputs:\nx[B/tp]\n"
               "Compute:\ny[B/tp] = AllGather[tp](x)\n")
        with pytest.raises(TemplateSyntaxError):
            parse(src)

    def test_partial_target_needs_matching_rhs(self):
        # declaring a partial the computation does not produce is an error
        src = ("Inputs:\nx[B]\nCompute:\ny[B @ 1/tp] = gelu(x)\n")
        with pytest.raises(TemplateSyntaxError):
            parse(src)

    def test_case_sensitivity(self):
        src = "Inputs:\nx[B]\nX[B]\nCompute:\ny[B] = gelu(x)\n"
        t = parse(src)
        assert "x" in t.graph.tensors and "X" in t.graph.tensors


class TestSmallForms:
    def test_bare_partial_marker_is_noop(self):
        src = "Inputs:\nx[B, H @ 1]\nCompute:\ny[B, H] = gelu(x)\n"
        t = parse(src)
        assert t.graph.tensor("x").dist.is_fully_replicated()

    def test_alias_statement_makes_identity(self):
        src = "Inputs:\nx[B]\nCompute:\ny = x\n"
        t = parse(src)
        node = t.graph.node(t.graph.producer["y"])
        assert isinstance(node, Elementwise) and node.fn == "identity"

    def test_trailing_comment_and_blank_lines(self):
        src = "\nInputs:\n\nx[B]  # batch vector\nCompute:\ny[B] = gelu(x)\n\n"
        t = parse(src)
        assert t.inputs == ["x"]

    def test_constant_coefficient_dims(self):
        src = "Inputs:\nx[B, 4H/tp]\nCompute:\ny[B, 4H/tp] = gelu(x)\n"
        t = parse(src)
        x = t.graph.tensor("x")
        assert str(x.dims[1]) == "4H"
        tp = t.registry.get_parallel("tp")
        assert x.dist.shards_of_dim(1) == (tp,)
