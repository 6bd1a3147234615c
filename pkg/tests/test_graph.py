"""Graph IR units: einsum specs, shape/placement inference, DAG checks."""

import pytest

from symtrace.dist import Distribution
from symtrace.errors import (
    CycleError,
    InvalidSpecError,
    RankMismatchError,
    ShapeConflictError,
)
from symtrace.graph import (
    Einsum,
    EinsumSpec,
    Elementwise,
    STGraph,
    SymTensor,
    infer_einsum_dist,
)
from symtrace.symbols import SymbolRegistry, parse_dim


def dims(reg, *texts):
    return tuple(parse_dim(t, reg) for t in texts)


class TestEinsumSpec:
    def test_parse_arrow(self):
        s = EinsumSpec.parse("bm,mn->bn")
        assert s.inputs == ("bm", "mn")
        assert s.output == "bn"
        assert s.contracted == ("m",)

    def test_parse_without_arrow_broadcasts_first_operand(self):
        s = EinsumSpec.parse("bsd,d")
        assert s.output == "bsd"
        assert s.contracted == ()

    def test_parse_scalar_output(self):
        s = EinsumSpec.parse("bsv,bsv->")
        assert s.output == ""
        assert set(s.contracted) == {"b", "s", "v"}

    def test_parse_rejects_unknown_output_index(self):
        with pytest.raises(InvalidSpecError):
            EinsumSpec.parse("bm,mn->bz")

    def test_infer_dims_chains_extents(self):
        reg = SymbolRegistry()
        g1 = dims(reg, "R0", "M1", "R1")
        g2 = dims(reg, "R1", "M2", "R2")
        s = EinsumSpec.parse("amb,bnc->amnc")
        _, out = s.infer_dims([g1, g2])
        assert out == dims(reg, "R0", "M1", "M2", "R2")

    def test_infer_dims_rank_mismatch(self):
        reg = SymbolRegistry()
        with pytest.raises(RankMismatchError):
            EinsumSpec.parse("ab,bc->ac").infer_dims(
                [dims(reg, "A", "B", "C"), dims(reg, "B", "C")])

    def test_infer_dims_extent_conflict(self):
        reg = SymbolRegistry()
        with pytest.raises(ShapeConflictError):
            EinsumSpec.parse("ab,bc->ac").infer_dims(
                [dims(reg, "A", "B"), dims(reg, "D", "C")])

    def test_backward_swaps_operand_with_output(self):
        s = EinsumSpec.parse("bm,mn->bn")
        assert str(s.backward(0)) == "bn,mn->bm"
        assert str(s.backward(1)) == "bn,bm->mn"

    def test_backward_of_batched(self):
        s = EinsumSpec.parse("bshd,bthd->bhst")
        assert str(s.backward(0)) == "bhst,bthd->bshd"
        assert str(s.backward(1)) == "bhst,bshd->bthd"


class TestEinsumDist:
    def setup_method(self, _):
        self.reg = SymbolRegistry(parallel=["tp", "dp"])
        self.tp = self.reg.get_parallel("tp")
        self.dp = self.reg.get_parallel("dp")

    def test_output_indices_inherit_shards(self):
        s = EinsumSpec.parse("bm,mn->bn")
        dx = Distribution.make({0: [self.dp]})
        dw = Distribution.make({1: [self.tp]})
        out = infer_einsum_dist(s, [dx, dw])
        assert out == Distribution.make({0: [self.dp], 1: [self.tp]})

    def test_contracted_shard_becomes_partial(self):
        s = EinsumSpec.parse("bm,mn->bn")
        dx = Distribution.make({1: [self.tp]})
        dw = Distribution.make({0: [self.tp]})
        out = infer_einsum_dist(s, [dx, dw])
        assert out == Distribution.make({}, [self.tp])

    def test_one_sided_contraction_shard_slices_the_replica(self):
        # the replicated operand is read in slices; the result is partial
        s = EinsumSpec.parse("bm,mn->bn")
        dx = Distribution.replicated()
        dw = Distribution.make({0: [self.tp]})
        out = infer_einsum_dist(s, [dx, dw])
        assert out == Distribution.make({}, [self.tp])

    def test_operand_partial_propagates(self):
        s = EinsumSpec.parse("bn,nk->bk")
        dx = Distribution.make({}, [self.tp])
        out = infer_einsum_dist(s, [dx, Distribution.replicated()])
        assert out.partial_sums == frozenset({self.tp})

    def test_incompatible_shards_on_one_index(self):
        s = EinsumSpec.parse("bm,mn->bn")
        dx = Distribution.make({1: [self.tp]})
        dw = Distribution.make({0: [self.dp]})
        with pytest.raises(ShapeConflictError):
            infer_einsum_dist(s, [dx, dw])


class TestSTGraph:
    def build(self):
        reg = SymbolRegistry()
        g = STGraph()
        for n in ("a", "b", "c"):
            g.add_tensor(SymTensor(n, dims(reg, "B", "H")))
        return g

    def test_single_producer_enforced(self):
        g = self.build()
        g.elementwise("b", "gelu", ["a"])
        with pytest.raises(InvalidSpecError):
            g.elementwise("b", "relu", ["a"])

    def test_cycle_detected(self):
        g = self.build()
        g.elementwise("b", "gelu", ["a"])
        g.elementwise("a", "relu", ["b"])
        with pytest.raises(CycleError) as e:
            g.topo_order()
        assert len(e.value.cycle) == 2

    def test_topo_is_creation_order_for_chains(self):
        g = self.build()
        n1 = g.elementwise("b", "gelu", ["a"])
        n2 = g.elementwise("c", "relu", ["b"])
        assert [n.id for n in g.topo_order()] == [n1.id, n2.id]

    def test_ids_are_deterministic(self):
        ids1 = [n.id for n in self.build_chain().nodes]
        ids2 = [n.id for n in self.build_chain().nodes]
        assert ids1 == ids2

    def build_chain(self):
        g = self.build()
        g.elementwise("b", "gelu", ["a"])
        g.einsum("c", "bh,bh->bh", ["a", "b"])
        return g

    def test_category_of_movement_fns(self):
        g = self.build()
        t = g.elementwise("b", "transpose", ["a"])
        e = g.elementwise("c", "gelu", ["a"])
        assert t.category == "Others"
        assert e.category == "ElementWise"
