"""Tensor distribution states.

A Distribution describes, per parallel symbol, how one logical tensor is laid
out over the device mesh:

  * Replicated  -- every rank in the symbol's group holds the full tensor
  * Shard(d)    -- the tensor is split along dimension d across the group
  * PartialSum  -- every rank holds an addend; the true value is the group sum

A symbol appears in at most one of dim_shards / partial_sums, and shards at
most one dimension; a dimension may be sharded by several symbols at once,
nested outer-to-inner in list order.  A collective always splices at the
innermost level (it splits or merges what a rank is already holding), so
edits append to the end of the list.  PartialSum is a property of the
distribution, not of the dimension expressions, which always describe the
full logical size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Optional, Tuple

from .errors import DoubleShardError
from .symbols import PARALLEL, Symbol

REPLICATED = "R"
SHARD = "S"
PARTIAL = "P"


def _norm_shards(dim_shards: Dict[int, Iterable[Symbol]]) -> Tuple[Tuple[int, Tuple[Symbol, ...]], ...]:
    # symbol order within a dim is outer-to-inner nesting and is significant;
    # first occurrence wins on duplicates
    out = []
    for d in sorted(dim_shards):
        seen = []
        for s in dim_shards[d]:
            if s not in seen:
                seen.append(s)
        if seen:
            out.append((d, tuple(seen)))
    return tuple(out)


@dataclass(frozen=True)
class Distribution:
    dim_shards: Tuple[Tuple[int, Tuple[Symbol, ...]], ...] = ()
    partial_sums: FrozenSet[Symbol] = field(default_factory=frozenset)

    @staticmethod
    def replicated() -> "Distribution":
        return Distribution()

    @staticmethod
    def make(dim_shards: Optional[Dict[int, Iterable[Symbol]]] = None,
             partial_sums: Iterable[Symbol] = ()) -> "Distribution":
        d = Distribution(_norm_shards(dim_shards or {}), frozenset(partial_sums))
        d.check()
        return d

    def check(self) -> None:
        seen = set()
        for dim, syms in self.dim_shards:
            for s in syms:
                if s.kind != PARALLEL:
                    raise DoubleShardError(f"{s.name} is not a parallel symbol")
                if s in seen:
                    raise DoubleShardError(
                        f"symbol {s.name} shards more than one dimension")
                seen.add(s)
        for s in self.partial_sums:
            if s in seen:
                raise DoubleShardError(
                    f"symbol {s.name} both shards and partial-sums")
            seen.add(s)

    # -- queries --

    def symbols(self) -> Tuple[Symbol, ...]:
        syms = [s for _, ss in self.dim_shards for s in ss]
        syms.extend(self.partial_sums)
        return tuple(sorted(set(syms), key=lambda s: s.name))

    def state_of(self, sym: Symbol) -> Tuple[str, Optional[int]]:
        for dim, syms in self.dim_shards:
            if sym in syms:
                return (SHARD, dim)
        if sym in self.partial_sums:
            return (PARTIAL, None)
        return (REPLICATED, None)

    def shards_of_dim(self, dim: int) -> Tuple[Symbol, ...]:
        for d, syms in self.dim_shards:
            if d == dim:
                return syms
        return ()

    def shard_map(self) -> Dict[int, Tuple[Symbol, ...]]:
        return {d: syms for d, syms in self.dim_shards}

    # -- edits (return new Distribution) --

    def with_state(self, sym: Symbol, state: str, dim: Optional[int] = None) -> "Distribution":
        shards = {d: [s for s in syms if s != sym] for d, syms in self.dim_shards}
        partial = set(self.partial_sums) - {sym}
        if state == SHARD:
            if dim is None:
                raise ValueError("Shard state needs a dim")
            shards.setdefault(dim, []).append(sym)
        elif state == PARTIAL:
            partial.add(sym)
        elif state != REPLICATED:
            raise ValueError(f"bad state {state}")
        return Distribution.make(shards, partial)

    def without(self, sym: Symbol) -> "Distribution":
        return self.with_state(sym, REPLICATED)

    def restricted(self, keep: Iterable[Symbol]) -> "Distribution":
        keep = set(keep)
        shards = {d: [s for s in syms if s in keep] for d, syms in self.dim_shards}
        partial = self.partial_sums & keep
        return Distribution.make(shards, partial)

    def remap_dims(self, mapping: Dict[int, int]) -> "Distribution":
        """Move shard annotations to new dimension positions (for reshapes)."""
        shards: Dict[int, list] = {}
        for d, syms in self.dim_shards:
            nd = mapping.get(d)
            if nd is None:
                raise ValueError(f"no mapping for sharded dim {d}")
            shards.setdefault(nd, []).extend(syms)
        return Distribution.make(shards, self.partial_sums)

    def is_fully_replicated(self) -> bool:
        return not self.dim_shards and not self.partial_sums

    def shard_degree(self, dim: int, degrees: Dict[Symbol, int]) -> int:
        n = 1
        for s in self.shards_of_dim(dim):
            n *= degrees.get(s, 1)
        return n

    # -- textual form used by the template printer --

    def annotate(self, dim_texts) -> str:
        parts = []
        for i, txt in enumerate(dim_texts):
            suffix = "".join("/" + s.name for s in self.shards_of_dim(i))
            parts.append(txt + suffix)
        body = ", ".join(parts)
        if self.partial_sums:
            body += " @ 1" + "".join(
                "/" + s.name for s in sorted(self.partial_sums, key=lambda s: s.name))
        return body

    def __str__(self):
        segs = []
        for d, syms in self.dim_shards:
            segs.append(f"{d}:{'+'.join(s.name for s in syms)}")
        if self.partial_sums:
            segs.append("partial:" + "+".join(s.name for s in sorted(self.partial_sums, key=lambda s: s.name)))
        return "{" + ", ".join(segs) + "}" if segs else "{replicated}"
