"""Collective selection: convert a producer's distribution to a consumer's.

For each parallel symbol whose state differs between producer and consumer,
a single transition supplies the conversion:

    PartialSum  -> Replicated   AllReduce
    PartialSum  -> Shard(d)     ReduceScatter
    Shard(d)    -> Replicated   AllGather
    Shard(d1)   -> Shard(d2)    AllToAll
    Replicated  -> Shard(d)     local slice (no communication)
    *           -> PartialSum   unsupported (nothing can manufacture addends)

Each symbol contributes at most one collective per edge.  The steps are then
scheduled so the composed data movement is exact: a step that removes a
symbol's split from a dimension (AllGather, or the AllToAll source side) must
run while that symbol is the innermost split there, i.e. before any step that
adds a new split to the same dimension.  Subject to those dependencies,
partial-sum-resolving steps run first (they shrink data before it moves) and
ties follow mesh order.

Mutual AllToAll cycles (two symbols swapping dimensions) cannot be sequenced
that way; the symbol latest in mesh order is rerouted through replication
(AllGather + local slice) to break the cycle.  This costs more bandwidth but
keeps every intermediate layout exact, and it still uses only one collective
for the rerouted symbol.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

from .dist import Distribution, PARTIAL, REPLICATED, SHARD
from .errors import UnsupportedTargetError
from .symbols import Symbol

ALL_REDUCE = "AllReduce"
ALL_GATHER = "AllGather"
REDUCE_SCATTER = "ReduceScatter"
ALL_TO_ALL = "AllToAll"
SLICE = "Slice"

#: Collective kinds that resolve a pending partial sum.
RESOLVING = frozenset({ALL_REDUCE, REDUCE_SCATTER})


@dataclass(frozen=True)
class CommStep:
    """One conversion step for one parallel symbol.

    ``dim`` is the dimension acted on by AllGather / ReduceScatter / Slice;
    AllToAll uses ``src_dim`` and ``dst_dim`` instead.
    """

    kind: str
    symbol: Symbol
    dim: Optional[int] = None
    src_dim: Optional[int] = None
    dst_dim: Optional[int] = None

    def adds_dim(self) -> Optional[int]:
        if self.kind in (REDUCE_SCATTER, SLICE):
            return self.dim
        if self.kind == ALL_TO_ALL:
            return self.dst_dim
        return None

    def removes_dim(self) -> Optional[int]:
        if self.kind == ALL_GATHER:
            return self.dim
        if self.kind == ALL_TO_ALL:
            return self.src_dim
        return None

    def __str__(self):
        if self.kind == ALL_TO_ALL:
            return f"{self.kind}({self.symbol.name}, dim{self.src_dim}->dim{self.dst_dim})"
        if self.dim is None:
            return f"{self.kind}({self.symbol.name})"
        return f"{self.kind}({self.symbol.name}, dim{self.dim})"


def step_for_symbol(sym: Symbol, producer: Distribution, consumer: Distribution) -> Optional[CommStep]:
    """The single transition for ``sym``, or None when its state already matches."""
    src_state, src_dim = producer.state_of(sym)
    dst_state, dst_dim = consumer.state_of(sym)
    if (src_state, src_dim) == (dst_state, dst_dim):
        return None
    if dst_state == PARTIAL:
        raise UnsupportedTargetError(
            f"no collective converts {src_state} to a partial sum over {sym.name}"
        )
    if src_state == PARTIAL:
        if dst_state == REPLICATED:
            return CommStep(ALL_REDUCE, sym)
        return CommStep(REDUCE_SCATTER, sym, dim=dst_dim)
    if src_state == SHARD:
        if dst_state == REPLICATED:
            return CommStep(ALL_GATHER, sym, dim=src_dim)
        return CommStep(ALL_TO_ALL, sym, src_dim=src_dim, dst_dim=dst_dim)
    # replicated -> shard: every rank already holds the data; just keep a slice
    return CommStep(SLICE, sym, dim=dst_dim)


def apply_step(dist: Distribution, step: CommStep) -> Distribution:
    """Distribution after one step."""
    if step.kind in (ALL_REDUCE, ALL_GATHER):
        return dist.with_state(step.symbol, REPLICATED)
    if step.kind in (REDUCE_SCATTER, SLICE):
        return dist.with_state(step.symbol, SHARD, step.dim)
    if step.kind == ALL_TO_ALL:
        return dist.with_state(step.symbol, SHARD, step.dst_dim)
    raise ValueError(f"unknown step kind {step.kind!r}")


def _schedule(steps: List[CommStep], rank_of) -> List[CommStep]:
    """Order steps so removals from a dimension precede additions to it.

    Among ready steps, partial-resolving ones run first, then mesh order.
    A deadlock is a cycle of AllToAlls swapping dimensions; the one latest in
    mesh order is rerouted as AllGather + slice and scheduling resumes.
    """
    pending = list(steps)
    out: List[CommStep] = []
    while pending:
        ready = [
            s
            for s in pending
            if s.adds_dim() is None
            or not any(o is not s and o.removes_dim() == s.adds_dim() for o in pending)
        ]
        if not ready:
            # only mutually-swapping AllToAlls can deadlock: they are the sole
            # steps that both remove from one dimension and add to another
            swaps = [s for s in pending if s.kind == ALL_TO_ALL]
            assert swaps, [str(s) for s in pending]
            victim = max(swaps, key=rank_of)
            pending.remove(victim)
            pending.append(CommStep(ALL_GATHER, victim.symbol, dim=victim.src_dim))
            pending.append(CommStep(SLICE, victim.symbol, dim=victim.dst_dim))
            continue
        ready.sort(key=lambda s: (0 if s.kind in RESOLVING else 1, rank_of(s)))
        chosen = ready[0]
        pending.remove(chosen)
        out.append(chosen)
    return out


def steps_between(producer: Distribution,
                  consumer: Distribution) -> List[CommStep]:
    """The per-symbol transitions between two layouts, unscheduled.

    Symbols are visited in name order so the result is deterministic; use
    :func:`match_collective` for the executable ordering.
    """
    involved = sorted(set(producer.symbols()) | set(consumer.symbols()),
                      key=lambda s: s.name)
    steps = []
    for sym in involved:
        step = step_for_symbol(sym, producer, consumer)
        if step is not None:
            steps.append(step)
    return steps


def match_collective(
    producer: Distribution,
    consumer: Distribution,
    mesh_order: Sequence[Symbol],
) -> List[CommStep]:
    """Steps converting ``producer``'s layout into ``consumer``'s.

    Returns at most one collective per differing symbol, scheduled so that
    replaying the sequence moves real data exactly (see module docstring).
    Raises UnsupportedTargetError when the consumer asks for a partial sum
    the producer does not already have.
    """
    involved = set(producer.symbols()) | set(consumer.symbols())
    ordered = [s for s in mesh_order if s in involved]
    extras = sorted(involved - set(ordered), key=lambda s: s.name)
    ordered.extend(extras)
    ranks = {sym: i for i, sym in enumerate(ordered)}

    steps = steps_between(producer, consumer)

    def rank_of(step: CommStep) -> int:
        return ranks.get(step.symbol, len(ordered))

    return _schedule(steps, rank_of)
