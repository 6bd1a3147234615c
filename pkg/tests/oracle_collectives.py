"""Independent data-movement oracle for collective sequences.

Simulates a device array holding real numpy chunks and applies the
definitional semantics of each collective: members of the symbol's group
exchange data, reduce-kinds sum addends, and every rank ends up holding its
canonical chunk of the transformed distribution (any local reorder a kernel
performs for nested splits is folded in; it costs no extra traffic).

The simulation is deliberately literal: for every step each group scatters
its members' chunks into a logical-size buffer at the positions the current
distribution assigns them, then re-slices the buffer under the stepped
distribution.  Nothing here is shared with the library code under test; the
step bookkeeping is re-derived from the collective definitions.
"""

from itertools import product as iproduct

import numpy as np

from symtrace.dist import Distribution, SHARD
from symtrace.matcher import (
    ALL_GATHER,
    ALL_REDUCE,
    ALL_TO_ALL,
    REDUCE_SCATTER,
    SLICE,
)


class DeviceArray:
    def __init__(self, degrees):
        """degrees: ordered dict-like of Symbol -> int."""
        self.syms = list(degrees)
        self.degrees = {s: degrees[s] for s in self.syms}

    def coords(self):
        return list(iproduct(*[range(self.degrees[s]) for s in self.syms]))

    def axis(self, sym):
        return self.syms.index(sym)

    def group_of(self, coord, sym):
        ax = self.axis(sym)
        out = []
        for v in range(self.degrees[sym]):
            c = list(coord)
            c[ax] = v
            out.append(tuple(c))
        return out


def chunk_slices(dev, dist, coord, full_shape):
    """Canonical chunk of the logical tensor held by `coord` under `dist`:
    nested splits narrow the dim outer-to-inner in annotation order."""
    slices = []
    shard_map = dist.shard_map()
    for d, size in enumerate(full_shape):
        start = 0
        for s in shard_map.get(d, ()):
            deg = dev.degrees[s]
            assert size % deg == 0, (d, size, deg)
            size //= deg
            start += coord[dev.axis(s)] * size
        slices.append(slice(start, start + size))
    return tuple(slices)


def stepped(dist: Distribution, step) -> Distribution:
    """Distribution after one collective, re-derived from its definition."""
    s = step.symbol
    if step.kind == ALL_REDUCE:
        return dist.with_state(s, "R")
    if step.kind == ALL_GATHER:
        return dist.with_state(s, "R")
    if step.kind == REDUCE_SCATTER:
        return dist.with_state(s, SHARD, step.dim)
    if step.kind == ALL_TO_ALL:
        return dist.with_state(s, SHARD, step.dst_dim)
    if step.kind == SLICE:
        return dist.with_state(s, SHARD, step.dim)
    raise AssertionError(step.kind)


def place(dev, dist: Distribution, full, rng):
    """Initial per-device chunks: canonical shard slices, random integer
    addend decompositions for partial sums."""
    partial_syms = sorted(dist.partial_sums, key=lambda s: s.name)
    combos = list(iproduct(*[range(dev.degrees[s]) for s in partial_syms]))
    addends = {}
    if partial_syms:
        total = np.zeros_like(full)
        for combo in combos[:-1]:
            a = rng.integers(-50, 50, size=full.shape)
            addends[combo] = a
            total = total + a
        addends[combos[-1]] = full - total
    state = {}
    for coord in dev.coords():
        base = full
        if partial_syms:
            key = tuple(coord[dev.axis(s)] for s in partial_syms)
            base = addends[key]
        state[coord] = base[chunk_slices(dev, dist, coord, full.shape)].copy()
    return state


def run_step(dev, state, dist, step, full_shape):
    after = stepped(dist, step)
    reduces = step.kind in (ALL_REDUCE, REDUCE_SCATTER)
    new = {}
    done = set()
    for coord in dev.coords():
        if coord in done:
            continue
        group = [coord] if step.kind == SLICE else dev.group_of(coord, step.symbol)
        done.update(group)
        buf = np.zeros(full_shape, dtype=state[coord].dtype)
        for c in group:
            sl = chunk_slices(dev, dist, c, full_shape)
            if reduces:
                buf[sl] = buf[sl] + state[c]
            else:
                buf[sl] = state[c]
        for c in group:
            new[c] = buf[chunk_slices(dev, after, c, full_shape)].copy()
    return new, after


def run_sequence(dev, state, dist, steps, full_shape):
    for st in steps:
        state, dist = run_step(dev, state, dist, st, full_shape)
    return state, dist


def check_transfer(dev, producer, consumer, steps, full, rng):
    """True iff applying `steps` to the producer placement reproduces the
    consumer placement of `full` on every device, element for element."""
    state = place(dev, producer, full, rng)
    state, final = run_sequence(dev, state, producer, steps, full.shape)
    want = place(dev, consumer, full, rng)
    for coord in dev.coords():
        if state[coord].shape != want[coord].shape:
            return False
        if not np.array_equal(state[coord], want[coord]):
            return False
    return True
