"""Poisson hierarchies: branching structure, rate trees, observations, sampling.

Nodes at depth ``d`` are stored as a flat array of length ``n_1 * ... * n_d``
in row-major (mixed-radix) order, so the children of node ``k`` at depth
``d`` occupy indices ``k * n_{d+1}`` to ``(k + 1) * n_{d+1} - 1`` at depth
``d + 1``.  Every count/rate array may carry leading batch axes; the node
axis is always last.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .errors import DomainError, ShapeError

#: Replications per independent random stream in batched sampling.
BLOCK_SIZE = 16384


@dataclass(frozen=True)
class HierarchySpec:
    """Branching structure ``(n_1, ..., n_D)`` of a D-level hierarchy."""

    branching: tuple[int, ...]

    def __post_init__(self):
        branching = tuple(int(n) for n in self.branching)
        if len(branching) < 1:
            raise DomainError("a hierarchy needs at least one level")
        if any(n < 1 for n in branching):
            raise DomainError(f"branching factors must be >= 1, got {branching}")
        object.__setattr__(self, "branching", branching)

    @property
    def depth(self) -> int:
        return len(self.branching)

    def width(self, d: int) -> int:
        """Number of nodes at depth ``d`` (1 at the root)."""
        return int(np.prod(self.branching[:d], dtype=np.int64))

    @property
    def n_leaves(self) -> int:
        return self.width(self.depth)

    @property
    def n_nodes(self) -> int:
        return sum(self.width(d) for d in range(self.depth + 1))

    def leaves_below(self, d: int) -> int:
        """Leaves under one node at depth ``d``, i.e. ``n_{d+1} * ... * n_D``."""
        return int(np.prod(self.branching[d:], dtype=np.int64))

    def address(self, d: int, index: int) -> tuple[int, ...]:
        """1-based address ``(i_1, ..., i_d)`` of flat node ``index`` at depth ``d``."""
        if not 0 <= index < self.width(d):
            raise ShapeError(f"index {index} out of range at depth {d}")
        digits = []
        for n in reversed(self.branching[:d]):
            index, r = divmod(index, n)
            digits.append(r + 1)
        return tuple(reversed(digits))

    def index(self, address: Sequence[int]) -> int:
        """Flat index of a 1-based node address."""
        d = len(address)
        if d > self.depth:
            raise ShapeError(f"address {tuple(address)} deeper than the hierarchy")
        k = 0
        for i, n in zip(address, self.branching[:d]):
            if not 1 <= i <= n:
                raise ShapeError(f"address {tuple(address)} out of range")
            k = k * n + (i - 1)
        return k

    def sum_children(self, values: np.ndarray, d: int) -> np.ndarray:
        """Sum depth-``d+1`` values into their depth-``d`` parents."""
        n = self.branching[d]
        values = np.asarray(values)
        return values.reshape(values.shape[:-1] + (self.width(d), n)).sum(axis=-1)

    def sibling_sums(self, values: np.ndarray, d: int) -> np.ndarray:
        """For each depth-``d`` node, the sum over it and its siblings (d >= 1)."""
        n = self.branching[d - 1]
        parent = self.sum_children(values, d - 1)
        return np.repeat(parent, n, axis=-1)

    def aggregate_leaves(self, leaves: np.ndarray) -> tuple[np.ndarray, ...]:
        """All per-depth sums of a leaf array, ordered root first."""
        leaves = np.asarray(leaves, dtype=float)
        if leaves.shape[-1] != self.n_leaves:
            raise ShapeError(
                f"expected {self.n_leaves} leaves, got {leaves.shape[-1]}"
            )
        levels = [leaves]
        for d in range(self.depth - 1, -1, -1):
            levels.append(self.sum_children(levels[-1], d))
        return tuple(reversed(levels))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ParamTree:
    """Leaf rates with every node aggregate and branch ratio precomputed.

    ``rates[d]`` are the aggregates at depth ``d`` (``rates[0][0]`` is the
    total rate), ``ratios[d]`` for ``d >= 1`` are each node's share of its
    parent.  For two-level trees ``ratios[2]`` are the within-group shares.
    """

    spec: HierarchySpec
    rates: tuple[np.ndarray, ...]

    @property
    def leaves(self) -> np.ndarray:
        return self.rates[-1]

    @property
    def total(self) -> float:
        return float(self.rates[0][0])

    @cached_property
    def ratios(self) -> tuple[np.ndarray | None, ...]:
        out: list[np.ndarray | None] = [None]
        for d in range(1, self.spec.depth + 1):
            parent = np.repeat(self.rates[d - 1], self.spec.branching[d - 1])
            out.append(_frozen(self.rates[d] / parent))
        return tuple(out)


def build_param_tree(spec: HierarchySpec, leaf_rates: Sequence[float]) -> ParamTree:
    """Populate every aggregate and ratio from the leaf rates.

    Raises ``ShapeError`` on a length mismatch and ``DomainError`` when a
    rate is not strictly positive.
    """
    leaves = np.asarray(leaf_rates, dtype=float)
    if leaves.ndim != 1 or leaves.size != spec.n_leaves:
        raise ShapeError(
            f"branching {spec.branching} needs {spec.n_leaves} leaf rates, "
            f"got shape {leaves.shape}"
        )
    if not np.all(np.isfinite(leaves)) or np.any(leaves <= 0):
        raise DomainError("leaf rates must be finite and strictly positive")
    return ParamTree(spec, tuple(_frozen(r) for r in spec.aggregate_leaves(leaves)))


def tree_from_ratios(
    spec: HierarchySpec, total: float, ratios: Sequence[Sequence[float]]
) -> ParamTree:
    """Build a tree from a total rate and per-depth share vectors.

    ``ratios[d-1]`` holds the shares of all depth-``d`` nodes; each sibling
    block must sum to one.
    """
    if len(ratios) != spec.depth:
        raise ShapeError(f"need {spec.depth} ratio vectors, got {len(ratios)}")
    level = np.array([float(total)])
    for d, r in enumerate(ratios, start=1):
        r = np.asarray(r, dtype=float)
        if r.size != spec.width(d):
            raise ShapeError(f"depth {d} needs {spec.width(d)} ratios, got {r.size}")
        sums = r.reshape(-1, spec.branching[d - 1]).sum(axis=1)
        if not np.allclose(sums, 1.0, rtol=0, atol=1e-12):
            raise DomainError(f"depth {d} ratios do not sum to one per parent")
        level = np.repeat(level, spec.branching[d - 1]) * r
    return build_param_tree(spec, level)


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Counts observed at every depth ``>= start_depth``.

    ``counts[d]`` has shape ``batch + (width(d),)``.  Depths above
    ``start_depth`` are stored as zeros, which is exactly how they enter
    every aggregate.
    """

    spec: HierarchySpec
    start_depth: int
    counts: tuple[np.ndarray, ...]

    def __post_init__(self):
        D = self.spec.depth
        if not 0 <= self.start_depth <= D:
            raise DomainError(f"start depth must lie in 0..{D}, got {self.start_depth}")
        if len(self.counts) != D + 1:
            raise ShapeError(f"need {D + 1} count arrays, got {len(self.counts)}")
        batch = None
        fixed = []
        for d, c in enumerate(self.counts):
            c = np.asarray(c)
            if c.shape[-1:] != (self.spec.width(d),):
                raise ShapeError(
                    f"depth {d} counts need trailing size {self.spec.width(d)}, "
                    f"got shape {c.shape}"
                )
            if batch is None:
                batch = c.shape[:-1]
            elif c.shape[:-1] != batch:
                raise ShapeError("count arrays disagree on batch shape")
            if np.any(c < 0):
                raise DomainError("counts must be nonnegative")
            if d < self.start_depth:
                c = np.zeros_like(c)
            fixed.append(c)
        object.__setattr__(self, "counts", tuple(fixed))

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.counts[0].shape[:-1]

    @cached_property
    def totals(self) -> tuple[np.ndarray, ...]:
        return aggregate(self)

    def restrict(self, start_depth: int) -> "ObservationSet":
        """The same draw seen through a design starting at a deeper level."""
        if start_depth < self.start_depth:
            raise DomainError(
                f"cannot widen design from depth {self.start_depth} to {start_depth}"
            )
        return ObservationSet(self.spec, start_depth, self.counts)

    def to_csv(self) -> str:
        """Dump an unbatched observation set as ``depth,address,count`` rows."""
        if self.batch_shape:
            raise ShapeError("CSV dumps are for a single observation set")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["depth", "address", "count"])
        for d in range(self.start_depth, self.spec.depth + 1):
            for k, x in enumerate(self.counts[d]):
                addr = ".".join(str(i) for i in self.spec.address(d, k)) or "-"
                w.writerow([d, addr, int(x)])
        return buf.getvalue()


def observations_from_csv(spec: HierarchySpec, text: str) -> ObservationSet:
    """Parse a dump written by :meth:`ObservationSet.to_csv`."""
    counts = [np.zeros(spec.width(d), dtype=np.int64) for d in range(spec.depth + 1)]
    seen_depths = set()
    for row in csv.DictReader(io.StringIO(text)):
        d = int(row["depth"])
        addr = () if row["address"] == "-" else tuple(int(s) for s in row["address"].split("."))
        if len(addr) != d:
            raise ShapeError(f"address {row['address']!r} does not match depth {d}")
        counts[d][spec.index(addr)] = int(row["count"])
        seen_depths.add(d)
    start = min(seen_depths) if seen_depths else spec.depth
    return ObservationSet(spec, start, tuple(counts))


def aggregate(obs: ObservationSet) -> tuple[np.ndarray, ...]:
    """Subtree totals of observed counts, one array per depth.

    ``totals[d][k]`` is the sum of every observed count in the subtree
    rooted at node ``k`` of depth ``d`` (node itself included).
    """
    spec = obs.spec
    out = [np.asarray(obs.counts[-1], dtype=np.int64)]
    for d in range(spec.depth - 1, -1, -1):
        out.append(obs.counts[d] + spec.sum_children(out[-1], d))
    return tuple(reversed(out))


def from_totals(
    spec: HierarchySpec, start_depth: int, totals: Sequence[np.ndarray]
) -> ObservationSet:
    """Invert :func:`aggregate`: recover per-node counts from subtree totals."""
    counts = []
    for d in range(spec.depth + 1):
        t = np.asarray(totals[d], dtype=np.int64)
        if d < spec.depth:
            t = t - spec.sum_children(totals[d + 1], d)
        counts.append(t)
    return ObservationSet(spec, start_depth, tuple(counts))


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for stream ``stream`` of master ``seed``."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


def _draw(tree: ParamTree, start_depth: int, rng: np.random.Generator, size) -> tuple:
    spec = tree.spec
    counts = []
    for d in range(spec.depth + 1):
        shape = tuple(size) + (spec.width(d),)
        if d < start_depth:
            counts.append(np.zeros(shape, dtype=np.int64))
        else:
            counts.append(rng.poisson(tree.rates[d], size=shape))
    return tuple(counts)


def sample_observations(
    tree: ParamTree, start_depth: int, seed: int, stream: int = 0
) -> ObservationSet:
    """One independent Poisson draw at every node of depth ``>= start_depth``."""
    if not 0 <= start_depth <= tree.spec.depth:
        raise DomainError(f"start depth must lie in 0..{tree.spec.depth}")
    counts = _draw(tree, start_depth, rng_stream(seed, stream), ())
    return ObservationSet(tree.spec, start_depth, counts)


def iter_blocks(reps: int, block_size: int = BLOCK_SIZE) -> Iterator[tuple[int, int]]:
    """``(block_index, size)`` pairs covering ``reps`` replications."""
    b = 0
    while reps > 0:
        n = min(reps, block_size)
        yield b, n
        reps -= n
        b += 1


def sample_block(
    tree: ParamTree, start_depth: int, seed: int, block: int, size: int
) -> ObservationSet:
    """Replications of block ``block``; block ``b`` always uses stream ``b``."""
    counts = _draw(tree, start_depth, rng_stream(seed, block), (size,))
    return ObservationSet(tree.spec, start_depth, counts)


def sample_batch(tree: ParamTree, start_depth: int, seed: int, reps: int) -> ObservationSet:
    """``reps`` replications stacked along a leading axis."""
    blocks = [sample_block(tree, start_depth, seed, b, n) for b, n in iter_blocks(reps)]
    counts = tuple(
        np.concatenate([blk.counts[d] for blk in blocks], axis=0)
        for d in range(tree.spec.depth + 1)
    )
    return ObservationSet(tree.spec, start_depth, counts)


def tree_from_json(config: dict) -> ParamTree:
    """``{"branching": [...], "leaf_rates": [...]}`` to a :class:`ParamTree`."""
    unknown = set(config) - {"branching", "leaf_rates"}
    if unknown:
        raise ValueError(f"unknown tree keys: {sorted(unknown)}")
    return build_param_tree(HierarchySpec(tuple(config["branching"])), config["leaf_rates"])


def tree_to_json(tree: ParamTree) -> dict:
    return {
        "branching": list(tree.spec.branching),
        "leaf_rates": [float(v) for v in tree.leaves],
    }
