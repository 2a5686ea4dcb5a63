"""Collective-write planning.

An IO server receives sub-domains ("chunks") of a global field from several
producers.  Writing each chunk separately costs one collective write per
chunk, so at start-up the chunks are grouped into the fewest rectangular
regions we can find cheaply.  Every server must take part in every
collective write; servers with fewer regions pad with dummy writes.

Coordinates follow the field's declared dimension order (z, y, x), the last
dimension varying fastest.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import LayoutError

log = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class ChunkRect:
    start: tuple[int, ...]
    extent: tuple[int, ...]
    owner: int = -1

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(int(s) for s in self.start))
        object.__setattr__(self, "extent", tuple(int(e) for e in self.extent))
        if len(self.start) != len(self.extent):
            raise LayoutError(f"chunk {self.owner}: start/extent rank mismatch")
        if any(e <= 0 for e in self.extent):
            raise LayoutError(f"chunk {self.owner}: non-positive extent {self.extent}")

    @property
    def end(self) -> tuple[int, ...]:
        return tuple(s + e for s, e in zip(self.start, self.extent))

    @property
    def volume(self) -> int:
        return int(np.prod(self.extent, dtype=np.int64))

    def overlaps(self, other: "ChunkRect") -> bool:
        return all(a < d and c < b for a, b, c, d in zip(self.start, self.end, other.start, other.end))

    def overlaps_box(self, start, end) -> bool:
        return all(a < e and s < b for a, b, s, e in zip(self.start, self.end, start, end))

    def inside(self, start, end) -> bool:
        return all(s <= a and b <= e for a, b, s, e in zip(self.start, self.end, start, end))


@dataclass(frozen=True)
class Region:
    start: tuple[int, ...]
    extent: tuple[int, ...]
    members: tuple[ChunkRect, ...]

    @property
    def size(self) -> int:
        """Buffer size in elements."""
        return int(np.prod(self.extent, dtype=np.int64))

    @property
    def owners(self) -> tuple[int, ...]:
        return tuple(c.owner for c in self.members)


@dataclass(frozen=True)
class WritePlan:
    regions: tuple[Region, ...]
    global_write_count: int
    dummy_writes: int

    def __post_init__(self):
        if len(self.regions) + self.dummy_writes != self.global_write_count:
            raise LayoutError("regions + dummy writes must equal the global write count")


def check_disjoint(chunks) -> None:
    chunks = list(chunks)
    if chunks:
        ndim = len(chunks[0].start)
        for c in chunks:
            if len(c.start) != ndim:
                raise LayoutError("chunks of differing dimensionality")
    for a, b in itertools.combinations(chunks, 2):
        if a.overlaps(b):
            raise LayoutError(f"chunks {a.owner} and {b.owner} overlap")


class _Merger:
    def __init__(self, chunks):
        self.remaining = set(chunks)
        self.ndim = len(chunks[0].start)

    def _members(self, start, end):
        return [c for c in self.remaining if c.inside(start, end)]

    def _tiled(self, start, end, pool) -> bool:
        vol = 1
        for s, e in zip(start, end):
            vol *= e - s
        got = 0
        for c in pool:
            if c.inside(start, end):
                got += c.volume
            elif c.overlaps_box(start, end):
                return False
        return got == vol

    def candidates(self, seed):
        """Boxes anchored at ``seed.start`` whose far corner lies on chunk ends."""
        pool = [c for c in self.remaining if all(a >= s for a, s in zip(c.start, seed.start))]
        ends = [sorted({c.end[d] for c in pool if c.end[d] >= seed.end[d]})
                for d in range(self.ndim)]
        for end in itertools.product(*ends):
            if self._tiled(seed.start, end, pool):
                yield seed.start, end

    def run(self):
        regions = []
        while self.remaining:
            best = None
            for seed in sorted(self.remaining):
                for start, end in self.candidates(seed):
                    vol = int(np.prod([e - s for s, e in zip(start, end)], dtype=np.int64))
                    key = (-vol, start, end)
                    if best is None or key < best:
                        best = key
            _, start, end = best
            members = tuple(sorted(self._members(start, end)))
            regions.append(Region(start, tuple(e - s for s, e in zip(start, end)), members))
            self.remaining.difference_update(members)
        regions.sort(key=lambda r: r.start)
        return regions


def merge_chunks(chunks) -> list[Region]:
    """Partition disjoint chunks into rectangular regions, preferring large ones.

    Each round, every remaining chunk seeds candidate boxes anchored at its
    start whose far corner lies on chunk end coordinates; a candidate counts
    if remaining chunks tile it exactly.  The largest candidate (by volume,
    ties to the lowest start) is committed and the search repeats.
    """
    chunks = sorted(chunks)
    if not chunks:
        return []
    check_disjoint(chunks)
    return _Merger(chunks).run()


def balance_write_counts(local_count: int, global_max: int) -> int:
    """Number of dummy writes needed to match the busiest server."""
    if global_max < local_count:
        raise LayoutError(f"global maximum {global_max} below local count {local_count}")
    return global_max - local_count


def plan_writes(chunks, global_max: int) -> WritePlan:
    regions = merge_chunks(chunks)
    dummies = balance_write_counts(len(regions), global_max)
    if dummies:
        log.debug("padding %d regions with %d dummy writes", len(regions), dummies)
    return WritePlan(tuple(regions), global_max, dummies)


@dataclass
class RegionBuffer:
    """Contiguous staging buffer for one region, filled chunk by chunk.

    ``lead_shape`` prefixes the spatial extent (for example a time axis).
    """

    region: Region
    lead_shape: tuple[int, ...] = ()
    dtype: str = "<f8"
    data: np.ndarray = field(init=False)
    filled: set = field(init=False, default_factory=set)

    def __post_init__(self):
        self.data = np.zeros(tuple(self.lead_shape) + tuple(self.region.extent), dtype=self.dtype)

    @property
    def complete(self) -> bool:
        return len(self.filled) == len(self.region.members)

    def copy(self, chunk: ChunkRect, payload) -> None:
        copy_into_region(self, chunk, payload)


def copy_into_region(buffer: RegionBuffer, chunk: ChunkRect, payload) -> None:
    """Place a chunk's payload at its offset inside the region buffer."""
    if chunk not in buffer.region.members:
        raise LayoutError(f"chunk {chunk.owner} is not a member of this region")
    payload = np.asarray(payload)
    expected = tuple(buffer.lead_shape) + tuple(chunk.extent)
    if payload.shape != expected:
        if payload.size != int(np.prod(expected, dtype=np.int64)):
            raise LayoutError(f"chunk {chunk.owner}: payload shape {payload.shape}, expected {expected}")
        payload = payload.reshape(expected)
    offs = [s - r for s, r in zip(chunk.start, buffer.region.start)]
    idx = tuple(slice(None) for _ in buffer.lead_shape) + tuple(
        slice(o, o + e) for o, e in zip(offs, chunk.extent))
    buffer.data[idx] = payload
    buffer.filled.add(chunk)
