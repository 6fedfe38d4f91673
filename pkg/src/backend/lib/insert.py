"""Insert routing, local sub-index updates and their commit to remote memory.

A commit never rewrites a whole image. It carries the grown array tails
(placed by :func:`alloc_append`), the byte ranges of the neighbor array that
changed, the image header bytes that changed and finally the metadata entries
that changed. Ops go out in that order and the metadata writes share the last
doorbell, so a reader that sees the new metadata also sees every byte it points
at. Readers take array lengths and graph fields from the metadata rather than
the image header, which a commit rewrites ahead of it.
"""

import logging
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import numpy.typing as npt

from src.backend.lib.cache import SubCache
from src.backend.lib.exceptions import ContractViolationError, FabricError, ParseError
from src.backend.lib.fabric import Fabric, WriteOp, chunked
from src.backend.lib.hnsw import HnswIndex
from src.backend.lib.image import ImageHeader, array_payloads, deserialize
from src.backend.lib.layout import (
    Extent,
    GlobalMeta,
    Placement,
    SubSnapshot,
    alloc_append,
    array_extents,
    fetch_sub,
    meta_entry_ops,
    resolve,
)
from src.backend.lib.query import MetaIndex
from src.backend.models import ArrayKind, InsertStatus

logger = logging.getLogger(__name__)

DEFAULT_COALESCE_GAP = 64


@dataclass
class SubState:
    """What remote memory holds for one sub as of the last fetch or commit."""

    sub_id: int
    header: ImageHeader
    neighbors: npt.NDArray[np.int32]
    extents: dict[ArrayKind, list[Extent]]

    @classmethod
    def from_snapshot(cls, snapshot: SubSnapshot, meta: GlobalMeta, index: HnswIndex) -> "SubState":
        return cls(
            sub_id=snapshot.sub_id,
            header=snapshot.header(),
            neighbors=np.array(index.neighbors, dtype=np.int32, copy=True),
            extents=array_extents(meta.subs[snapshot.sub_id], snapshot.records),
        )


@dataclass
class UpdateCommit:
    sub_index: int
    appends: list[WriteOp] = field(default_factory=list)
    overwrites: list[WriteOp] = field(default_factory=list)
    meta_writes: list[WriteOp] = field(default_factory=list)
    placements: list[Placement] = field(default_factory=list)
    new_meta: GlobalMeta | None = None
    new_state: SubState | None = None
    rebuild_required: bool = False

    @property
    def ops(self) -> list[WriteOp]:
        """Every write in commit order: appends, overwrites, then metadata entries."""
        return [*self.appends, *self.overwrites, *self.meta_writes]

    @property
    def empty(self) -> bool:
        return not self.ops

    @property
    def nbytes(self) -> int:
        return sum(op.length for op in self.ops)

    def describe(self) -> dict[str, Any]:
        def ranges(ops: list[WriteOp]) -> list[list[int]]:
            return [[op.offset, op.length] for op in ops]

        return {
            "sub": self.sub_index,
            "rebuild_required": self.rebuild_required,
            "appends": ranges(self.appends),
            "overwrites": ranges(self.overwrites),
            "meta_writes": ranges(self.meta_writes),
            "bytes": self.nbytes,
        }


def dirty_ranges(old: np.ndarray, new: np.ndarray, coalesce_gap: int = DEFAULT_COALESCE_GAP) -> list[tuple[int, int]]:
    """Element ranges ``[start, end)`` where ``new`` differs from ``old``.

    Two dirty runs merge when fewer than ``coalesce_gap`` clean bytes separate them.
    """
    if old.shape != new.shape:
        raise ContractViolationError(f"cannot diff arrays of shapes {old.shape} and {new.shape}")
    idx = np.flatnonzero(old != new)
    if idx.size == 0:
        return []
    clean_bytes = (np.diff(idx) - 1) * old.itemsize
    breaks = np.flatnonzero(clean_bytes >= coalesce_gap)
    starts = np.concatenate([idx[:1], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], idx[-1:]]) + 1
    return [(int(s), int(e)) for s, e in zip(starts, ends, strict=True)]


def prepare_commit(
    sub_id: int,
    pre: SubState,
    post: HnswIndex,
    meta: GlobalMeta,
    coalesce_gap: int = DEFAULT_COALESCE_GAP,
    labels_used: int = 0,
) -> UpdateCommit:
    """Diff ``post`` against what remote memory holds and place the growth.

    ``meta`` is not modified; the returned commit carries the updated copy.
    """
    if post.ntotal < pre.header.ntotal:
        raise ContractViolationError(f"sub {sub_id} shrank from {pre.header.ntotal} to {post.ntotal} nodes")
    region = meta.region.region_id
    work = meta.copy()
    work.next_label += labels_used
    update = UpdateCommit(sub_id)

    payloads = array_payloads(post)
    lengths: dict[ArrayKind, int] = {}
    extents = {kind: list(pieces) for kind, pieces in pre.extents.items()}
    for kind in ArrayKind:
        data = payloads[int(kind)]
        old_len = pre.header.slot(kind).length
        if len(data) < old_len:
            raise ContractViolationError(f"{kind.name.lower()} of sub {sub_id} shrank")
        lengths[kind] = len(data)
        if len(data) == old_len:
            continue
        placement = alloc_append(work, sub_id, kind, len(data) - old_len)
        if placement.rebuild_required:
            logger.info("Sub %d cannot grow its %s array in place; rebuild required", sub_id, kind.name.lower())
            return UpdateCommit(sub_id, rebuild_required=True)
        update.placements.append(placement)
        update.appends.extend(placement.write_ops(region, data[old_len:]))
        if placement.spill is not None:
            spill = placement.spill
            extents[kind].append(Extent(spill.logical_start, spill.payload_address, spill.nbytes))

    old_nb = pre.neighbors
    new_nb = post.neighbors[: old_nb.shape[0]]
    for start, end in dirty_ranges(old_nb, new_nb, coalesce_gap):
        data = new_nb[start:end].astype("<i4").tobytes()
        pos = 0
        for address, length in resolve(pre.extents[ArrayKind.NEIGHBORS], start * 4, len(data)):
            update.overwrites.append(WriteOp(region, address, data[pos : pos + length]))
            pos += length

    header = pre.header.with_lengths(
        lengths, ntotal=post.ntotal, entry_point=post.entry_point, max_level=post.max_level
    )
    old_bytes, new_bytes = pre.header.pack(), header.pack()
    base = meta.subs[sub_id].base_offset
    old_view = np.frombuffer(old_bytes, dtype=np.uint8)
    new_view = np.frombuffer(new_bytes, dtype=np.uint8)
    for start, end in dirty_ranges(old_view, new_view, coalesce_gap):
        update.overwrites.append(WriteOp(region, base + start, new_bytes[start:end]))

    entry = work.subs[sub_id]
    entry.ntotal, entry.entry_point, entry.max_level = post.ntotal, post.entry_point, post.max_level
    update.meta_writes = meta_entry_ops(meta, work)
    update.new_meta = work
    update.new_state = SubState(sub_id, header, np.array(post.neighbors, dtype=np.int32, copy=True), extents)
    return update


def commit(update: UpdateCommit, fabric: Fabric) -> int:
    """Issue the commit as doorbell batches of at most ``max_batch`` ops; returns the batch count.

    The metadata writes always travel in the final batch. A failed batch is
    retried once.
    """
    if update.rebuild_required:
        raise ContractViolationError("cannot commit an update that requires a rebuild")
    ops = update.ops
    if not ops:
        return 0
    if len(update.meta_writes) > fabric.max_batch:
        raise ContractViolationError(f"{len(update.meta_writes)} metadata writes exceed one doorbell batch")
    batches = chunked(ops, fabric.max_batch, full_tail=True)
    for batch in batches:
        try:
            fabric.doorbell(batch)
        except FabricError as e:
            logger.warning("Commit batch for sub %d failed (%s), retrying once", update.sub_index, e)
            fabric.doorbell(batch)
    logger.debug("Committed sub %d: %d ops in %d batches", update.sub_index, len(ops), len(batches))
    return len(batches)


@dataclass
class WriterSub:
    index: HnswIndex
    state: SubState


@dataclass
class InsertResult:
    status: InsertStatus
    label: int | None = None
    sub_id: int | None = None
    error: str | None = None


@dataclass
class InsertTotals:
    committed: int = 0
    commits: int = 0
    round_trips: int = 0
    bytes_written: int = 0
    rebuild_required: int = 0
    failed: int = 0


class InsertCoordinator:
    """The single writer: routes inserts, updates cached sub copies and commits their diffs."""

    def __init__(
        self,
        fabric: Fabric,
        meta: GlobalMeta,
        meta_index: MetaIndex,
        cache_capacity: int = 0,
        coalesce_gap: int = DEFAULT_COALESCE_GAP,
    ) -> None:
        self.fabric = fabric
        self.meta = meta
        self.meta_index = meta_index
        self.cache: SubCache[WriterSub] = SubCache(cache_capacity)
        self.coalesce_gap = coalesce_gap
        self.totals = InsertTotals()
        self.last_commits: list[UpdateCommit] = []
        self.rebuild_signaled = False

    def reset_epoch(self, meta: GlobalMeta, meta_index: MetaIndex) -> None:
        self.meta = meta
        self.meta_index = meta_index
        self.cache.clear()
        self.rebuild_signaled = False

    def _writer_sub(self, sub_id: int) -> WriterSub:
        writer = self.cache.get(sub_id)
        if writer is not None:
            return writer
        snapshot = fetch_sub(self.fabric, self.meta, sub_id)
        index = deserialize(snapshot.image())
        writer = WriterSub(index, SubState.from_snapshot(snapshot, self.meta, index))
        self.cache.put(sub_id, writer)
        return writer

    def route(self, vectors: np.ndarray) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = defaultdict(list)
        for i, v in enumerate(vectors):
            groups[self.meta_index.route(v, 1)[0]].append(i)
        return groups

    def insert_batch(self, vectors: npt.ArrayLike, labels: Sequence[int] | None = None) -> list[InsertResult]:
        """Route, apply locally and commit one diff per touched sub.

        Subs already cached are handled before those that must be fetched. Global
        ids come from the metadata label counter unless ``labels`` pins them.
        """
        vecs = np.atleast_2d(np.asarray(vectors, dtype=np.float32))
        if vecs.shape[0] == 0 or vecs.size == 0:
            return []
        if vecs.shape[1] != self.meta_index.dim:
            raise ContractViolationError(f"insert dimension {vecs.shape[1]} != index dimension {self.meta_index.dim}")
        if labels is not None and len(labels) != vecs.shape[0]:
            raise ContractViolationError("one label per inserted vector is required")
        results: list[InsertResult | None] = [None] * vecs.shape[0]
        self.last_commits = []
        groups = self.route(vecs)
        order = sorted(groups, key=lambda s: (s not in self.cache, s))
        for sub_id in order:
            positions = groups[sub_id]
            pinned = None if labels is None else [int(labels[i]) for i in positions]
            for pos, result in zip(positions, self._insert_into(sub_id, vecs[positions], pinned), strict=True):
                results[pos] = result
        return [r for r in results if r is not None]

    def _insert_into(self, sub_id: int, vectors: np.ndarray, pinned: list[int] | None = None) -> list[InsertResult]:
        def every(status: InsertStatus, error: str | None = None) -> list[InsertResult]:
            return [InsertResult(status, sub_id=sub_id, error=error) for _ in range(len(vectors))]

        try:
            writer = self._writer_sub(sub_id)
        except (FabricError, ParseError) as e:
            logger.warning("Cannot load sub %d for insert: %s", sub_id, e)
            self.totals.failed += len(vectors)
            return every(InsertStatus.FAILED, str(e))

        first = self.meta.next_label
        labels = pinned if pinned is not None else list(range(first, first + len(vectors)))
        labels_used = max(0, max(labels) + 1 - first)
        for v, label in zip(vectors, labels, strict=True):
            writer.index.insert(v, label)
        update = prepare_commit(sub_id, writer.state, writer.index, self.meta, self.coalesce_gap, labels_used)
        if update.rebuild_required:
            # local copy now holds uncommitted nodes
            self.cache.invalidate(sub_id)
            self.rebuild_signaled = True
            self.totals.rebuild_required += len(vectors)
            return every(InsertStatus.REBUILD_REQUIRED)
        try:
            round_trips = commit(update, self.fabric)
        except FabricError as e:
            logger.warning("Commit to sub %d failed: %s", sub_id, e)
            self.cache.invalidate(sub_id)
            self.totals.failed += len(vectors)
            return every(InsertStatus.FAILED, str(e))

        self.meta = update.new_meta  # type: ignore[assignment]
        writer.state = update.new_state  # type: ignore[assignment]
        self.last_commits.append(update)
        self.totals.committed += len(vectors)
        self.totals.commits += 1
        self.totals.round_trips += round_trips
        self.totals.bytes_written += update.nbytes
        return [InsertResult(InsertStatus.COMMITTED, label, sub_id) for label in labels]
