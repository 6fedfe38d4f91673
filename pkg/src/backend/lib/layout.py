"""Remote memory layout of one epoch.

A region starts with an 8-byte generation word and two copies of the global
metadata block; the copy at ``generation % 2`` is active. Groups follow, each
holding two sub-index images with a shared overflow region between them::

    [gen][meta copy 0][meta copy 1][ img 0 | overflow -> ... <- | img 1 ][ img 2 | ... ]

Sub ``2g`` spills forward from the start of the overflow region using records
``[kind u32][len u32][payload]``; sub ``2g + 1`` spills backward from its end
using ``[payload][kind u32][len u32]`` so the trailer sits at the high address.

The fragmented baseline instead appends chained records
``[next u64][next_len u64][kind u32][len u32][payload]`` to a heap at the
region tail, which a reader can only walk one round trip at a time.
"""

import copy
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Any, Literal

from src.backend.lib.exceptions import ContractViolationError, LayoutError, ParseError
from src.backend.lib.fabric import Fabric, ReadOp, RegionHandle, WriteOp
from src.backend.lib.image import HEADER_SIZE, ArraySlot, GapPolicy, ImageHeader, align8, gap_bytes
from src.backend.models import ArrayKind

logger = logging.getLogger(__name__)

META_MAGIC = b"DHGM"
META_VERSION = 1

_GEN = struct.Struct("<Q")
_META_FIXED = struct.Struct("<4sHBxQQIIQQQQQ")
_SUB = struct.Struct("<QQ" + "QQQ" * len(ArrayKind) + "QQQ" + "Qqq")
_GROUP = struct.Struct("<QQQQ")
_REC = struct.Struct("<II")
_CHAIN = struct.Struct("<QQII")
_LINK = struct.Struct("<QQ")

# framing bytes of one spill record
RECORD_SIZE = _REC.size
CHAIN_RECORD_SIZE = _CHAIN.size

Framing = Literal["forward", "backward", "chained"]


@dataclass
class SubEntry:
    base_offset: int
    base_len: int
    # (offset relative to base, capacity, logical length) per array
    arrays: list[ArraySlot]
    chain_head: int = 0
    chain_head_len: int = 0
    chain_tail: int = 0
    # graph header fields as of the last commit; the image header may run ahead
    ntotal: int = 0
    entry_point: int = -1
    max_level: int = -1

    def slot(self, kind: ArrayKind) -> ArraySlot:
        return self.arrays[int(kind)]


@dataclass
class GroupEntry:
    overflow_offset: int
    overflow_len: int
    used_forward: int = 0
    used_backward: int = 0

    @property
    def free(self) -> int:
        return self.overflow_len - self.used_forward - self.used_backward


@dataclass
class GlobalMeta:
    region: RegionHandle
    epoch: int
    subs: list[SubEntry]
    groups: list[GroupEntry]
    generation: int = 0
    next_label: int = 0
    fragmented: bool = False
    heap_offset: int = 0
    heap_len: int = 0
    heap_used: int = 0

    @property
    def P(self) -> int:
        return len(self.subs)

    def copy(self) -> "GlobalMeta":
        return copy.deepcopy(self)

    def group_of(self, sub_id: int) -> GroupEntry:
        return self.groups[sub_id // 2]

    def check_sub(self, sub_id: int) -> None:
        if not 0 <= sub_id < self.P:
            raise ContractViolationError(f"sub id {sub_id} outside [0, {self.P})")


@dataclass(frozen=True)
class FetchPlan:
    sub_id: int
    ranges: tuple[tuple[int, int], ...]
    backward: bool = False

    def ops(self, region_id: int) -> list[ReadOp]:
        return [ReadOp(region_id, offset, length) for offset, length in self.ranges]


@dataclass(frozen=True)
class SpillRecord:
    kind: ArrayKind
    address: int
    payload: bytes


@dataclass(frozen=True)
class SpillSlot:
    record_address: int
    payload_address: int
    nbytes: int
    logical_start: int
    framing: Framing
    # fragmented mode: next-pointer overwrite in the previous tail record
    link: tuple[int, bytes] | None = None


@dataclass(frozen=True)
class Placement:
    kind: ArrayKind
    internal: tuple[int, int] | None = None
    spill: SpillSlot | None = None
    rebuild_required: bool = False

    @property
    def ranges(self) -> list[tuple[int, int]]:
        """Remote (address, length) ranges receiving the payload bytes, in logical order."""
        out = []
        if self.internal is not None:
            out.append(self.internal)
        if self.spill is not None:
            out.append((self.spill.payload_address, self.spill.nbytes))
        return out

    def write_ops(self, region_id: int, payload: bytes) -> list[WriteOp]:
        if self.rebuild_required:
            raise ContractViolationError("cannot write a placement that requires a rebuild")
        ops = []
        cut = 0
        if self.internal is not None:
            cut = self.internal[1]
            ops.append(WriteOp(region_id, self.internal[0], payload[:cut]))
        if self.spill is not None:
            body = payload[cut:]
            match self.spill.framing:
                case "forward":
                    record = _REC.pack(self.kind, len(body)) + body
                case "backward":
                    record = body + _REC.pack(self.kind, len(body))
                case "chained":
                    record = _CHAIN.pack(0, 0, self.kind, len(body)) + body
            ops.append(WriteOp(region_id, self.spill.record_address, record))
            if self.spill.link is not None:
                ops.append(WriteOp(region_id, *self.spill.link))
        return ops


@dataclass(frozen=True)
class Extent:
    logical: int
    address: int
    length: int


@dataclass
class SubSnapshot:
    sub_id: int
    base: bytes
    records: list[SpillRecord] = field(default_factory=list)
    round_trips: int = 1
    nbytes: int = 0
    # simulated fabric time spent on this sub alone (excludes a shared doorbell)
    cost: float = 0.0
    # metadata view the fetch was planned with
    entry: SubEntry | None = None

    def header(self) -> ImageHeader:
        return entry_header(ImageHeader.unpack(self.base), self.entry)

    def image(self) -> bytes:
        return splice_records(self.base, self.records, self.entry)


def meta_size(P: int) -> int:
    return _META_FIXED.size + P * _SUB.size + ((P + 1) // 2) * _GROUP.size


def meta_copy_offset(copy_index: int, P: int) -> int:
    return _GEN.size + copy_index * align8(meta_size(P))


def data_start(P: int) -> int:
    return meta_copy_offset(2, P)


def encode_meta(meta: GlobalMeta) -> bytes:
    fixed = _META_FIXED.pack(
        META_MAGIC,
        META_VERSION,
        int(meta.fragmented),
        meta.epoch,
        meta.generation,
        meta.P,
        len(meta.groups),
        meta.region.size,
        meta.next_label,
        meta.heap_offset,
        meta.heap_len,
        meta.heap_used,
    )
    return fixed + b"".join(_encode_sub(s) for s in meta.subs) + b"".join(_encode_group(g) for g in meta.groups)


def _encode_sub(entry: SubEntry) -> bytes:
    slots = [v for s in entry.arrays for v in (s.offset, s.capacity, s.length)]
    return _SUB.pack(
        entry.base_offset,
        entry.base_len,
        *slots,
        entry.chain_head,
        entry.chain_head_len,
        entry.chain_tail,
        entry.ntotal,
        entry.entry_point,
        entry.max_level,
    )


def _encode_group(group: GroupEntry) -> bytes:
    return _GROUP.pack(group.overflow_offset, group.overflow_len, group.used_forward, group.used_backward)


def decode_meta(buf: bytes, region: RegionHandle) -> GlobalMeta:
    if len(buf) < _META_FIXED.size:
        raise ParseError(f"truncated metadata block: {_META_FIXED.size - len(buf)} bytes missing")
    (
        magic,
        version,
        fragmented,
        epoch,
        generation,
        P,
        G,
        region_size,
        next_label,
        heap_offset,
        heap_len,
        heap_used,
    ) = _META_FIXED.unpack_from(buf, 0)
    if magic != META_MAGIC:
        raise ParseError(f"bad metadata magic {magic!r} at byte offset 0")
    if version != META_VERSION:
        raise ParseError(f"unsupported metadata version {version} at byte offset 4")
    if G != (P + 1) // 2:
        raise ParseError(f"metadata lists {G} groups for {P} subs")
    if len(buf) < meta_size(P):
        raise ParseError(f"truncated metadata block: {meta_size(P) - len(buf)} bytes missing")
    if region_size != region.size:
        raise ParseError(f"metadata describes a {region_size}-byte region, registered size is {region.size}")
    subs = []
    pos = _META_FIXED.size
    for _ in range(P):
        values = _SUB.unpack_from(buf, pos)
        arrays = [ArraySlot(*values[2 + 3 * i : 5 + 3 * i]) for i in range(len(ArrayKind))]
        head, head_len, tail, ntotal, entry_point, max_level = values[-6:]
        subs.append(SubEntry(values[0], values[1], arrays, head, head_len, tail, ntotal, entry_point, max_level))
        pos += _SUB.size
    groups = []
    for _ in range(G):
        groups.append(GroupEntry(*_GROUP.unpack_from(buf, pos)))
        pos += _GROUP.size
    return GlobalMeta(
        region=region,
        epoch=epoch,
        subs=subs,
        groups=groups,
        generation=generation,
        next_label=next_label,
        fragmented=bool(fragmented),
        heap_offset=heap_offset,
        heap_len=heap_len,
        heap_used=heap_used,
    )


def read_meta(fabric: Fabric, region: RegionHandle) -> GlobalMeta:
    """Load the active metadata copy; two reads, the second covering the whole block."""
    head = fabric.read(region, 0, _GEN.size + _META_FIXED.size)
    P = _META_FIXED.unpack_from(head, _GEN.size)[5]
    block = fabric.read(region, 0, data_start(P))
    (generation,) = _GEN.unpack_from(block, 0)
    start = meta_copy_offset(generation % 2, P)
    meta = decode_meta(block[start : start + meta_size(P)], region)
    if meta.generation != generation:
        raise ParseError(f"active metadata copy holds generation {meta.generation}, word says {generation}")
    return meta


def meta_commit_ops(meta: GlobalMeta) -> list[WriteOp]:
    """Advance ``meta.generation`` and return the inactive-copy write followed by the flip.

    Both ops must go out in one doorbell, flip last.
    """
    meta.generation += 1
    offset = meta_copy_offset(meta.generation % 2, meta.P)
    return [
        WriteOp(meta.region.region_id, offset, encode_meta(meta)),
        WriteOp(meta.region.region_id, 0, _GEN.pack(meta.generation)),
    ]


def meta_entry_ops(before: GlobalMeta, after: GlobalMeta) -> list[WriteOp]:
    """In-place rewrites of the active copy's fixed part, sub entries and group entries that changed."""
    if before.P != after.P or before.generation != after.generation:
        raise ContractViolationError("entry rewrites need two states of the same metadata generation")
    region = after.region.region_id
    base = meta_copy_offset(after.generation % 2, after.P)
    old, new = encode_meta(before), encode_meta(after)
    ops = []
    if old[: _META_FIXED.size] != new[: _META_FIXED.size]:
        ops.append(WriteOp(region, base, new[: _META_FIXED.size]))
    pos = _META_FIXED.size
    for size, count in ((_SUB.size, after.P), (_GROUP.size, len(after.groups))):
        for _ in range(count):
            if old[pos : pos + size] != new[pos : pos + size]:
                ops.append(WriteOp(region, base + pos, new[pos : pos + size]))
            pos += size
    return ops


def _entry_for(base_offset: int, base_len: int, header: ImageHeader) -> SubEntry:
    return SubEntry(
        base_offset,
        base_len,
        list(header.slots),
        ntotal=header.ntotal,
        entry_point=header.entry_point,
        max_level=header.max_level,
    )


def build_layout(
    images: list[bytes],
    policy: GapPolicy,
    fabric: Fabric,
    region: RegionHandle | None = None,
    epoch: int = 0,
    next_label: int = 0,
    fragmented: bool = False,
    heap_len: int = 0,
) -> GlobalMeta:
    """Place ``images`` pairwise into groups and write them with a fresh metadata block.

    Without ``region`` one of the exact required size is registered.
    """
    if not images:
        raise ContractViolationError("a layout needs at least one sub-index image")
    P = len(images)
    headers = [ImageHeader.unpack(img) for img in images]
    subs: list[SubEntry] = []
    groups: list[GroupEntry] = []
    pos = data_start(P)
    for g in range((P + 1) // 2):
        pair = images[2 * g : 2 * g + 2]
        payload = sum(len(img) for img in pair)
        overflow = 0 if fragmented else gap_bytes(payload, policy.overflow_fraction)
        overflow_offset = align8(pos + len(pair[0]))
        subs.append(_entry_for(pos, len(pair[0]), headers[2 * g]))
        if len(pair) == 2:
            second = overflow_offset + overflow
            subs.append(_entry_for(second, len(pair[1]), headers[2 * g + 1]))
            end = second + len(pair[1])
        else:
            end = overflow_offset + overflow
        groups.append(GroupEntry(overflow_offset, overflow))
        pos = align8(end)
    required = pos + heap_len
    if region is None:
        region = fabric.register_region(required)
    elif region.size < required:
        raise LayoutError(f"region of {region.size} bytes cannot hold the layout", required_size=required)

    meta = GlobalMeta(
        region=region,
        epoch=epoch,
        subs=subs,
        groups=groups,
        next_label=next_label,
        fragmented=fragmented,
        heap_offset=pos,
        heap_len=heap_len,
    )
    for entry, img in zip(subs, images, strict=True):
        fabric.write(region, entry.base_offset, img)
    fabric.write(region, meta_copy_offset(0, P), encode_meta(meta))
    fabric.write(region, 0, _GEN.pack(0))
    logger.info(
        "Laid out %d sub-indexes in %d groups on region %d (%d bytes, epoch %d)",
        P,
        len(groups),
        region.region_id,
        region.size,
        epoch,
    )
    return meta


def plan_fetch(meta: GlobalMeta, sub_id: int) -> FetchPlan:
    """Base range plus, when the sub has spilled, its slice of the overflow (or its chain head)."""
    meta.check_sub(sub_id)
    entry = meta.subs[sub_id]
    ranges = [(entry.base_offset, entry.base_len)]
    backward = sub_id % 2 == 1
    if meta.fragmented:
        if entry.chain_head:
            ranges.append((entry.chain_head, entry.chain_head_len))
    else:
        group = meta.group_of(sub_id)
        if backward and group.used_backward:
            ranges.append((group.overflow_offset + group.overflow_len - group.used_backward, group.used_backward))
        elif not backward and group.used_forward:
            ranges.append((group.overflow_offset, group.used_forward))
    return FetchPlan(sub_id, tuple(ranges), backward)


def parse_records(meta: GlobalMeta, sub_id: int, overflow: bytes) -> list[SpillRecord]:
    """Spill records of one sub's overflow slice, in the order they were written."""
    group = meta.group_of(sub_id)
    records = []
    if sub_id % 2 == 0:
        pos = 0
        while pos < len(overflow):
            if pos + _REC.size > len(overflow):
                raise ParseError(f"truncated overflow record header at byte offset {pos}")
            kind, length = _REC.unpack_from(overflow, pos)
            end = pos + _REC.size + length
            if end > len(overflow):
                raise ParseError(f"overflow record at byte offset {pos} needs {end - len(overflow)} more bytes")
            address = group.overflow_offset + pos + _REC.size
            records.append(SpillRecord(_array_kind(kind, pos), address, overflow[pos + _REC.size : end]))
            pos = end
    else:
        start = group.overflow_offset + group.overflow_len - len(overflow)
        end = len(overflow)
        while end > 0:
            if end < _REC.size:
                raise ParseError(f"truncated overflow record trailer ending at byte offset {end}")
            kind, length = _REC.unpack_from(overflow, end - _REC.size)
            lo = end - _REC.size - length
            if lo < 0:
                raise ParseError(f"overflow record ending at byte offset {end} needs {-lo} more bytes")
            records.append(SpillRecord(_array_kind(kind, end), start + lo, overflow[lo : end - _REC.size]))
            end = lo
    return records


def _array_kind(code: int, pos: int) -> ArrayKind:
    try:
        return ArrayKind(code)
    except ValueError:
        raise ParseError(f"unknown array kind {code} in overflow record at byte offset {pos}") from None


def entry_header(header: ImageHeader, entry: SubEntry | None) -> ImageHeader:
    """``header`` with the array lengths and graph fields ``entry`` committed.

    The base image header is rewritten in place by a commit, so a reader
    planning with older metadata finds it ahead of the bytes it fetched.
    """
    if entry is None:
        return header
    return header.with_lengths(
        {kind: entry.slot(kind).length for kind in ArrayKind},
        ntotal=entry.ntotal,
        entry_point=entry.entry_point,
        max_level=entry.max_level,
    )


def splice_records(base: bytes, records: list[SpillRecord], entry: SubEntry | None = None) -> bytes:
    """Contiguous logical image from a base image and its spill records.

    With ``entry`` the lengths come from the metadata instead of the base
    header, and spilled bytes past those lengths are dropped.
    """
    stored = ImageHeader.unpack(base)
    header = entry_header(stored, entry)
    if not records and all(s.length <= s.capacity for s in header.slots):
        return base if header == stored else header.pack() + base[HEADER_SIZE:]
    spilled: dict[ArrayKind, list[bytes]] = defaultdict(list)
    for record in records:
        spilled[record.kind].append(record.payload)
    slots = []
    chunks = []
    pos = HEADER_SIZE
    for kind in ArrayKind:
        s = header.slot(kind)
        data = base[s.offset : s.offset + min(s.length, s.capacity)] + b"".join(spilled[kind])
        if entry is not None:
            data = data[: s.length]
        if len(data) != s.length:
            raise ParseError(
                f"{kind.name.lower()} assembles to {len(data)} bytes but the header records {s.length}"
            )
        slots.append(ArraySlot(pos, len(data), len(data)))
        chunks.append(data)
        pos += len(data)
    return replace(header, slots=tuple(slots)).pack() + b"".join(chunks)


def splice(base: bytes, overflow: bytes, meta: GlobalMeta, sub_id: int) -> bytes:
    records = parse_records(meta, sub_id, overflow) if overflow else []
    return splice_records(base, records, meta.subs[sub_id])


def _finish_snapshot(fabric: Fabric, meta: GlobalMeta, plan: FetchPlan, results: list[bytes | None]) -> SubSnapshot:
    snapshot = SubSnapshot(
        plan.sub_id,
        results[0] or b"",
        nbytes=sum(length for _, length in plan.ranges),
        entry=copy.deepcopy(meta.subs[plan.sub_id]),
    )
    if len(results) == 1:
        return snapshot
    tail = results[1] or b""
    if not meta.fragmented:
        snapshot.records = parse_records(meta, plan.sub_id, tail)
        return snapshot
    address = meta.subs[plan.sub_id].chain_head
    while True:
        nxt, nxt_len, kind, length = _CHAIN.unpack_from(tail, 0)
        snapshot.records.append(
            SpillRecord(_array_kind(kind, address), address + _CHAIN.size, tail[_CHAIN.size : _CHAIN.size + length])
        )
        if not nxt:
            break
        tail = fabric.read(meta.region, nxt, nxt_len)
        address = nxt
        snapshot.round_trips += 1
        snapshot.nbytes += nxt_len
        snapshot.cost += fabric.cost.read_cost(nxt_len)
    return snapshot


def fetch_sub(fabric: Fabric, meta: GlobalMeta, sub_id: int) -> SubSnapshot:
    """One doorbell for the planned ranges; the fragmented baseline then chases its chain."""
    plan = plan_fetch(meta, sub_id)
    results = fabric.doorbell(plan.ops(meta.region.region_id))
    snapshot = _finish_snapshot(fabric, meta, plan, results)
    snapshot.cost += fabric.cost.doorbell_cost([length for _, length in plan.ranges])
    return snapshot


def fetch_many(fabric: Fabric, meta: GlobalMeta, sub_ids: list[int]) -> tuple[list[SubSnapshot], float]:
    """Several subs under a single doorbell; returns the snapshots and the doorbell's simulated cost.

    The planned ranges of all subs must fit within the fabric's ``max_batch``.
    """
    plans = [plan_fetch(meta, sub_id) for sub_id in sub_ids]
    ops = [op for plan in plans for op in plan.ops(meta.region.region_id)]
    results = fabric.doorbell(ops)
    snapshots = []
    pos = 0
    for plan in plans:
        width = len(plan.ranges)
        snapshots.append(_finish_snapshot(fabric, meta, plan, results[pos : pos + width]))
        pos += width
    cost = fabric.cost.doorbell_cost([op.length for op in ops]) + sum(s.cost for s in snapshots)
    return snapshots, cost


def alloc_append(meta: GlobalMeta, sub_id: int, kind: ArrayKind, nbytes: int) -> Placement:
    """Reserve room for ``nbytes`` more of one array and record it in ``meta``.

    The array's own internal gap is used first; what does not fit becomes one
    spill record in the sub's overflow direction. When the overflow cannot take
    the record ``meta`` is left untouched and the placement asks for a rebuild.
    """
    if nbytes <= 0:
        raise ContractViolationError("append size must be positive")
    meta.check_sub(sub_id)
    entry = meta.subs[sub_id]
    slot = entry.slot(kind)
    tail = entry.base_offset + slot.offset + slot.length
    if nbytes <= slot.gap:
        entry.arrays[kind] = replace(slot, length=slot.length + nbytes)
        return Placement(kind, internal=(tail, nbytes))

    gap = slot.gap
    rest = nbytes - gap
    internal = (tail, gap) if gap else None
    logical_start = slot.length + gap
    if meta.fragmented:
        size = _CHAIN.size + rest
        if meta.heap_used + size > meta.heap_len:
            return Placement(kind, rebuild_required=True)
        address = meta.heap_offset + meta.heap_used
        link = None
        if entry.chain_head:
            link = (entry.chain_tail, _LINK.pack(address, size))
        else:
            entry.chain_head, entry.chain_head_len = address, size
        entry.chain_tail = address
        meta.heap_used += size
        spill = SpillSlot(address, address + _CHAIN.size, rest, logical_start, "chained", link)
    else:
        group = meta.group_of(sub_id)
        size = _REC.size + rest
        if size > group.free:
            return Placement(kind, rebuild_required=True)
        if sub_id % 2 == 0:
            address = group.overflow_offset + group.used_forward
            spill = SpillSlot(address, address + _REC.size, rest, logical_start, "forward")
            group.used_forward += size
        else:
            address = group.overflow_offset + group.overflow_len - group.used_backward - size
            spill = SpillSlot(address, address, rest, logical_start, "backward")
            group.used_backward += size
    entry.arrays[kind] = replace(slot, length=slot.length + nbytes)
    return Placement(kind, internal=internal, spill=spill)


def array_extents(entry: SubEntry, records: list[SpillRecord]) -> dict[ArrayKind, list[Extent]]:
    """Logical-to-remote address map of every array of one sub."""
    extents: dict[ArrayKind, list[Extent]] = {}
    for kind in ArrayKind:
        slot = entry.slot(kind)
        extents[kind] = [Extent(0, entry.base_offset + slot.offset, slot.capacity)]
    cursor = {kind: entry.slot(kind).capacity for kind in ArrayKind}
    for record in records:
        extents[record.kind].append(Extent(cursor[record.kind], record.address, len(record.payload)))
        cursor[record.kind] += len(record.payload)
    return extents


def resolve(extents: list[Extent], logical: int, length: int) -> list[tuple[int, int]]:
    """Remote (address, length) pieces backing logical bytes ``[logical, logical + length)``."""
    pieces = []
    end = logical + length
    for extent in extents:
        lo = max(logical, extent.logical)
        hi = min(end, extent.logical + extent.length)
        if lo < hi:
            pieces.append((extent.address + lo - extent.logical, hi - lo))
    if sum(n for _, n in pieces) != length:
        raise LayoutError(f"logical range [{logical}, {end}) is not fully backed by remote memory")
    return pieces


def used_ranges(meta: GlobalMeta) -> list[tuple[int, int, str]]:
    """Every occupied ``[start, end)`` with its owner, sorted by start."""
    out = [(0, data_start(meta.P), "metadata")]
    for i, entry in enumerate(meta.subs):
        out.append((entry.base_offset, entry.base_offset + entry.base_len, f"sub {i}"))
    for g, group in enumerate(meta.groups):
        if group.used_forward:
            out.append((group.overflow_offset, group.overflow_offset + group.used_forward, f"group {g} forward"))
        if group.used_backward:
            end = group.overflow_offset + group.overflow_len
            out.append((end - group.used_backward, end, f"group {g} backward"))
    if meta.heap_used:
        out.append((meta.heap_offset, meta.heap_offset + meta.heap_used, "heap"))
    return sorted(out)


def inspect(meta: GlobalMeta) -> dict[str, Any]:
    return {
        "region": meta.region.region_id,
        "region_size": meta.region.size,
        "epoch": meta.epoch,
        "generation": meta.generation,
        "fragmented": meta.fragmented,
        "next_label": meta.next_label,
        "groups": [
            {
                "group": g,
                "overflow_offset": group.overflow_offset,
                "overflow_len": group.overflow_len,
                "used_forward": group.used_forward,
                "used_backward": group.used_backward,
                "subs": [
                    {
                        "sub": s,
                        "base_offset": meta.subs[s].base_offset,
                        "base_len": meta.subs[s].base_len,
                        "lengths": {k.name.lower(): meta.subs[s].slot(k).length for k in ArrayKind},
                        "gaps": {k.name.lower(): meta.subs[s].slot(k).gap for k in ArrayKind},
                    }
                    for s in range(2 * g, min(2 * g + 2, meta.P))
                ],
            }
            for g, group in enumerate(meta.groups)
        ],
    }
