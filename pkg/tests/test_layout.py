import numpy as np
import pytest

from src.backend.lib.exceptions import ContractViolationError, LayoutError, ParseError
from src.backend.lib.fabric import MemoryFabric, WriteOp
from src.backend.lib.hnsw import HnswParams, build
from src.backend.lib.image import GapPolicy, ImageHeader, deserialize, serialize
from src.backend.lib.layout import (
    CHAIN_RECORD_SIZE,
    RECORD_SIZE,
    alloc_append,
    array_extents,
    build_layout,
    data_start,
    decode_meta,
    fetch_many,
    fetch_sub,
    inspect,
    meta_commit_ops,
    meta_copy_offset,
    meta_entry_ops,
    plan_fetch,
    read_meta,
    resolve,
    used_ranges,
)
from src.backend.lib.vectors import VectorStore
from src.backend.models import ArrayKind

POLICY = GapPolicy(internal_gap_fraction=0.2, overflow_fraction=0.25)


@pytest.fixture
def images(random_store: VectorStore, small_params: HnswParams) -> list[bytes]:
    parts = np.array_split(np.arange(random_store.count), 3)
    return [serialize(build(random_store.take(ids), small_params, labels=ids), POLICY) for ids in parts]


def _apply(fabric: MemoryFabric, ops: list[WriteOp]) -> None:
    fabric.doorbell(ops)


def test_groups_pair_subs_around_overflow(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric)
    assert meta.P == 3
    assert len(meta.groups) == 2
    first = meta.groups[0]
    assert meta.subs[0].base_offset == data_start(3)
    assert first.overflow_offset >= meta.subs[0].base_offset + meta.subs[0].base_len
    assert meta.subs[1].base_offset == first.overflow_offset + first.overflow_len
    assert first.overflow_len == pytest.approx(0.25 * (len(images[0]) + len(images[1])), abs=8)
    assert first.overflow_offset % 8 == 0


def test_used_ranges_do_not_overlap(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric)
    ranges = used_ranges(meta)
    for (_, end, _), (start, _, _) in zip(ranges, ranges[1:], strict=False):
        assert end <= start
    assert ranges[-1][1] <= meta.region.size


def test_read_meta_round_trip(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric, epoch=3, next_label=300)
    assert read_meta(fabric, meta.region) == meta


def test_fetch_returns_original_images(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric)
    for sub_id, image in enumerate(images):
        snapshot = fetch_sub(fabric, meta, sub_id)
        assert snapshot.round_trips == 1
        assert snapshot.records == []
        assert snapshot.image() == image
    snapshots, cost = fetch_many(fabric, meta, [2, 0])
    assert [s.sub_id for s in snapshots] == [2, 0]
    assert snapshots[1].image() == images[0]
    assert cost > 0


def test_region_too_small(fabric: MemoryFabric, images: list[bytes]) -> None:
    small = fabric.register_region(64)
    with pytest.raises(LayoutError) as info:
        build_layout(images, POLICY, fabric, region=small)
    assert info.value.required_size > 64
    with pytest.raises(ContractViolationError):
        build_layout([], POLICY, fabric)


def test_append_within_internal_gap(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric)
    slot = meta.subs[0].slot(ArrayKind.LABELS)
    placement = alloc_append(meta, 0, ArrayKind.LABELS, 8)
    assert placement.spill is None
    assert placement.internal == (meta.subs[0].base_offset + slot.offset + slot.length, 8)
    assert meta.subs[0].slot(ArrayKind.LABELS).length == slot.length + 8
    assert plan_fetch(meta, 0).ranges == ((meta.subs[0].base_offset, meta.subs[0].base_len),)


@pytest.mark.parametrize("sub_id", [0, 1])
def test_spill_goes_to_overflow_direction(fabric: MemoryFabric, images: list[bytes], sub_id: int) -> None:
    meta = build_layout(images, POLICY, fabric)
    group = meta.groups[0]
    gap = meta.subs[sub_id].slot(ArrayKind.VECTORS).gap
    payload = bytes(i % 251 for i in range(gap + 32))
    placement = alloc_append(meta, sub_id, ArrayKind.VECTORS, len(payload))
    assert placement.internal is not None
    assert placement.spill.nbytes == 32
    if sub_id == 0:
        assert placement.spill.framing == "forward"
        assert placement.spill.record_address == group.overflow_offset
        assert group.used_forward == RECORD_SIZE + 32
    else:
        assert placement.spill.framing == "backward"
        assert placement.spill.record_address + RECORD_SIZE + 32 == group.overflow_offset + group.overflow_len
        assert group.used_backward == RECORD_SIZE + 32
    _apply(fabric, placement.write_ops(meta.region.region_id, payload))

    snapshot = fetch_sub(fabric, meta, sub_id)
    assert snapshot.round_trips == 1
    assert len(snapshot.records) == 1
    record = snapshot.records[0]
    assert record.kind == ArrayKind.VECTORS
    assert record.address == placement.spill.payload_address
    assert record.payload == payload[gap:]

    image = snapshot.image()
    vectors = ImageHeader.unpack(image).slot(ArrayKind.VECTORS)
    assert image[vectors.offset + vectors.length - len(payload) : vectors.offset + vectors.length] == payload


def test_stale_metadata_reassembles_the_previous_image(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric)
    stale = meta.copy()
    gap = meta.subs[0].slot(ArrayKind.VECTORS).gap
    placement = alloc_append(meta, 0, ArrayKind.VECTORS, gap + 16)
    _apply(fabric, placement.write_ops(meta.region.region_id, b"\x07" * (gap + 16)))
    grown = ImageHeader.unpack(images[0]).with_lengths({ArrayKind.VECTORS: meta.subs[0].slot(ArrayKind.VECTORS).length})
    fabric.write(meta.region, meta.subs[0].base_offset, grown.pack())

    old = fetch_sub(fabric, stale, 0)
    assert old.header() == ImageHeader.unpack(images[0])
    assert deserialize(old.image()) == deserialize(images[0])
    new = ImageHeader.unpack(fetch_sub(fabric, meta, 0).image())
    assert new.slot(ArrayKind.VECTORS).length == grown.slot(ArrayKind.VECTORS).length


def test_both_directions_share_one_overflow(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric)
    for sub_id in (0, 1):
        gap = meta.subs[sub_id].slot(ArrayKind.NEIGHBORS).gap
        alloc_append(meta, sub_id, ArrayKind.NEIGHBORS, gap + 24)
    group = meta.groups[0]
    assert group.used_forward == group.used_backward == RECORD_SIZE + 24
    assert group.free == group.overflow_len - 2 * (RECORD_SIZE + 24)
    assert len(plan_fetch(meta, 1).ranges) == 2
    assert plan_fetch(meta, 1).backward


def test_exhausted_overflow_requires_rebuild(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric)
    before = meta.copy()
    gap = meta.subs[0].slot(ArrayKind.VECTORS).gap
    placement = alloc_append(meta, 0, ArrayKind.VECTORS, gap + meta.groups[0].overflow_len)
    assert placement.rebuild_required
    assert meta == before
    with pytest.raises(ContractViolationError):
        placement.write_ops(meta.region.region_id, b"")


def test_append_contracts(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric)
    with pytest.raises(ContractViolationError):
        alloc_append(meta, 0, ArrayKind.LABELS, 0)
    with pytest.raises(ContractViolationError):
        alloc_append(meta, 3, ArrayKind.LABELS, 8)


def test_meta_entry_rewrites_touch_only_changes(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric)
    before = meta.copy()
    alloc_append(meta, 2, ArrayKind.LABELS, 8)
    ops = meta_entry_ops(before, meta)
    assert len(ops) == 1
    _apply(fabric, ops)
    assert read_meta(fabric, meta.region) == meta


def test_meta_commit_flips_generation(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric)
    meta.next_label = 999
    ops = meta_commit_ops(meta)
    assert ops[0].offset == meta_copy_offset(1, meta.P)
    assert ops[-1].offset == 0
    _apply(fabric, ops)
    loaded = read_meta(fabric, meta.region)
    assert loaded.generation == 1
    assert loaded.next_label == 999


def test_decode_rejects_bad_magic(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric)
    block = bytearray(fabric.read(meta.region, meta_copy_offset(0, meta.P), 128))
    block[:4] = b"NOPE"
    with pytest.raises(ParseError, match="magic"):
        decode_meta(bytes(block), meta.region)


def test_fragmented_chain_costs_extra_round_trips(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric, fragmented=True, heap_len=1024)
    assert all(g.overflow_len == 0 for g in meta.groups)
    gap = meta.subs[0].slot(ArrayKind.LABELS).gap
    first = alloc_append(meta, 0, ArrayKind.LABELS, gap + 16)
    _apply(fabric, first.write_ops(meta.region.region_id, bytes(gap + 16)))
    second = alloc_append(meta, 0, ArrayKind.LABELS, 16)
    assert second.spill.link is not None
    _apply(fabric, second.write_ops(meta.region.region_id, b"\x01" * 16))
    assert meta.heap_used == 2 * (CHAIN_RECORD_SIZE + 16)

    snapshot = fetch_sub(fabric, meta, 0)
    assert snapshot.round_trips == 2
    assert [r.payload for r in snapshot.records] == [bytes(16), b"\x01" * 16]


def test_extents_resolve_logical_ranges(fabric: MemoryFabric, images: list[bytes]) -> None:
    meta = build_layout(images, POLICY, fabric)
    entry = meta.subs[0]
    gap = entry.slot(ArrayKind.LABELS).gap
    placement = alloc_append(meta, 0, ArrayKind.LABELS, gap + 8)
    _apply(fabric, placement.write_ops(meta.region.region_id, bytes(gap + 8)))
    records = fetch_sub(fabric, meta, 0).records
    extents = array_extents(entry, records)[ArrayKind.LABELS]
    capacity = entry.slot(ArrayKind.LABELS).capacity
    start = entry.base_offset + entry.slot(ArrayKind.LABELS).offset
    assert resolve(extents, capacity - 4, 8) == [(start + capacity - 4, 4), (records[0].address, 4)]
    with pytest.raises(LayoutError):
        resolve(extents, capacity, 16)


def test_inspect_reports_groups(fabric: MemoryFabric, images: list[bytes]) -> None:
    report = inspect(build_layout(images, POLICY, fabric))
    assert [len(g["subs"]) for g in report["groups"]] == [2, 1]
    assert report["groups"][1]["subs"][0]["sub"] == 2
