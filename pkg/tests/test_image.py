import struct

import numpy as np
import pytest

from src.backend.lib.exceptions import ContractViolationError, ParseError
from src.backend.lib.hnsw import HnswIndex, HnswParams, build
from src.backend.lib.image import (
    HEADER_SIZE,
    GapPolicy,
    ImageHeader,
    align8,
    array_bytes,
    deserialize,
    gap_bytes,
    serialize,
    slot_offset,
)
from src.backend.lib.vectors import VectorStore
from src.backend.models import ArrayKind


@pytest.fixture
def index(random_store: VectorStore, small_params: HnswParams) -> HnswIndex:
    return build(random_store.take(np.arange(120)), small_params, labels=np.arange(500, 620))


def test_header_is_fixed_size(index: HnswIndex) -> None:
    image = serialize(index)
    assert HEADER_SIZE == 180
    assert image[:4] == b"DHSW"
    header = ImageHeader.unpack(image)
    assert header.ntotal == 120
    assert header.dim == 8
    assert header.params == index.params
    assert header.image_size == len(image)


def test_arrays_follow_kind_order_with_gaps(index: HnswIndex) -> None:
    header = ImageHeader.unpack(serialize(index, GapPolicy(internal_gap_fraction=0.2)))
    pos = HEADER_SIZE
    for kind in ArrayKind:
        slot = header.slot(kind)
        assert slot.offset == pos
        assert slot.length == len(array_bytes(index, kind))
        assert slot.gap == gap_bytes(slot.length, 0.2)
        assert slot.gap % 8 == 0
        pos += slot.capacity


def test_no_gap_policy(index: HnswIndex) -> None:
    header = ImageHeader.unpack(serialize(index, GapPolicy(0.0, 0.0)))
    assert all(s.gap == 0 for s in header.slots)


def test_round_trip(index: HnswIndex) -> None:
    again = deserialize(serialize(index))
    assert again == index
    assert again.labels.tolist() == list(range(500, 620))


def test_deserialized_index_copies_before_insert(index: HnswIndex) -> None:
    image = serialize(index)
    view = deserialize(image)
    view.insert(np.ones(8, dtype=np.float32))
    assert view.ntotal == 121
    assert deserialize(image) == index


def test_bad_magic(index: HnswIndex) -> None:
    image = bytearray(serialize(index))
    image[:4] = b"XXXX"
    with pytest.raises(ParseError, match="magic"):
        deserialize(bytes(image))


def test_truncated(index: HnswIndex) -> None:
    with pytest.raises(ParseError):
        deserialize(serialize(index)[: HEADER_SIZE - 1])
    with pytest.raises(ParseError, match="truncated image"):
        image = serialize(index)
        deserialize(image[: len(image) // 2])


def test_spilled_image_needs_splicing(index: HnswIndex) -> None:
    image = bytearray(serialize(index))
    header = ImageHeader.unpack(image)
    slot = header.slot(ArrayKind.LABELS)
    struct.pack_into("<Q", image, slot_offset(ArrayKind.LABELS) + 16, slot.capacity + 8)
    with pytest.raises(ParseError, match="splice"):
        deserialize(bytes(image))


def test_gap_policy_bounds() -> None:
    with pytest.raises(ContractViolationError):
        GapPolicy(internal_gap_fraction=1.0)
    assert gap_bytes(0, 0.5) == 0
    assert gap_bytes(10, 0.25) == align8(3)
