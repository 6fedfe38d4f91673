"""Sub-index images: the self-describing byte form of an :class:`HnswIndex`.

An image is a fixed little-endian header followed by the five arrays in
:class:`ArrayKind` order, each trailed by its reserved internal gap::

    [header][levels][gap][offsets][gap][neighbors][gap][vectors][gap][labels][gap]

The header records every array's offset, capacity (bytes plus gap) and logical
length. A logical length larger than the capacity means the array spilled into
the group overflow region; such an image is only valid after splicing.
"""

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from src.backend.lib.exceptions import ContractViolationError, ParseError
from src.backend.lib.hnsw import HnswIndex, HnswParams
from src.backend.models import ArrayKind, Metric

MAGIC = b"DHSW"
VERSION = 1

_FIXED = struct.Struct("<4sHBBIIIIidQQii")
_SLOT = struct.Struct("<QQQ")
HEADER_SIZE = _FIXED.size + _SLOT.size * len(ArrayKind)

ARRAY_DTYPES = {
    ArrayKind.LEVELS: np.dtype("<i4"),
    ArrayKind.OFFSETS: np.dtype("<i8"),
    ArrayKind.NEIGHBORS: np.dtype("<i4"),
    ArrayKind.VECTORS: np.dtype("<f4"),
    ArrayKind.LABELS: np.dtype("<i8"),
}

_METRIC_CODES = {Metric.EUCLIDEAN: 0, Metric.ANGULAR: 1}
_CODE_METRICS = {v: k for k, v in _METRIC_CODES.items()}


def slot_offset(kind: ArrayKind) -> int:
    """Header byte offset of the (offset, capacity, length) triple for ``kind``."""
    return _FIXED.size + _SLOT.size * int(kind)


@dataclass(frozen=True)
class GapPolicy:
    internal_gap_fraction: float = 0.2
    overflow_fraction: float = 0.25

    def __post_init__(self):
        for name in ("internal_gap_fraction", "overflow_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ContractViolationError(f"{name} must be within [0, 1), got {value}")


def align8(n: int) -> int:
    return (n + 7) & ~7


def gap_bytes(length: int, fraction: float) -> int:
    if fraction <= 0.0 or length == 0:
        return 0
    return align8(math.ceil(length * fraction))


@dataclass(frozen=True)
class ArraySlot:
    offset: int
    capacity: int
    length: int

    @property
    def gap(self) -> int:
        """Bytes still free inside the image for this array."""
        return max(0, self.capacity - self.length)

    @property
    def spilled(self) -> int:
        return max(0, self.length - self.capacity)


@dataclass(frozen=True)
class ImageHeader:
    dim: int
    metric: Metric
    params: HnswParams
    ntotal: int
    entry_point: int
    max_level: int
    slots: tuple[ArraySlot, ...] = field(default_factory=tuple)
    version: int = VERSION

    @property
    def image_size(self) -> int:
        return HEADER_SIZE + sum(s.capacity for s in self.slots)

    def slot(self, kind: ArrayKind) -> ArraySlot:
        return self.slots[int(kind)]

    def with_lengths(self, lengths: dict[ArrayKind, int], **fields) -> "ImageHeader":
        slots = tuple(replace(s, length=lengths.get(ArrayKind(i), s.length)) for i, s in enumerate(self.slots))
        return replace(self, slots=slots, **fields)

    def pack(self) -> bytes:
        p = self.params
        fixed = _FIXED.pack(
            MAGIC,
            self.version,
            _METRIC_CODES[self.metric],
            int(p.heuristic),
            self.dim,
            p.M,
            p.e_build,
            p.e_search,
            -1 if p.level_cap is None else p.level_cap,
            p.level_lambda,
            p.rng_seed,
            self.ntotal,
            self.entry_point,
            self.max_level,
        )
        return fixed + b"".join(_SLOT.pack(s.offset, s.capacity, s.length) for s in self.slots)

    @classmethod
    def unpack(cls, buf: bytes | bytearray | memoryview) -> "ImageHeader":
        if len(buf) < HEADER_SIZE:
            raise ParseError(f"truncated image header: {HEADER_SIZE - len(buf)} bytes missing")
        (
            magic,
            version,
            metric,
            heuristic,
            dim,
            m,
            e_build,
            e_search,
            level_cap,
            level_lambda,
            seed,
            ntotal,
            entry_point,
            max_level,
        ) = _FIXED.unpack_from(buf, 0)
        if magic != MAGIC:
            raise ParseError(f"bad image magic {magic!r} at byte offset 0")
        if version != VERSION:
            raise ParseError(f"unsupported image version {version} at byte offset 4")
        if metric not in _CODE_METRICS:
            raise ParseError(f"unknown metric code {metric} at byte offset 6")
        try:
            params = HnswParams(
                M=m,
                e_build=e_build,
                e_search=e_search,
                level_lambda=level_lambda,
                rng_seed=seed,
                heuristic=bool(heuristic),
                level_cap=None if level_cap < 0 else level_cap,
            )
        except ContractViolationError as e:
            raise ParseError(f"invalid graph parameters in image header: {e}") from e
        slots = tuple(ArraySlot(*_SLOT.unpack_from(buf, slot_offset(kind))) for kind in ArrayKind)
        return cls(
            dim=dim,
            metric=_CODE_METRICS[metric],
            params=params,
            ntotal=ntotal,
            entry_point=entry_point,
            max_level=max_level,
            slots=slots,
            version=version,
        )


def array_payloads(index: HnswIndex) -> list[bytes]:
    """Raw little-endian bytes of every array, in :class:`ArrayKind` order."""
    arrays = {
        ArrayKind.LEVELS: index.levels,
        ArrayKind.OFFSETS: index.offsets,
        ArrayKind.NEIGHBORS: index.neighbors,
        ArrayKind.VECTORS: index.vectors.data,
        ArrayKind.LABELS: index.labels,
    }
    return [np.ascontiguousarray(arrays[kind], dtype=ARRAY_DTYPES[kind]).tobytes() for kind in ArrayKind]


def array_bytes(index: HnswIndex, kind: ArrayKind) -> bytes:
    return array_payloads(index)[int(kind)]


def header_for(index: HnswIndex, slots: tuple[ArraySlot, ...]) -> ImageHeader:
    return ImageHeader(
        dim=index.dim,
        metric=index.metric,
        params=index.params,
        ntotal=index.ntotal,
        entry_point=index.entry_point,
        max_level=index.max_level,
        slots=slots,
    )


def serialize(index: HnswIndex, policy: GapPolicy | None = None) -> bytes:
    """Pack ``index`` into an image with an internal gap after every array."""
    fraction = (policy or GapPolicy()).internal_gap_fraction
    payloads = array_payloads(index)
    slots = []
    pos = HEADER_SIZE
    for payload in payloads:
        capacity = len(payload) + gap_bytes(len(payload), fraction)
        slots.append(ArraySlot(pos, capacity, len(payload)))
        pos += capacity
    header = header_for(index, tuple(slots))
    image = bytearray(pos)
    image[:HEADER_SIZE] = header.pack()
    for slot, payload in zip(slots, payloads, strict=True):
        image[slot.offset : slot.offset + len(payload)] = payload
    return bytes(image)


def deserialize(buf: bytes | bytearray | memoryview) -> HnswIndex:
    """Zero-copy view of a contiguous image; array storage aliases ``buf``.

    The returned index copies its arrays before the first insert.
    """
    header = ImageHeader.unpack(buf)
    arrays = {}
    for kind in ArrayKind:
        slot = header.slot(kind)
        if slot.length > slot.capacity:
            raise ParseError(f"{kind.name.lower()} spills past its capacity; splice the overflow records first")
        end = slot.offset + slot.length
        if end > len(buf):
            raise ParseError(f"truncated image: {kind.name.lower()} needs {end - len(buf)} more bytes")
        dtype = ARRAY_DTYPES[kind]
        if slot.length % dtype.itemsize:
            raise ParseError(f"{kind.name.lower()} length {slot.length} is not a multiple of {dtype.itemsize}")
        arrays[kind] = np.frombuffer(buf, dtype=dtype, count=slot.length // dtype.itemsize, offset=slot.offset)

    n = header.ntotal
    expected = {
        ArrayKind.LEVELS: n,
        ArrayKind.OFFSETS: n + 1,
        ArrayKind.VECTORS: n * header.dim,
        ArrayKind.LABELS: n,
    }
    for kind, count in expected.items():
        if arrays[kind].shape[0] != count:
            raise ParseError(f"{kind.name.lower()} holds {arrays[kind].shape[0]} elements, header implies {count}")
    offsets = arrays[ArrayKind.OFFSETS]
    if offsets[-1] != arrays[ArrayKind.NEIGHBORS].shape[0]:
        raise ParseError("neighbors length disagrees with the final offset")
    if n and not 0 <= header.entry_point < n:
        raise ParseError(f"entry point {header.entry_point} outside [0, {n})")

    return HnswIndex.from_arrays(
        header.params,
        header.metric,
        arrays[ArrayKind.LEVELS],
        offsets,
        arrays[ArrayKind.NEIGHBORS],
        arrays[ArrayKind.VECTORS].reshape(n, header.dim),
        arrays[ArrayKind.LABELS],
        header.entry_point if n else -1,
        header.max_level if n else -1,
        borrowed=True,
    )
