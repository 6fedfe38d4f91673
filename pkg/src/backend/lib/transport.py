"""Experimental byte-stream transport exposing a :class:`MemoryFabric` over TCP.

Frames are little-endian and length-prefixed::

    request:  [len u32][opcode u8][payload]
    response: [len u32][status u8][payload]

``len`` counts the bytes after itself. Opcodes:

    1 REGISTER  size u64                      -> region u32
    2 FREE      region u32                    -> (empty)
    3 READ      region u32, offset u64, n u64 -> bytes
    4 WRITE     region u32, offset u64, bytes -> (empty)
    5 DOORBELL  count u32, ops                -> one [n u64][bytes] per read op
    6 STATS                                   -> JSON FabricStats

A doorbell op is ``[kind u8][region u32][offset u64][n u64]`` followed by ``n``
data bytes for writes (kind 1) and nothing for reads (kind 0). Statuses are
0 OK, 1 OUT_OF_BOUNDS, 2 FABRIC_ERROR and 3 CONTRACT_VIOLATION; a non-zero
status carries a UTF-8 error message.
"""

import logging
import struct
from collections.abc import Sequence
from enum import IntEnum

import anyio
import msgspec
from anyio.abc import SocketStream
from anyio.from_thread import BlockingPortal, start_blocking_portal
from anyio.streams.buffered import BufferedByteReceiveStream

from src.backend.lib.exceptions import ContractViolationError, FabricError, OutOfBoundsError, ParseError
from src.backend.lib.fabric import FabricCostModel, FabricStats, MemoryFabric, Op, ReadOp, RegionHandle, WriteOp

logger = logging.getLogger(__name__)

_LEN = struct.Struct("<I")
_CODE = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_RANGE = struct.Struct("<IQQ")
_OP = struct.Struct("<BIQQ")

MAX_FRAME = 1 << 30


class Opcode(IntEnum):
    REGISTER = 1
    FREE = 2
    READ = 3
    WRITE = 4
    DOORBELL = 5
    STATS = 6


class Status(IntEnum):
    OK = 0
    OUT_OF_BOUNDS = 1
    FABRIC_ERROR = 2
    CONTRACT_VIOLATION = 3


class StatsMessage(msgspec.Struct):
    reads: int
    writes: int
    doorbell_batches: int
    round_trips: int
    bytes_moved: int
    simulated_time_charged: float
    region_reads: dict[int, int]
    region_writes: dict[int, int]
    max_batch: int


def frame(code: int, payload: bytes = b"") -> bytes:
    return _LEN.pack(_CODE.size + len(payload)) + _CODE.pack(code) + payload


def encode_ops(ops: Sequence[Op]) -> bytes:
    parts = [_U32.pack(len(ops))]
    for op in ops:
        if isinstance(op, ReadOp):
            parts.append(_OP.pack(0, op.region, op.offset, op.length))
        else:
            parts.append(_OP.pack(1, op.region, op.offset, op.length) + op.data)
    return b"".join(parts)


def decode_ops(payload: bytes) -> list[Op]:
    if len(payload) < _U32.size:
        raise ParseError("truncated doorbell: missing op count")
    (count,) = _U32.unpack_from(payload, 0)
    pos = _U32.size
    ops: list[Op] = []
    for _ in range(count):
        if pos + _OP.size > len(payload):
            raise ParseError(f"truncated doorbell op at byte offset {pos}")
        kind, region, offset, length = _OP.unpack_from(payload, pos)
        pos += _OP.size
        if kind == 0:
            ops.append(ReadOp(region, offset, length))
        elif kind == 1:
            if pos + length > len(payload):
                raise ParseError(f"doorbell write at byte offset {pos} needs {pos + length - len(payload)} more bytes")
            ops.append(WriteOp(region, offset, payload[pos : pos + length]))
            pos += length
        else:
            raise ParseError(f"unknown doorbell op kind {kind} at byte offset {pos - _OP.size}")
    if pos != len(payload):
        raise ParseError(f"{len(payload) - pos} trailing bytes after doorbell ops")
    return ops


def encode_results(results: Sequence[bytes | None]) -> bytes:
    return b"".join(_U64.pack(len(r)) + r for r in results if r is not None)


def decode_results(payload: bytes, ops: Sequence[Op]) -> list[bytes | None]:
    out: list[bytes | None] = []
    pos = 0
    for op in ops:
        if isinstance(op, WriteOp):
            out.append(None)
            continue
        if pos + _U64.size > len(payload):
            raise ParseError(f"truncated doorbell result at byte offset {pos}")
        (n,) = _U64.unpack_from(payload, pos)
        pos += _U64.size
        out.append(payload[pos : pos + n])
        pos += n
    return out


def _stats_message(fabric: MemoryFabric) -> bytes:
    s = fabric.stats
    return msgspec.json.encode(
        StatsMessage(
            reads=s.reads,
            writes=s.writes,
            doorbell_batches=s.doorbell_batches,
            round_trips=s.round_trips,
            bytes_moved=s.bytes_moved,
            simulated_time_charged=s.simulated_time_charged,
            region_reads=dict(s.region_reads),
            region_writes=dict(s.region_writes),
            max_batch=fabric.max_batch,
        )
    )


def handle_request(fabric: MemoryFabric, code: int, payload: bytes) -> bytes:
    """Execute one request against ``fabric``; returns the response payload."""
    match code:
        case Opcode.REGISTER:
            (size,) = _U64.unpack_from(payload, 0)
            return _U32.pack(fabric.register_region(size).region_id)
        case Opcode.FREE:
            (region,) = _U32.unpack_from(payload, 0)
            fabric.free_region(RegionHandle(region, 0))
            return b""
        case Opcode.READ:
            region, offset, length = _RANGE.unpack_from(payload, 0)
            return fabric.read(RegionHandle(region, 0), offset, length)
        case Opcode.WRITE:
            region, offset, length = _RANGE.unpack_from(payload, 0)
            data = payload[_RANGE.size :]
            if len(data) != length:
                raise ParseError(f"write announces {length} bytes but carries {len(data)}")
            fabric.write(RegionHandle(region, 0), offset, data)
            return b""
        case Opcode.DOORBELL:
            return encode_results(fabric.doorbell(decode_ops(payload)))
        case Opcode.STATS:
            return _stats_message(fabric)
        case _:
            raise ParseError(f"unknown opcode {code}")


def _status_of(error: Exception) -> Status:
    if isinstance(error, OutOfBoundsError):
        return Status.OUT_OF_BOUNDS
    if isinstance(error, FabricError):
        return Status.FABRIC_ERROR
    return Status.CONTRACT_VIOLATION


async def _read_frame(stream: BufferedByteReceiveStream) -> tuple[int, bytes]:
    (length,) = _LEN.unpack(await stream.receive_exactly(_LEN.size))
    if not _CODE.size <= length <= MAX_FRAME:
        raise ParseError(f"frame length {length} outside [1, {MAX_FRAME}]")
    body = await stream.receive_exactly(length)
    return body[0], body[1:]


async def _serve_connection(fabric: MemoryFabric, client: SocketStream) -> None:
    async with client:
        reader = BufferedByteReceiveStream(client)
        while True:
            try:
                code, payload = await _read_frame(reader)
            except (anyio.EndOfStream, anyio.IncompleteRead, anyio.BrokenResourceError):
                return
            except ParseError as e:
                logger.warning("Dropping client after a malformed frame: %s", e)
                await client.send(frame(Status.CONTRACT_VIOLATION, str(e).encode()))
                return
            try:
                response = frame(Status.OK, handle_request(fabric, code, payload))
            except (FabricError, ContractViolationError, ParseError, struct.error) as e:
                response = frame(_status_of(e), str(e).encode())
            await client.send(response)


async def serve_fabric(fabric: MemoryFabric, host: str = "127.0.0.1", port: int = 7471) -> None:
    """Serve ``fabric`` until cancelled."""
    listener = await anyio.create_tcp_listener(local_host=host, local_port=port)
    logger.info("Fabric daemon listening on %s:%d", host, port)

    async def handle(client: SocketStream) -> None:
        await _serve_connection(fabric, client)

    await listener.serve(handle)


class RemoteFabric:
    """Synchronous fabric client speaking the frame protocol over one TCP connection.

    Every call is a blocking request/response pair; simulated costs are charged
    by the daemon and reported through :attr:`stats`.
    """

    def __init__(self, host: str, port: int, cost: FabricCostModel | None = None) -> None:
        self.cost = cost or FabricCostModel()
        self._portal_cm = start_blocking_portal()
        self._portal: BlockingPortal = self._portal_cm.__enter__()
        try:
            self._stream: SocketStream = self._portal.call(anyio.connect_tcp, host, port)
        except OSError as e:
            self._portal_cm.__exit__(None, None, None)
            raise FabricError(f"cannot reach fabric daemon at {host}:{port}: {e}") from e
        self._reader = BufferedByteReceiveStream(self._stream)
        self._sizes: dict[int, int] = {}
        self.max_batch = self._stats_message().max_batch

    async def _roundtrip(self, code: int, payload: bytes) -> tuple[int, bytes]:
        await self._stream.send(frame(code, payload))
        return await _read_frame(self._reader)

    def _call(self, code: Opcode, payload: bytes = b"") -> bytes:
        try:
            status, body = self._portal.call(self._roundtrip, code, payload)
        except (anyio.EndOfStream, anyio.IncompleteRead, anyio.BrokenResourceError, OSError) as e:
            raise FabricError(f"connection to fabric daemon lost: {e}") from e
        match status:
            case Status.OK:
                return body
            case Status.OUT_OF_BOUNDS:
                raise OutOfBoundsError(body.decode())
            case Status.FABRIC_ERROR:
                raise FabricError(body.decode())
            case _:
                raise ContractViolationError(body.decode())

    def _stats_message(self) -> StatsMessage:
        return msgspec.json.decode(self._call(Opcode.STATS), type=StatsMessage)

    def register_region(self, size: int) -> RegionHandle:
        (region,) = _U32.unpack(self._call(Opcode.REGISTER, _U64.pack(size)))
        self._sizes[region] = size
        return RegionHandle(region, size)

    def free_region(self, handle: RegionHandle) -> None:
        self._call(Opcode.FREE, _U32.pack(handle.region_id))
        self._sizes.pop(handle.region_id, None)

    def read(self, handle: RegionHandle, offset: int, length: int) -> bytes:
        return self._call(Opcode.READ, _RANGE.pack(handle.region_id, offset, length))

    def write(self, handle: RegionHandle, offset: int, data: bytes) -> None:
        self._call(Opcode.WRITE, _RANGE.pack(handle.region_id, offset, len(data)) + bytes(data))

    def doorbell(self, ops: Sequence[Op]) -> list[bytes | None]:
        if not ops:
            raise ContractViolationError("a doorbell batch needs at least one operation")
        return decode_results(self._call(Opcode.DOORBELL, encode_ops(ops)), ops)

    @property
    def stats(self) -> FabricStats:
        m = self._stats_message()
        return FabricStats(
            reads=m.reads,
            writes=m.writes,
            doorbell_batches=m.doorbell_batches,
            round_trips=m.round_trips,
            bytes_moved=m.bytes_moved,
            simulated_time_charged=m.simulated_time_charged,
            region_reads=dict(m.region_reads),
            region_writes=dict(m.region_writes),
        )

    def close(self) -> None:
        self._portal.call(self._stream.aclose)
        self._portal_cm.__exit__(None, None, None)

    def __enter__(self) -> "RemoteFabric":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
