import struct
from collections.abc import Iterator
from functools import partial

import anyio
import msgspec
import pytest
from anyio.abc import SocketAttribute
from anyio.from_thread import start_blocking_portal
from anyio.streams.buffered import BufferedByteReceiveStream

from src.backend.lib.builder import BuildConfig, build_index
from src.backend.lib.exceptions import FabricError, OutOfBoundsError, ParseError
from src.backend.lib.fabric import MemoryFabric, ReadOp, WriteOp
from src.backend.lib.query import QueryBatch, QueryEngine
from src.backend.lib.transport import (
    Opcode,
    RemoteFabric,
    StatsMessage,
    Status,
    _serve_connection,
    decode_ops,
    decode_results,
    encode_ops,
    frame,
    handle_request,
)
from src.backend.lib.vectors import VectorStore


def test_frame_layout() -> None:
    assert frame(Opcode.READ, b"ab") == b"\x03\x00\x00\x00\x03ab"
    assert frame(Status.OK) == b"\x01\x00\x00\x00\x00"
    assert [int(s) for s in Status] == [0, 1, 2, 3]
    assert frame(Status.OUT_OF_BOUNDS, b"e") == b"\x02\x00\x00\x00\x01e"
    assert frame(Status.FABRIC_ERROR)[4] == 2


def test_ops_codec() -> None:
    ops = [ReadOp(1, 8, 4), WriteOp(2, 0, b"xyz")]
    assert decode_ops(encode_ops(ops)) == ops
    with pytest.raises(ParseError, match="truncated"):
        decode_ops(encode_ops(ops)[:-1])
    with pytest.raises(ParseError, match="trailing"):
        decode_ops(encode_ops(ops) + b"\x00")
    with pytest.raises(ParseError, match="unknown doorbell op kind 7"):
        decode_ops(struct.pack("<IBIQQ", 1, 7, 1, 0, 0))


def test_handle_request(fabric: MemoryFabric) -> None:
    (region,) = struct.unpack("<I", handle_request(fabric, Opcode.REGISTER, struct.pack("<Q", 32)))
    assert handle_request(fabric, Opcode.WRITE, struct.pack("<IQQ", region, 4, 2) + b"hi") == b""
    assert handle_request(fabric, Opcode.READ, struct.pack("<IQQ", region, 3, 4)) == b"\x00hi\x00"

    ops = [WriteOp(region, 0, b"\x05"), ReadOp(region, 0, 2)]
    response = handle_request(fabric, Opcode.DOORBELL, encode_ops(ops))
    assert decode_results(response, ops) == [None, b"\x05\x00"]

    stats = msgspec.json.decode(handle_request(fabric, Opcode.STATS, b""), type=StatsMessage)
    assert stats.doorbell_batches == 1
    assert stats.max_batch == fabric.max_batch


def test_handle_request_errors(fabric: MemoryFabric) -> None:
    (region,) = struct.unpack("<I", handle_request(fabric, Opcode.REGISTER, struct.pack("<Q", 8)))
    with pytest.raises(ParseError, match="announces"):
        handle_request(fabric, Opcode.WRITE, struct.pack("<IQQ", region, 0, 4) + b"x")
    with pytest.raises(OutOfBoundsError):
        handle_request(fabric, Opcode.READ, struct.pack("<IQQ", region, 4, 8))
    with pytest.raises(ParseError, match="unknown opcode"):
        handle_request(fabric, 99, b"")
    handle_request(fabric, Opcode.FREE, struct.pack("<I", region))
    with pytest.raises(FabricError):
        handle_request(fabric, Opcode.FREE, struct.pack("<I", region))


@pytest.mark.anyio
async def test_server_reports_status_codes(fabric: MemoryFabric) -> None:
    region = fabric.register_region(16).region_id
    listener = await anyio.create_tcp_listener(local_host="127.0.0.1")
    port = listener.extra(SocketAttribute.local_port)
    async with anyio.create_task_group() as tg:
        tg.start_soon(listener.serve, partial(_serve_connection, fabric))
        async with await anyio.connect_tcp("127.0.0.1", port) as client:
            reader = BufferedByteReceiveStream(client)

            async def call(code: int, payload: bytes) -> tuple[int, bytes]:
                await client.send(frame(code, payload))
                (length,) = struct.unpack("<I", await reader.receive_exactly(4))
                body = await reader.receive_exactly(length)
                return body[0], body[1:]

            assert await call(Opcode.READ, struct.pack("<IQQ", region, 0, 2)) == (Status.OK, b"\x00\x00")
            status, message = await call(Opcode.READ, struct.pack("<IQQ", region, 10, 10))
            assert status == Status.OUT_OF_BOUNDS
            assert b"outside region" in message
            status, _ = await call(Opcode.READ, struct.pack("<IQQ", 999, 0, 1))
            assert status == Status.FABRIC_ERROR
            status, _ = await call(Opcode.REGISTER, b"")
            assert status == Status.CONTRACT_VIOLATION
        tg.cancel_scope.cancel()


@pytest.fixture
def daemon(fabric: MemoryFabric) -> Iterator[int]:
    with start_blocking_portal() as portal:
        listener = portal.call(partial(anyio.create_tcp_listener, local_host="127.0.0.1"))
        future = portal.start_task_soon(listener.serve, partial(_serve_connection, fabric))
        yield listener.extra(SocketAttribute.local_port)
        future.cancel()


def test_remote_fabric_round_trip(daemon: int, fabric: MemoryFabric) -> None:
    with RemoteFabric("127.0.0.1", daemon, fabric.cost) as remote:
        assert remote.max_batch == fabric.max_batch
        handle = remote.register_region(64)
        remote.write(handle, 0, b"remote")
        assert remote.read(handle, 0, 6) == b"remote"
        assert remote.doorbell([ReadOp(handle.region_id, 2, 4), WriteOp(handle.region_id, 0, b"R")]) == [
            b"mote",
            None,
        ]
        assert remote.stats.doorbell_batches == 1
        with pytest.raises(OutOfBoundsError):
            remote.read(handle, 60, 8)
        remote.free_region(handle)
        with pytest.raises(FabricError):
            remote.read(handle, 0, 1)


def test_remote_fabric_unreachable() -> None:
    with pytest.raises(FabricError, match="cannot reach"):
        RemoteFabric("127.0.0.1", 1)


def test_search_over_the_wire(
    daemon: int, fabric: MemoryFabric, blobs: VectorStore, build_config: BuildConfig
) -> None:
    with RemoteFabric("127.0.0.1", daemon, fabric.cost) as remote:
        built = build_index(blobs, build_config, remote)
        batch = QueryBatch(blobs.data[:5], k=3, R=build_config.P)
        result = QueryEngine(remote, built.meta, built.meta_index).search_batch_sequential(batch)
        assert [hits[0][0] for hits in result.results] == [0, 1, 2, 3, 4]
        assert result.metrics.round_trips >= 1
