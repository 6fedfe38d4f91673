"""In-process stand-in for one-sided remote memory.

Regions are zero-initialized byte arrays addressed by id. Every operation is
charged simulated time under :class:`FabricCostModel`; nothing sleeps unless
``real_sleep`` is set.
"""

import logging
import threading
import time
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Protocol

from src.backend.lib.exceptions import ContractViolationError, FabricError, OutOfBoundsError
from src.backend.settings import FabricSettings

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegionHandle:
    region_id: int
    size: int


@dataclass(frozen=True)
class FabricCostModel:
    rtt: float = 5e-6
    bandwidth: float = 12.5e9
    per_op_overhead: float = 2e-7

    def __post_init__(self):
        if self.rtt < 0 or self.per_op_overhead < 0 or self.bandwidth <= 0:
            raise ContractViolationError("cost model terms must be non-negative and bandwidth positive")

    @classmethod
    def from_settings(cls, settings: FabricSettings) -> "FabricCostModel":
        return cls(
            rtt=settings.rtt_us * 1e-6,
            bandwidth=settings.bandwidth_gbps * 1e9 / 8,
            per_op_overhead=settings.per_op_us * 1e-6,
        )

    def read_cost(self, length: int) -> float:
        """One stand-alone READ or WRITE of ``length`` bytes."""
        return self.rtt + length / self.bandwidth

    def doorbell_cost(self, lengths: Sequence[int]) -> float:
        return self.rtt + sum(lengths) / self.bandwidth + self.per_op_overhead * len(lengths)


@dataclass(frozen=True)
class ReadOp:
    region: int
    offset: int
    length: int


@dataclass(frozen=True)
class WriteOp:
    region: int
    offset: int
    data: bytes

    @property
    def length(self) -> int:
        return len(self.data)


Op = ReadOp | WriteOp


@dataclass
class FabricStats:
    reads: int = 0
    writes: int = 0
    doorbell_batches: int = 0
    round_trips: int = 0
    bytes_moved: int = 0
    simulated_time_charged: float = 0.0
    region_reads: dict[int, int] = field(default_factory=lambda: defaultdict(int))
    region_writes: dict[int, int] = field(default_factory=lambda: defaultdict(int))

    def snapshot(self) -> "FabricStats":
        return FabricStats(
            reads=self.reads,
            writes=self.writes,
            doorbell_batches=self.doorbell_batches,
            round_trips=self.round_trips,
            bytes_moved=self.bytes_moved,
            simulated_time_charged=self.simulated_time_charged,
            region_reads=defaultdict(int, self.region_reads),
            region_writes=defaultdict(int, self.region_writes),
        )

    def since(self, earlier: "FabricStats") -> "FabricStats":
        """Counters accumulated after ``earlier`` was taken."""
        return FabricStats(
            reads=self.reads - earlier.reads,
            writes=self.writes - earlier.writes,
            doorbell_batches=self.doorbell_batches - earlier.doorbell_batches,
            round_trips=self.round_trips - earlier.round_trips,
            bytes_moved=self.bytes_moved - earlier.bytes_moved,
            simulated_time_charged=self.simulated_time_charged - earlier.simulated_time_charged,
            region_reads=_counter_delta(self.region_reads, earlier.region_reads),
            region_writes=_counter_delta(self.region_writes, earlier.region_writes),
        )


def _counter_delta(now: dict[int, int], before: dict[int, int]) -> dict[int, int]:
    delta: dict[int, int] = defaultdict(int)
    for key, value in now.items():
        if value != before.get(key, 0):
            delta[key] = value - before.get(key, 0)
    return delta


class Fabric(Protocol):
    """Operation set shared by the in-process fabric and the socket client."""

    max_batch: int
    cost: FabricCostModel

    def register_region(self, size: int) -> RegionHandle: ...

    def free_region(self, handle: RegionHandle) -> None: ...

    def read(self, handle: RegionHandle, offset: int, length: int) -> bytes: ...

    def write(self, handle: RegionHandle, offset: int, data: bytes) -> None: ...

    def doorbell(self, ops: Sequence[Op]) -> list[bytes | None]: ...

    @property
    def stats(self) -> FabricStats: ...


class MemoryFabric:
    def __init__(
        self,
        cost: FabricCostModel | None = None,
        max_batch: int = 16,
        real_sleep: bool = False,
    ) -> None:
        if max_batch < 1:
            raise ContractViolationError("max_batch must be positive")
        self.cost = cost or FabricCostModel()
        self.max_batch = max_batch
        self.real_sleep = real_sleep
        self._regions: dict[int, bytearray] = {}
        self._next_id = 1
        self._faults: list[int | None] = []
        self._lock = threading.Lock()
        self._stats = FabricStats()

    @classmethod
    def from_settings(cls, settings: FabricSettings) -> "MemoryFabric":
        return cls(FabricCostModel.from_settings(settings), settings.max_batch, settings.real_sleep)

    @property
    def stats(self) -> FabricStats:
        with self._lock:
            return self._stats.snapshot()

    def region_ids(self) -> list[int]:
        with self._lock:
            return sorted(self._regions)

    def register_region(self, size: int) -> RegionHandle:
        if size <= 0:
            raise ContractViolationError("region size must be positive")
        try:
            buf = bytearray(size)
        except MemoryError as e:
            raise FabricError(f"cannot allocate a region of {size} bytes") from e
        with self._lock:
            region_id = self._next_id
            self._next_id += 1
            self._regions[region_id] = buf
        logger.info("Registered region %d (%d bytes)", region_id, size)
        return RegionHandle(region_id, size)

    def free_region(self, handle: RegionHandle) -> None:
        with self._lock:
            if self._regions.pop(handle.region_id, None) is None:
                raise FabricError(f"region {handle.region_id} is not registered")
        logger.info("Freed region %d", handle.region_id)

    def inject_fault(self, count: int = 1, region: int | None = None) -> None:
        """Fail the next ``count`` operations (optionally only those touching ``region``)."""
        with self._lock:
            self._faults.extend([region] * count)

    def _take_fault(self, ops: Sequence[Op]) -> bool:
        touched = {op.region for op in ops}
        for i, region in enumerate(self._faults):
            if region is None or region in touched:
                del self._faults[i]
                return True
        return False

    def _check(self, op: Op) -> bytearray:
        buf = self._regions.get(op.region)
        if buf is None:
            raise FabricError(f"region {op.region} is not registered")
        if op.offset < 0 or op.length < 0 or op.offset + op.length > len(buf):
            raise OutOfBoundsError(
                f"range [{op.offset}, {op.offset + op.length}) outside region {op.region} of {len(buf)} bytes"
            )
        return buf

    def _charge(self, seconds: float, doorbell: bool = False) -> None:
        with self._lock:
            self._stats.simulated_time_charged += seconds
            self._stats.doorbell_batches += int(doorbell)
        if self.real_sleep:
            time.sleep(seconds)

    def _apply(self, ops: Sequence[Op]) -> list[bytes | None]:
        with self._lock:
            if self._take_fault(ops):
                raise FabricError("injected fault")
            buffers = [self._check(op) for op in ops]
            results: list[bytes | None] = []
            for op, buf in zip(ops, buffers, strict=True):
                if isinstance(op, ReadOp):
                    results.append(bytes(buf[op.offset : op.offset + op.length]))
                    self._stats.reads += 1
                    self._stats.region_reads[op.region] += 1
                else:
                    buf[op.offset : op.offset + op.length] = op.data
                    results.append(None)
                    self._stats.writes += 1
                    self._stats.region_writes[op.region] += 1
                self._stats.bytes_moved += op.length
            self._stats.round_trips += 1
        return results

    def read(self, handle: RegionHandle, offset: int, length: int) -> bytes:
        op = ReadOp(handle.region_id, offset, length)
        data = self._apply([op])[0]
        self._charge(self.cost.read_cost(length))
        return data  # type: ignore[return-value]

    def write(self, handle: RegionHandle, offset: int, data: bytes) -> None:
        op = WriteOp(handle.region_id, offset, bytes(data))
        self._apply([op])
        self._charge(self.cost.read_cost(len(data)))

    def doorbell(self, ops: Sequence[Op]) -> list[bytes | None]:
        """Apply ``ops`` in order for one round trip; any bad descriptor fails the whole batch."""
        if not ops:
            raise ContractViolationError("a doorbell batch needs at least one operation")
        if len(ops) > self.max_batch:
            raise ContractViolationError(f"doorbell batch of {len(ops)} exceeds max_batch {self.max_batch}")
        results = self._apply(ops)
        self._charge(self.cost.doorbell_cost([op.length for op in ops]), doorbell=True)
        return results


def chunked(ops: Sequence[Op], max_batch: int, full_tail: bool = False) -> list[list[Op]]:
    """Split ``ops`` into doorbell-sized batches, order preserved.

    With ``full_tail`` the short batch comes first so the last ``max_batch`` ops
    always share one doorbell.
    """
    head = len(ops) % max_batch if full_tail else 0
    if head:
        return [list(ops[:head]), *chunked(ops[head:], max_batch)]
    return [list(ops[i : i + max_batch]) for i in range(0, len(ops), max_batch)]
