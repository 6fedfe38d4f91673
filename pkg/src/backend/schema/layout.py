from typing import Any

from msgspec import Struct

from src.backend.models import EpochPhase


class Stats(Struct):
    phase: EpochPhase
    epoch: int
    rebuilds: int
    buffered: int
    committed: int
    commit_bytes: int
    cache_resident: int
    reads: int
    writes: int
    doorbell_batches: int
    round_trips: int
    bytes_moved: int
    simulated_time_charged: float


class Layout(Struct):
    layout: dict[str, Any]
