from msgspec import Struct, field

from src.backend.models import EpochPhase, InsertStatus


class PostSearch(Struct):
    queries: list[list[float]]
    k: int = 10
    R: int = 1


class Hit(Struct):
    label: int
    distance: float


class SearchMetrics(Struct):
    fetched: int
    cache_hits: int
    round_trips: int
    bytes_fetched: int
    t_meta: float
    t_pipeline: float
    latency: float
    degraded: int


class SearchResults(Struct):
    epoch: int
    results: list[list[Hit]]
    degraded: list[bool]
    metrics: SearchMetrics
    # positions of queries left for a later batch
    deferred: list[int] = field(default_factory=list)


class PostInsert(Struct):
    vectors: list[list[float]]


class InsertOutcome(Struct):
    status: InsertStatus
    label: int | None = None
    sub_id: int | None = None
    error: str | None = None


class InsertResults(Struct):
    phase: EpochPhase
    epoch: int
    results: list[InsertOutcome]


class RebuildResult(Struct):
    phase: EpochPhase
    epoch: int
    rebuilds: int
