from litestar import post
from litestar.controller import Controller
from litestar.di import Provide
from litestar.exceptions import ValidationException

from src.backend.lib.dependencies import provide_service
from src.backend.lib.services import DhnswService
from src.backend.schema.search import (
    Hit,
    InsertOutcome,
    InsertResults,
    PostInsert,
    PostSearch,
    RebuildResult,
    SearchMetrics,
    SearchResults,
)


class SearchController(Controller):
    path = "/api"
    tags = ["Search"]
    dependencies = {
        "dhnsw_service": Provide(provide_service),
    }

    @post("/search")
    async def search(self, dhnsw_service: DhnswService, data: PostSearch) -> SearchResults:
        if not data.queries:
            raise ValidationException(detail="At least one query is required")

        result = await dhnsw_service.search(data.queries, data.k, data.R)
        m = result.metrics
        return SearchResults(
            epoch=dhnsw_service.engine.epoch,
            results=[[Hit(label=label, distance=d) for label, d in hits] for hits in result.results],
            degraded=result.degraded,
            metrics=SearchMetrics(
                fetched=m.fetched,
                cache_hits=m.cache_hits,
                round_trips=m.round_trips,
                bytes_fetched=m.bytes_fetched,
                t_meta=m.t_meta,
                t_pipeline=m.t_pipeline,
                latency=m.latency,
                degraded=m.degraded,
            ),
            deferred=result.deferred,
        )

    @post("/insert")
    async def insert(self, dhnsw_service: DhnswService, data: PostInsert) -> InsertResults:
        if not data.vectors:
            raise ValidationException(detail="At least one vector is required")

        results = await dhnsw_service.insert(data.vectors)
        return InsertResults(
            phase=dhnsw_service.manager.phase,
            epoch=dhnsw_service.manager.state.epoch,
            results=[
                InsertOutcome(status=r.status, label=r.label, sub_id=r.sub_id, error=r.error) for r in results
            ],
        )

    @post("/rebuild")
    async def rebuild(self, dhnsw_service: DhnswService) -> RebuildResult:
        phase = await dhnsw_service.rebuild()
        return RebuildResult(
            phase=phase,
            epoch=dhnsw_service.manager.state.epoch,
            rebuilds=dhnsw_service.manager.rebuilds,
        )
