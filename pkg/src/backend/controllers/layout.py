from litestar import get
from litestar.controller import Controller
from litestar.di import Provide

from src.backend.lib.dependencies import provide_service
from src.backend.lib.services import DhnswService
from src.backend.schema.layout import Layout, Stats


class LayoutController(Controller):
    path = "/api"
    tags = ["Layout"]
    dependencies = {
        "dhnsw_service": Provide(provide_service),
    }

    @get("/layout")
    async def layout(self, dhnsw_service: DhnswService) -> Layout:
        return Layout(layout=dhnsw_service.layout())

    @get("/stats")
    async def stats(self, dhnsw_service: DhnswService) -> Stats:
        return dhnsw_service.stats()
