from litestar import Litestar
from litestar.datastructures import State
from litestar.exceptions import ClientException, NotFoundException
from litestar.logging import LoggingConfig
from litestar.openapi import OpenAPIConfig
from litestar.openapi.plugins import ScalarRenderPlugin

from src.backend.config import bench_cli_plugin, load_service, settings
from src.backend.controllers import LayoutController, SearchController
from src.backend.lib.exceptions import DhnswError
from src.backend.lib.services import DhnswService
from src.backend.lib.utils import exception_handler


def create_app(service: DhnswService | None = None) -> Litestar:
    return Litestar(
        debug=settings.debug,
        route_handlers=[
            SearchController,
            LayoutController,
        ],
        plugins=[
            bench_cli_plugin,
        ],
        state=State({"dhnsw": service}),
        on_startup=[load_service],
        openapi_config=OpenAPIConfig(
            title="Disaggregated Vector Search",
            version="dev",
            path="/api/schema",
            render_plugins=[ScalarRenderPlugin()],
        ),
        logging_config=LoggingConfig(
            root={"level": settings.log_level, "handlers": ["queue_listener"]},
            disable_stack_trace={
                400,
                404,
                405,
                409,
                503,
                ClientException,
                NotFoundException,
            },
            log_exceptions="always",
        ),
        exception_handlers={
            Exception: exception_handler,
            DhnswError: exception_handler,
        },
    )


app = create_app()
