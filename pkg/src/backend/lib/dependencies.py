from litestar.datastructures import State
from litestar.exceptions import ServiceUnavailableException

from src.backend.lib.services import DhnswService


async def provide_service(state: State) -> DhnswService:
    service: DhnswService | None = state.get("dhnsw")
    if service is None:
        raise ServiceUnavailableException(detail="No index loaded; run `dhnsw build` first.")
    return service
