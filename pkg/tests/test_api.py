from collections.abc import AsyncIterator
from pathlib import Path

import pytest
from litestar import Litestar
from litestar.testing import AsyncTestClient

from src.backend import config as app_config
from src.backend.lib.builder import BuiltIndex
from src.backend.lib.fabric import MemoryFabric
from src.backend.lib.services import DhnswService
from src.backend.lib.vectors import VectorStore
from src.backend.main import create_app
from src.backend.settings import Settings


@pytest.fixture
def service(built: BuiltIndex, fabric: MemoryFabric) -> DhnswService:
    return DhnswService.from_built(built, fabric, Settings())


@pytest.fixture
async def client(service: DhnswService) -> AsyncIterator[AsyncTestClient[Litestar]]:
    async with AsyncTestClient(app=create_app(service)) as client:
        yield client


@pytest.mark.anyio
async def test_search(client: AsyncTestClient[Litestar], blobs: VectorStore, built: BuiltIndex) -> None:
    response = await client.post(
        "/api/search", json={"queries": blobs.data[:3].tolist(), "k": 3, "R": built.meta.P}
    )
    assert response.status_code == 201
    body = response.json()
    assert body["epoch"] == 0
    assert [hits[0]["label"] for hits in body["results"]] == [0, 1, 2]
    assert body["degraded"] == [False, False, False]
    assert body["metrics"]["fetched"] == built.meta.P


@pytest.mark.anyio
@pytest.mark.parametrize(
    "payload",
    [
        {"queries": []},
        {"queries": [[0.0, 1.0]]},
        {"queries": [[0.0] * 8], "k": 0},
        {"queries": [[0.0] * 8], "R": 99},
    ],
)
async def test_search_rejects_bad_requests(client: AsyncTestClient[Litestar], payload: dict) -> None:
    response = await client.post("/api/search", json=payload)
    assert response.status_code == 400


@pytest.mark.anyio
async def test_insert_then_find(client: AsyncTestClient[Litestar], blobs: VectorStore) -> None:
    vector = (blobs.data[7] + 0.01).tolist()
    response = await client.post("/api/insert", json={"vectors": [vector]})
    assert response.status_code == 201
    body = response.json()
    assert body["phase"] == "STEADY"
    (outcome,) = body["results"]
    assert outcome["status"] == "COMMITTED"
    assert outcome["label"] == blobs.count

    response = await client.post("/api/search", json={"queries": [vector], "k": 1, "R": 1})
    assert response.json()["results"][0][0]["label"] == blobs.count

    stats = (await client.get("/api/stats")).json()
    assert stats["committed"] == 1
    assert stats["commit_bytes"] > 0

    response = await client.post("/api/insert", json={"vectors": []})
    assert response.status_code == 400


@pytest.mark.anyio
async def test_forced_rebuild(client: AsyncTestClient[Litestar], fabric: MemoryFabric, built: BuiltIndex) -> None:
    response = await client.post("/api/rebuild")
    assert response.status_code == 201
    assert response.json() == {"phase": "STEADY", "epoch": 1, "rebuilds": 1}
    assert built.meta.region.region_id not in fabric.region_ids()
    layout = (await client.get("/api/layout")).json()["layout"]
    assert layout["epoch"] == 1
    assert len(layout["groups"]) == 2


@pytest.mark.anyio
async def test_stats(client: AsyncTestClient[Litestar]) -> None:
    response = await client.get("/api/stats")
    assert response.status_code == 200
    body = response.json()
    assert body["phase"] == "STEADY"
    assert body["rebuilds"] == 0
    assert body["buffered"] == 0


@pytest.mark.anyio
async def test_no_index_loaded(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    monkeypatch.setattr(app_config.settings.server, "data_dir", tmp_path)
    async with AsyncTestClient(app=create_app()) as client:
        response = await client.post("/api/search", json={"queries": [[0.0] * 8]})
        assert response.status_code == 503
