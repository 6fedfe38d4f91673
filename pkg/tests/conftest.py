import numpy as np
import pytest

from src.backend.lib.builder import BuildConfig, BuiltIndex, build_index
from src.backend.lib.fabric import FabricCostModel, MemoryFabric
from src.backend.lib.hnsw import HnswParams
from src.backend.lib.image import GapPolicy
from src.backend.lib.vectors import VectorStore, gaussian_mixture


@pytest.fixture
def anyio_backend() -> str:
    return "asyncio"


@pytest.fixture
def small_params() -> HnswParams:
    return HnswParams(M=8, e_build=40, e_search=40, rng_seed=7)


@pytest.fixture
def random_store() -> VectorStore:
    rng = np.random.default_rng(3)
    return VectorStore(rng.normal(size=(300, 8)).astype(np.float32))


@pytest.fixture
def blobs() -> VectorStore:
    store, _ = gaussian_mixture(480, 8, 8, seed=11, spread=0.5, separation=6.0)
    return store


@pytest.fixture
def fabric() -> MemoryFabric:
    return MemoryFabric(FabricCostModel(rtt=5e-6, bandwidth=12.5e9, per_op_overhead=2e-7), max_batch=16)


@pytest.fixture
def build_config(small_params: HnswParams) -> BuildConfig:
    return BuildConfig(
        P=4,
        hnsw=small_params,
        e_meta=8,
        policy=GapPolicy(internal_gap_fraction=0.2, overflow_fraction=0.25),
        I_max=10,
        rng_seed=5,
    )


@pytest.fixture
def built(blobs: VectorStore, build_config: BuildConfig, fabric: MemoryFabric) -> BuiltIndex:
    return build_index(blobs, build_config, fabric)
