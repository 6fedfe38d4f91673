import numpy as np
import pytest

from src.backend.lib.builder import BuildConfig, BuiltIndex, build_index
from src.backend.lib.exceptions import ContractViolationError, EpochPhaseError, UnknownWorkerError
from src.backend.lib.fabric import MemoryFabric
from src.backend.lib.image import GapPolicy
from src.backend.lib.insert import InsertCoordinator
from src.backend.lib.layout import RECORD_SIZE
from src.backend.lib.query import ExecutionParams, QueryBatch, QueryEngine
from src.backend.lib.rebuild import EpochManager, LshBuffer, maybe_trigger
from src.backend.lib.vectors import VectorStore
from src.backend.models import EpochPhase, InsertStatus


@pytest.fixture
def engine(built: BuiltIndex, fabric: MemoryFabric) -> QueryEngine:
    return QueryEngine(fabric, built.meta, built.meta_index, ExecutionParams(e_sub=80), name="reader")


@pytest.fixture
def manager(built: BuiltIndex, fabric: MemoryFabric, build_config: BuildConfig, engine: QueryEngine) -> EpochManager:
    manager = EpochManager(fabric, InsertCoordinator(fabric, built.meta, built.meta_index), build_config)
    manager.register_worker(engine)
    return manager


def _far(dim: int, n: int = 3) -> np.ndarray:
    return np.full((n, dim), 40.0, dtype=np.float32) + np.arange(n, dtype=np.float32)[:, None]


def test_lsh_buffer_finds_exact_vector() -> None:
    rng = np.random.default_rng(2)
    buffer = LshBuffer(8, bits=4, probe_radius=1, rng_seed=1)
    vectors = rng.normal(size=(50, 8)).astype(np.float32)
    for label, v in enumerate(vectors, start=100):
        buffer.add(label, v)
    assert len(buffer) == 50
    assert int(buffer.occupancy().sum()) == 50
    assert buffer.search(vectors[7], 1) == [(107, 0.0)]
    assert all(label != 107 for label, _ in buffer.search(vectors[7], 3, exclude={107}))
    assert len(buffer.probe(0)) == 1 + 4


def test_lsh_buffer_items_and_discard() -> None:
    buffer = LshBuffer(2, bits=2)
    buffer.add(3, [1.0, 1.0])
    buffer.add(1, [-1.0, 2.0])
    labels, vectors = buffer.items()
    assert labels == [1, 3]
    assert vectors.shape == (2, 2)
    buffer.discard({1, 3})
    assert len(buffer) == 0
    assert buffer.items()[0] == []
    with pytest.raises(ContractViolationError):
        buffer.add(4, [1.0, 2.0, 3.0])
    with pytest.raises(ContractViolationError):
        LshBuffer(2, bits=0)


def test_trigger_on_signal_or_full_overflow(built: BuiltIndex) -> None:
    meta = built.meta.copy()
    assert not maybe_trigger(meta)
    assert maybe_trigger(meta, signaled=True)
    group = meta.groups[0]
    group.used_forward = group.overflow_len - RECORD_SIZE
    assert maybe_trigger(meta)


def test_phase_contracts(manager: EpochManager, blobs: VectorStore) -> None:
    assert manager.phase == EpochPhase.STEADY
    with pytest.raises(EpochPhaseError):
        manager.run_rebuild()
    with pytest.raises(EpochPhaseError):
        manager.buffer_insert(blobs[0])
    with pytest.raises(EpochPhaseError):
        manager.acknowledge_epoch("reader")
    with pytest.raises(UnknownWorkerError):
        manager.acknowledge_epoch("nobody")
    manager.begin_rebuild()
    with pytest.raises(EpochPhaseError):
        manager.begin_rebuild()


def test_steady_inserts_commit(manager: EpochManager, blobs: VectorStore) -> None:
    results = manager.insert(blobs.data[:2] + 0.01)
    assert [r.status for r in results] == [InsertStatus.COMMITTED] * 2
    assert not manager.check_trigger()


@pytest.mark.anyio
async def test_full_epoch_cycle(
    manager: EpochManager, engine: QueryEngine, fabric: MemoryFabric, built: BuiltIndex, blobs: VectorStore
) -> None:
    old_region = built.meta.region.region_id
    manager.begin_rebuild()
    assert manager.phase == EpochPhase.REBUILDING

    far = _far(blobs.dim)
    buffered = manager.insert(far)
    assert [r.status for r in buffered] == [InsertStatus.BUFFERED] * 3
    assert [r.label for r in buffered] == [blobs.count, blobs.count + 1, blobs.count + 2]
    result = await manager.search(engine, QueryBatch(far[0], k=1, R=1))
    assert result.results[0][0] == (blobs.count, 0.0)

    state = manager.run_rebuild()
    assert state.epoch == 1
    assert manager.phase == EpochPhase.SWITCHING
    assert manager.pending_acks() == ["reader"]
    assert old_region in fabric.region_ids()
    assert engine.epoch == 0
    result = await manager.search(engine, QueryBatch(far[1], k=1, R=1))
    assert result.results[0][0][0] == blobs.count + 1

    late = manager.insert(far[2] + 1.0)
    assert late[0].status == InsertStatus.BUFFERED

    manager.acknowledge_epoch("reader")
    assert manager.phase == EpochPhase.STEADY
    assert manager.rebuilds == 1
    assert engine.epoch == 1
    assert old_region not in fabric.region_ids()
    assert manager.buffer is None
    assert manager.coordinator.totals.committed == 1

    for v, r in zip([*far, far[2] + 1.0], [*buffered, *late], strict=True):
        found = await manager.search(engine, QueryBatch(v, k=1, R=built.meta.P))
        assert found.results[0][0][0] == r.label


def test_rebuild_without_workers_switches_at_once(
    built: BuiltIndex, fabric: MemoryFabric, build_config: BuildConfig
) -> None:
    manager = EpochManager(fabric, InsertCoordinator(fabric, built.meta, built.meta_index), build_config)
    manager.begin_rebuild()
    state = manager.run_rebuild()
    assert state.phase == EpochPhase.STEADY
    assert state.retired is None
    assert built.meta.region.region_id not in fabric.region_ids()


def test_exhausted_overflow_starts_rebuild(
    blobs: VectorStore, build_config: BuildConfig, fabric: MemoryFabric
) -> None:
    config = BuildConfig(P=2, hnsw=build_config.hnsw, policy=GapPolicy(0.0, 0.01), I_max=5)
    built = build_index(blobs, config, fabric)
    manager = EpochManager(fabric, InsertCoordinator(fabric, built.meta, built.meta_index), config)
    rng = np.random.default_rng(0)
    statuses = []
    for _ in range(20):
        statuses += [r.status for r in manager.insert(blobs.data[rng.choice(blobs.count, 4)] + 0.01)]
        if manager.phase != EpochPhase.STEADY:
            break
    assert manager.phase == EpochPhase.REBUILDING
    assert InsertStatus.BUFFERED in statuses
    state = manager.run_rebuild()
    assert state.phase == EpochPhase.STEADY
    assert manager.coordinator.meta.next_label == blobs.count + len(statuses)
