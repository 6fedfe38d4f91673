import numpy as np
import pytest

from src.backend.lib.builder import BuildConfig, BuiltIndex, build_index
from src.backend.lib.exceptions import ContractViolationError
from src.backend.lib.fabric import MemoryFabric, chunked
from src.backend.lib.image import GapPolicy
from src.backend.lib.hnsw import HnswParams
from src.backend.lib.insert import InsertCoordinator, UpdateCommit, commit, dirty_ranges
from src.backend.lib.layout import fetch_sub, read_meta
from src.backend.lib.query import ExecutionParams, QueryBatch, QueryEngine
from src.backend.lib.vectors import VectorStore
from src.backend.models import InsertStatus


def _near(blobs: VectorStore, n: int, seed: int = 5) -> np.ndarray:
    rng = np.random.default_rng(seed)
    picks = rng.choice(blobs.count, n, replace=False)
    return (blobs.data[picks] + rng.normal(0, 0.05, size=(n, blobs.dim))).astype(np.float32)


def test_dirty_ranges_coalesce() -> None:
    old = np.zeros(100, dtype=np.int32)
    new = old.copy()
    new[[3, 4, 10, 90]] = 1
    assert dirty_ranges(old, new, coalesce_gap=64) == [(3, 11), (90, 91)]
    assert dirty_ranges(old, new, coalesce_gap=0) == [(3, 5), (10, 11), (90, 91)]
    assert dirty_ranges(old, old) == []
    with pytest.raises(ContractViolationError):
        dirty_ranges(old, new[:5])


def test_inserts_commit_and_become_searchable(built: BuiltIndex, fabric: MemoryFabric, blobs: VectorStore) -> None:
    writer = InsertCoordinator(fabric, built.meta, built.meta_index)
    vectors = _near(blobs, 6)
    results = writer.insert_batch(vectors)
    assert [r.status for r in results] == [InsertStatus.COMMITTED] * 6
    labels = [r.label for r in results]
    assert sorted(labels) == list(range(blobs.count, blobs.count + 6))
    assert read_meta(fabric, built.meta.region).next_label == blobs.count + 6

    engine = QueryEngine(fabric, read_meta(fabric, built.meta.region), built.meta_index)
    for v, label in zip(vectors, labels, strict=True):
        found = engine.search_batch_sequential(QueryBatch(v, k=1, R=1)).results[0]
        assert found[0][0] == label


def test_commit_writes_only_growth(built: BuiltIndex, fabric: MemoryFabric, blobs: VectorStore) -> None:
    writer = InsertCoordinator(fabric, built.meta, built.meta_index)
    writer.insert_batch(_near(blobs, 1))
    (update,) = writer.last_commits
    image = sum(built.image_sizes) / built.meta.P
    assert 0 < update.nbytes < image
    assert update.appends
    assert update.meta_writes
    described = update.describe()
    assert described["bytes"] == update.nbytes
    assert writer.totals.committed == 1


def test_commit_order(built: BuiltIndex, fabric: MemoryFabric, blobs: VectorStore) -> None:
    writer = InsertCoordinator(fabric, built.meta, built.meta_index)
    writer.insert_batch(_near(blobs, 2))
    for update in writer.last_commits:
        assert update.ops == [*update.appends, *update.overwrites, *update.meta_writes]


def test_pinned_labels(built: BuiltIndex, fabric: MemoryFabric, blobs: VectorStore) -> None:
    writer = InsertCoordinator(fabric, built.meta, built.meta_index)
    results = writer.insert_batch(_near(blobs, 2), labels=[5000, 5001])
    assert sorted(r.label for r in results) == [5000, 5001]
    assert writer.meta.next_label == 5002
    with pytest.raises(ContractViolationError):
        writer.insert_batch(_near(blobs, 2), labels=[1])


def test_dimension_mismatch(built: BuiltIndex, fabric: MemoryFabric) -> None:
    writer = InsertCoordinator(fabric, built.meta, built.meta_index)
    with pytest.raises(ContractViolationError):
        writer.insert_batch(np.zeros((1, 3)))
    assert writer.insert_batch(np.zeros((0, 8))) == []


def test_reader_cache_invalidated_after_commit(
    built: BuiltIndex, fabric: MemoryFabric, blobs: VectorStore
) -> None:
    engine = QueryEngine(fabric, built.meta, built.meta_index, cache_capacity=built.meta.P)
    vector = _near(blobs, 1)
    engine.search_batch_sequential(QueryBatch(vector, k=1, R=built.meta.P))
    (result,) = InsertCoordinator(fabric, built.meta, built.meta_index).insert_batch(vector)
    assert engine.refresh_meta() == [result.sub_id]
    found = engine.search_batch_sequential(QueryBatch(vector, k=1, R=built.meta.P)).results[0]
    assert found[0][0] == result.label


def test_overflow_exhaustion_requires_rebuild(
    blobs: VectorStore, small_params: HnswParams, fabric: MemoryFabric
) -> None:
    config = BuildConfig(P=2, hnsw=small_params, policy=GapPolicy(0.0, 0.01), I_max=5)
    built = build_index(blobs, config, fabric)
    writer = InsertCoordinator(fabric, built.meta, built.meta_index)
    statuses = []
    for i in range(20):
        statuses += [r.status for r in writer.insert_batch(_near(blobs, 4, seed=i))]
        if InsertStatus.REBUILD_REQUIRED in statuses:
            break
    assert InsertStatus.REBUILD_REQUIRED in statuses
    assert writer.rebuild_signaled
    for sub_id in range(built.meta.P):
        snapshot = fetch_sub(fabric, writer.meta, sub_id)
        assert snapshot.image()


def test_failed_commit_is_retried(built: BuiltIndex, fabric: MemoryFabric, blobs: VectorStore) -> None:
    writer = InsertCoordinator(fabric, built.meta, built.meta_index, cache_capacity=built.meta.P)
    vector = _near(blobs, 1)
    writer._writer_sub(writer.route(vector).popitem()[0])
    fabric.inject_fault(1, region=built.meta.region.region_id)
    (result,) = writer.insert_batch(vector)
    assert result.status == InsertStatus.COMMITTED


def test_failed_commit_reports_failure(built: BuiltIndex, fabric: MemoryFabric, blobs: VectorStore) -> None:
    writer = InsertCoordinator(fabric, built.meta, built.meta_index, cache_capacity=built.meta.P)
    vector = _near(blobs, 1)
    writer._writer_sub(writer.route(vector).popitem()[0])
    fabric.inject_fault(2, region=built.meta.region.region_id)
    (result,) = writer.insert_batch(vector)
    assert result.status == InsertStatus.FAILED
    assert writer.totals.failed == 1


def test_commit_refuses_rebuild_marker(fabric: MemoryFabric) -> None:
    with pytest.raises(ContractViolationError):
        commit(UpdateCommit(0, rebuild_required=True), fabric)
    assert commit(UpdateCommit(0), fabric) == 0


def test_stale_reader_sees_pre_commit_version(
    blobs: VectorStore, small_params: HnswParams, fabric: MemoryFabric
) -> None:
    config = BuildConfig(P=2, hnsw=small_params, policy=GapPolicy(0.0, 0.5), I_max=5)
    built = build_index(blobs, config, fabric)
    # exhaustive sub search so results depend only on the visible node set
    reader = QueryEngine(fabric, built.meta.copy(), built.meta_index, ExecutionParams(e_sub=blobs.count))
    batch = QueryBatch(blobs.data[:4], k=5, R=2)
    before = reader.search_batch_sequential(batch)

    vectors = _near(blobs, 8)
    results = InsertCoordinator(fabric, built.meta, built.meta_index).insert_batch(vectors)
    assert {r.status for r in results} == {InsertStatus.COMMITTED}

    stale = reader.search_batch_sequential(batch)
    assert stale.degraded == [False] * 4
    assert stale.results == before.results
    reader.refresh_meta()
    fresh = reader.search_batch_sequential(QueryBatch(vectors[:1], k=1, R=2))
    assert fresh.results[0][0][0] == results[0].label


def test_metadata_writes_share_the_last_doorbell(built: BuiltIndex, fabric: MemoryFabric, blobs: VectorStore) -> None:
    writer = InsertCoordinator(fabric, built.meta, built.meta_index)
    writer.insert_batch(_near(blobs, 1))
    (update,) = writer.last_commits
    assert len(update.ops) > 3
    last = chunked(update.ops, 3, full_tail=True)[-1]
    assert last[-len(update.meta_writes) :] == update.meta_writes
