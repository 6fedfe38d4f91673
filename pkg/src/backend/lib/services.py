import logging
from pathlib import Path
from typing import Any

import anyio
import numpy as np
import numpy.typing as npt

from src.backend.lib.builder import BuildConfig, BuiltIndex, load_build
from src.backend.lib.fabric import MemoryFabric
from src.backend.lib.hnsw import HnswParams
from src.backend.lib.image import GapPolicy
from src.backend.lib.insert import InsertCoordinator, InsertResult
from src.backend.lib.layout import GlobalMeta, inspect
from src.backend.lib.query import (
    BatchResult,
    ExecutionParams,
    MetaIndex,
    QueryBatch,
    QueryEngine,
    default_cache_capacity,
)
from src.backend.lib.rebuild import EpochManager
from src.backend.models import EpochPhase
from src.backend.schema.layout import Stats
from src.backend.settings import Settings

logger = logging.getLogger(__name__)

API_WORKER = "api"


class DhnswService:
    """One search worker, the writer and the epoch manager over a single fabric."""

    def __init__(
        self,
        fabric: MemoryFabric,
        meta: GlobalMeta,
        meta_index: MetaIndex,
        config: BuildConfig,
        settings: Settings,
    ) -> None:
        engine = settings.engine
        self.fabric = fabric
        self.settings = settings
        self.engine = QueryEngine(
            fabric,
            meta,
            meta_index,
            ExecutionParams(
                e_sub=settings.hnsw.e_search,
                search_workers=engine.search_workers,
                distance_op_cost=engine.distance_op_cost,
                deser_byte_cost=engine.deser_byte_cost,
            ),
            default_cache_capacity(meta.P, engine.cache_ratio),
            engine.slo_wait_ms * 1e-3,
            API_WORKER,
        )
        coordinator = InsertCoordinator(
            fabric, meta, meta_index, default_cache_capacity(meta.P, engine.cache_ratio), engine.coalesce_gap
        )
        self.manager = EpochManager(fabric, coordinator, config, engine.lsh_bits, engine.probe_radius)
        self.manager.register_worker(self.engine)
        self._lock = anyio.Lock()

    @classmethod
    def from_built(cls, built: BuiltIndex, fabric: MemoryFabric, settings: Settings) -> "DhnswService":
        return cls(fabric, built.meta, built.meta_index, built.config, settings)

    @classmethod
    def load(cls, directory: str | Path, settings: Settings) -> "DhnswService":
        """Serve a build saved by ``dhnsw build``."""
        fabric = MemoryFabric.from_settings(settings.fabric)
        meta, meta_index, manifest = load_build(fabric, directory)
        config = BuildConfig(
            P=manifest.P,
            hnsw=HnswParams(
                M=manifest.M,
                e_build=manifest.e_build,
                e_search=settings.hnsw.e_search,
                rng_seed=manifest.rng_seed,
                heuristic=settings.hnsw.heuristic,
            ),
            e_meta=manifest.e_meta,
            policy=GapPolicy(settings.layout.internal_gap_fraction, settings.layout.overflow_fraction),
            rng_seed=manifest.rng_seed,
            fragmented=meta.fragmented,
        )
        return cls(fabric, meta, meta_index, config, settings)

    async def search(self, queries: npt.ArrayLike, k: int, R: int) -> BatchResult:
        async with self._lock:
            return await self.manager.search(self.engine, QueryBatch(np.asarray(queries, dtype=np.float32), k, R))

    async def insert(self, vectors: npt.ArrayLike) -> list[InsertResult]:
        async with self._lock:
            results = self.manager.insert(vectors)
            self.manager.check_trigger()
            return results

    async def rebuild(self) -> EpochPhase:
        """Run a pending or forced rebuild to completion, including the switch."""
        async with self._lock:
            if self.manager.phase == EpochPhase.STEADY:
                self.manager.begin_rebuild()
            if self.manager.phase == EpochPhase.REBUILDING:
                await anyio.to_thread.run_sync(self.manager.run_rebuild)
            if self.manager.phase == EpochPhase.SWITCHING:
                self.manager.acknowledge_epoch(API_WORKER)
            logger.info("Rebuild finished; serving epoch %d", self.manager.state.epoch)
            return self.manager.phase

    def layout(self) -> dict[str, Any]:
        return inspect(self.manager.coordinator.meta)

    def stats(self) -> Stats:
        fabric = self.fabric.stats
        totals = self.manager.coordinator.totals
        return Stats(
            phase=self.manager.phase,
            epoch=self.manager.state.epoch,
            rebuilds=self.manager.rebuilds,
            buffered=len(self.manager.buffer) if self.manager.buffer is not None else 0,
            committed=totals.committed,
            commit_bytes=totals.bytes_written,
            cache_resident=len(self.engine.cache),
            reads=fabric.reads,
            writes=fabric.writes,
            doorbell_batches=fabric.doorbell_batches,
            round_trips=fabric.round_trips,
            bytes_moved=fabric.bytes_moved,
            simulated_time_charged=fabric.simulated_time_charged,
        )
