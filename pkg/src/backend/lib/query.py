"""Routing, batch planning and the three-stage fetch / deserialize / search executor.

Stage costs are simulated: fetches are charged by the fabric cost model,
deserialization per fetched byte and search per scalar distance operation.
The pipelined makespan is computed from those per-item durations, so it does
not depend on how the host happens to interleave the stage tasks.
"""

import heapq
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import anyio
import numpy as np
import numpy.typing as npt
from anyio.streams.memory import MemoryObjectReceiveStream, MemoryObjectSendStream

from src.backend.lib.cache import SubCache
from src.backend.lib.exceptions import ContractViolationError, FabricError, ParseError
from src.backend.lib.fabric import Fabric
from src.backend.lib.hnsw import HnswIndex, HnswParams, SearchStats, build
from src.backend.lib.image import deserialize
from src.backend.lib.layout import GlobalMeta, SubSnapshot, fetch_many, fetch_sub, plan_fetch, read_meta
from src.backend.lib.vectors import Neighbor, VectorStore, rank
from src.backend.models import ArrayKind, Metric

logger = logging.getLogger(__name__)

META_LEVEL_CAP = 2


@dataclass
class MetaIndex:
    """Small graph over the partition centroids that routes queries and inserts."""

    index: HnswIndex
    e_meta: int = 32

    @classmethod
    def build(
        cls,
        centroids: npt.ArrayLike,
        metric: Metric = Metric.EUCLIDEAN,
        M: int = 16,
        e_build: int = 100,
        e_meta: int = 32,
        rng_seed: int = 0,
    ) -> "MetaIndex":
        params = HnswParams(M=M, e_build=max(e_build, M), e_search=e_meta, rng_seed=rng_seed, level_cap=META_LEVEL_CAP)
        return cls(build(VectorStore(np.asarray(centroids, dtype=np.float32), metric), params), e_meta)

    @property
    def P(self) -> int:
        return self.index.ntotal

    @property
    def dim(self) -> int:
        return self.index.dim

    def route(self, q: npt.ArrayLike, R: int, stats: SearchStats | None = None) -> list[int]:
        """Ids of the ``R`` partitions whose centroids are nearest to ``q``."""
        if not 1 <= R <= self.P:
            raise ContractViolationError(f"R={R} must be within [1, {self.P}]")
        return [node for node, _ in self.index.search(q, R, self.e_meta, stats)]


@dataclass
class QueryBatch:
    queries: npt.NDArray[np.float32]
    k: int = 10
    R: int = 1
    # seconds, ascending; enables SLO truncation
    arrival_times: npt.NDArray[np.float64] | None = None

    def __post_init__(self):
        self.queries = np.atleast_2d(np.asarray(self.queries, dtype=np.float32))
        if self.k < 1:
            raise ContractViolationError("k must be positive")

    def __len__(self) -> int:
        return int(self.queries.shape[0])


@dataclass
class BatchPlan:
    routes: list[list[int]]
    fetch_list: list[int]
    ready_list: list[int]
    demand: dict[int, list[int]]
    served: list[int]
    deferred: list[int] = field(default_factory=list)
    meta_distance_ops: int = 0


@dataclass(frozen=True)
class ExecutionParams:
    e_sub: int = 64
    search_workers: int = 1
    queue_bound: int = 2
    meta_threads: int = 1
    distance_op_cost: float = 1e-9
    deser_byte_cost: float = 1e-10
    # fetch several subs under one doorbell
    doorbell_mode: bool = False
    doorbell_subs: int = 4


@dataclass
class ExecutionMetrics:
    batch_id: int = 0
    worker: str = ""
    B: int = 0
    fetched: int = 0
    cache_hits: int = 0
    t_meta: float = 0.0
    t_net: float = 0.0
    t_deser: float = 0.0
    t_comp: float = 0.0
    t_pipeline: float = 0.0
    t_sequential: float = 0.0
    bytes_fetched: int = 0
    round_trips: int = 0
    degraded: int = 0
    recall: float | None = None

    @property
    def latency(self) -> float:
        return self.t_meta + self.t_pipeline


@dataclass
class LoadedSub:
    sub_id: int
    index: HnswIndex
    nbytes: int
    # array lengths the metadata recorded when this copy was fetched
    lengths: tuple[int, ...] = ()


@dataclass
class BatchResult:
    results: list[list[Neighbor]]
    degraded: list[bool]
    served: list[int]
    deferred: list[int]
    fetched: list[int]
    metrics: ExecutionMetrics


def merge_topk(partials: list[list[Neighbor]], k: int) -> list[Neighbor]:
    """Global ``k`` best over several ranked lists; duplicate ids keep their smallest distance."""
    best: dict[int, float] = {}
    for partial in partials:
        for node, d in partial:
            if node not in best or d < best[node]:
                best[node] = d
    if not best:
        return []
    return rank(list(best), list(best.values()), k)


def plan_batch(
    batch: QueryBatch,
    meta_index: MetaIndex,
    cache: SubCache,
    slo_wait: float | None = None,
) -> BatchPlan:
    """Route every admitted query once and split the deduplicated demand into fetch and ready lists.

    Fetches are ordered by descending demand, ties by ascending sub id.
    """
    if len(batch) == 0:
        raise ContractViolationError("cannot plan an empty batch")
    served = list(range(len(batch)))
    deferred: list[int] = []
    if batch.arrival_times is not None and slo_wait is not None:
        arrivals = np.asarray(batch.arrival_times, dtype=np.float64)
        late = np.flatnonzero(arrivals - arrivals[0] > slo_wait)
        if late.size:
            cut = int(late[0])
            served, deferred = served[:cut], served[cut:]

    stats = SearchStats()
    routes: list[list[int]] = [[] for _ in range(len(batch))]
    demand: dict[int, list[int]] = defaultdict(list)
    for i in served:
        routes[i] = meta_index.route(batch.queries[i], batch.R, stats)
        for sub in routes[i]:
            demand[sub].append(i)
    order = sorted(demand, key=lambda s: (-len(demand[s]), s))
    return BatchPlan(
        routes=routes,
        fetch_list=[s for s in order if s not in cache],
        ready_list=[s for s in order if s in cache],
        demand=dict(demand),
        served=served,
        deferred=deferred,
        meta_distance_ops=stats.distance_computations,
    )


class BatchQueue:
    """Cuts a query stream into batches in arrival order.

    Queries a batch deferred past its SLO wait open the next batch, ahead of
    fresh arrivals.
    """

    def __init__(
        self,
        queries: npt.ArrayLike,
        batch_size: int,
        arrival_times: npt.ArrayLike | None = None,
        k: int = 10,
        R: int = 1,
    ) -> None:
        if batch_size < 1:
            raise ContractViolationError("batch size must be positive")
        self.queries = np.atleast_2d(np.asarray(queries, dtype=np.float32))
        n = self.queries.shape[0]
        self.arrival_times = None if arrival_times is None else np.asarray(arrival_times, dtype=np.float64)
        if self.arrival_times is not None and self.arrival_times.shape != (n,):
            raise ContractViolationError(f"{self.arrival_times.shape[0]} arrival times for {n} queries")
        self.batch_size = batch_size
        self.k = k
        self.R = R
        self.carried: list[int] = []
        self._next = 0
        self._open: list[int] | None = None

    @property
    def pending(self) -> bool:
        return bool(self.carried) or self._next < self.queries.shape[0]

    def next_batch(self) -> tuple[list[int], QueryBatch]:
        """Stream ids of the next batch and the batch itself."""
        if self._open is not None:
            raise ContractViolationError("settle the open batch before taking the next one")
        if not self.pending:
            raise ContractViolationError("the query stream is exhausted")
        take = min(self.batch_size - len(self.carried), self.queries.shape[0] - self._next)
        ids = [*self.carried, *range(self._next, self._next + max(0, take))]
        self._next += max(0, take)
        self.carried = []
        self._open = ids
        arrivals = None if self.arrival_times is None else self.arrival_times[ids]
        return ids, QueryBatch(self.queries[ids], k=self.k, R=self.R, arrival_times=arrivals)

    def settle(self, result: BatchResult) -> list[int]:
        """Close the open batch; returns the stream ids it served."""
        if self._open is None:
            raise ContractViolationError("no batch is open")
        ids, self._open = self._open, None
        self.carried = [ids[i] for i in result.deferred]
        return [ids[i] for i in result.served]


def arrival_times(n: int, rate: float, seed: int = 0) -> npt.NDArray[np.float64] | None:
    """Poisson arrivals at ``rate`` queries per second; ``None`` when every query arrives at once."""
    if rate <= 0:
        return None
    gaps = np.random.default_rng(seed).exponential(1.0 / rate, size=n)
    return np.cumsum(gaps) - gaps[0] if n else gaps


def pipeline_makespan(
    fetch_done: list[float],
    deser: list[float],
    fetched_search: list[float],
    cached_search: list[float],
    workers: int = 1,
) -> float:
    """Makespan of the three-stage pipeline from per-item stage durations.

    ``fetch_done[i]`` is when fetched item ``i`` arrives; one deserializer takes
    items in arrival order; ``workers`` searchers take ready items earliest first,
    cached items being ready at time zero.
    """
    clock = 0.0
    ready = []
    for done, d in zip(fetch_done, deser, strict=True):
        clock = max(clock, done) + d
        ready.append(clock)
    jobs = sorted(
        [(0.0, i, s) for i, s in enumerate(cached_search)]
        + [(r, len(cached_search) + i, s) for i, (r, s) in enumerate(zip(ready, fetched_search, strict=True))]
    )
    free = [0.0] * max(1, workers)
    makespan = max([*fetch_done, *ready], default=0.0)
    for ready_at, _, duration in jobs:
        start = max(heapq.heappop(free), ready_at)
        heapq.heappush(free, start + duration)
        makespan = max(makespan, start + duration)
    return makespan


def _lengths(meta: GlobalMeta, sub_id: int) -> tuple[int, ...]:
    return tuple(meta.subs[sub_id].slot(kind).length for kind in ArrayKind)


def load_snapshot(snapshot: SubSnapshot, meta: GlobalMeta) -> LoadedSub:
    """Splice and deserialize a fetched sub."""
    index = deserialize(snapshot.image())
    return LoadedSub(snapshot.sub_id, index, snapshot.nbytes, _lengths(meta, snapshot.sub_id))


def _search_sub(
    loaded: LoadedSub, queries: np.ndarray, demand: list[int], k: int, e_sub: int
) -> tuple[dict[int, list[Neighbor]], int]:
    stats = SearchStats()
    labels = loaded.index.labels
    out = {}
    for qi in demand:
        found = loaded.index.search(queries[qi], k, e_sub, stats)
        out[qi] = [(int(labels[node]), d) for node, d in found]
    return out, stats.distance_computations


class QueryEngine:
    """One search worker: its own cache and metadata view over a shared fabric."""

    def __init__(
        self,
        fabric: Fabric,
        meta: GlobalMeta,
        meta_index: MetaIndex,
        params: ExecutionParams | None = None,
        cache_capacity: int = 0,
        slo_wait: float | None = None,
        name: str = "worker-0",
    ) -> None:
        self.fabric = fabric
        self.meta = meta
        self.meta_index = meta_index
        self.params = params or ExecutionParams()
        self.cache: SubCache[LoadedSub] = SubCache(cache_capacity)
        self.slo_wait = slo_wait
        self.name = name
        self.batches = 0

    @property
    def epoch(self) -> int:
        return self.meta.epoch

    def plan(self, batch: QueryBatch) -> BatchPlan:
        return plan_batch(batch, self.meta_index, self.cache, self.slo_wait)

    def refresh_meta(self) -> list[int]:
        """Re-read the remote metadata; cached subs whose arrays changed are dropped."""
        self.meta = read_meta(self.fabric, self.meta.region)
        stale = []
        for sub_id in self.cache.resident():
            loaded = self.cache.peek(sub_id)
            if loaded is not None and loaded.lengths != _lengths(self.meta, sub_id):
                stale.append(sub_id)
        for sub_id in stale:
            self.cache.invalidate(sub_id)
        if stale:
            logger.debug("%s invalidated %d stale cached subs", self.name, len(stale))
        return stale

    def reset_epoch(self, meta: GlobalMeta, meta_index: MetaIndex) -> None:
        self.meta = meta
        self.meta_index = meta_index
        self.cache.clear()
        logger.info("%s switched to epoch %d", self.name, meta.epoch)

    def _fetch_groups(self, fetch_list: list[int]) -> list[list[int]]:
        if not self.params.doorbell_mode or self.meta.fragmented:
            return [[s] for s in fetch_list]
        # each sub needs up to two ranges
        width = max(1, min(self.params.doorbell_subs, self.fabric.max_batch // 2))
        return [fetch_list[i : i + width] for i in range(0, len(fetch_list), width)]

    def _fetch(self, group: list[int]) -> tuple[list[SubSnapshot], float]:
        if len(group) == 1:
            snapshot = fetch_sub(self.fabric, self.meta, group[0])
            return [snapshot], snapshot.cost
        return fetch_many(self.fabric, self.meta, group)

    def _fetch_with_retry(self, group: list[int]) -> tuple[list[SubSnapshot], float]:
        try:
            return self._fetch(group)
        except FabricError as e:
            logger.warning("%s: fetch of subs %s failed (%s), retrying once", self.name, group, e)
            snapshots, cost = self._fetch(group)
            return snapshots, cost + self.fabric.cost.rtt

    def _finish(
        self,
        batch: QueryBatch,
        plan: BatchPlan,
        partials: dict[int, list[list[Neighbor]]],
        failed: set[int],
        metrics: ExecutionMetrics,
        fetched: list[int],
    ) -> BatchResult:
        results = [merge_topk(partials.get(i, []), batch.k) for i in plan.served]
        degraded = [any(s in failed for s in plan.routes[i]) for i in plan.served]
        metrics.degraded = sum(degraded)
        self.batches += 1
        if metrics.degraded:
            logger.warning("%s: %d queries returned degraded results", self.name, metrics.degraded)
        return BatchResult(results, degraded, plan.served, plan.deferred, fetched, metrics)

    def _base_metrics(self, batch: QueryBatch, plan: BatchPlan) -> ExecutionMetrics:
        dim = self.meta_index.dim
        return ExecutionMetrics(
            batch_id=self.batches,
            worker=self.name,
            B=len(plan.served),
            t_meta=plan.meta_distance_ops * dim * self.params.distance_op_cost / max(1, self.params.meta_threads),
        )

    def _take_ready(self, plan: BatchPlan) -> tuple[list[LoadedSub], list[int]]:
        ready, fetch_list = [], list(plan.fetch_list)
        for sub in plan.ready_list:
            loaded = self.cache.get(sub)
            if loaded is None:
                fetch_list.append(sub)
            else:
                ready.append(loaded)
        return ready, fetch_list

    async def search_batch(self, batch: QueryBatch, plan: BatchPlan | None = None) -> BatchResult:
        """Pipelined execution of one batch."""
        plan = plan or self.plan(batch)
        params = self.params
        dim = self.meta_index.dim
        metrics = self._base_metrics(batch, plan)
        ready, fetch_list = self._take_ready(plan)
        metrics.cache_hits = len(ready)

        partials: dict[int, list[list[Neighbor]]] = defaultdict(list)
        failed: set[int] = set()
        fetched: list[int] = []
        fetch_done: list[float] = []
        deser_times: list[float] = []
        search_time: dict[int, float] = {}
        bound = max(1, params.queue_bound)

        fetch_tx, fetch_rx = anyio.create_memory_object_stream[tuple[SubSnapshot, float]](bound)
        ready_tx, ready_rx = anyio.create_memory_object_stream[LoadedSub](bound)

        async def fetcher(tx: MemoryObjectSendStream[tuple[SubSnapshot, float]]) -> None:
            clock = 0.0
            async with tx:
                for group in self._fetch_groups(fetch_list):
                    try:
                        snapshots, cost = await anyio.to_thread.run_sync(self._fetch_with_retry, group)
                    except FabricError as e:
                        logger.warning("%s: giving up on subs %s: %s", self.name, group, e)
                        failed.update(group)
                        clock += self.fabric.cost.rtt
                        continue
                    clock += cost
                    for snapshot in snapshots:
                        metrics.round_trips += snapshot.round_trips
                        await tx.send((snapshot, clock))
                    metrics.t_net += cost

        async def deserializer(
            rx: MemoryObjectReceiveStream[tuple[SubSnapshot, float]],
            tx: MemoryObjectSendStream[LoadedSub],
        ) -> None:
            async with rx, tx:
                async for snapshot, done in rx:
                    try:
                        loaded = await anyio.to_thread.run_sync(load_snapshot, snapshot, self.meta)
                    except ParseError as e:
                        logger.warning("%s: sub %d did not reassemble: %s", self.name, snapshot.sub_id, e)
                        failed.add(snapshot.sub_id)
                        continue
                    fetched.append(snapshot.sub_id)
                    fetch_done.append(done)
                    deser_times.append(snapshot.nbytes * params.deser_byte_cost)
                    metrics.bytes_fetched += snapshot.nbytes
                    self.cache.put(snapshot.sub_id, loaded)
                    await tx.send(loaded)

        async def feeder(tx: MemoryObjectSendStream[LoadedSub]) -> None:
            async with tx:
                for loaded in ready:
                    await tx.send(loaded)

        async def searcher(rx: MemoryObjectReceiveStream[LoadedSub]) -> None:
            async with rx:
                async for loaded in rx:
                    demand = plan.demand.get(loaded.sub_id, [])
                    found, ops = await anyio.to_thread.run_sync(
                        _search_sub, loaded, batch.queries, demand, batch.k, params.e_sub
                    )
                    for qi, hits in found.items():
                        partials[qi].append(hits)
                    search_time[loaded.sub_id] = ops * dim * params.distance_op_cost

        async with anyio.create_task_group() as tg:
            tg.start_soon(fetcher, fetch_tx)
            tg.start_soon(deserializer, fetch_rx, ready_tx.clone())
            tg.start_soon(feeder, ready_tx.clone())
            ready_tx.close()
            for _ in range(max(1, params.search_workers)):
                tg.start_soon(searcher, ready_rx.clone())
            ready_rx.close()

        fetched_search = [search_time[s] for s in fetched]
        cached_search = [search_time[loaded.sub_id] for loaded in ready]
        metrics.fetched = len(fetched)
        metrics.t_deser = sum(deser_times)
        metrics.t_comp = sum(fetched_search) + sum(cached_search)
        metrics.t_pipeline = pipeline_makespan(
            fetch_done, deser_times, fetched_search, cached_search, params.search_workers
        )
        metrics.t_sequential = metrics.t_net + metrics.t_deser + metrics.t_comp
        return self._finish(batch, plan, partials, failed, metrics, fetched)

    def search_batch_sequential(self, batch: QueryBatch, plan: BatchPlan | None = None) -> BatchResult:
        """Reference executor: fetch, deserialize and search one sub at a time."""
        plan = plan or self.plan(batch)
        params = self.params
        dim = self.meta_index.dim
        metrics = self._base_metrics(batch, plan)
        ready, fetch_list = self._take_ready(plan)
        metrics.cache_hits = len(ready)
        partials: dict[int, list[list[Neighbor]]] = defaultdict(list)
        failed: set[int] = set()
        fetched: list[int] = []

        def run(loaded: LoadedSub) -> None:
            found, ops = _search_sub(loaded, batch.queries, plan.demand.get(loaded.sub_id, []), batch.k, params.e_sub)
            for qi, hits in found.items():
                partials[qi].append(hits)
            metrics.t_comp += ops * dim * params.distance_op_cost

        for loaded in ready:
            run(loaded)
        for group in self._fetch_groups(fetch_list):
            try:
                snapshots, cost = self._fetch_with_retry(group)
            except FabricError as e:
                logger.warning("%s: giving up on subs %s: %s", self.name, group, e)
                failed.update(group)
                continue
            metrics.t_net += cost
            for snapshot in snapshots:
                metrics.round_trips += snapshot.round_trips
                try:
                    loaded = load_snapshot(snapshot, self.meta)
                except ParseError as e:
                    logger.warning("%s: sub %d did not reassemble: %s", self.name, snapshot.sub_id, e)
                    failed.add(snapshot.sub_id)
                    continue
                fetched.append(snapshot.sub_id)
                metrics.bytes_fetched += snapshot.nbytes
                metrics.t_deser += snapshot.nbytes * params.deser_byte_cost
                self.cache.put(snapshot.sub_id, loaded)
                run(loaded)
        metrics.fetched = len(fetched)
        metrics.t_sequential = metrics.t_net + metrics.t_deser + metrics.t_comp
        metrics.t_pipeline = metrics.t_sequential
        return self._finish(batch, plan, partials, failed, metrics, fetched)


def default_cache_capacity(P: int, ratio: float) -> int:
    """``ceil(ratio * P)`` subs, zero when caching is off."""
    return math.ceil(ratio * P) if ratio > 0 else 0


def fetch_plan_widths(meta: GlobalMeta) -> list[int]:
    """Range count of every sub's current fetch plan."""
    return [len(plan_fetch(meta, s).ranges) for s in range(meta.P)]
