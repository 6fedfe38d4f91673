"""Benchmark workloads behind the ``dhnsw`` command group.

A run is described by one TOML file decoded into :class:`BenchConfig`; fields
left out fall back to the environment settings. Every workload returns rows
(``msgspec.Struct`` instances) that :func:`write_csv` turns into a CSV table.
"""

import csv
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import anyio
import msgspec
import numpy as np

from src.backend.lib.builder import BuildConfig, BuiltIndex, build_index, save_build
from src.backend.lib.exceptions import ContractViolationError
from src.backend.lib.fabric import FabricCostModel, MemoryFabric
from src.backend.lib.hnsw import HnswParams
from src.backend.lib.image import GapPolicy
from src.backend.lib.insert import InsertCoordinator
from src.backend.lib.layout import inspect
from src.backend.lib.partition import partition
from src.backend.lib.perf_model import ModelParams, calibrate, calibrate_build, predict_batch, predict_build
from src.backend.lib.query import (
    BatchQueue,
    BatchResult,
    ExecutionParams,
    QueryBatch,
    QueryEngine,
    arrival_times,
    default_cache_capacity,
)
from src.backend.lib.rebuild import EpochManager
from src.backend.lib.vectors import VectorStore, gaussian_mixture, ground_truth, load_xvecs, recall_at_k
from src.backend.models import ElementKind, EpochPhase, InsertStatus, Metric
from src.backend.settings import Settings, get_settings

logger = logging.getLogger(__name__)


class SyntheticSpec(msgspec.Struct, frozen=True, kw_only=True):
    N: int = 10_000
    d: int = 32
    n_queries: int = 200
    n_inserts: int = 1_000
    # Gaussian components; defaults to 2 * P
    components: int | None = None
    spread: float = 1.0
    separation: float = 4.0
    seed: int = 0


class BenchConfig(msgspec.Struct, kw_only=True):
    """One benchmark run. ``None`` means "take the value from the settings"."""

    # fvecs/bvecs/ivecs inputs; the synthetic corpus is used when ``base`` is unset
    base: str | None = None
    queries: str | None = None
    # insert stream; without it the tail ``insert_holdout`` of ``base`` is held out of the build
    inserts: str | None = None
    insert_holdout: float = 0.1
    ground_truth: str | None = None
    synthetic: SyntheticSpec = SyntheticSpec()
    metric: Metric = Metric.EUCLIDEAN

    P: int = 20
    R: int = 1
    k: int = 10
    M: int | None = None
    e_build: int | None = None
    e_sub: int | None = None
    e_meta: int | None = None
    heuristic: bool | None = None
    partition_iters: int = 20
    seed: int = 0

    internal_gap_fraction: float | None = None
    overflow_fraction: float | None = None
    fragmented: bool = False

    rtt_us: float | None = None
    bandwidth_gbps: float | None = None
    per_op_us: float | None = None
    max_batch: int | None = None

    cache_ratio: float | None = None
    cache_ratios: list[float] = msgspec.field(default_factory=lambda: [0.0, 0.05, 0.10, 0.15, 0.20])
    batch_size: int = 64
    workers: int = 1
    search_workers: int | None = None
    doorbell_mode: bool = False
    slo_wait_ms: float | None = None
    # Poisson query arrivals per second; 0 means the whole stream is waiting at start
    arrival_qps: float = 0.0

    search_pct: float = 80.0
    insert_pct: float = 20.0
    insert_ratios: list[float] = msgspec.field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    # simulated time a rebuild takes once triggered
    rebuild_window_ms: float = 2.0
    max_steps: int = 200
    # steps traced after the switch completes
    settle_steps: int = 5

    output_dir: str = "output"


def load_config(path: str | Path | None) -> BenchConfig:
    if path is None:
        return BenchConfig()
    try:
        return msgspec.toml.decode(Path(path).read_bytes(), type=BenchConfig)
    except msgspec.DecodeError as e:
        raise ContractViolationError(f"invalid bench config {path}: {e}") from e


@dataclass
class Dataset:
    base: VectorStore
    queries: VectorStore
    inserts: VectorStore
    truth: np.ndarray | None


def load_dataset(config: BenchConfig) -> Dataset:
    if config.base is None:
        synth = config.synthetic
        total = synth.N + synth.n_queries + synth.n_inserts
        store, _ = gaussian_mixture(
            total,
            synth.d,
            synth.components or 2 * config.P,
            synth.seed,
            synth.spread,
            synth.separation,
            config.metric,
        )
        base = store.take(np.arange(synth.N))
        queries = store.take(np.arange(synth.N, synth.N + synth.n_queries))
        inserts = store.take(np.arange(synth.N + synth.n_queries, total))
        return Dataset(base, queries, inserts, ground_truth(base, queries, config.k))

    base = load_xvecs(config.base, _kind_of(config.base), config.metric)
    if config.queries is None:
        raise ContractViolationError("a file dataset needs a queries file")
    queries = load_xvecs(config.queries, _kind_of(config.queries), config.metric)
    if config.inserts is not None:
        inserts = load_xvecs(config.inserts, _kind_of(config.inserts), config.metric)
    else:
        if not 0.0 <= config.insert_holdout < 1.0:
            raise ContractViolationError(f"insert_holdout={config.insert_holdout} must be within [0, 1)")
        keep = base.count - math.floor(base.count * config.insert_holdout)
        base, inserts = base.take(np.arange(keep)), base.take(np.arange(keep, base.count))
    truth = None
    if config.ground_truth is not None and inserts.count and config.inserts is None:
        # the file's neighbor ids may point into the held-out rows
        logger.warning("Recomputing ground truth over the %d base vectors kept after the holdout", base.count)
        truth = ground_truth(base, queries, config.k)
    elif config.ground_truth is not None:
        truth = load_xvecs(config.ground_truth, ElementKind.I32)
    else:
        logger.warning("No ground truth configured; recall will be omitted")
    return Dataset(base, queries, inserts, truth)


def _kind_of(path: str) -> ElementKind:
    return ElementKind.U8 if path.endswith(".bvecs") else ElementKind.F32


@dataclass
class Workbench:
    """A built index on its own fabric plus the data and knobs of one run."""

    config: BenchConfig
    settings: Settings
    data: Dataset
    fabric: MemoryFabric
    built: BuiltIndex

    @classmethod
    def create(cls, config: BenchConfig, settings: Settings | None = None, data: Dataset | None = None) -> "Workbench":
        settings = settings or get_settings()
        data = data or load_dataset(config)
        fabric = MemoryFabric(cost_model(config, settings), _pick(config.max_batch, settings.fabric.max_batch))
        built = build_index(data.base, build_config(config, settings), fabric)
        return cls(config, settings, data, fabric, built)

    def execution_params(self) -> ExecutionParams:
        engine = self.settings.engine
        return ExecutionParams(
            e_sub=_pick(self.config.e_sub, self.settings.hnsw.e_search),
            search_workers=_pick(self.config.search_workers, engine.search_workers),
            distance_op_cost=engine.distance_op_cost,
            deser_byte_cost=engine.deser_byte_cost,
            doorbell_mode=self.config.doorbell_mode,
        )

    def cache_ratio(self) -> float:
        return _pick(self.config.cache_ratio, self.settings.engine.cache_ratio)

    def engine(self, name: str = "worker-0", cache_ratio: float | None = None) -> QueryEngine:
        ratio = self.cache_ratio() if cache_ratio is None else cache_ratio
        slo = _pick(self.config.slo_wait_ms, self.settings.engine.slo_wait_ms) * 1e-3
        return QueryEngine(
            self.fabric,
            self.built.meta,
            self.built.meta_index,
            self.execution_params(),
            default_cache_capacity(self.built.meta.P, ratio),
            slo,
            name,
        )

    def coordinator(self) -> InsertCoordinator:
        return InsertCoordinator(
            self.fabric,
            self.built.meta,
            self.built.meta_index,
            default_cache_capacity(self.built.meta.P, self.cache_ratio()),
            self.settings.engine.coalesce_gap,
        )

    def manager(self, engines: list[QueryEngine]) -> EpochManager:
        manager = EpochManager(
            self.fabric,
            self.coordinator(),
            self.built.config,
            self.settings.engine.lsh_bits,
            self.settings.engine.probe_radius,
        )
        for engine in engines:
            manager.register_worker(engine)
        return manager

    def queue(self, batch_size: int | None = None) -> BatchQueue:
        """The query stream in arrival order, cut into batches of ``batch_size``."""
        q = self.data.queries.data
        return BatchQueue(
            q,
            max(1, self.config.batch_size if batch_size is None else batch_size),
            arrival_times(q.shape[0], self.config.arrival_qps, self.config.seed),
            self.config.k,
            self.config.R,
        )


def _pick(value: Any, fallback: Any) -> Any:
    return fallback if value is None else value


def cost_model(config: BenchConfig, settings: Settings) -> FabricCostModel:
    fabric = settings.fabric
    return FabricCostModel(
        rtt=_pick(config.rtt_us, fabric.rtt_us) * 1e-6,
        bandwidth=_pick(config.bandwidth_gbps, fabric.bandwidth_gbps) * 1e9 / 8,
        per_op_overhead=_pick(config.per_op_us, fabric.per_op_us) * 1e-6,
    )


def build_config(config: BenchConfig, settings: Settings) -> BuildConfig:
    hnsw = settings.hnsw
    return BuildConfig(
        P=config.P,
        hnsw=HnswParams(
            M=_pick(config.M, hnsw.M),
            e_build=_pick(config.e_build, hnsw.e_build),
            e_search=_pick(config.e_sub, hnsw.e_search),
            rng_seed=config.seed,
            heuristic=_pick(config.heuristic, hnsw.heuristic),
        ),
        e_meta=_pick(config.e_meta, hnsw.e_meta),
        policy=GapPolicy(
            _pick(config.internal_gap_fraction, settings.layout.internal_gap_fraction),
            _pick(config.overflow_fraction, settings.layout.overflow_fraction),
        ),
        I_max=config.partition_iters,
        rng_seed=config.seed,
        fragmented=config.fragmented,
    )


def write_csv(rows: list[msgspec.Struct], path: str | Path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as f:
        if rows:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].__struct_fields__))
            writer.writeheader()
            writer.writerows(msgspec.structs.asdict(row) for row in rows)
    logger.info("Wrote %d rows to %s", len(rows), out)
    return out


class BuildRow(msgspec.Struct):
    N: int
    d: int
    P: int
    max_partition: int
    cap: int
    size_std: float
    t_partition: float
    t_sub_build: float
    t_meta_build: float
    t_layout: float
    t_total: float
    region_bytes: int


class QueryRow(msgspec.Struct):
    batch: int
    worker: str
    B: int
    R: int
    k: int
    cache_ratio: float
    fetched: int
    cache_hits: int
    round_trips: int
    bytes_fetched: int
    t_meta: float
    t_net: float
    t_deser: float
    t_comp: float
    t_pipeline: float
    t_sequential: float
    latency: float
    degraded: int
    # carried into the next batch
    deferred: int
    recall_at_1: float | None
    recall_at_k: float | None


class QuerySummary(msgspec.Struct):
    cache_ratio: float
    queries: int
    batches: int
    mean_latency: float
    p99_latency: float
    mean_recall_at_1: float | None
    mean_recall_at_k: float | None


class InsertRow(msgspec.Struct):
    inserted: int
    committed: int
    buffered: int
    failed: int
    commits: int
    commit_round_trips: int
    commit_bytes: int
    bytes_per_insert: float
    rebuilds: int
    epoch: int


class MixedRow(msgspec.Struct):
    insert_ratio: float
    batch_size: int
    batches: int
    mean_batch_latency: float
    mean_search_latency: float
    mean_insert_time: float
    rebuilds: int


class TraceRow(msgspec.Struct):
    step: int
    clock: float
    phase: str
    epoch: int
    queries: int
    inserts: int
    batch_latency: float
    throughput: float
    marker: str


class ModelRow(msgspec.Struct):
    kind: str
    N: int
    P: int
    P_fetch: int
    S: float
    predicted: float
    measured: float
    relative_error: float


def cmd_build(config: BenchConfig, settings: Settings | None = None, save: bool = True) -> tuple[Workbench, BuildRow]:
    bench = Workbench.create(config, settings)
    built = bench.built
    sizes = built.partition.sizes
    row = BuildRow(
        N=bench.data.base.count,
        d=bench.data.base.dim,
        P=built.meta.P,
        max_partition=int(sizes.max()),
        cap=math.ceil(bench.data.base.count / built.meta.P),
        size_std=built.partition.normalized_size_std(),
        t_partition=built.timings["partition"],
        t_sub_build=built.timings["sub_build"],
        t_meta_build=built.timings["meta_build"],
        t_layout=built.timings["layout"],
        t_total=built.timings["total"],
        region_bytes=built.meta.region.size,
    )
    if save:
        save_build(built, bench.fabric, Path(config.output_dir) / "index")
    return bench, row


def _recall(results: list[list[tuple[int, float]]], truth: np.ndarray | None, ids: list[int], k: int) -> float | None:
    if truth is None or not ids:
        return None
    found = [[label for label, _ in r] for r in results]
    return recall_at_k(found, truth[ids], min(k, truth.shape[1]))


def _query_row(result: BatchResult, batch_id: int, ids: list[int], bench: Workbench, ratio: float) -> QueryRow:
    m = result.metrics
    return QueryRow(
        batch=batch_id,
        worker=m.worker,
        B=m.B,
        R=bench.config.R,
        k=bench.config.k,
        cache_ratio=ratio,
        fetched=m.fetched,
        cache_hits=m.cache_hits,
        round_trips=m.round_trips,
        bytes_fetched=m.bytes_fetched,
        t_meta=m.t_meta,
        t_net=m.t_net,
        t_deser=m.t_deser,
        t_comp=m.t_comp,
        t_pipeline=m.t_pipeline,
        t_sequential=m.t_sequential,
        latency=m.latency,
        degraded=m.degraded,
        deferred=len(result.deferred),
        recall_at_1=_recall(result.results, bench.data.truth, ids, 1),
        recall_at_k=_recall(result.results, bench.data.truth, ids, bench.config.k),
    )


def run_queries(bench: Workbench, engines: list[QueryEngine], manager: EpochManager | None = None) -> list[QueryRow]:
    """Drain the query stream batch by batch, round-robin over ``engines``."""
    rows = []
    queue = bench.queue()
    batch_id = 0
    while queue.pending:
        engine = engines[batch_id % len(engines)]
        _, batch = queue.next_batch()
        if manager is None:
            result = anyio.run(engine.search_batch, batch)
        else:
            result = anyio.run(manager.search, engine, batch)
        ratio = engine.cache.capacity / max(1, bench.built.meta.P)
        rows.append(_query_row(result, batch_id, queue.settle(result), bench, ratio))
        batch_id += 1
    return rows


def summarize_queries(rows: list[QueryRow]) -> list[QuerySummary]:
    """One summary per cache ratio; every served query counts with its batch's latency."""
    by_ratio: dict[float, list[QueryRow]] = {}
    for row in rows:
        by_ratio.setdefault(row.cache_ratio, []).append(row)
    summaries = []
    for ratio, group in by_ratio.items():
        latencies = np.repeat([r.latency for r in group], [r.B for r in group])
        summaries.append(
            QuerySummary(
                cache_ratio=ratio,
                queries=int(latencies.size),
                batches=len(group),
                mean_latency=float(latencies.mean()) if latencies.size else 0.0,
                p99_latency=float(np.percentile(latencies, 99)) if latencies.size else 0.0,
                mean_recall_at_1=_weighted([(r.recall_at_1, r.B) for r in group]),
                mean_recall_at_k=_weighted([(r.recall_at_k, r.B) for r in group]),
            )
        )
    return summaries


def _weighted(pairs: list[tuple[float | None, int]]) -> float | None:
    known = [(value, weight) for value, weight in pairs if value is not None and weight]
    if not known:
        return None
    return float(np.average([v for v, _ in known], weights=[w for _, w in known]))


def cmd_query(config: BenchConfig, settings: Settings | None = None, bench: Workbench | None = None) -> list[QueryRow]:
    bench = bench or Workbench.create(config, settings)
    engines = [bench.engine(f"worker-{w}") for w in range(max(1, config.workers))]
    return run_queries(bench, engines)


def cmd_cache_sweep(config: BenchConfig, settings: Settings | None = None) -> list[QueryRow]:
    """The query workload once per configured cache ratio, each with cold caches."""
    bench = Workbench.create(config, settings)
    rows = []
    for ratio in config.cache_ratios:
        engines = [bench.engine(f"worker-{w}", ratio) for w in range(max(1, config.workers))]
        rows.extend(run_queries(bench, engines))
    return rows


def cmd_insert(config: BenchConfig, settings: Settings | None = None, bench: Workbench | None = None) -> InsertRow:
    bench = bench or Workbench.create(config, settings)
    manager = bench.manager([])
    statuses: dict[InsertStatus, int] = dict.fromkeys(InsertStatus, 0)
    vectors = bench.data.inserts.data
    size = max(1, config.batch_size)
    for start in range(0, vectors.shape[0], size):
        for result in manager.insert(vectors[start : start + size]):
            statuses[result.status] += 1
        if manager.phase == EpochPhase.REBUILDING:
            manager.run_rebuild()
    totals = manager.coordinator.totals
    return InsertRow(
        inserted=int(vectors.shape[0]),
        committed=statuses[InsertStatus.COMMITTED],
        buffered=statuses[InsertStatus.BUFFERED],
        failed=statuses[InsertStatus.FAILED],
        commits=totals.commits,
        commit_round_trips=totals.round_trips,
        commit_bytes=totals.bytes_written,
        bytes_per_insert=totals.bytes_written / max(1, totals.committed),
        rebuilds=manager.rebuilds,
        epoch=manager.state.epoch,
    )


def _inserts(bench: Workbench, step: int, n_insert: int) -> np.ndarray:
    """Insert vectors of one mixed batch, cycling through the insert pool."""
    v = bench.data.inserts.data
    if not n_insert or not v.shape[0]:
        return v[:0]
    return v[(np.arange(n_insert) + step * n_insert) % v.shape[0]]


def _split(bench: Workbench, step: int, insert_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Queries and inserts of one mixed batch; both cycle through their pools."""
    size = max(1, bench.config.batch_size)
    n_insert = round(size * insert_fraction)
    q = bench.data.queries.data
    q_ids = (np.arange(size - n_insert) + step * size) % q.shape[0]
    return q[q_ids], _inserts(bench, step, n_insert)


def _timed_insert(manager: EpochManager, vectors: np.ndarray) -> tuple[list, float]:
    before = manager.fabric.stats.simulated_time_charged
    results = manager.insert(vectors) if len(vectors) else []
    return results, manager.fabric.stats.simulated_time_charged - before


def cmd_mixed(config: BenchConfig, settings: Settings | None = None) -> list[MixedRow]:
    """Batch latency for each insert ratio, each on a freshly built index.

    Every query of the stream is served once; deferred queries open the next
    step's search share.
    """
    settings = settings or get_settings()
    data = load_dataset(config)
    size = max(1, config.batch_size)
    rows = []
    for ratio in config.insert_ratios:
        bench = Workbench.create(config, settings, data)
        engine = bench.engine()
        manager = bench.manager([engine])
        n_insert = min(size, round(size * ratio))
        queue = bench.queue(size - n_insert) if n_insert < size else None
        insert_only = math.ceil(data.queries.count / size)
        search_lat, insert_lat = [], []
        step = 0
        while (queue is not None and queue.pending) or (queue is None and step < insert_only):
            _, spent = _timed_insert(manager, _inserts(bench, step, n_insert))
            insert_lat.append(spent)
            if queue is not None:
                _, batch = queue.next_batch()
                result = anyio.run(manager.search, engine, batch)
                queue.settle(result)
                search_lat.append(result.metrics.latency)
            else:
                search_lat.append(0.0)
            if manager.phase == EpochPhase.REBUILDING:
                manager.run_rebuild()
                manager.acknowledge_epoch(engine.name)
            step += 1
        rows.append(
            MixedRow(
                insert_ratio=ratio,
                batch_size=config.batch_size,
                batches=step,
                mean_batch_latency=float(np.mean(np.add(search_lat, insert_lat))),
                mean_search_latency=float(np.mean(search_lat)),
                mean_insert_time=float(np.mean(insert_lat)),
                rebuilds=manager.rebuilds,
            )
        )
    return rows


def cmd_rebuild_demo(config: BenchConfig, settings: Settings | None = None) -> list[TraceRow]:
    """Search/insert schedule that runs until one rebuild has completed its switch.

    The rebuild finishes once the simulated clock has advanced ``rebuild_window_ms``
    past the trigger; workers acknowledge the new epoch one step apart.
    """
    bench = Workbench.create(config, settings)
    engines = [bench.engine(f"worker-{w}") for w in range(max(1, config.workers))]
    manager = bench.manager(engines)
    insert_fraction = config.insert_pct / max(1e-9, config.search_pct + config.insert_pct)
    window = config.rebuild_window_ms * 1e-3
    clock = 0.0
    triggered_at: float | None = None
    rows: list[TraceRow] = []
    done_at: int | None = None
    for step in range(config.max_steps):
        marker = ""
        queries, vectors = _split(bench, step, insert_fraction)
        phase_before = manager.phase
        _, insert_time = _timed_insert(manager, vectors)
        manager.check_trigger()
        if phase_before == EpochPhase.STEADY and manager.phase == EpochPhase.REBUILDING:
            triggered_at = clock
            marker = "rebuild_start"
        engine = engines[step % len(engines)]
        result = anyio.run(manager.search, engine, QueryBatch(queries, k=config.k, R=config.R))
        latency = result.metrics.latency + insert_time
        clock += latency
        if manager.phase == EpochPhase.REBUILDING and triggered_at is not None and clock - triggered_at >= window:
            manager.run_rebuild()
            marker = "switch_start"
        elif manager.phase == EpochPhase.SWITCHING:
            pending = manager.pending_acks()
            manager.acknowledge_epoch(pending[0])
            if manager.phase == EpochPhase.STEADY:
                marker = "switch_done"
        rows.append(
            TraceRow(
                step=step,
                clock=clock,
                phase=str(manager.phase),
                epoch=manager.state.epoch,
                queries=len(result.served),
                inserts=len(vectors),
                batch_latency=latency,
                throughput=len(result.served) / latency if latency > 0 else 0.0,
                marker=marker,
            )
        )
        if marker == "switch_done":
            done_at = step
        if done_at is not None and step - done_at >= config.settle_steps:
            break
    if not manager.rebuilds:
        logger.warning("No rebuild was triggered within %d steps", config.max_steps)
    return rows


def _measure_batch(bench: Workbench, P_fetch: int) -> tuple[BatchResult, float]:
    """One query routed to ``P_fetch`` subs on a cold cache; returns the result and mean fetched size."""
    engine = bench.engine("model", cache_ratio=0.0)
    batch = QueryBatch(bench.data.queries.data[:1], k=bench.config.k, R=P_fetch)
    result = anyio.run(engine.search_batch, batch)
    sizes = [bench.built.image_sizes[s] for s in result.fetched]
    return result, float(np.mean(sizes)) if sizes else 0.0


def cmd_model(config: BenchConfig, settings: Settings | None = None) -> list[ModelRow]:
    """Predicted against measured times over (sub size, P_fetch) and (N, P) grids.

    Each grid is calibrated on its first point.
    """
    settings = settings or get_settings()
    data = load_dataset(config)
    cost = cost_model(config, settings)
    rows: list[ModelRow] = []

    calibrated: ModelParams | None = None
    for scale in (0.25, 0.5, 1.0):
        n = max(config.P * 4, int(data.base.count * scale))
        scaled = replace(data, base=data.base.take(np.arange(n)))
        bench = Workbench.create(config, settings, scaled)
        for P_fetch in sorted({min(config.P, f) for f in (2, 4, 8)}):
            result, S = _measure_batch(bench, P_fetch)
            m = result.metrics
            params = ModelParams(
                N=n,
                d=data.base.dim,
                P=config.P,
                k=config.k,
                M=bench.built.config.hnsw.M,
                e_sub=bench.execution_params().e_sub,
                e_meta=bench.built.meta_index.e_meta,
                B=1,
                S=S,
                P_fetch=m.fetched,
                W_net=cost.bandwidth,
                pairs=m.fetched + m.cache_hits,
                rtt=cost.rtt + 2 * cost.per_op_overhead,
                distance_op_cost=calibrated.distance_op_cost if calibrated else 1e-9,
                deser_byte_cost=calibrated.deser_byte_cost if calibrated else 1e-10,
            )
            if calibrated is None:
                calibrated = params = calibrate(params, m)
            predicted = predict_batch(params).T_pipeline
            rows.append(_model_row("batch", n, config.P, m.fetched, S, predicted, m.t_pipeline))

    build_params: ModelParams | None = None
    for n_scale in (0.25, 0.5, 1.0):
        for p_scale in (0.5, 1.0, 2.0):
            n = max(8, int(data.base.count * n_scale))
            P = max(2, min(n // 4, int(config.P * p_scale)))
            store = data.base.take(np.arange(n))
            start = time.perf_counter()
            partition(store, P, config.partition_iters, rng_seed=config.seed)
            measured = time.perf_counter() - start
            params = ModelParams(N=n, d=store.dim, P=P, I_max=config.partition_iters)
            if build_params is None:
                build_params = calibrate_build(params, measured)
            params = replace(params, build_op_cost=build_params.build_op_cost)
            rows.append(_model_row("cluster", n, P, 0, 0.0, predict_build(params).T_cluster, measured))
    return rows


def _model_row(kind: str, N: int, P: int, P_fetch: int, S: float, predicted: float, measured: float) -> ModelRow:
    error = abs(predicted - measured) / measured if measured > 0 else 0.0
    return ModelRow(kind, N, P, P_fetch, S, predicted, measured, error)


def cmd_inspect_layout(config: BenchConfig, settings: Settings | None = None) -> dict[str, Any]:
    bench = Workbench.create(config, settings)
    return inspect(bench.built.meta)
