"""Epoch-based shadow rebuild.

When an overflow region fills up the writer stops committing and buffers new
vectors in an LSH-bucketed side buffer that searches consult. The rebuild
re-partitions everything the old epoch holds plus the buffer into a freshly
registered region. Workers move to the new epoch when they acknowledge it and
the old region is released after the last acknowledgment. Vectors buffered
during the switch are then drained into the new epoch by the writer.
"""

import itertools
import logging
import threading
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from src.backend.lib.builder import BuildConfig, build_index, collect_vectors
from src.backend.lib.exceptions import ContractViolationError, EpochPhaseError, UnknownWorkerError
from src.backend.lib.fabric import Fabric, RegionHandle
from src.backend.lib.insert import InsertCoordinator, InsertResult
from src.backend.lib.layout import CHAIN_RECORD_SIZE, RECORD_SIZE, GlobalMeta, read_meta
from src.backend.lib.query import BatchResult, MetaIndex, QueryBatch, QueryEngine, merge_topk
from src.backend.lib.vectors import Neighbor, VectorStore, distances, rank
from src.backend.models import EpochPhase, InsertStatus, Metric

logger = logging.getLogger(__name__)

_TRANSITIONS = {
    EpochPhase.STEADY: EpochPhase.REBUILDING,
    EpochPhase.REBUILDING: EpochPhase.SWITCHING,
    EpochPhase.SWITCHING: EpochPhase.STEADY,
}


def maybe_trigger(meta: GlobalMeta, signaled: bool = False) -> bool:
    """Whether the layout can no longer take a spill record somewhere."""
    if signaled:
        return True
    if meta.fragmented:
        return meta.heap_len > 0 and meta.heap_len - meta.heap_used <= CHAIN_RECORD_SIZE
    return any(g.overflow_len and g.free <= RECORD_SIZE for g in meta.groups)


class LshBuffer:
    """Random-hyperplane buckets of vectors inserted while a rebuild is pending.

    A vector's bucket is the sign pattern of its ``bits`` projections after
    subtracting ``center``. Searches scan the query's bucket and every bucket
    within ``probe_radius`` bit flips of it.
    """

    def __init__(
        self,
        dim: int,
        bits: int = 6,
        probe_radius: int = 1,
        rng_seed: int = 0,
        metric: Metric = Metric.EUCLIDEAN,
        center: npt.ArrayLike | None = None,
    ) -> None:
        if bits < 1 or probe_radius < 0:
            raise ContractViolationError("an LSH buffer needs at least one bit and a non-negative probe radius")
        self.dim = dim
        self.bits = bits
        self.probe_radius = probe_radius
        self.metric = metric
        self.planes = np.random.default_rng(rng_seed).normal(size=(bits, dim))
        self.center = np.zeros(dim) if center is None else np.asarray(center, dtype=np.float64)
        self.buckets: dict[int, list[tuple[int, np.ndarray]]] = defaultdict(list)
        self._count = 0

    def bucket_of(self, v: npt.ArrayLike) -> int:
        signs = self.planes @ (np.asarray(v, dtype=np.float64) - self.center) > 0.0
        return int(np.dot(signs, 1 << np.arange(self.bits)))

    def add(self, label: int, v: npt.ArrayLike) -> int:
        vec = np.asarray(v, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise ContractViolationError(f"buffered vector has shape {vec.shape}, expected ({self.dim},)")
        bucket = self.bucket_of(vec)
        self.buckets[bucket].append((label, vec))
        self._count += 1
        return bucket

    def probe(self, bucket: int) -> list[int]:
        """``bucket`` and every bucket within the probe radius, nearest first."""
        out = [bucket]
        for flips in range(1, min(self.probe_radius, self.bits) + 1):
            for positions in itertools.combinations(range(self.bits), flips):
                mask = sum(1 << p for p in positions)
                out.append(bucket ^ mask)
        return out

    def search(self, q: npt.ArrayLike, k: int, exclude: set[int] | None = None) -> list[Neighbor]:
        entries = [
            (label, vec)
            for bucket in self.probe(self.bucket_of(q))
            for label, vec in self.buckets.get(bucket, [])
            if not exclude or label not in exclude
        ]
        if not entries:
            return []
        matrix = np.stack([vec for _, vec in entries])
        return rank([label for label, _ in entries], distances(q, matrix, self.metric), k)

    def items(self) -> tuple[list[int], npt.NDArray[np.float32]]:
        """Buffered labels and vectors in insertion order."""
        entries = sorted((e for bucket in self.buckets.values() for e in bucket), key=lambda e: e[0])
        if not entries:
            return [], np.zeros((0, self.dim), dtype=np.float32)
        return [label for label, _ in entries], np.stack([vec for _, vec in entries])

    def discard(self, labels: set[int]) -> None:
        for bucket, entries in list(self.buckets.items()):
            kept = [e for e in entries if e[0] not in labels]
            self._count -= len(entries) - len(kept)
            if kept:
                self.buckets[bucket] = kept
            else:
                del self.buckets[bucket]

    def occupancy(self) -> npt.NDArray[np.int64]:
        counts = np.zeros(1 << self.bits, dtype=np.int64)
        for bucket, entries in self.buckets.items():
            counts[bucket] = len(entries)
        return counts

    def __len__(self) -> int:
        return self._count


@dataclass
class EpochState:
    epoch: int
    region: RegionHandle
    phase: EpochPhase = EpochPhase.STEADY
    # previous epoch's region, alive until every worker acknowledged
    retired: RegionHandle | None = None


class EpochManager:
    """Serializes phase transitions and owns the writer and the insert buffer."""

    def __init__(
        self,
        fabric: Fabric,
        coordinator: InsertCoordinator,
        config: BuildConfig,
        lsh_bits: int = 6,
        probe_radius: int = 1,
    ) -> None:
        self.fabric = fabric
        self.coordinator = coordinator
        self.config = config
        self.lsh_bits = lsh_bits
        self.probe_radius = probe_radius
        meta = coordinator.meta
        self.state = EpochState(meta.epoch, meta.region)
        self.buffer: LshBuffer | None = None
        self.next_label = meta.next_label
        self.rebuilds = 0
        self._included: set[int] = set()
        self._workers: dict[str, QueryEngine] = {}
        self._acked: dict[str, int] = {}
        self._lock = threading.RLock()

    @property
    def phase(self) -> EpochPhase:
        return self.state.phase

    @property
    def meta_index(self) -> MetaIndex:
        return self.coordinator.meta_index

    def _advance(self, to: EpochPhase) -> None:
        if _TRANSITIONS[self.state.phase] != to:
            raise EpochPhaseError(f"cannot move from {self.state.phase} to {to}")
        logger.info("Epoch %d: %s -> %s", self.state.epoch, self.state.phase, to)
        self.state.phase = to

    def register_worker(self, engine: QueryEngine) -> None:
        with self._lock:
            self._workers[engine.name] = engine
            self._acked[engine.name] = engine.epoch

    def workers(self) -> list[str]:
        return sorted(self._workers)

    def pending_acks(self) -> list[str]:
        return sorted(name for name, epoch in self._acked.items() if epoch != self.state.epoch)

    def check_trigger(self) -> bool:
        """Start a rebuild when the writer's layout has run out of overflow space."""
        with self._lock:
            if self.phase != EpochPhase.STEADY:
                return False
            if not maybe_trigger(self.coordinator.meta, self.coordinator.rebuild_signaled):
                return False
            self.begin_rebuild()
            return True

    def begin_rebuild(self) -> None:
        with self._lock:
            self._advance(EpochPhase.REBUILDING)
            self.next_label = max(self.next_label, self.coordinator.meta.next_label)
            if self.buffer is None:
                centroids = self.meta_index.index.vectors
                self.buffer = LshBuffer(
                    centroids.dim,
                    self.lsh_bits,
                    self.probe_radius,
                    self.config.rng_seed,
                    centroids.metric,
                    centroids.data.mean(axis=0),
                )

    def buffer_insert(self, v: npt.ArrayLike) -> int:
        """Hold ``v`` in the side buffer under a fresh global id."""
        with self._lock:
            if self.phase == EpochPhase.STEADY or self.buffer is None:
                raise EpochPhaseError("inserts are only buffered while a rebuild is pending")
            label = self.next_label
            self.buffer.add(label, v)
            self.next_label += 1
            return label

    def insert(self, vectors: npt.ArrayLike) -> list[InsertResult]:
        """Commit through the writer in steady state, buffer otherwise.

        Vectors the writer could not place start a rebuild and are buffered.
        """
        vecs = np.atleast_2d(np.asarray(vectors, dtype=np.float32))
        if vecs.size == 0:
            return []
        with self._lock:
            if self.phase == EpochPhase.STEADY:
                results = self.coordinator.insert_batch(vecs)
                rejected = [i for i, r in enumerate(results) if r.status == InsertStatus.REBUILD_REQUIRED]
                if not rejected:
                    return results
                self.begin_rebuild()
                for i in rejected:
                    results[i] = InsertResult(InsertStatus.BUFFERED, self.buffer_insert(vecs[i]), results[i].sub_id)
                return results
            return [InsertResult(InsertStatus.BUFFERED, self.buffer_insert(v)) for v in vecs]

    def search_buffer(self, engine: QueryEngine, batch: QueryBatch, result: BatchResult) -> BatchResult:
        """Fold buffered vectors into an engine's batch result."""
        if self.buffer is None or not len(self.buffer):
            return result
        # a worker already on the new epoch finds the rebuilt vectors there
        exclude = self._included if engine.epoch == self.state.epoch else None
        for pos, qi in enumerate(result.served):
            extra = self.buffer.search(batch.queries[qi], batch.k, exclude)
            if extra:
                result.results[pos] = merge_topk([result.results[pos], extra], batch.k)
        return result

    async def search(self, engine: QueryEngine, batch: QueryBatch) -> BatchResult:
        """Search with ``engine`` after catching its metadata up with the writer's commits."""
        engine.refresh_meta()
        result = await engine.search_batch(batch)
        return self.search_buffer(engine, batch, result)

    def run_rebuild(self) -> EpochState:
        """Build the next epoch from the old epoch's vectors plus the buffer, then start the switch.

        On failure the old epoch stays authoritative and the phase stays ``REBUILDING``.
        """
        with self._lock:
            if self.phase != EpochPhase.REBUILDING:
                raise EpochPhaseError(f"run_rebuild needs a pending rebuild, phase is {self.phase}")
            old = self.coordinator.meta
            store, labels = collect_vectors(self.fabric, old)
            buffered_labels, buffered = self.buffer.items() if self.buffer is not None else ([], None)
            if buffered_labels:
                store = store.concat(VectorStore(buffered, store.metric))
                labels = np.concatenate([labels, np.asarray(buffered_labels, dtype=np.int64)])
            try:
                built = build_index(store, self.config, self.fabric, labels, epoch=old.epoch + 1)
            except Exception:
                logger.exception("Rebuild of epoch %d failed; epoch %d stays authoritative", old.epoch + 1, old.epoch)
                raise
            self._included = set(buffered_labels)
            self.coordinator.reset_epoch(built.meta, built.meta_index)
            self._advance(EpochPhase.SWITCHING)
            self.state = EpochState(built.meta.epoch, built.meta.region, EpochPhase.SWITCHING, retired=old.region)
            self.rebuilds += 1
            logger.info(
                "Epoch %d built on region %d with %d vectors (%d from the buffer)",
                built.meta.epoch,
                built.meta.region.region_id,
                store.count,
                len(buffered_labels),
            )
            if not self.pending_acks():
                self._finish_switch()
            return self.state

    def acknowledge_epoch(self, worker: str) -> None:
        """Move ``worker`` onto the current epoch; the last acknowledgment completes the switch."""
        with self._lock:
            engine = self._workers.get(worker)
            if engine is None:
                raise UnknownWorkerError(f"worker {worker!r} never registered")
            if self._acked[worker] == self.state.epoch:
                return
            if self.phase != EpochPhase.SWITCHING:
                raise EpochPhaseError(f"nothing to acknowledge in phase {self.phase}")
            engine.reset_epoch(read_meta(self.fabric, self.state.region), self.meta_index)
            self._acked[worker] = self.state.epoch
            if not self.pending_acks():
                self._finish_switch()

    def _finish_switch(self) -> None:
        if self.state.retired is not None:
            self.fabric.free_region(self.state.retired)
            self.state.retired = None
        self._advance(EpochPhase.STEADY)
        if self.buffer is None:
            return
        self.buffer.discard(self._included)
        self._included = set()
        labels, vectors = self.buffer.items()
        if not labels:
            self.buffer = None
            return
        # vectors that arrived during the switch
        results = self.coordinator.insert_batch(vectors, labels)
        placed = {labels[i] for i, r in enumerate(results) if r.status == InsertStatus.COMMITTED}
        self.buffer.discard(placed)
        logger.info("Drained %d buffered vectors into epoch %d", len(placed), self.state.epoch)
        if len(self.buffer):
            self.begin_rebuild()
        else:
            self.buffer = None
