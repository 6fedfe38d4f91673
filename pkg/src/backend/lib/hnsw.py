"""Hierarchical navigable small world graph over flat arrays.

The graph lives in four arrays, the same ones the remote layout serializes:

* ``levels[i]``   highest layer of node ``i`` (int32)
* ``offsets[i]``  start of node ``i``'s neighbor slots; ``offsets[ntotal]`` closes the last node (int64)
* ``neighbors``   per node ``2M`` layer-0 slots followed by ``M`` slots per upper layer, ``-1`` padded (int32)
* ``vectors``     the stored vectors

plus ``labels``, the global id of every node (int64).
"""

import heapq
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from src.backend.lib.exceptions import ContractViolationError
from src.backend.lib.vectors import Neighbor, VectorStore, distances, rank
from src.backend.models import Metric

logger = logging.getLogger(__name__)

_Scored = tuple[float, int]


@dataclass(frozen=True)
class HnswParams:
    M: int = 16
    e_build: int = 100
    e_search: int = 64
    level_lambda: float | None = None
    rng_seed: int = 0
    heuristic: bool = False
    level_cap: int | None = None

    def __post_init__(self):
        if self.M < 2:
            raise ContractViolationError("M must be at least 2")
        if self.e_build < self.M:
            raise ContractViolationError("e_build must be at least M")
        if self.e_search < 1:
            raise ContractViolationError("e_search must be positive")
        if self.level_lambda is None:
            object.__setattr__(self, "level_lambda", 1.0 / math.log(self.M))
        if self.level_lambda <= 0:
            raise ContractViolationError("level_lambda must be positive")
        if self.level_cap is not None and self.level_cap < 0:
            raise ContractViolationError("level_cap must be non-negative")

    def slots(self, level: int) -> int:
        """Neighbor slots reserved for a node whose top layer is ``level``."""
        return 2 * self.M + level * self.M

    def capacity(self, layer: int) -> int:
        return 2 * self.M if layer == 0 else self.M

    def sample_level(self, node_id: int) -> int:
        """``floor(-ln(U) * level_lambda)`` drawn from a stream keyed by (seed, node id)."""
        u = np.random.default_rng([self.rng_seed, node_id]).random()
        level = int(math.floor(-math.log(1.0 - u) * self.level_lambda))
        if self.level_cap is not None:
            level = min(level, self.level_cap)
        return level


@dataclass
class SearchStats:
    """Counts distance evaluations; the query engine charges simulated compute time from it."""

    distance_computations: int = 0
    searches: int = 0


@dataclass
class HnswIndex:
    params: HnswParams
    dim: int
    metric: Metric
    _levels: npt.NDArray[np.int32]
    _offsets: npt.NDArray[np.int64]
    _neighbors: npt.NDArray[np.int32]
    _vectors: npt.NDArray[np.float32]
    _labels: npt.NDArray[np.int64]
    _n: int
    entry_point: int = -1
    max_level: int = -1
    # set while the arrays alias a borrowed buffer (deserialized images); mutation copies first
    _borrowed: bool = field(default=False, repr=False)

    @classmethod
    def from_arrays(
        cls,
        params: HnswParams,
        metric: Metric,
        levels: np.ndarray,
        offsets: np.ndarray,
        neighbors: np.ndarray,
        vectors: np.ndarray,
        labels: np.ndarray,
        entry_point: int,
        max_level: int,
        borrowed: bool = False,
    ) -> "HnswIndex":
        return cls(
            params=params,
            dim=int(vectors.shape[1]),
            metric=Metric(metric),
            _levels=levels,
            _offsets=offsets,
            _neighbors=neighbors,
            _vectors=vectors,
            _labels=labels,
            _n=int(levels.shape[0]),
            entry_point=entry_point,
            max_level=max_level,
            _borrowed=borrowed,
        )

    @property
    def ntotal(self) -> int:
        return self._n

    @property
    def levels(self) -> npt.NDArray[np.int32]:
        return self._levels[: self._n]

    @property
    def offsets(self) -> npt.NDArray[np.int64]:
        return self._offsets[: self._n + 1]

    @property
    def neighbors(self) -> npt.NDArray[np.int32]:
        return self._neighbors[: int(self._offsets[self._n])]

    @property
    def labels(self) -> npt.NDArray[np.int64]:
        return self._labels[: self._n]

    @property
    def vectors(self) -> VectorStore:
        return VectorStore(self._vectors[: self._n], self.metric)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HnswIndex):
            return NotImplemented
        return (
            self.params == other.params
            and self.metric == other.metric
            and self.dim == other.dim
            and self.ntotal == other.ntotal
            and self.entry_point == other.entry_point
            and self.max_level == other.max_level
            and np.array_equal(self.levels, other.levels)
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.neighbors, other.neighbors)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self._vectors[: self._n], other._vectors[: other._n])
        )

    __hash__ = None  # type: ignore[assignment]

    def copy(self) -> "HnswIndex":
        return HnswIndex.from_arrays(
            self.params,
            self.metric,
            self.levels.copy(),
            self.offsets.copy(),
            self.neighbors.copy(),
            self._vectors[: self._n].copy(),
            self.labels.copy(),
            self.entry_point,
            self.max_level,
        )

    def layer_neighbors(self, node: int, layer: int) -> npt.NDArray[np.int32]:
        """Raw slot view (``-1`` padded) of ``node``'s adjacency at ``layer``."""
        start = int(self._offsets[node])
        if layer > 0:
            start += 2 * self.params.M + (layer - 1) * self.params.M
        return self._neighbors[start : start + self.params.capacity(layer)]

    def _live_neighbors(self, node: int, layer: int) -> npt.NDArray[np.int32]:
        slots = self.layer_neighbors(node, layer)
        # ids at or beyond ntotal belong to a commit that is not visible yet
        return slots[(slots >= 0) & (slots < self._n)]

    def _distances_to(self, q: np.ndarray, ids: npt.ArrayLike, stats: SearchStats | None) -> list[float]:
        rows = self._vectors[np.asarray(ids, dtype=np.int64)]
        if stats is not None:
            stats.distance_computations += len(rows)
        return distances(q, rows, self.metric).tolist()

    def _search_layer(
        self,
        q: np.ndarray,
        entries: list[_Scored],
        ef: int,
        layer: int,
        stats: SearchStats | None = None,
    ) -> list[_Scored]:
        visited = {node for _, node in entries}
        candidates = list(entries)
        heapq.heapify(candidates)
        # max-heap of the ef best, keyed on (distance, id) so ties resolve to the smaller id
        best = [(-d, -node) for d, node in entries]
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)

        while candidates:
            d, node = heapq.heappop(candidates)
            worst = (-best[0][0], -best[0][1])
            if len(best) >= ef and (d, node) > worst:
                break
            fresh = [int(n) for n in self._live_neighbors(node, layer) if int(n) not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            for nd, n in zip(self._distances_to(q, fresh, stats), fresh, strict=True):
                worst = (-best[0][0], -best[0][1])
                if len(best) < ef or (nd, n) < worst:
                    heapq.heappush(candidates, (nd, n))
                    heapq.heappush(best, (-nd, -n))
                    if len(best) > ef:
                        heapq.heappop(best)
        return sorted((-md, -mn) for md, mn in best)

    def _descend(self, q: np.ndarray, down_to: int, stats: SearchStats | None) -> list[_Scored]:
        ep = self.entry_point
        entry = [(self._distances_to(q, [ep], stats)[0], ep)]
        for layer in range(self.max_level, down_to, -1):
            entry = self._search_layer(q, entry, 1, layer, stats)[:1]
        return entry

    def search(
        self,
        q: npt.ArrayLike,
        k: int,
        e_search: int | None = None,
        stats: SearchStats | None = None,
    ) -> list[Neighbor]:
        """Top-``k`` local node ids by greedy descent then candidate-list search at layer 0.

        A candidate list at least as large as the graph degenerates to an exact scan.
        """
        if k < 1:
            raise ContractViolationError("k must be positive")
        if self._n == 0:
            return []
        q64 = np.asarray(q, dtype=np.float64)
        if q64.shape[-1] != self.dim:
            raise ContractViolationError(f"dimension mismatch: {q64.shape[-1]} vs {self.dim}")
        ef = max(e_search or self.params.e_search, k)
        if stats is not None:
            stats.searches += 1
        if ef >= self._n:
            all_ids = np.arange(self._n)
            return rank(all_ids, self._distances_to(q64, all_ids, stats), k)
        entry = self._descend(q64, 0, stats)
        found = self._search_layer(q64, entry, ef, 0, stats)
        return [(node, d) for d, node in found[:k]]

    def _select(self, candidates: list[_Scored], cap: int) -> list[_Scored]:
        if not self.params.heuristic or len(candidates) <= cap:
            return candidates[:cap]
        kept: list[_Scored] = []
        for d, node in candidates:
            if len(kept) >= cap:
                break
            if not kept:
                kept.append((d, node))
                continue
            to_kept = distances(self._vectors[node], self._vectors[[k for _, k in kept]], self.metric)
            if d < float(to_kept.min()):
                kept.append((d, node))
        return kept

    def _ensure_writable(self, extra_nodes: int = 0, extra_slots: int = 0) -> None:
        n = self._n
        n_slots = int(self._offsets[n])
        fits = (
            self._levels.shape[0] >= n + extra_nodes
            and self._offsets.shape[0] >= n + 1 + extra_nodes
            and self._neighbors.shape[0] >= n_slots + extra_slots
            and self._vectors.shape[0] >= n + extra_nodes
        )
        if fits and not self._borrowed:
            return
        grow_nodes = max(n + extra_nodes, 2 * n, 16)
        grow_slots = max(n_slots + extra_slots, 2 * n_slots, 16 * self.params.slots(0))

        def regrow(arr: np.ndarray, used: int, size: int, fill: int | float = 0) -> np.ndarray:
            shape = (size, *arr.shape[1:])
            out = np.full(shape, fill, dtype=arr.dtype)
            out[:used] = arr[:used]
            return out

        self._levels = regrow(self._levels, n, grow_nodes)
        self._offsets = regrow(self._offsets, n + 1, grow_nodes + 1)
        self._neighbors = regrow(self._neighbors, n_slots, grow_slots, -1)
        self._vectors = regrow(self._vectors, n, grow_nodes)
        self._labels = regrow(self._labels, n, grow_nodes)
        self._borrowed = False

    def _add_backlink(self, node: int, new: int, d_new: float, layer: int) -> None:
        slots = self.layer_neighbors(node, layer)
        current = slots[slots >= 0]
        if len(current) < slots.shape[0]:
            slots[len(current)] = new
            return
        ids = [*current.tolist(), new]
        dists = self._distances_to(self._vectors[node].astype(np.float64), ids[:-1], None) + [d_new]
        scored = sorted(zip(dists, ids, strict=True))
        kept = self._select(scored, slots.shape[0])
        slots[:] = -1
        slots[: len(kept)] = [n for _, n in kept]

    def _link(self, node: int) -> None:
        level = int(self._levels[node])
        if self.entry_point < 0:
            self.entry_point, self.max_level = node, level
            return
        q = self._vectors[node].astype(np.float64)
        entries = self._descend(q, level, None)
        for layer in range(min(level, self.max_level), -1, -1):
            found = [(d, n) for d, n in self._search_layer(q, entries, self.params.e_build, layer) if n != node]
            chosen = self._select(found, self.params.capacity(layer))
            slots = self.layer_neighbors(node, layer)
            slots[:] = -1
            slots[: len(chosen)] = [n for _, n in chosen]
            for d, neighbor in chosen:
                self._add_backlink(neighbor, node, d, layer)
            entries = found or entries
        if level > self.max_level:
            self.entry_point, self.max_level = node, level

    def insert(self, v: npt.ArrayLike, label: int | None = None) -> int:
        """Add one vector and link it at every layer up to its sampled level; returns the node id."""
        vec = np.asarray(v, dtype=np.float32).reshape(-1)
        if vec.shape[0] != self.dim:
            raise ContractViolationError(f"dimension mismatch: {vec.shape[0]} vs {self.dim}")
        node = self._n
        level = self.params.sample_level(node)
        n_slots = self.params.slots(level)
        self._ensure_writable(1, n_slots)
        start = int(self._offsets[node])
        self._levels[node] = level
        self._offsets[node + 1] = start + n_slots
        self._neighbors[start : start + n_slots] = -1
        self._vectors[node] = vec
        self._labels[node] = node if label is None else label
        self._n += 1
        self._link(node)
        return node

    def validate(self) -> list[str]:
        """Structural invariant violations; empty when the graph is well formed."""
        problems: list[str] = []
        n = self._n
        if n == 0:
            return problems
        if not 0 <= self.entry_point < n:
            problems.append(f"entry point {self.entry_point} out of range")
        elif int(self._levels[self.entry_point]) != self.max_level:
            problems.append("entry point is not on the top layer")
        if int(self.levels.max()) != self.max_level:
            problems.append("max_level disagrees with levels")
        expected = np.concatenate([[0], np.cumsum(2 * self.params.M + self.levels.astype(np.int64) * self.params.M)])
        if not np.array_equal(expected, self.offsets):
            problems.append("offsets disagree with levels")
            return problems
        for node in range(n):
            for layer in range(int(self._levels[node]) + 1):
                slots = self.layer_neighbors(node, layer)
                live = slots[slots >= 0]
                if np.any(slots[len(live) :] >= 0):
                    problems.append(f"node {node} layer {layer}: padding is not a suffix")
                if np.any(live >= n):
                    problems.append(f"node {node} layer {layer}: neighbor id out of range")
                    continue
                if np.any(self._levels[live] < layer):
                    problems.append(f"node {node} layer {layer}: neighbor missing from this layer")
                if node in live:
                    problems.append(f"node {node} layer {layer}: self loop")
        return problems


def empty_index(params: HnswParams, dim: int, metric: Metric = Metric.EUCLIDEAN) -> HnswIndex:
    return HnswIndex.from_arrays(
        params,
        metric,
        np.zeros(0, dtype=np.int32),
        np.zeros(1, dtype=np.int64),
        np.zeros(0, dtype=np.int32),
        np.zeros((0, dim), dtype=np.float32),
        np.zeros(0, dtype=np.int64),
        -1,
        -1,
    )


def build(store: VectorStore, params: HnswParams, labels: npt.ArrayLike | None = None) -> HnswIndex:
    """Construct an index over ``store``; deterministic for a given ``params.rng_seed``."""
    n = store.count
    if n < 1:
        raise ContractViolationError("cannot build an index over an empty store")
    levels = np.array([params.sample_level(i) for i in range(n)], dtype=np.int32)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(2 * params.M + levels.astype(np.int64) * params.M, out=offsets[1:])
    ids = np.arange(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if ids.shape[0] != n:
        raise ContractViolationError("labels must match the store size")
    index = HnswIndex(
        params=params,
        dim=store.dim,
        metric=store.metric,
        _levels=levels,
        _offsets=offsets,
        _neighbors=np.full(int(offsets[-1]), -1, dtype=np.int32),
        _vectors=np.array(store.data, dtype=np.float32, copy=True),
        _labels=ids.copy(),
        _n=0,
    )
    for node in range(n):
        index._n = node + 1
        index._link(node)
    logger.debug("Built HNSW over %d vectors (max level %d)", n, index.max_level)
    return index
