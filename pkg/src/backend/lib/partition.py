"""Balanced, capacity-constrained k-means.

Seeds come from a sampled k-means++ pass; every iteration assigns vectors
through a global priority queue under a hard per-partition cap of
``ceil(N / P)`` and recomputes centroids from the members.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt

from src.backend.lib.exceptions import ContractViolationError
from src.backend.lib.vectors import VectorStore, distances, pairwise_distances, save_xvecs
from src.backend.models import ElementKind, Metric

logger = logging.getLogger(__name__)


@dataclass
class PartitionResult:
    assignment: npt.NDArray[np.int32]
    centroids: npt.NDArray[np.float32]
    sizes: npt.NDArray[np.int64]
    objective: list[float] = field(default_factory=list)

    @property
    def P(self) -> int:
        return int(self.centroids.shape[0])

    def members(self, partition: int) -> npt.NDArray[np.int64]:
        return np.flatnonzero(self.assignment == partition)

    def normalized_size_std(self) -> float:
        """Standard deviation of partition sizes divided by their mean."""
        return float(self.sizes.std() / self.sizes.mean())

    def save(self, directory: str | Path) -> None:
        """``assignment.ivecs`` (one id per row) and ``centroids.fvecs``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        save_xvecs(self.assignment.reshape(-1, 1), out / "assignment.ivecs", ElementKind.I32)
        save_xvecs(self.centroids, out / "centroids.fvecs", ElementKind.F32)


def kmeanspp_init(store: VectorStore, P: int, c_sample: int = 8, rng_seed: int = 0) -> npt.NDArray[np.float32]:
    """P seed centers at distinct indices.

    Each new center is the best of ``c_sample`` candidates drawn in proportion
    to their distance from the centers chosen so far.
    """
    n = store.count
    if P > n:
        raise ContractViolationError(f"cannot pick {P} centers from {n} vectors")
    if P < 1 or c_sample < 1:
        raise ContractViolationError("P and c_sample must be positive")
    rng = np.random.default_rng(rng_seed)
    chosen = [int(rng.integers(n))]
    nearest = distances(store[chosen[0]], store.data, store.metric)
    nearest[chosen[0]] = 0.0
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    while len(chosen) < P:
        weights = np.where(taken, 0.0, nearest)
        total = weights.sum()
        pool = np.flatnonzero(~taken)
        if total > 0.0:
            size = min(c_sample, int(np.count_nonzero(weights)))
            candidates = rng.choice(n, size=size, replace=False, p=weights / total)
        else:
            candidates = rng.choice(pool, size=min(c_sample, pool.size), replace=False)
        # best candidate: farthest from the current centers, smaller index on ties
        winner = int(candidates[np.lexsort((candidates, -nearest[candidates]))[0]])
        chosen.append(winner)
        taken[winner] = True
        nearest = np.minimum(nearest, distances(store[winner], store.data, store.metric))
    return store.data[chosen].copy()


def _assign(dists: np.ndarray, L: int, cap: int) -> npt.NDArray[np.int32]:
    n, P = dists.shape
    if cap * P < n:
        raise ContractViolationError(f"cap {cap} x {P} partitions cannot hold {n} vectors")
    L = max(1, min(L, P))
    ranked = np.argsort(dists, axis=1, kind="stable")
    if P > 1:
        rows = np.arange(n)
        regret = dists[rows, ranked[:, 1]] - dists[rows, ranked[:, 0]]
    else:
        regret = np.zeros(n)
    # largest regret pops first; ids break ties
    order = np.lexsort((np.arange(n), -regret))
    sizes = np.zeros(P, dtype=np.int64)
    assignment = np.full(n, -1, dtype=np.int32)
    top = ranked[:, :L].tolist()
    for i in order.tolist():
        for p in top[i]:
            if sizes[p] < cap:
                break
        else:
            p = next(int(q) for q in ranked[i] if sizes[q] < cap)
        assignment[i] = p
        sizes[p] += 1
    return assignment


def balanced_assign(store: VectorStore, centroids: npt.ArrayLike, L: int, cap: int) -> npt.NDArray[np.int32]:
    """Give every vector one of its ``L`` nearest centroids without exceeding ``cap`` members anywhere."""
    return _assign(pairwise_distances(store.data, centroids, store.metric), L, cap)


def _recompute(store: VectorStore, assignment: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    P, dim = centroids.shape
    sums = np.zeros((P, dim), dtype=np.float64)
    np.add.at(sums, assignment, store.data.astype(np.float64))
    counts = np.bincount(assignment, minlength=P)
    out = centroids.astype(np.float64).copy()
    filled = counts > 0
    out[filled] = sums[filled] / counts[filled, None]
    if store.metric == Metric.ANGULAR:
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        out /= norms
    return out.astype(np.float32)


def _repair_empty(store: VectorStore, assignment: np.ndarray, centroids: np.ndarray) -> None:
    P = centroids.shape[0]
    for empty in np.flatnonzero(np.bincount(assignment, minlength=P) == 0).tolist():
        counts = np.bincount(assignment, minlength=P)
        largest = int(np.argmax(counts))
        members = np.flatnonzero(assignment == largest)
        far = distances(centroids[largest], store.data[members], store.metric)
        mover = int(members[int(np.argmax(far))])
        assignment[mover] = empty
        centroids[empty] = store.data[mover]
        logger.debug("Reseeded empty partition %d from partition %d", empty, largest)


def partition(
    store: VectorStore,
    P: int,
    I_max: int = 20,
    L: int = 3,
    c_sample: int = 8,
    rng_seed: int = 0,
    balanced: bool = True,
) -> PartitionResult:
    """Cluster ``store`` into ``P`` partitions; deterministic for a given seed.

    ``balanced=False`` runs plain k-means (nearest centroid, no cap) from the same seeds.
    """
    n = store.count
    if P > n:
        raise ContractViolationError(f"cannot split {n} vectors into {P} partitions")
    cap = math.ceil(n / P)
    centroids = kmeanspp_init(store, P, c_sample, rng_seed)
    assignment = np.full(n, -1, dtype=np.int32)
    objective: list[float] = []
    for iteration in range(max(1, I_max)):
        dists = pairwise_distances(store.data, centroids, store.metric)
        updated = _assign(dists, L, cap) if balanced else np.argmin(dists, axis=1).astype(np.int32)
        objective.append(float(dists[np.arange(n), updated].sum()))
        converged = np.array_equal(updated, assignment)
        assignment = updated
        centroids = _recompute(store, assignment, centroids)
        _repair_empty(store, assignment, centroids)
        if converged:
            logger.debug("Partitioning converged after %d iterations", iteration + 1)
            break
    sizes = np.bincount(assignment, minlength=P).astype(np.int64)
    logger.info("Partitioned %d vectors into %d partitions (max size %d, cap %d)", n, P, int(sizes.max()), cap)
    return PartitionResult(assignment, centroids, sizes, objective)
