"""Vector storage, distance metrics and fvecs/bvecs/ivecs ingestion."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, overload

import numpy as np
import numpy.typing as npt

from src.backend.lib.exceptions import ContractViolationError, ParseError
from src.backend.models import ElementKind, Metric

logger = logging.getLogger(__name__)

FloatMatrix = npt.NDArray[np.float32]
Neighbor = tuple[int, float]

_ELEMENT_DTYPES = {
    ElementKind.F32: np.dtype("<f4"),
    ElementKind.U8: np.dtype("u1"),
    ElementKind.I32: np.dtype("<i4"),
}


@dataclass
class VectorStore:
    """Dense row-major matrix of ``count`` vectors of dimension ``dim``.

    Angular distances use the stored values as they are; call :func:`normalize`
    first when unit vectors are wanted.
    """

    data: FloatMatrix
    metric: Metric = Metric.EUCLIDEAN

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise ContractViolationError(f"vector data must be a count x dim matrix, got shape {self.data.shape}")
        self.metric = Metric(self.metric)

    @classmethod
    def empty(cls, dim: int, metric: Metric = Metric.EUCLIDEAN) -> "VectorStore":
        return cls(np.zeros((0, dim), dtype=np.float32), metric)

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    @property
    def count(self) -> int:
        return int(self.data.shape[0])

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, item: int) -> npt.NDArray[np.float32]:
        return self.data[item]

    def take(self, ids: npt.ArrayLike) -> "VectorStore":
        return VectorStore(self.data[np.asarray(ids, dtype=np.int64)], self.metric)

    def concat(self, other: "VectorStore") -> "VectorStore":
        if other.dim != self.dim:
            raise ContractViolationError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return VectorStore(np.concatenate([self.data, other.data]), self.metric)


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ContractViolationError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def distance(a: npt.ArrayLike, b: npt.ArrayLike, metric: Metric = Metric.EUCLIDEAN) -> float:
    """Squared L2 or ``1 - cos`` between two vectors; smaller is more similar for both."""
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    _check_dims(a64, b64)
    if metric == Metric.EUCLIDEAN:
        diff = a64 - b64
        return float(np.dot(diff, diff))
    denom = float(np.linalg.norm(a64) * np.linalg.norm(b64))
    if denom == 0.0:
        return 1.0
    return max(0.0, 1.0 - float(np.dot(a64, b64)) / denom)


def distances(q: npt.ArrayLike, matrix: npt.ArrayLike, metric: Metric = Metric.EUCLIDEAN) -> npt.NDArray[np.float64]:
    """Distances from ``q`` to every row of ``matrix``, accumulated in float64."""
    q64 = np.asarray(q, dtype=np.float64)
    m64 = np.asarray(matrix, dtype=np.float64)
    if m64.ndim == 1:
        m64 = m64.reshape(1, -1)
    _check_dims(q64, m64)
    if metric == Metric.EUCLIDEAN:
        diff = m64 - q64
        return np.einsum("ij,ij->i", diff, diff)
    norms = np.linalg.norm(m64, axis=1) * np.linalg.norm(q64)
    dots = m64 @ q64
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(norms > 0.0, dots / norms, 0.0)
    return np.maximum(0.0, 1.0 - cos)


def pairwise_distances(
    x: npt.ArrayLike, y: npt.ArrayLike, metric: Metric = Metric.EUCLIDEAN
) -> npt.NDArray[np.float64]:
    """Full ``len(x) x len(y)`` distance matrix."""
    x64 = np.asarray(x, dtype=np.float64)
    y64 = np.asarray(y, dtype=np.float64)
    _check_dims(x64, y64)
    if metric == Metric.EUCLIDEAN:
        sq = (x64 * x64).sum(axis=1)[:, None] - 2.0 * (x64 @ y64.T) + (y64 * y64).sum(axis=1)[None, :]
        return np.maximum(sq, 0.0)
    xn = np.linalg.norm(x64, axis=1)[:, None]
    yn = np.linalg.norm(y64, axis=1)[None, :]
    denom = xn * yn
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(denom > 0.0, (x64 @ y64.T) / denom, 0.0)
    return np.maximum(0.0, 1.0 - cos)


def normalize(store: VectorStore) -> VectorStore:
    """Unit-norm copy of ``store``; zero rows stay zero."""
    norms = np.linalg.norm(store.data.astype(np.float64), axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return VectorStore((store.data / norms).astype(np.float32), store.metric)


def rank(ids: npt.ArrayLike, dists: npt.ArrayLike, k: int) -> list[Neighbor]:
    """Sort by (distance, id) and keep the first ``k``."""
    ids_arr = np.asarray(ids, dtype=np.int64)
    d_arr = np.asarray(dists, dtype=np.float64)
    order = np.lexsort((ids_arr, d_arr))[:k]
    return [(int(ids_arr[i]), float(d_arr[i])) for i in order]


def brute_force_topk(store: VectorStore, q: npt.ArrayLike, k: int) -> list[Neighbor]:
    """Exact ``k`` nearest neighbours of ``q``, ties broken by smaller id."""
    if k > store.count:
        raise ContractViolationError(f"k={k} exceeds store size {store.count}")
    if k < 1:
        raise ContractViolationError("k must be positive")
    d = distances(q, store.data, store.metric)
    return rank(np.arange(store.count), d, k)


def ground_truth(store: VectorStore, queries: VectorStore, k: int) -> npt.NDArray[np.int32]:
    """Exact top-``k`` id lists for every query, one row per query."""
    k = min(k, store.count)
    out = np.empty((queries.count, k), dtype=np.int32)
    for start in range(0, queries.count, 256):
        block = pairwise_distances(queries.data[start : start + 256], store.data, store.metric)
        for row, dists in enumerate(block):
            out[start + row] = [i for i, _ in rank(np.arange(store.count), dists, k)]
    return out


def recall_at_k(results: list[list[int]], truth: npt.ArrayLike, k: int) -> float:
    """Mean fraction of the exact top-``k`` ids present in the returned top-``k``."""
    gt = np.asarray(truth)
    if not results:
        return 0.0
    hits = 0
    for found, exact in zip(results, gt, strict=True):
        hits += len(set(found[:k]) & {int(i) for i in exact[:k]})
    return hits / (len(results) * k)


def gaussian_mixture(
    n: int,
    dim: int,
    components: int,
    seed: int,
    spread: float = 1.0,
    separation: float = 4.0,
    metric: Metric = Metric.EUCLIDEAN,
) -> tuple[VectorStore, npt.NDArray[np.int32]]:
    """Synthetic corpus drawn from ``components`` isotropic Gaussians; returns the store and labels."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation, size=(components, dim))
    labels = rng.integers(0, components, size=n).astype(np.int32)
    data = centers[labels] + rng.normal(0.0, spread, size=(n, dim))
    return VectorStore(data.astype(np.float32), metric), labels


def _record_dtype(kind: ElementKind, dim: int) -> np.dtype:
    return np.dtype([("dim", "<i4"), ("vec", _ELEMENT_DTYPES[kind], (dim,))])


def read_xvecs(path: str | Path, kind: ElementKind) -> np.ndarray:
    """Raw ``count x dim`` matrix from an fvecs/bvecs/ivecs file."""
    kind = ElementKind(kind)
    buf = Path(path).read_bytes()
    if not buf:
        return np.zeros((0, 1), dtype=_ELEMENT_DTYPES[kind])
    if len(buf) < 4:
        raise ParseError(f"truncated dimension header at byte offset 0 ({len(buf)} of 4 bytes)")
    dim = int(np.frombuffer(buf, dtype="<i4", count=1)[0])
    if dim <= 0:
        raise ParseError(f"non-positive dimension {dim} at byte offset 0")
    rec = _record_dtype(kind, dim)
    whole, tail = divmod(len(buf), rec.itemsize)
    if tail:
        raise ParseError(f"truncated record at byte offset {whole * rec.itemsize} ({tail} of {rec.itemsize} bytes)")
    records = np.frombuffer(buf, dtype=rec)
    bad = np.flatnonzero(records["dim"] != dim)
    if bad.size:
        first = int(bad[0])
        raise ParseError(
            f"inconsistent dimension {int(records['dim'][first])} (expected {dim}) "
            f"at byte offset {first * rec.itemsize}"
        )
    return records["vec"].copy()


@overload
def load_xvecs(path: str | Path, kind: Literal[ElementKind.I32]) -> npt.NDArray[np.int32]: ...
@overload
def load_xvecs(
    path: str | Path, kind: Literal[ElementKind.F32, ElementKind.U8], metric: Metric = ...
) -> VectorStore: ...
def load_xvecs(
    path: str | Path, kind: ElementKind, metric: Metric = Metric.EUCLIDEAN
) -> VectorStore | npt.NDArray[np.int32]:
    """Load vectors (f32/u8) as a :class:`VectorStore`, or id lists (i32) as an int32 matrix."""
    matrix = read_xvecs(path, kind)
    logger.debug("Loaded %d records of dimension %d from %s", matrix.shape[0], matrix.shape[1], path)
    if ElementKind(kind) == ElementKind.I32:
        return matrix.astype(np.int32)
    return VectorStore(matrix.astype(np.float32), metric)


def save_xvecs(store: VectorStore | npt.ArrayLike, path: str | Path, kind: ElementKind) -> None:
    """Inverse of :func:`load_xvecs`."""
    kind = ElementKind(kind)
    matrix = store.data if isinstance(store, VectorStore) else np.asarray(store)
    if matrix.ndim != 2:
        raise ContractViolationError("xvecs files hold a two-dimensional matrix")
    records = np.empty(matrix.shape[0], dtype=_record_dtype(kind, matrix.shape[1]))
    records["dim"] = matrix.shape[1]
    records["vec"] = matrix.astype(_ELEMENT_DTYPES[kind])
    Path(path).write_bytes(records.tobytes())
