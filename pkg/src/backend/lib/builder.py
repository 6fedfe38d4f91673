"""Offline build: partition, one graph per partition, routing graph, remote layout."""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import msgspec
import numpy as np
import numpy.typing as npt

from src.backend.lib.exceptions import ContractViolationError, ParseError
from src.backend.lib.fabric import Fabric, RegionHandle
from src.backend.lib.hnsw import HnswParams, build
from src.backend.lib.image import GapPolicy, deserialize, serialize
from src.backend.lib.layout import GlobalMeta, build_layout, fetch_sub, read_meta
from src.backend.lib.partition import PartitionResult, partition
from src.backend.lib.query import MetaIndex
from src.backend.lib.vectors import VectorStore, load_xvecs
from src.backend.models import ElementKind, Metric

logger = logging.getLogger(__name__)

REGION_FILE = "region.bin"
MANIFEST_FILE = "build.json"


@dataclass(frozen=True)
class BuildConfig:
    P: int
    hnsw: HnswParams = field(default_factory=HnswParams)
    e_meta: int = 32
    policy: GapPolicy = field(default_factory=GapPolicy)
    I_max: int = 20
    L: int = 3
    c_sample: int = 8
    rng_seed: int = 0
    balanced: bool = True
    # append-only chained baseline instead of shared overflow regions
    fragmented: bool = False
    heap_fraction: float = 0.25


@dataclass
class BuiltIndex:
    meta: GlobalMeta
    meta_index: MetaIndex
    partition: PartitionResult
    config: BuildConfig
    image_sizes: list[int]
    timings: dict[str, float]

    @property
    def mean_image_size(self) -> float:
        return float(np.mean(self.image_sizes))


class BuildManifest(msgspec.Struct):
    """What a saved build needs besides the region bytes."""

    epoch: int
    metric: Metric
    dim: int
    P: int
    M: int
    e_build: int
    e_meta: int
    rng_seed: int
    region_size: int
    timings: dict[str, float] = {}


def build_index(
    store: VectorStore,
    config: BuildConfig,
    fabric: Fabric,
    labels: npt.ArrayLike | None = None,
    epoch: int = 0,
    region: RegionHandle | None = None,
) -> BuiltIndex:
    """Build every sub-index and write the epoch's layout into a fresh (or given) region.

    ``labels`` are the global ids of the rows of ``store``; they default to row numbers.
    """
    ids = np.arange(store.count, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if ids.shape[0] != store.count:
        raise ContractViolationError("labels must match the store size")
    timings: dict[str, float] = {}

    start = time.perf_counter()
    parts = partition(store, config.P, config.I_max, config.L, config.c_sample, config.rng_seed, config.balanced)
    timings["partition"] = time.perf_counter() - start

    start = time.perf_counter()
    images = []
    for p in range(config.P):
        members = parts.members(p)
        sub = build(store.take(members), config.hnsw, ids[members])
        images.append(serialize(sub, config.policy))
    timings["sub_build"] = time.perf_counter() - start

    start = time.perf_counter()
    meta_index = MetaIndex.build(
        parts.centroids, store.metric, config.hnsw.M, config.hnsw.e_build, config.e_meta, config.rng_seed
    )
    timings["meta_build"] = time.perf_counter() - start

    start = time.perf_counter()
    heap_len = int(sum(len(img) for img in images) * config.heap_fraction) if config.fragmented else 0
    meta = build_layout(
        images,
        config.policy,
        fabric,
        region=region,
        epoch=epoch,
        next_label=int(ids.max()) + 1 if ids.size else 0,
        fragmented=config.fragmented,
        heap_len=heap_len,
    )
    timings["layout"] = time.perf_counter() - start
    timings["total"] = sum(timings.values())
    logger.info(
        "Built epoch %d: %d vectors in %d subs (%.2fs, partitioning %.2fs)",
        epoch,
        store.count,
        config.P,
        timings["total"],
        timings["partition"],
    )
    return BuiltIndex(meta, meta_index, parts, config, [len(img) for img in images], timings)


def collect_vectors(fabric: Fabric, meta: GlobalMeta) -> tuple[VectorStore, npt.NDArray[np.int64]]:
    """Every vector an epoch holds remotely with its global id, ordered by id."""
    data, labels = [], []
    metric = Metric.EUCLIDEAN
    for sub_id in range(meta.P):
        index = deserialize(fetch_sub(fabric, meta, sub_id).image())
        metric = index.metric
        data.append(index.vectors.data)
        labels.append(index.labels)
    ids = np.concatenate(labels).astype(np.int64)
    order = np.argsort(ids, kind="stable")
    return VectorStore(np.concatenate(data)[order], metric), ids[order]


def save_build(built: BuiltIndex, fabric: Fabric, directory: str | Path) -> Path:
    """Persist the region image, partition files and a manifest to ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    region = built.meta.region
    (out / REGION_FILE).write_bytes(fabric.read(region, 0, region.size))
    built.partition.save(out)
    manifest = BuildManifest(
        epoch=built.meta.epoch,
        metric=built.meta_index.index.metric,
        dim=built.meta_index.dim,
        P=built.meta.P,
        M=built.config.hnsw.M,
        e_build=built.config.hnsw.e_build,
        e_meta=built.config.e_meta,
        rng_seed=built.config.rng_seed,
        region_size=region.size,
        timings=built.timings,
    )
    (out / MANIFEST_FILE).write_bytes(msgspec.json.format(msgspec.json.encode(manifest), indent=2))
    logger.info("Saved build of epoch %d to %s", built.meta.epoch, out)
    return out


def load_build(fabric: Fabric, directory: str | Path) -> tuple[GlobalMeta, MetaIndex, BuildManifest]:
    """Register a region holding a saved build and rebuild its routing graph."""
    src = Path(directory)
    try:
        manifest = msgspec.json.decode((src / MANIFEST_FILE).read_bytes(), type=BuildManifest)
    except msgspec.DecodeError as e:
        raise ParseError(f"invalid build manifest in {src}: {e}") from e
    payload = (src / REGION_FILE).read_bytes()
    if len(payload) != manifest.region_size:
        raise ParseError(f"{REGION_FILE} holds {len(payload)} bytes, manifest says {manifest.region_size}")
    region = fabric.register_region(manifest.region_size)
    fabric.write(region, 0, payload)
    meta = read_meta(fabric, region)
    centroids = load_xvecs(src / "centroids.fvecs", ElementKind.F32).data
    meta_index = MetaIndex.build(
        centroids, manifest.metric, manifest.M, manifest.e_build, manifest.e_meta, manifest.rng_seed
    )
    logger.info("Loaded epoch %d (%d subs) from %s", meta.epoch, meta.P, src)
    return meta, meta_index, manifest
