"""Closed-form indexing and serving time model.

Every term is its asymptotic operation count scaled by a calibration constant.
Logarithms are natural. Serving constants are in simulated seconds, the build
constant in wall-clock seconds, so each is fitted from one measured run of the
matching kind (:func:`calibrate`, :func:`calibrate_build`).
"""

import math
from dataclasses import asdict, dataclass, replace

from src.backend.lib.exceptions import ContractViolationError
from src.backend.lib.query import ExecutionMetrics


@dataclass(frozen=True)
class ModelParams:
    N: int
    d: int
    P: int
    k: int = 10
    # sub-index graph degree
    M: int = 16
    e_build: int = 100
    e_meta: int = 32
    e_sub: int = 64
    B: int = 1
    # mean serialized sub-index size in bytes
    S: float = 0.0
    P_fetch: int = 0
    # bytes per second
    W_net: float = 12.5e9
    n_threads: int = 1
    I_max: int = 20
    c_sample: int = 8
    L: int = 3
    # (sub-index, query) pairs searched per batch; defaults to B
    pairs: int | None = None
    # fixed per-fetch latency added to the transfer time
    rtt: float = 0.0
    distance_op_cost: float = 1e-9
    deser_byte_cost: float = 1e-10
    build_op_cost: float = 1e-9

    def __post_init__(self):
        for name in ("N", "d", "P", "k", "M", "e_build", "e_meta", "e_sub", "B", "n_threads", "I_max", "c_sample", "L"):
            if getattr(self, name) <= 0:
                raise ContractViolationError(f"{name} must be positive")
        if self.W_net <= 0 or self.S < 0 or self.rtt < 0:
            raise ContractViolationError("W_net must be positive, S and rtt non-negative")
        if not 0 <= self.P_fetch <= self.P:
            raise ContractViolationError(f"P_fetch={self.P_fetch} must be within [0, P={self.P}]")

    @property
    def search_pairs(self) -> int:
        return self.B if self.pairs is None else self.pairs


@dataclass(frozen=True)
class BuildPrediction:
    T_init: float
    T_cluster: float
    T_sub: float
    T_meta_build: float

    @property
    def T_build(self) -> float:
        return self.T_init + self.T_cluster + self.T_sub + self.T_meta_build

    def as_dict(self) -> dict[str, float]:
        return {**asdict(self), "T_build": self.T_build}


@dataclass(frozen=True)
class BatchPrediction:
    T_meta: float
    T_net: float
    T_deser: float
    T_comp: float
    T_pipeline: float

    @property
    def T(self) -> float:
        return self.T_meta + self.T_pipeline

    def as_dict(self) -> dict[str, float]:
        return {**asdict(self), "T": self.T}


def _log(x: float) -> float:
    return math.log(x) if x > 1 else 0.0


def cluster_ops(p: ModelParams, priority_queue: bool = False) -> float:
    ops = p.I_max * p.N * p.P * p.d
    if priority_queue:
        ops += p.I_max * p.N * _log(p.N)
    return ops


def predict_build(p: ModelParams, priority_queue: bool = False) -> BuildPrediction:
    """Seeding, clustering, sub-index construction and routing-graph construction times.

    ``priority_queue`` keeps the ``N log N`` assignment term usually dropped
    because ``P * d`` dominates ``log N``.
    """
    beta = p.build_op_cost
    per_sub = p.N / p.P
    return BuildPrediction(
        T_init=beta * p.P * p.c_sample * p.P * p.d,
        T_cluster=beta * cluster_ops(p, priority_queue),
        T_sub=beta * per_sub * _log(per_sub) * p.e_build * p.d,
        T_meta_build=beta * (p.N * p.d + p.P * _log(p.P) * p.e_build * p.d),
    )


def comp_units(p: ModelParams) -> float:
    return p.search_pairs * p.M * p.d * p.e_sub * _log(p.N / p.P)


def predict_batch(p: ModelParams) -> BatchPrediction:
    """Per-batch stage times and the pipelined latency.

    Search visits about ``M * e_sub * log(N / P)`` neighbors per (sub-index, query)
    pair. The pipeline term is the bottleneck stage plus one fetch, two
    deserializations and one search of fill and drain, capped by the sequential
    stage sum; the cap only binds when one stage carries nearly all the work.
    """
    t_meta = p.distance_op_cost * p.B / p.n_threads * p.d * p.e_meta * _log(p.P)
    t_net = p.P_fetch * (p.rtt + p.S / p.W_net)
    t_deser = p.deser_byte_cost * p.P_fetch * p.S
    t_comp = p.distance_op_cost * comp_units(p)
    if p.P_fetch == 0:
        pipeline = t_comp
    else:
        fill_drain = (t_net + 2 * t_deser + t_comp) / p.P_fetch
        pipeline = min(max(t_net, t_deser, t_comp) + fill_drain, t_net + t_deser + t_comp)
    return BatchPrediction(t_meta, t_net, t_deser, t_comp, pipeline)


def calibrate(p: ModelParams, measured: ExecutionMetrics) -> ModelParams:
    """Fit the distance-op and per-byte deserialize constants to one measured batch."""
    fitted = {}
    units = comp_units(p)
    if units > 0 and measured.t_comp > 0:
        fitted["distance_op_cost"] = measured.t_comp / units
    if measured.bytes_fetched > 0:
        fitted["deser_byte_cost"] = measured.t_deser / measured.bytes_fetched
    return replace(p, **fitted)


def calibrate_build(p: ModelParams, partition_seconds: float, priority_queue: bool = False) -> ModelParams:
    """Fit the build constant so that the clustering term matches one measured partitioning run."""
    if partition_seconds <= 0:
        raise ContractViolationError("measured partitioning time must be positive")
    return replace(p, build_op_cost=partition_seconds / cluster_ops(p, priority_queue))
