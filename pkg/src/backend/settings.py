import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from rich import get_console

console = get_console()


def _env_bool(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).lower() in {"true", "1", "yes"}


@dataclass
class FabricSettings:
    rtt_us: float = field(
        default_factory=lambda: float(os.getenv("DHNSW_RTT_US", "5.0")),
    )
    bandwidth_gbps: float = field(
        default_factory=lambda: float(os.getenv("DHNSW_BANDWIDTH_GBPS", "100.0")),
    )
    per_op_us: float = field(
        default_factory=lambda: float(os.getenv("DHNSW_PER_OP_US", "0.2")),
    )
    max_batch: int = field(
        default_factory=lambda: int(os.getenv("DHNSW_MAX_BATCH", "16")),
    )
    real_sleep: bool = field(
        default_factory=lambda: _env_bool("DHNSW_REAL_SLEEP"),
    )


@dataclass
class HnswSettings:
    M: int = field(
        default_factory=lambda: int(os.getenv("DHNSW_HNSW_M", "16")),
    )
    e_build: int = field(
        default_factory=lambda: int(os.getenv("DHNSW_E_BUILD", "100")),
    )
    e_search: int = field(
        default_factory=lambda: int(os.getenv("DHNSW_E_SEARCH", "64")),
    )
    e_meta: int = field(
        default_factory=lambda: int(os.getenv("DHNSW_E_META", "32")),
    )
    heuristic: bool = field(
        default_factory=lambda: _env_bool("DHNSW_HEURISTIC"),
    )


@dataclass
class LayoutSettings:
    internal_gap_fraction: float = field(
        default_factory=lambda: float(os.getenv("DHNSW_INTERNAL_GAP", "0.2")),
    )
    overflow_fraction: float = field(
        default_factory=lambda: float(os.getenv("DHNSW_OVERFLOW", "0.25")),
    )


@dataclass
class EngineSettings:
    cache_ratio: float = field(
        default_factory=lambda: float(os.getenv("DHNSW_CACHE_RATIO", "0.1")),
    )
    search_workers: int = field(
        default_factory=lambda: int(os.getenv("DHNSW_SEARCH_WORKERS", "1")),
    )
    slo_wait_ms: float = field(
        default_factory=lambda: float(os.getenv("DHNSW_SLO_WAIT_MS", "5.0")),
    )
    coalesce_gap: int = field(
        default_factory=lambda: int(os.getenv("DHNSW_COALESCE_GAP", "64")),
    )
    lsh_bits: int = field(
        default_factory=lambda: int(os.getenv("DHNSW_LSH_BITS", "6")),
    )
    probe_radius: int = field(
        default_factory=lambda: int(os.getenv("DHNSW_PROBE_RADIUS", "1")),
    )
    # simulated seconds per scalar multiply-add of a distance, and per deserialized byte
    distance_op_cost: float = field(
        default_factory=lambda: float(os.getenv("DHNSW_DISTANCE_OP_COST", "1e-9")),
    )
    deser_byte_cost: float = field(
        default_factory=lambda: float(os.getenv("DHNSW_DESER_BYTE_COST", "1e-10")),
    )


@dataclass
class ServerSettings:
    data_dir: Path = field(
        default_factory=lambda: Path(os.getenv("DHNSW_DATA_DIR", "output/index")),
    )
    transport_host: str = field(
        default_factory=lambda: os.getenv("DHNSW_TRANSPORT_HOST", "127.0.0.1"),
    )
    transport_port: int = field(
        default_factory=lambda: int(os.getenv("DHNSW_TRANSPORT_PORT", "7471")),
    )


@dataclass
class Settings:
    debug: bool = field(
        default_factory=lambda: _env_bool("DEBUG"),
    )
    log_level: str = field(
        default_factory=lambda: os.getenv("LOG_LEVEL", "INFO").upper(),
    )
    fabric: FabricSettings = field(default_factory=FabricSettings)
    hnsw: HnswSettings = field(default_factory=HnswSettings)
    layout: LayoutSettings = field(default_factory=LayoutSettings)
    engine: EngineSettings = field(default_factory=EngineSettings)
    server: ServerSettings = field(default_factory=ServerSettings)

    def __post_init__(self):
        if self.fabric.max_batch < 2:
            raise ValueError("DHNSW_MAX_BATCH must allow at least a base and an overflow range")
        if not 0.0 <= self.engine.cache_ratio <= 1.0:
            raise ValueError("DHNSW_CACHE_RATIO must be within [0, 1]")

    @classmethod
    def from_env(cls, dotenv_filename: str) -> "Settings":
        env_file = (
            Path(dotenv_filename) if Path(dotenv_filename).is_absolute() else Path(f"{os.curdir}/{dotenv_filename}")
        )

        if env_file.is_file():
            from dotenv import load_dotenv

            console.print(
                f"[yellow]Loading environment configuration from {dotenv_filename}[/]",
                markup=True,
            )

            load_dotenv(env_file, override=True)
        return Settings()


@lru_cache(maxsize=1, typed=True)
def get_settings() -> Settings:
    return Settings.from_env(dotenv_filename=".env")
