"""``dhnsw`` benchmark commands.

Each command takes ``--config run.toml`` (see :class:`BenchConfig`), writes its
CSV under the configured output directory and prints a short summary table.
"""

import logging
from pathlib import Path

import anyio
import click
import msgspec
from rich.logging import RichHandler
from rich.table import Table

from src.backend.lib.bench import (
    BenchConfig,
    cmd_build,
    cmd_cache_sweep,
    cmd_insert,
    cmd_inspect_layout,
    cmd_mixed,
    cmd_model,
    cmd_query,
    cmd_rebuild_demo,
    load_config,
    summarize_queries,
    write_csv,
)
from src.backend.lib.exceptions import DhnswError
from src.backend.lib.fabric import MemoryFabric
from src.backend.lib.transport import serve_fabric
from src.backend.settings import console, get_settings

logger = logging.getLogger(__name__)

config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="TOML run description; defaults apply when omitted.",
)


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True)],
    )


def _load(config_path: Path | None) -> BenchConfig:
    try:
        return load_config(config_path)
    except DhnswError as e:
        raise click.BadParameter(str(e), param_hint="--config") from e


def _csv(config: BenchConfig, name: str) -> Path:
    return Path(config.output_dir) / f"{name}.csv"


def _summary(title: str, rows: list[msgspec.Struct], columns: list[str]) -> None:
    table = Table(title=title)
    for column in columns:
        table.add_column(column, justify="right")
    for row in rows:
        values = msgspec.structs.asdict(row)
        table.add_row(*(_fmt(values[c]) for c in columns))
    console.print(table)


def _fmt(value: object) -> str:
    if isinstance(value, float):
        return f"{value:.4g}"
    return "-" if value is None else str(value)


@click.group(name="dhnsw")
@click.option("--log-level", default=None, help="Overrides LOG_LEVEL.")
def bench_group(log_level: str | None) -> None:
    """Build, query and update partitioned HNSW indexes on a simulated memory fabric."""
    _setup_logging((log_level or get_settings().log_level).upper())


@bench_group.command(name="build")
@config_option
def build(config_path: Path | None) -> None:
    """Partition, build and lay out the index; save it for the server."""
    config = _load(config_path)
    _, row = cmd_build(config)
    write_csv([row], _csv(config, "build"))
    _summary("build", [row], ["N", "P", "max_partition", "cap", "size_std", "t_total", "region_bytes"])


@bench_group.command(name="query")
@config_option
@click.option("--sweep-cache", is_flag=True, help="Repeat the workload for every configured cache ratio.")
def query(config_path: Path | None, sweep_cache: bool) -> None:
    """Run the query set in batches and report recall and simulated latency."""
    config = _load(config_path)
    rows = cmd_cache_sweep(config) if sweep_cache else cmd_query(config)
    name = "cache_sweep" if sweep_cache else "query"
    write_csv(rows, _csv(config, name))
    _summary("query", rows[:20], ["batch", "B", "deferred", "cache_ratio", "fetched", "cache_hits", "latency"])
    summary = summarize_queries(rows)
    write_csv(summary, _csv(config, f"{name}_summary"))
    _summary(
        "summary",
        summary,
        ["cache_ratio", "queries", "batches", "mean_latency", "p99_latency", "mean_recall_at_1", "mean_recall_at_k"],
    )


@bench_group.command(name="insert")
@config_option
def insert(config_path: Path | None) -> None:
    """Insert the held-out vectors and report commit traffic."""
    config = _load(config_path)
    row = cmd_insert(config)
    write_csv([row], _csv(config, "insert"))
    _summary("insert", [row], ["inserted", "committed", "buffered", "failed", "bytes_per_insert", "rebuilds"])


@bench_group.command(name="mixed")
@config_option
def mixed(config_path: Path | None) -> None:
    """Batch latency across insert ratios."""
    config = _load(config_path)
    rows = cmd_mixed(config)
    write_csv(rows, _csv(config, "mixed"))
    _summary("mixed", rows, ["insert_ratio", "mean_batch_latency", "mean_search_latency", "mean_insert_time"])


@bench_group.command(name="rebuild-demo")
@config_option
def rebuild_demo(config_path: Path | None) -> None:
    """Search/insert schedule through one complete rebuild; writes a throughput trace."""
    config = _load(config_path)
    rows = cmd_rebuild_demo(config)
    write_csv(rows, _csv(config, "rebuild_trace"))
    _summary("rebuild markers", [r for r in rows if r.marker], ["step", "clock", "phase", "epoch", "marker"])


@bench_group.command(name="model")
@config_option
def model(config_path: Path | None) -> None:
    """Compare predicted and measured batch and clustering times."""
    config = _load(config_path)
    rows = cmd_model(config)
    write_csv(rows, _csv(config, "model"))
    _summary("model", rows, ["kind", "N", "P", "P_fetch", "predicted", "measured", "relative_error"])


@bench_group.command(name="inspect-layout")
@config_option
def inspect_layout(config_path: Path | None) -> None:
    """Print the region layout of a freshly built index as JSON."""
    config = _load(config_path)
    console.print_json(msgspec.json.encode(cmd_inspect_layout(config)).decode())


@bench_group.command(name="serve-fabric")
@click.option("--host", default=None, help="Overrides DHNSW_TRANSPORT_HOST.")
@click.option("--port", type=int, default=None, help="Overrides DHNSW_TRANSPORT_PORT.")
def serve(host: str | None, port: int | None) -> None:
    """Expose an empty in-memory fabric over TCP until interrupted."""
    settings = get_settings()
    fabric = MemoryFabric.from_settings(settings.fabric)
    try:
        anyio.run(serve_fabric, fabric, host or settings.server.transport_host, port or settings.server.transport_port)
    except KeyboardInterrupt:
        logger.info("Fabric daemon stopped")
