from pathlib import Path

import pytest

from src.backend.lib.bench import (
    BenchConfig,
    SyntheticSpec,
    cmd_build,
    cmd_cache_sweep,
    cmd_inspect_layout,
    cmd_insert,
    cmd_mixed,
    cmd_model,
    cmd_query,
    cmd_rebuild_demo,
    load_config,
    load_dataset,
    summarize_queries,
    write_csv,
)
from src.backend.lib.builder import MANIFEST_FILE
from src.backend.lib.exceptions import ContractViolationError
from src.backend.lib.vectors import save_xvecs
from src.backend.models import ElementKind
from src.backend.settings import Settings


@pytest.fixture
def settings() -> Settings:
    return Settings()


@pytest.fixture
def config(tmp_path: Path) -> BenchConfig:
    return BenchConfig(
        synthetic=SyntheticSpec(N=400, d=8, n_queries=20, n_inserts=40, components=8, separation=6.0, seed=1),
        P=4,
        R=2,
        k=5,
        M=8,
        e_build=40,
        e_sub=40,
        e_meta=8,
        partition_iters=5,
        batch_size=10,
        cache_ratios=[0.0, 0.5],
        insert_ratios=[0.0, 0.5],
        output_dir=str(tmp_path),
    )


def test_load_config(tmp_path: Path) -> None:
    assert load_config(None).P == 20
    path = tmp_path / "run.toml"
    path.write_text('P = 4\nmetric = "angular"\n\n[synthetic]\nN = 100\n')
    config = load_config(path)
    assert config.P == 4
    assert config.synthetic.N == 100
    assert config.synthetic.d == 32
    path.write_text('P = "many"\n')
    with pytest.raises(ContractViolationError):
        load_config(path)


def test_synthetic_dataset(config: BenchConfig) -> None:
    data = load_dataset(config)
    assert (data.base.count, data.queries.count, data.inserts.count) == (400, 20, 40)
    assert data.truth.shape == (20, 5)


def test_file_dataset_needs_queries(config: BenchConfig, tmp_path: Path) -> None:
    data = load_dataset(config)
    save_xvecs(data.base, tmp_path / "base.fvecs", ElementKind.F32)
    with pytest.raises(ContractViolationError):
        load_dataset(BenchConfig(base=str(tmp_path / "base.fvecs")))


def test_file_dataset_holds_out_inserts(config: BenchConfig, tmp_path: Path) -> None:
    data = load_dataset(config)
    save_xvecs(data.base, tmp_path / "base.fvecs", ElementKind.F32)
    save_xvecs(data.queries, tmp_path / "queries.fvecs", ElementKind.F32)
    save_xvecs(data.truth, tmp_path / "truth.ivecs", ElementKind.I32)
    files = BenchConfig(base=str(tmp_path / "base.fvecs"), queries=str(tmp_path / "queries.fvecs"), k=5)

    files.insert_holdout = 0.25
    split = load_dataset(files)
    assert (split.base.count, split.inserts.count) == (300, 100)
    assert split.truth is None
    assert (split.inserts.data == data.base.data[300:]).all()

    files.ground_truth = str(tmp_path / "truth.ivecs")
    split = load_dataset(files)
    assert split.truth.shape == (20, 5)
    assert split.truth.max() < 300

    files.inserts = str(tmp_path / "queries.fvecs")
    whole = load_dataset(files)
    assert (whole.base.count, whole.inserts.count) == (400, 20)
    assert (whole.truth == data.truth).all()

    files.inserts = None
    files.insert_holdout = 1.0
    with pytest.raises(ContractViolationError):
        load_dataset(files)


def test_build_saves_index(config: BenchConfig, settings: Settings, tmp_path: Path) -> None:
    _, row = cmd_build(config, settings)
    assert (tmp_path / "index" / MANIFEST_FILE).is_file()
    assert row.N == 400
    assert row.max_partition <= row.cap == 100
    assert row.region_bytes > 0


def test_query_rows(config: BenchConfig, settings: Settings) -> None:
    rows = cmd_query(config, settings)
    assert [r.batch for r in rows] == [0, 1]
    assert all(r.B == 10 for r in rows)
    assert all(r.recall_at_k is not None and r.recall_at_k > 0.5 for r in rows)
    assert all(r.latency == pytest.approx(r.t_meta + r.t_pipeline) for r in rows)
    assert all(r.deferred == 0 for r in rows)

    summary = summarize_queries(rows)
    assert len(summary) == 1
    assert (summary[0].queries, summary[0].batches) == (20, 2)
    assert summary[0].mean_latency == pytest.approx(sum(r.latency * r.B for r in rows) / 20)
    assert summary[0].p99_latency >= summary[0].mean_latency
    assert 0.5 < summary[0].mean_recall_at_k <= 1.0


def test_late_queries_are_served_once_in_a_later_batch(config: BenchConfig, settings: Settings) -> None:
    config.arrival_qps = 100.0
    config.slo_wait_ms = 5.0
    rows = cmd_query(config, settings)
    assert sum(r.B for r in rows) == 20
    assert len(rows) > 2
    assert any(r.deferred for r in rows)
    assert rows[-1].deferred == 0
    assert summarize_queries(rows)[0].mean_recall_at_k > 0.5


def test_cache_sweep(config: BenchConfig, settings: Settings) -> None:
    rows = cmd_cache_sweep(config, settings)
    assert [r.cache_ratio for r in rows] == [0.0, 0.0, 0.5, 0.5]
    assert all(r.cache_hits == 0 for r in rows[:2])
    assert [s.cache_ratio for s in summarize_queries(rows)] == [0.0, 0.5]


def test_insert_workload(config: BenchConfig, settings: Settings) -> None:
    row = cmd_insert(config, settings)
    assert row.inserted == 40
    assert row.committed + row.buffered + row.failed == 40
    assert row.failed == 0


def test_mixed_workload(config: BenchConfig, settings: Settings) -> None:
    rows = cmd_mixed(config, settings)
    assert [r.insert_ratio for r in rows] == [0.0, 0.5]
    assert rows[0].mean_insert_time == 0.0
    assert rows[1].mean_insert_time > 0.0


def test_rebuild_demo_switches_epochs(config: BenchConfig, settings: Settings) -> None:
    config.internal_gap_fraction = 0.0
    config.overflow_fraction = 0.01
    config.insert_pct = 50.0
    config.search_pct = 50.0
    config.max_steps = 12
    config.rebuild_window_ms = 0.0
    rows = cmd_rebuild_demo(config, settings)
    markers = {r.marker for r in rows}
    assert "switch_start" in markers
    assert max(r.epoch for r in rows) >= 1


@pytest.mark.slow
def test_model_grids(config: BenchConfig, settings: Settings) -> None:
    rows = cmd_model(config, settings)
    batch = [r for r in rows if r.kind == "batch"]
    cluster = [r for r in rows if r.kind == "cluster"]
    assert len(batch) == 6
    assert len(cluster) == 9
    assert all(r.predicted > 0 for r in batch)
    assert cluster[0].relative_error == pytest.approx(0.0, abs=1e-9)


def test_inspect_layout(config: BenchConfig, settings: Settings) -> None:
    report = cmd_inspect_layout(config, settings)
    assert len(report["groups"]) == 2


def test_write_csv(config: BenchConfig, settings: Settings, tmp_path: Path) -> None:
    _, row = cmd_build(config, settings, save=False)
    path = write_csv([row], tmp_path / "out" / "build.csv")
    header, values = path.read_text().splitlines()
    assert header.startswith("N,d,P,")
    assert values.startswith("400,8,4,")
    assert write_csv([], tmp_path / "empty.csv").read_text() == ""
