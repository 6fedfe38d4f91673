import logging

from click import Group
from litestar import Litestar
from litestar.plugins import CLIPluginProtocol

from src.backend.lib.builder import MANIFEST_FILE
from src.backend.lib.services import DhnswService
from src.backend.settings import get_settings

settings = get_settings()

logger = logging.getLogger(__name__)


# Index loaded at startup from the last `dhnsw build`
def load_service(app: Litestar) -> None:
    data_dir = settings.server.data_dir
    if app.state.get("dhnsw") is not None:
        return
    if not (data_dir / MANIFEST_FILE).is_file():
        logger.warning("No saved build in %s; search routes answer 503 until one exists", data_dir)
        return
    app.state.dhnsw = DhnswService.load(data_dir, settings)


# Benchmark commands under `litestar dhnsw ...`
class BenchCLIPlugin(CLIPluginProtocol):
    def on_cli_init(self, cli: Group) -> None:
        from src.backend.cli import bench_group

        cli.add_command(bench_group)


bench_cli_plugin = BenchCLIPlugin()
