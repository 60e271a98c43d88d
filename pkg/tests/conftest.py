import sys
import time
from pathlib import Path
from types import SimpleNamespace

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from honeymark.config import ExperimentConfig  # noqa: E402
from honeymark.pipeline import run_experiment  # noqa: E402


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One full run of the default desk experiment, shared by the slow tests."""
    out = tmp_path_factory.mktemp("desk")
    cfg = ExperimentConfig.from_dict({}, base_dir=out, output_dir=out / "run")
    start = time.perf_counter()
    run_experiment(cfg)
    return SimpleNamespace(cfg=cfg, elapsed=time.perf_counter() - start)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
