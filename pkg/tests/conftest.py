from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CONFIG = ROOT / "configs" / "default.json"

# Lines recorded by test_acceptance.py, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def record(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def default_config():
    from abra.bench.config import load_config

    return load_config(DEFAULT_CONFIG)


@pytest.fixture(scope="session")
def stage_root(tmp_path_factory):
    return str(tmp_path_factory.mktemp("stages"))


@pytest.fixture(scope="session")
def bench_run(default_config, stage_root):
    """The default benchmark, run once per session; returns (report, seconds)."""
    from abra.bench.pipeline import run_pipeline

    t0 = time.perf_counter()
    report = run_pipeline(default_config, jobs=1, store_root=stage_root)
    return report, time.perf_counter() - t0


@pytest.fixture(scope="session")
def fewshot_run(default_config, stage_root, bench_run):
    from abra.bench.pipeline import run_fewshot

    t0 = time.perf_counter()
    report = run_fewshot(default_config, jobs=1, store_root=stage_root)
    return report, time.perf_counter() - t0
