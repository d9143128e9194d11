import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from ocreid.data import SyntheticSpec, generate_synthetic_dataset, load_dataset  # noqa: E402
from ocreid.occlusion import OcclusionConfig, build_occluded_dataset  # noqa: E402
from ocreid.training import evaluate, toy_config, train  # noqa: E402

SMOKE_SPEC = SyntheticSpec(num_ids=8, clothes_per_id=2, images_per_clothes=10)


@pytest.fixture(autouse=True)
def _seed():
    np.random.seed(0)
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    generate_synthetic_dataset(SMOKE_SPEC, seed=1, out_root=root)
    return root


@pytest.fixture(scope="session")
def occluded_root(synthetic_root, tmp_path_factory):
    dst = tmp_path_factory.mktemp("occluded")
    build_occluded_dataset(load_dataset(synthetic_root, "synthetic"), synthetic_root, dst, OcclusionConfig(seed=42))
    return dst


@pytest.fixture(scope="session")
def smoke_run(occluded_root, tmp_path_factory):
    """Toy-profile training on the occluded synthetic set, evaluated under ltcc_cc at lambda=0.35."""
    run_dir = tmp_path_factory.mktemp("smoke_run")
    cfg = toy_config(dataset_root=str(occluded_root))
    start = time.perf_counter()
    train(cfg, run_dir=run_dir)
    seconds = time.perf_counter() - start
    report = evaluate(run_dir / "checkpoint.npz", "ltcc_cc", 0.35)
    return {"cfg": cfg, "run_dir": run_dir, "seconds": seconds, "report": report}


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def check(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
