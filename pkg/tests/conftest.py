import os
import sys
from pathlib import Path

import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("cartseg", deadline=None, max_examples=50)
settings.load_profile("cartseg")

from cartseg.config import TrainConfig  # noqa: E402
from cartseg.phantom import Dataset, PhantomSpec, generate_case  # noqa: E402

SMALL_SPEC = PhantomSpec(dims=(32, 32, 32), jitter_voxels=0, seed=3)
TINY_ROIS = {"fc": (16, 8, 16), "tc": (16, 8, 16), "pc": (8, 8, 8)}


def tiny_config(**changes) -> TrainConfig:
    """Narrow networks on 32^3 phantoms: fast enough for exact-equality tests."""
    base = dict(
        epochs=2,
        roi_sizes=TINY_ROIS,
        coarse_levels=2,
        coarse_channels=2,
        agent_levels=1,
        agent_channels=2,
        agent_attention=(True,),
        disc_channels=2,
        disc_levels=2,
        deterministic=True,
    )
    base.update(changes)
    return TrainConfig(**base)


def small_dataset(count=3, splits=None) -> Dataset:
    cases = [generate_case(SMALL_SPEC, i) for i in range(count)]
    return Dataset.from_cases(cases, splits or ["train"] * count)


@pytest.fixture(autouse=True)
def _torch_state():
    threads = torch.get_num_threads()
    yield
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(False)


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture(scope="session")
def small_cases():
    return [generate_case(SMALL_SPEC, i) for i in range(3)]


CRITERIA: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA.append(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
