import json

import pytest
import torch

from gserec.data import SynthConfig, generate_synthetic_dataset


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic_dataset(SynthConfig(users=40, items=120, clusters=3, seed=3))


_CRITERIA_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for the acceptance summary and return the verdict."""
    lines = request.config.stash.setdefault(_CRITERIA_KEY, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
