import numpy as np
import pytest

from groklab.config import RunConfig


def fast_config(**over) -> RunConfig:
    """The small mlp grokking setup used across the slow tests."""
    d = {
        "task": {"op_kind": "mod_add", "p": 31, "q": 31, "r": 0.5, "seed": 0},
        "model": {"arch": "mlp", "width": 64, "hidden": 128},
        "optimizer": {"algo": "adamw", "lr": 3e-3, "weight_decay": 1.0},
        "budget": 4000,
        "checkpoint_stride": 100,
    }
    for key, val in over.items():
        sect, _, name = key.partition("__")
        if name:
            d.setdefault(sect, {})[name] = val
        else:
            d[sect] = val
    return RunConfig.from_dict(d)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: list[str] = []


def record(criterion: int, ok: bool | None, detail: str) -> None:
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
    line = f"criterion {criterion:2d}: {status}  {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
