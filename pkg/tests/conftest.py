import copy
from pathlib import Path

import pytest

from geotrain.domain import reference_devices, validate_scenario

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"

# filled by test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


def raw_scenario(clouds, *, strategy=None, trainer=None, data=None, timing=None, wan=None, seed=11):
    """Minimal well-formed raw scenario dict around the reference device rows.

    ``clouds`` is a list of (cloud_id, dataset_size, [(device, units), ...]).
    """
    return {
        "schema_version": 1,
        "name": "test",
        "seed": seed,
        "devices": reference_devices(),
        "clouds": [
            {"id": cid, "dataset_size": size, "devices": [{"device": d, "max_units": n} for d, n in devs]}
            for cid, size, devs in clouds
        ],
        "wan": copy.deepcopy(wan) if wan else {"bandwidth_bps": 100e6, "latency_s": 0.02},
        "strategy": dict(strategy or {"kind": "asgd_ga", "sync_frequency": 4}),
        "trainer": dict(trainer or {"learning_rate": 0.5, "batch_size": 50, "epochs": 2}),
        "data": dict(data or {"kind": "blobs", "dims": 5, "margin": 0.5}),
        "timing": dict(timing or {"reference_dataset": 500}),
    }


def scenario(clouds, **kw):
    return validate_scenario(raw_scenario(clouds, **kw))


@pytest.fixture
def scenario_dir():
    return SCENARIO_DIR


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
