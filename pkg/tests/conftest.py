import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from fuelwatch.ingest import FleetConfig, build_dataset, generate_synthetic_fleet, split_stratified  # noqa: E402
from fuelwatch.models import ModelSpec, fit_pipeline  # noqa: E402
from fuelwatch.resample import ResampleConfig  # noqa: E402


@pytest.fixture(scope="session")
def fleet():
    ds, _ = build_dataset(generate_synthetic_fleet(FleetConfig()))
    return ds


@pytest.fixture(scope="session")
def fleet_split(fleet):
    return split_stratified(fleet)


@pytest.fixture(scope="session")
def reference_gbdt(fleet_split):
    train, _ = fleet_split
    return fit_pipeline(train, ModelSpec("GBDT"), ResampleConfig())


@pytest.fixture(scope="session")
def reference_gbdt_file(reference_gbdt, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "gbdt.json"
    reference_gbdt.save(path)
    return path


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(results):
            terminalreporter.write_line(line)
