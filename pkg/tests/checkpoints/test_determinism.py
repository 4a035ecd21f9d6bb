"""
Reruns with the same scenario and seed are byte-identical, whatever the
worker thread count
"""

import json
from importlib import resources

import pytest

from dpfedgen.config import parse_scenario
from dpfedgen.scenario_runner import cmd_run

pytestmark = pytest.mark.slow


def shortened(name, directory, rounds=30):
    data = json.loads((resources.files("dpfedgen") / "scenarios" / f"{name}.json").read_text())
    data["fed"]["dp"]["rounds"] = rounds
    data["output_dir"] = str(directory)
    return parse_scenario(data, name)


@pytest.mark.parametrize("threads", [1, 8])
def test_gan_rerun_is_identical(threads, tmp_path):
    first = cmd_run(shortened("gan-inversion-50", tmp_path / "first"), threads=1)
    second = cmd_run(shortened("gan-inversion-50", tmp_path / "second"), threads=threads)
    assert first.manifest_hash == second.manifest_hash
    for name in ("rounds.csv", "privacy.csv"):
        assert (first.run_dir / name).read_bytes() == (second.run_dir / name).read_bytes()
    grids = sorted((first.run_dir / "reports").glob("*.pgm"))
    assert grids
    for grid in grids:
        assert (second.run_dir / "reports" / grid.name).read_bytes() == grid.read_bytes()
