"""
End-to-end tests on tiny scenarios: run directories, determinism and report
regeneration
"""

import json

import numpy as np
import pandas as pd
import pytest

from dpfedgen.cli import EXIT_OK, main
from dpfedgen.config import apply_overrides, parse_scenario
from dpfedgen.debug_reports import read_pgm
from dpfedgen.exceptions import ReportError
from dpfedgen.run_export import (MANIFEST_FILE, PRIVACY_COLUMNS, PRIVACY_FILE, ROUND_COLUMNS, ROUNDS_FILE,
                                 RunDirectory)
from dpfedgen.scenario_runner import cmd_report, cmd_run


def run_tiny(scenario_factory, task, directory, threads=1, seed=None):
    config = apply_overrides(parse_scenario(scenario_factory(task)), output_dir=str(directory), seed=seed,
                             use_env=False)
    return cmd_run(config, threads=threads)


@pytest.fixture(scope="module")
def gan_run(scenario_factory, tmp_path_factory):
    return run_tiny(scenario_factory, "gan", tmp_path_factory.mktemp("gan"))


@pytest.fixture(scope="module")
def lm_run(scenario_factory, tmp_path_factory):
    return run_tiny(scenario_factory, "lm", tmp_path_factory.mktemp("lm"))


class TestGanRun:

    def test_layout(self, gan_run):
        root = gan_run.run_dir
        assert root.name == "tiny-gan-s1"
        assert (root / MANIFEST_FILE).exists()
        assert (root / "checkpoints" / "classifier.json").exists()
        assert (root / "reports" / "tiny-gan-s1_histogram-clean.csv").exists()

    def test_manifest(self, gan_run):
        manifest = json.loads((gan_run.run_dir / MANIFEST_FILE).read_text())
        assert manifest["manifest_hash"] == gan_run.manifest_hash
        assert set(manifest["subpopulations"]) == {"low", "high"}
        low, high = manifest["thresholds"]["low_cut"], manifest["thresholds"]["high_cut"]
        assert 0.0 <= low <= high <= 1.0
        assert parse_scenario(manifest["scenario"]).manifest_hash() == gan_run.manifest_hash

    def test_privacy_rows(self, gan_run):
        privacy = pd.read_csv(gan_run.run_dir / PRIVACY_FILE)
        assert list(privacy.columns) == PRIVACY_COLUMNS
        assert set(privacy["scenario"]) <= {"simulation", "realistic"}
        realistic = privacy[privacy["scenario"] == "realistic"]
        assert (realistic["qN"] == 1000).all()

    def test_rounds(self, gan_run):
        rounds = pd.read_csv(gan_run.run_dir / ROUNDS_FILE)
        assert list(rounds.columns) == ROUND_COLUMNS
        for result in gan_run.results:
            assert len(rounds[rounds["model"] == result.model]) == 2

    def test_sample_grids(self, gan_run):
        for result in gan_run.results:
            grid = gan_run.run_dir / "reports" / f"tiny-gan-s1_{result.model}-samples.pgm"
            assert read_pgm(grid).shape == (17, 17)

    def test_regenerate_image_grid(self, gan_run):
        before = sorted(p.name for p in (gan_run.run_dir / "reports").iterdir())
        written = cmd_report(gan_run.run_dir, "image-grid")
        assert written and all(p.parent.name == "001" for p in written)
        after = sorted(p.name for p in (gan_run.run_dir / "reports").iterdir())
        assert set(after) - set(before) <= {"regenerated"}

    def test_regenerate_histogram(self, gan_run, tmp_path):
        written = cmd_report(gan_run.run_dir, "histogram", out=tmp_path)
        original = (gan_run.run_dir / "reports" / "tiny-gan-s1_histogram-clean.csv").read_text()
        regenerated = [p for p in written if p.name.endswith("histogram-clean.csv")][0]
        assert regenerated.read_text() == original

    def test_lm_report_on_gan_run(self, gan_run):
        with pytest.raises(ReportError):
            cmd_report(gan_run.run_dir, "top-oov")


class TestLmRun:

    def test_reports(self, lm_run):
        reports = lm_run.run_dir / "reports"
        for name in ("oov-rates.csv", "oov-profile.csv", "top-oov.csv", "samples.txt", "summary.json"):
            assert (reports / f"tiny-lm-s1_{name}").exists()
        assert [r.model for r in lm_run.results] == ["word-lm", "char-lm"]

    def test_oov_rates_grow_with_bug(self, lm_run):
        rates = pd.read_csv(lm_run.run_dir / "reports" / "tiny-lm-s1_oov-rates.csv", comment="#")
        assert list(rates["fraction"]) == [0.0, 0.01, 0.1, 0.5, 1.0]
        assert rates["oov_rate"].iloc[-1] > rates["oov_rate"].iloc[0]

    def test_regenerate_profile_matches(self, lm_run, tmp_path):
        written = cmd_report(lm_run.run_dir, "oov-profile", out=tmp_path)
        original = (lm_run.run_dir / "reports" / "tiny-lm-s1_oov-profile.csv").read_text()
        assert written[0].read_text() == original

    def test_unknown_report_kind(self, lm_run):
        with pytest.raises(ReportError):
            cmd_report(lm_run.run_dir, "heatmap")


class TestDeterminism:

    def test_same_seed_same_outputs(self, scenario_factory, lm_run, tmp_path):
        again = run_tiny(scenario_factory, "lm", tmp_path, threads=2)
        for name in (ROUNDS_FILE, PRIVACY_FILE):
            assert (again.run_dir / name).read_bytes() == (lm_run.run_dir / name).read_bytes()
        for path in (lm_run.run_dir / "checkpoints").iterdir():
            assert (again.run_dir / "checkpoints" / path.name).read_bytes() == path.read_bytes()

    def test_cli_run(self, scenario_factory, tmp_path, capsys):
        scenario = tmp_path / "tiny.json"
        scenario.write_text(json.dumps(scenario_factory("lm")))
        out = tmp_path / "runs"
        assert main(["run", "--scenario", str(scenario), "--out", str(out), "--seed", "4"]) == EXIT_OK
        assert capsys.readouterr().out.strip() == str(out / "tiny-lm-s4")
        assert main(["report", str(out / "tiny-lm-s4"), "--kind", "samples", "--samples", "3"]) == EXIT_OK


class TestRunDirectory:

    def test_manifest_accepts_numpy_details(self, scenario_factory, tmp_path):
        config = parse_scenario(scenario_factory("gan"))
        run_dir = RunDirectory(tmp_path / config.run_id).create()
        run_dir.write_manifest(config, {"users": np.int64(12), "cuts": np.array([0.25, 0.75]), "root": tmp_path})
        manifest = run_dir.read_manifest()
        assert manifest["users"] == 12
        assert manifest["cuts"] == [0.25, 0.75]
        assert manifest["root"] == str(tmp_path)
        assert manifest["manifest_hash"] == config.manifest_hash()
