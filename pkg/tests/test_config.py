"""
Tests for scenario validation, hashing and overrides
"""

import json

import pytest
from pydantic import ValidationError

from dpfedgen.config import (OUTPUT_DIR_ENV, DpBlock, ScenarioConfig, apply_overrides, build_dp_spec,
                             bundled_scenarios, load_bundled_scenario, load_scenario, parse_scenario,
                             resolve_scenario)
from dpfedgen.exceptions import ScenarioConfigError

BUNDLED = ["gan-by-example-50", "gan-by-example-no-bug", "gan-inversion-50", "gan-no-bug",
           "lm-clean", "lm-concat-1", "lm-concat-10", "lm-concat-100"]


class TestBundledScenarios:

    def test_listing(self):
        assert bundled_scenarios() == BUNDLED

    @pytest.mark.parametrize("name", BUNDLED)
    def test_all_load(self, name):
        config = load_bundled_scenario(name)
        assert config.name == name
        assert config.run_id == f"{name}-s{config.master_seed}"

    def test_unknown(self):
        with pytest.raises(ScenarioConfigError):
            load_bundled_scenario("no-such-scenario")


class TestManifestHash:

    def test_stable(self, tiny_gan_scenario):
        first = parse_scenario(tiny_gan_scenario)
        second = parse_scenario(json.loads(json.dumps(tiny_gan_scenario)))
        assert first.manifest_hash() == second.manifest_hash()
        assert len(first.manifest_hash()) == 64

    def test_output_dir_excluded(self, tiny_gan_scenario):
        moved = dict(tiny_gan_scenario, output_dir="/somewhere/else")
        assert parse_scenario(moved).manifest_hash() == parse_scenario(tiny_gan_scenario).manifest_hash()

    def test_seed_changes_hash(self, tiny_gan_scenario):
        reseeded = dict(tiny_gan_scenario, master_seed=2)
        assert parse_scenario(reseeded).manifest_hash() != parse_scenario(tiny_gan_scenario).manifest_hash()


class TestValidation:

    def test_extra_field(self, tiny_gan_scenario):
        tiny_gan_scenario["fed"]["dp"]["epsilon"] = 1.0
        with pytest.raises(ScenarioConfigError) as info:
            parse_scenario(tiny_gan_scenario)
        assert "fed.dp.epsilon" in str(info.value)

    def test_gan_needs_glyphs(self, tiny_gan_scenario):
        tiny_gan_scenario["dataset"]["kind"] = "text"
        with pytest.raises(ScenarioConfigError):
            parse_scenario(tiny_gan_scenario)

    def test_gan_needs_selection(self, tiny_gan_scenario):
        del tiny_gan_scenario["selection"]
        with pytest.raises(ScenarioConfigError):
            parse_scenario(tiny_gan_scenario)

    def test_lm_rejects_selection(self, tiny_lm_scenario):
        tiny_lm_scenario["selection"] = {"mode": "by-user"}
        with pytest.raises(ScenarioConfigError):
            parse_scenario(tiny_lm_scenario)

    def test_bug_must_match_task(self, tiny_lm_scenario):
        tiny_lm_scenario["bug"] = {"kind": "pixel-inversion", "fraction": 0.5}
        with pytest.raises(ScenarioConfigError):
            parse_scenario(tiny_lm_scenario)

    def test_cohort_larger_than_population(self, tiny_gan_scenario):
        tiny_gan_scenario["fed"]["dp"]["clients_per_round"] = 13
        with pytest.raises(ScenarioConfigError):
            parse_scenario(tiny_gan_scenario)

    def test_explicit_delta_needs_value(self, tiny_gan_scenario):
        tiny_gan_scenario["fed"]["dp"]["delta_preset"] = "explicit"
        with pytest.raises(ScenarioConfigError):
            parse_scenario(tiny_gan_scenario)

    def test_grid_too_small(self, tiny_gan_scenario):
        tiny_gan_scenario["report"]["grid_samples"] = 5
        with pytest.raises(ScenarioConfigError):
            parse_scenario(tiny_gan_scenario)

    @pytest.mark.parametrize("name", ["", "-leading-dash", "has space"])
    def test_bad_name(self, tiny_gan_scenario, name):
        tiny_gan_scenario["name"] = name
        with pytest.raises(ScenarioConfigError):
            parse_scenario(tiny_gan_scenario)

    def test_schema_version(self, tiny_gan_scenario):
        tiny_gan_scenario["schema_version"] = 2
        with pytest.raises(ScenarioConfigError):
            parse_scenario(tiny_gan_scenario)

    def test_frozen(self, tiny_gan_scenario):
        config = parse_scenario(tiny_gan_scenario)
        with pytest.raises(ValidationError):
            config.master_seed = 5

    def test_char_dp_defaults_to_dp(self, tiny_lm_scenario):
        config = parse_scenario(tiny_lm_scenario)
        assert config.char_dp == config.fed.dp


class TestFiles:

    def test_load_file(self, tiny_lm_scenario, tmp_path):
        path = tmp_path / "tiny.json"
        path.write_text(json.dumps(tiny_lm_scenario))
        assert load_scenario(path) == parse_scenario(tiny_lm_scenario)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioConfigError):
            load_scenario(tmp_path / "missing.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ScenarioConfigError):
            load_scenario(path)

    def test_not_an_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(ScenarioConfigError):
            load_scenario(path)

    def test_resolve(self, tiny_lm_scenario, tmp_path):
        assert resolve_scenario("lm-clean").name == "lm-clean"
        path = tmp_path / "tiny.json"
        path.write_text(json.dumps(tiny_lm_scenario))
        assert resolve_scenario(str(path)).name == "tiny-lm"
        with pytest.raises(ScenarioConfigError):
            resolve_scenario(str(tmp_path / "absent.json"))


class TestOverrides:

    @pytest.fixture
    def config(self, tiny_gan_scenario):
        return parse_scenario(tiny_gan_scenario)

    @pytest.fixture(autouse=True)
    def isolated_env(self, monkeypatch, tmp_path):
        monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
        monkeypatch.chdir(tmp_path)

    def test_env_variable(self, config, monkeypatch):
        monkeypatch.setenv(OUTPUT_DIR_ENV, "from-env")
        assert apply_overrides(config).output_dir == "from-env"

    def test_dotenv_file(self, config, tmp_path, monkeypatch):
        # registers the variable so the value loaded from .env is removed afterwards
        monkeypatch.setenv(OUTPUT_DIR_ENV, "placeholder")
        monkeypatch.delenv(OUTPUT_DIR_ENV)
        (tmp_path / ".env").write_text(f"{OUTPUT_DIR_ENV}=from-dotenv\n")
        assert apply_overrides(config).output_dir == "from-dotenv"

    def test_explicit_beats_env(self, config, monkeypatch):
        monkeypatch.setenv(OUTPUT_DIR_ENV, "from-env")
        assert apply_overrides(config, output_dir="explicit").output_dir == "explicit"

    def test_env_ignored(self, config, monkeypatch):
        monkeypatch.setenv(OUTPUT_DIR_ENV, "from-env")
        assert apply_overrides(config, use_env=False).output_dir == config.output_dir

    def test_seed_and_delta_preset(self, config):
        changed = apply_overrides(config, seed=9, delta_preset="inv-n", use_env=False)
        assert changed.master_seed == 9
        assert changed.fed.dp.delta_preset == "inv-n"
        assert changed.manifest_hash() != config.manifest_hash()

    def test_unknown_delta_preset(self, config):
        with pytest.raises(ScenarioConfigError):
            apply_overrides(config, delta_preset="tiny", use_env=False)


class TestDpBlock:

    def test_to_spec(self):
        spec = DpBlock(clip=0.1, noise_multiplier=1.0, clients_per_round=10, rounds=5).to_spec(200)
        assert spec.population == 200
        assert spec.delta == pytest.approx(1 / 200)
        assert spec.sampling_rate == pytest.approx(0.05)

    def test_invalid_spec_is_config_error(self):
        block = DpBlock(clip=0.1, noise_multiplier=1.0, clients_per_round=10, rounds=5)
        with pytest.raises(ScenarioConfigError):
            build_dp_spec(block, 5)

    def test_model_round_trip(self, tiny_gan_scenario):
        config = parse_scenario(tiny_gan_scenario)
        assert ScenarioConfig.model_validate(config.model_dump(mode="json")) == config
