"""
Scenario Configuration
Pydantic schema for scenario files, bundled scenario lookup and environment
overrides
"""

import hashlib
import json
import logging
import os
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .dp_core import DELTA_PRESETS, DpSpec, preset_delta
from .exceptions import PrivacyParameterError, ScenarioConfigError

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "DPFEDGEN_OUTPUT_DIR"
SCENARIO_PACKAGE = "dpfedgen"
SCENARIO_DIR = "scenarios"


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetBlock(_Block):
    """Synthetic population to generate"""
    kind: Literal["glyphs", "text"]
    num_users: int = Field(ge=1)
    seed: int = Field(default=0, ge=0)
    examples_per_user: Tuple[int, int] = (20, 40)
    num_classes: int = Field(default=4, ge=2)
    image_side: int = Field(default=8, ge=8)
    classifier_train_users: int = Field(default=200, ge=1)
    sentences_per_user: Tuple[int, int] = (20, 40)
    vocab_size: Optional[int] = Field(default=None, ge=1)
    target_oov_rate: float = Field(default=0.04, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "DatasetBlock":
        for name in ("examples_per_user", "sentences_per_user"):
            low, high = getattr(self, name)
            if not 1 <= low <= high:
                raise ValueError(f"{name} must satisfy 1 <= min <= max, got {(low, high)}")
        return self


class BugBlock(_Block):
    kind: Literal["pixel-inversion", "token-concatenation"]
    fraction: float = Field(ge=0.0, le=1.0)
    seed: int = Field(default=0, ge=0)


class ModelBlock(_Block):
    """Architecture descriptors and classifier pre-training settings"""
    noise_dim: int = Field(default=128, ge=1)
    generator_hidden: List[int] = [64]
    discriminator_hidden: List[int] = [64, 32]
    discriminator_slope: float = Field(default=0.2, ge=0.0, lt=1.0)
    classifier_hidden: List[int] = [64]
    classifier_epochs: int = Field(default=30, ge=1)
    classifier_lr: float = Field(default=0.1, gt=0.0)
    classifier_batch_size: int = Field(default=32, ge=1)
    lm_embedding_dim: int = Field(default=16, ge=1)
    lm_hidden_dim: int = Field(default=32, ge=1)
    lm_layers: int = Field(default=1, ge=1)
    char_embedding_dim: int = Field(default=16, ge=1)
    char_hidden_dim: int = Field(default=32, ge=1)


class DpBlock(_Block):
    """
    Privacy hyperparameters. `population` is filled in from the training
    population at run time, and delta follows `delta_preset` unless explicit.
    """
    clip: float = Field(gt=0.0)
    noise_multiplier: float = Field(ge=0.0)
    clients_per_round: int = Field(ge=1)
    rounds: int = Field(ge=1)
    delta: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    delta_preset: Literal["inv-n", "inv-100n", "explicit"] = "inv-n"

    @model_validator(mode="after")
    def _check_delta(self) -> "DpBlock":
        if self.delta_preset == "explicit" and self.delta is None:
            raise ValueError("delta_preset 'explicit' needs a delta value")
        return self

    def to_spec(self, population: int) -> DpSpec:
        delta = preset_delta(population, self.delta_preset, self.delta)
        return DpSpec(self.clip, self.noise_multiplier, self.clients_per_round, population, self.rounds, delta)


class FedBlock(_Block):
    """Local, server and privacy settings; char_* apply to the char-LM of LM scenarios"""
    dp: DpBlock
    local_epochs: int = Field(default=1, ge=1)
    local_batch_size: int = Field(default=8, ge=1)
    local_lr: float = Field(default=0.5, ge=0.0)
    gan_steps: int = Field(default=6, ge=0)
    gan_batch_size: int = Field(default=32, ge=1)
    disc_lr: float = Field(default=0.0005, ge=0.0)
    gen_lr: float = Field(default=0.005, ge=0.0)
    gp_weight: float = Field(default=10.0, ge=0.0)
    server_lr: float = Field(default=1.0, ge=0.0)
    server_momentum: float = Field(default=0.0, ge=0.0, lt=1.0)
    disc_rounds_per_gen_update: int = Field(default=1, ge=1)
    log_every: int = Field(default=10, ge=1)
    char_dp: Optional[DpBlock] = None
    char_local_lr: Optional[float] = Field(default=None, ge=0.0)


class SelectionBlock(_Block):
    """by-user trains a low and a high accuracy GAN; by-example a misclassified and a correct one"""
    mode: Literal["by-user", "by-example"]
    min_examples: int = Field(default=5, ge=1)
    low_percent: float = Field(default=25.0, ge=0.0, le=100.0)
    high_percent: float = Field(default=75.0, ge=0.0, le=100.0)

    @property
    def subpopulation_modes(self) -> Tuple[str, str]:
        return ("low", "high") if self.mode == "by-user" else ("misclassified", "correct")


class ReportBlock(_Block):
    grid_rows: int = Field(default=8, ge=1)
    grid_cols: int = Field(default=8, ge=1)
    grid_samples: int = Field(default=64, ge=1)
    histogram_bins: int = Field(default=20, ge=1)
    oov_samples: int = Field(default=10000, ge=1)
    oov_max_len: int = Field(default=10, ge=2)
    top_k: int = Field(default=10, ge=1)
    char_samples: int = Field(default=2000, ge=1)
    char_max_len: int = Field(default=24, ge=2)
    phrase_samples: int = Field(default=20, ge=0)
    sample_seed: int = Field(default=0, ge=0)
    project_population: int = Field(default=2_000_000, ge=1)
    project_clients_per_round: int = Field(default=1000, ge=1)

    @model_validator(mode="after")
    def _check_grid(self) -> "ReportBlock":
        if self.grid_rows * self.grid_cols < self.grid_samples:
            raise ValueError(f"A {self.grid_rows}x{self.grid_cols} grid cannot hold {self.grid_samples} samples")
        return self


class ScenarioConfig(_Block):
    """One reproducible experiment"""
    schema_version: Literal[1]
    name: str = Field(pattern=r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")
    task: Literal["gan", "lm"]
    master_seed: int = Field(default=0, ge=0, lt=2 ** 64)
    output_dir: str = "runs"
    dataset: DatasetBlock
    bug: Optional[BugBlock] = None
    model: ModelBlock = ModelBlock()
    fed: FedBlock
    selection: Optional[SelectionBlock] = None
    report: ReportBlock = ReportBlock()

    @model_validator(mode="after")
    def _check_consistency(self) -> "ScenarioConfig":
        if self.task == "gan":
            if self.dataset.kind != "glyphs":
                raise ValueError("GAN scenarios need a glyphs dataset")
            if self.selection is None:
                raise ValueError("GAN scenarios need a selection block")
            if self.bug is not None and self.bug.kind != "pixel-inversion":
                raise ValueError("GAN scenarios only support the pixel-inversion bug")
        else:
            if self.dataset.kind != "text":
                raise ValueError("LM scenarios need a text dataset")
            if self.selection is not None:
                raise ValueError("Selection criteria apply to GAN scenarios only")
            if self.bug is not None and self.bug.kind != "token-concatenation":
                raise ValueError("LM scenarios only support the token-concatenation bug")
        if self.fed.dp.clients_per_round > self.dataset.num_users:
            raise ValueError(f"clients_per_round {self.fed.dp.clients_per_round} exceeds "
                             f"num_users {self.dataset.num_users}")
        return self

    @property
    def char_dp(self) -> DpBlock:
        return self.fed.char_dp if self.fed.char_dp is not None else self.fed.dp

    def canonical_json(self) -> str:
        """Sorted-key JSON of every setting that affects results"""
        return json.dumps(self.model_dump(mode="json", exclude={"output_dir"}), sort_keys=True,
                          separators=(",", ":"))

    def manifest_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    @property
    def run_id(self) -> str:
        return f"{self.name}-s{self.master_seed}"


def _format_validation_error(error: ValidationError) -> str:
    problems = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        problems.append(f"{location}: {item['msg']}")
    return "; ".join(problems)


def parse_scenario(data: Dict[str, Any], source: str = "<scenario>") -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ScenarioConfigError(f"Invalid scenario {source}: {_format_validation_error(exc)}") from exc


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    """Read and validate a scenario JSON file"""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as exc:
        raise ScenarioConfigError(f"Scenario file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioConfigError(f"Scenario file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioConfigError(f"Scenario file {path} must hold a JSON object")
    return parse_scenario(data, str(path))


def bundled_scenarios() -> List[str]:
    """Names of the scenarios shipped with the package"""
    directory = resources.files(SCENARIO_PACKAGE) / SCENARIO_DIR
    return sorted(entry.name[:-5] for entry in directory.iterdir() if entry.name.endswith(".json"))


def load_bundled_scenario(name: str) -> ScenarioConfig:
    resource = resources.files(SCENARIO_PACKAGE) / SCENARIO_DIR / f"{name}.json"
    if not resource.is_file():
        raise ScenarioConfigError(f"Unknown bundled scenario '{name}'; available: {', '.join(bundled_scenarios())}")
    try:
        data = json.loads(resource.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioConfigError(f"Bundled scenario '{name}' is not valid JSON: {exc}") from exc
    return parse_scenario(data, name)


def resolve_scenario(reference: Union[str, Path]) -> ScenarioConfig:
    """A scenario file path, or the name of a bundled scenario"""
    path = Path(reference)
    if path.suffix == ".json" or path.exists():
        return load_scenario(path)
    return load_bundled_scenario(str(reference))


def apply_overrides(config: ScenarioConfig, output_dir: Optional[str] = None, seed: Optional[int] = None,
                    delta_preset: Optional[str] = None, use_env: bool = True) -> ScenarioConfig:
    """
    Apply command-line overrides and the output directory environment variable.

    Precedence for the output directory: explicit argument, then
    DPFEDGEN_OUTPUT_DIR (also read from a .env file), then the scenario value.
    The result is validated again.
    """
    data = config.model_dump(mode="json")
    if use_env:
        load_dotenv(find_dotenv(usecwd=True))
        env_dir = os.getenv(OUTPUT_DIR_ENV)
        if env_dir:
            data["output_dir"] = env_dir
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    if seed is not None:
        data["master_seed"] = seed
    if delta_preset is not None:
        if delta_preset not in DELTA_PRESETS:
            raise ScenarioConfigError(f"Unknown delta preset '{delta_preset}'")
        data["fed"]["dp"]["delta_preset"] = delta_preset
        if data["fed"].get("char_dp"):
            data["fed"]["char_dp"]["delta_preset"] = delta_preset
    return parse_scenario(data, config.name)


def build_dp_spec(block: DpBlock, population: int) -> DpSpec:
    """DpSpec for a training population, wrapping accountant errors as config errors"""
    try:
        return block.to_spec(population)
    except PrivacyParameterError as exc:
        raise ScenarioConfigError(f"Invalid privacy parameters: {exc}") from exc
