"""
Run Directory Export
Manifest, per-round CSV stream, privacy summary and checkpoint layout of one
scenario run
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import pandas as pd

from .config import ScenarioConfig
from .debug_reports import json_serializer
from .dp_core import DpSpec, compute_privacy_spend
from .exceptions import ReportError
from .fed_sim import SimulationResult

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
ROUNDS_FILE = "rounds.csv"
PRIVACY_FILE = "privacy.csv"
REPORTS_DIR = "reports"
CHECKPOINTS_DIR = "checkpoints"
REGENERATED_DIR = "regenerated"
CSV_FLOAT_FORMAT = "%.10g"

ROUND_COLUMNS = ["model", "round", "cohort_size", "cohort", "mean_pre_clip_norm", "max_pre_clip_norm",
                 "clip_fraction", "sigma", "mean_loss", "gen_loss", "epsilon", "delta", "order"]
PRIVACY_COLUMNS = ["model", "scenario", "qN", "N", "q", "z", "S", "T", "delta", "epsilon", "order"]


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Byte-stable CSV: no index, fixed float format, LF line endings"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return path


def privacy_row(model: str, scenario: str, spec: DpSpec, refine: bool = True) -> Dict[str, Any]:
    spend = compute_privacy_spend(spec, refine=refine)
    return {"model": model, "scenario": scenario, "qN": spec.clients_per_round, "N": spec.population,
            "q": spec.sampling_rate, "z": spec.noise_multiplier, "S": spec.clip, "T": spec.rounds,
            "delta": spec.delta, "epsilon": spend.epsilon, "order": spend.order}


class RunDirectory:
    """
    Layout of `<output_dir>/<scenario>-s<seed>/`.

    Writers never touch files outside the run directory, and readers never
    modify it.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.logger = logging.getLogger(__name__)

    @classmethod
    def for_config(cls, config: ScenarioConfig) -> "RunDirectory":
        return cls(Path(config.output_dir) / config.run_id)

    @property
    def run_id(self) -> str:
        return self.root.name

    @property
    def reports_dir(self) -> Path:
        return self.root / REPORTS_DIR

    @property
    def checkpoints_dir(self) -> Path:
        return self.root / CHECKPOINTS_DIR

    def checkpoint_path(self, model: str) -> Path:
        return self.checkpoints_dir / f"{model}.json"

    def create(self) -> "RunDirectory":
        for directory in (self.root, self.reports_dir, self.checkpoints_dir):
            directory.mkdir(parents=True, exist_ok=True)
        return self

    def write_manifest(self, config: ScenarioConfig, details: Mapping[str, Any]) -> Path:
        manifest = {
            "run_id": config.run_id,
            "manifest_hash": config.manifest_hash(),
            "master_seed": config.master_seed,
            "scenario": config.model_dump(mode="json"),
            "created_at": datetime.now().isoformat(),
        }
        manifest.update(details)
        path = self.root / MANIFEST_FILE
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True, default=json_serializer)
        self.logger.info(f"Run manifest written to {path}")
        return path

    def read_manifest(self) -> Dict[str, Any]:
        path = self.root / MANIFEST_FILE
        if not path.exists():
            raise ReportError(f"{self.root} is not a completed run directory (no {MANIFEST_FILE})")
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)

    def write_rounds(self, results: Sequence[SimulationResult]) -> Path:
        frames = [r.to_dataframe() for r in results if r.reports]
        frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=ROUND_COLUMNS)
        return write_csv(frame[ROUND_COLUMNS], self.root / ROUNDS_FILE)

    def write_privacy(self, rows: Iterable[Mapping[str, Any]]) -> Path:
        frame = pd.DataFrame(list(rows), columns=PRIVACY_COLUMNS)
        return write_csv(frame, self.root / PRIVACY_FILE)

    def regenerated_dir(self, base: Optional[Union[str, Path]] = None) -> Path:
        """A fresh directory for regenerated reports; existing ones are never reused"""
        parent = Path(base) if base is not None else self.reports_dir / REGENERATED_DIR
        parent.mkdir(parents=True, exist_ok=True)
        index = 1
        while (parent / f"{index:03d}").exists():
            index += 1
        target = parent / f"{index:03d}"
        target.mkdir()
        return target

    def list_checkpoints(self) -> List[str]:
        if not self.checkpoints_dir.exists():
            return []
        return sorted(p.stem for p in self.checkpoints_dir.glob("*.json"))
