"""
Data Selection Criteria
Choose which users (or which of their examples) train an auxiliary generative
model, from a primary classifier's per-user accuracy
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .datasets import ClientDataset, Population
from .exceptions import DatasetError
from .models import ClassifierNet

logger = logging.getLogger(__name__)

BY_USER_MODES = ("low", "high")
BY_EXAMPLE_MODES = ("correct", "misclassified")


@dataclass(frozen=True)
class SelectionCriteria:
    """
    Declarative selection rule.

    by-user modes use (low_cut, high_cut); by-example modes use min_examples.
    """
    mode: str
    low_cut: float = 0.0
    high_cut: float = 1.0
    min_examples: int = 5
    classifier_id: str = ""

    def __post_init__(self):
        if self.mode not in BY_USER_MODES + BY_EXAMPLE_MODES:
            raise ValueError(f"Unknown selection mode '{self.mode}'")
        if not 0.0 <= self.low_cut <= self.high_cut <= 1.0:
            raise ValueError(f"Thresholds must satisfy 0 <= low_cut <= high_cut <= 1, "
                             f"got ({self.low_cut}, {self.high_cut})")
        if self.min_examples < 1:
            raise ValueError(f"min_examples must be >= 1, got {self.min_examples}")

    @property
    def by_user(self) -> bool:
        return self.mode in BY_USER_MODES

    def to_dict(self) -> Dict[str, Any]:
        return {"mode": self.mode, "low_cut": self.low_cut, "high_cut": self.high_cut,
                "min_examples": self.min_examples, "classifier_id": self.classifier_id}


@dataclass(frozen=True)
class Subpopulation:
    """Selected members, optional per-client example filters, and where they came from"""
    criteria: SelectionCriteria
    members: Tuple[int, ...]
    example_filters: Mapping[int, Tuple[int, ...]] = field(default_factory=dict)
    population_hash: str = ""

    @property
    def size(self) -> int:
        return len(self.members)

    def apply(self, population: Population) -> Population:
        """Materialize the subpopulation as a Population"""
        missing = set(self.members) - set(population.client_ids)
        if missing:
            raise DatasetError(f"Subpopulation members not in population: {sorted(missing)[:5]}")
        clients = []
        for client_id in self.members:
            client = population.get(client_id)
            if client_id in self.example_filters:
                client = client.subset(self.example_filters[client_id])
            clients.append(client)
        return population.with_clients(clients, selection=self.criteria.to_dict())

    def to_manifest(self) -> Dict[str, Any]:
        return {
            "criteria": self.criteria.to_dict(),
            "population_hash": self.population_hash,
            "N": self.size,
            "members": list(self.members),
            "example_filters": {str(k): list(v) for k, v in sorted(self.example_filters.items())},
        }

    def save_manifest(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_manifest(), f, indent=2)
        return path

    @classmethod
    def from_manifest(cls, data: Mapping[str, Any]) -> "Subpopulation":
        return cls(
            criteria=SelectionCriteria(**data["criteria"]),
            members=tuple(int(m) for m in data["members"]),
            example_filters={int(k): tuple(v) for k, v in data.get("example_filters", {}).items()},
            population_hash=data.get("population_hash", ""),
        )


def _correct_mask(classifier: ClassifierNet, client: ClientDataset) -> np.ndarray:
    if not client.is_image:
        raise DatasetError(f"Client {client.client_id} holds no images to classify")
    return classifier.predict(client.pixels) == client.labels


def user_accuracy(classifier: ClassifierNet, client: ClientDataset) -> float:
    """Share of the client's examples the classifier labels correctly"""
    if client.num_examples == 0:
        raise DatasetError(f"Client {client.client_id} has no examples")
    return float(np.mean(_correct_mask(classifier, client)))


def user_accuracies(classifier: ClassifierNet, population: Population) -> Dict[int, float]:
    return {client.client_id: user_accuracy(classifier, client) for client in population}


def nearest_rank_percentile(values: Sequence[float], percent: float) -> float:
    """
    Nearest-rank percentile: the value at 1-based rank ceil(P/100 * n).

    P = 0 returns the minimum.
    """
    if not values:
        raise ValueError("Percentile of an empty sequence")
    if not 0.0 <= percent <= 100.0:
        raise ValueError(f"Percentile must lie in [0, 100], got {percent}")
    ordered = sorted(values)
    # integer arithmetic keeps 25 * 100 / 100 from rounding to rank 26
    numerator = round(percent * 1_000_000) * len(ordered)
    rank = -(-numerator // 100_000_000)
    return float(ordered[max(rank, 1) - 1])


def calibrate_from_accuracies(accuracies: Sequence[float], low_percent: float = 25.0,
                              high_percent: float = 75.0) -> Tuple[float, float]:
    return (nearest_rank_percentile(accuracies, low_percent), nearest_rank_percentile(accuracies, high_percent))


def calibrate_thresholds(population: Population, classifier: ClassifierNet,
                         low_percent: float = 25.0, high_percent: float = 75.0) -> Tuple[float, float]:
    """
    25th/75th percentile cuts of per-user accuracy.

    Call on a clean population and reuse the result when bugs are present.
    """
    if len(population) == 0:
        raise DatasetError("Cannot calibrate thresholds on an empty population")
    cuts = calibrate_from_accuracies(list(user_accuracies(classifier, population).values()),
                                     low_percent, high_percent)
    logger.info(f"Calibrated accuracy thresholds: low={cuts[0]:.4f}, high={cuts[1]:.4f}")
    return cuts


def select_by_user(population: Population, classifier: ClassifierNet, mode: str,
                   thresholds: Tuple[float, float]) -> Subpopulation:
    """
    Users at or below low_cut ("low") or at or above high_cut ("high"), with
    all their examples.
    """
    low_cut, high_cut = thresholds
    criteria = SelectionCriteria(mode, low_cut, high_cut, classifier_id=classifier.fingerprint())
    if not criteria.by_user:
        raise ValueError(f"select_by_user needs mode 'low' or 'high', got '{mode}'")
    accuracies = user_accuracies(classifier, population)
    if mode == "low":
        members = tuple(c for c, a in accuracies.items() if a <= low_cut)
    else:
        members = tuple(c for c, a in accuracies.items() if a >= high_cut)
    if not members:
        logger.warning(f"Selection '{mode}' with thresholds ({low_cut:.4f}, {high_cut:.4f}) matched no users")
    else:
        logger.info(f"Selection '{mode}': {len(members)} of {len(population)} users")
    return Subpopulation(criteria, tuple(sorted(members)), {}, population.content_hash())


def select_by_example(population: Population, classifier: ClassifierNet, mode: str,
                      min_examples: int = 5) -> Subpopulation:
    """
    Keep each client's correctly classified (or misclassified) examples;
    clients left with fewer than min_examples are excluded.
    """
    criteria = SelectionCriteria(mode, min_examples=min_examples, classifier_id=classifier.fingerprint())
    if criteria.by_user:
        raise ValueError(f"select_by_example needs mode 'correct' or 'misclassified', got '{mode}'")
    members = []
    filters: Dict[int, Tuple[int, ...]] = {}
    excluded = 0
    for client in population:
        mask = _correct_mask(classifier, client)
        if mode == "misclassified":
            mask = ~mask
        kept = tuple(int(i) for i in np.flatnonzero(mask))
        if len(kept) >= min_examples:
            members.append(client.client_id)
            filters[client.client_id] = kept
        else:
            excluded += 1
    if not members:
        logger.warning(f"Selection '{mode}' (min_examples={min_examples}) matched no users")
    else:
        logger.info(f"Selection '{mode}': {len(members)} users kept, {excluded} below {min_examples} examples")
    return Subpopulation(criteria, tuple(members), filters, population.content_hash())


def select(population: Population, classifier: ClassifierNet, criteria: SelectionCriteria,
           thresholds: Optional[Tuple[float, float]] = None) -> Subpopulation:
    """Dispatch on criteria mode; by-user modes fall back to the criteria's own cuts"""
    if criteria.by_user:
        cuts = thresholds if thresholds is not None else (criteria.low_cut, criteria.high_cut)
        return select_by_user(population, classifier, criteria.mode, cuts)
    return select_by_example(population, classifier, criteria.mode, criteria.min_examples)
