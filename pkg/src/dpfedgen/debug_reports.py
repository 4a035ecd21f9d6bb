"""
Debugging Reports
OOV statistics and top OOV word lists from generative LMs, user accuracy
histograms, generated image grids, and the writer that stamps every report
with the run manifest hash
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .datasets import Population, Vocabulary, oov_rate
from .exceptions import ReportError
from .models import ClassifierNet, RecurrentLm, lm_joint_prob, lm_sample_many
from .selection import user_accuracies

logger = logging.getLogger(__name__)

BRIGHT_PIXEL_THRESHOLD = 0.5
GRID_SEPARATOR = 255
MIN_POSITION_SHARE = 0.05


@dataclass(frozen=True)
class PositionalOovProfile:
    """
    Share of sampled tokens that are the OOV id, per sentence position.

    Positions holding fewer than `min_share` tokens per sample are too sparse
    to compare and are left out of every baseline.
    """
    fractions: Tuple[float, ...]
    token_counts: Tuple[int, ...]
    sample_count: int

    def supported_positions(self, min_share: float = MIN_POSITION_SHARE) -> List[int]:
        return [i for i, count in enumerate(self.token_counts)
                if count > 0 and count >= min_share * self.sample_count]

    def mean_fraction(self, positions: Optional[Sequence[int]] = None) -> float:
        """Token-weighted OOV share over `positions` (default: all supported ones)"""
        if positions is None:
            positions = self.supported_positions()
        tokens = sum(self.token_counts[i] for i in positions)
        if tokens == 0:
            return 0.0
        return sum(self.fractions[i] * self.token_counts[i] for i in positions) / tokens

    def _ratio(self, value: float, baseline: float) -> float:
        if baseline == 0.0:
            return float("inf") if value > 0 else 0.0
        return value / baseline

    def spike_ratio(self, position: int = 0, window: int = 9,
                    min_share: float = MIN_POSITION_SHARE) -> float:
        """Fraction at `position` over the token-weighted mean of the next `window` supported positions"""
        supported = set(self.supported_positions(min_share))
        following = [i for i in range(position + 1, min(position + 1 + window, len(self.fractions)))
                     if i in supported]
        return self._ratio(self.fractions[position], self.mean_fraction(following))

    def peak_ratios(self, min_share: float = MIN_POSITION_SHARE) -> Dict[int, float]:
        """Each supported position's fraction over the mean of the other supported positions"""
        supported = self.supported_positions(min_share)
        return {i: self._ratio(self.fractions[i], self.mean_fraction([j for j in supported if j != i]))
                for i in supported}

    def max_peak_ratio(self, min_share: float = MIN_POSITION_SHARE) -> float:
        ratios = self.peak_ratios(min_share)
        return max(ratios.values()) if ratios else 0.0

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame({"position": range(len(self.fractions)), "oov_fraction": self.fractions,
                             "tokens": self.token_counts})


@dataclass(frozen=True)
class OovWordList:
    """Generated words ranked by joint character probability"""
    entries: Tuple[Tuple[str, float], ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def words(self) -> List[str]:
        return [word for word, _ in self.entries]

    def count_with_space(self) -> int:
        return sum(1 for word in self.words if " " in word)

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame({"rank": range(1, len(self.entries) + 1), "word": self.words,
                             "joint_probability": [p for _, p in self.entries]})


@dataclass(frozen=True)
class AccuracyHistogram:
    """Users per accuracy bin over [0, 1]; bins are left-closed and the last bin is closed"""
    edges: Tuple[float, ...]
    counts: Tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def mass_below(self, value: float) -> int:
        return sum(c for c, right in zip(self.counts, self.edges[1:]) if right <= value)

    def share_below(self, value: float) -> float:
        return self.mass_below(value) / self.total if self.total else 0.0

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame({"bin_low": self.edges[:-1], "bin_high": self.edges[1:], "users": self.counts})


def oov_rate_by_position(word_lm: RecurrentLm, vocab: Vocabulary, num_samples: int, max_len: int,
                         seed: int) -> PositionalOovProfile:
    """
    Sample sentences from a word LM and measure the OOV share per position.

    The end marker is not a token, so a position's denominator counts only
    the words sampled there.
    """
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    if vocab.oov_id is None:
        raise ValueError("Positional OOV profile needs a vocabulary with an OOV id")
    oov_counts = np.zeros(max_len, dtype=np.int64)
    token_counts = np.zeros(max_len, dtype=np.int64)
    for sequence in lm_sample_many(word_lm, num_samples, seed, max_len):
        for position, token in enumerate(sequence):
            if token == vocab.eos_id:
                break
            token_counts[position] += 1
            oov_counts[position] += int(token == vocab.oov_id)
    fractions = np.divide(oov_counts, token_counts, out=np.zeros(max_len), where=token_counts > 0)
    return PositionalOovProfile(tuple(float(f) for f in fractions), tuple(int(c) for c in token_counts),
                                num_samples)


def top_oov_words(char_lm: RecurrentLm, k: int, num_samples: int, seed: int, max_len: int = 24) -> OovWordList:
    """
    Monte Carlo OOV words from a character LM, scored by joint probability.

    Samples that never reach the end marker are discarded; the rest are
    deduplicated and ranked by probability, ties broken alphabetically.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    vocab = char_lm.vocabulary
    unique: Dict[str, List[int]] = {}
    for sequence in lm_sample_many(char_lm, num_samples, seed, max_len):
        if not sequence or sequence[-1] != vocab.eos_id or len(sequence) == 1:
            continue
        word = "".join(vocab.decode(sequence[:-1]))
        unique.setdefault(word, sequence[:-1])
    scored = [(word, lm_joint_prob(char_lm, ids)) for word, ids in unique.items()]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return OovWordList(tuple(scored[:k]))


def histogram_from_accuracies(accuracies: Sequence[float], num_bins: int) -> AccuracyHistogram:
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    counts, edges = np.histogram(np.asarray(accuracies, dtype=np.float64), bins=num_bins, range=(0.0, 1.0))
    return AccuracyHistogram(tuple(float(e) for e in edges), tuple(int(c) for c in counts))


def accuracy_histogram(population: Population, classifier: ClassifierNet, num_bins: int) -> AccuracyHistogram:
    """Per-user accuracy histogram of a population under a classifier"""
    return histogram_from_accuracies(list(user_accuracies(classifier, population).values()), num_bins)


def overall_oov_rate(population: Population, vocab: Vocabulary) -> float:
    """OOV tokens over total tokens"""
    return oov_rate(population, vocab)


def polarity_stats(images: np.ndarray) -> Dict[str, float]:
    """Mean intensity and share of bright pixels of images in [0, 1]"""
    pixels = np.asarray(images, dtype=np.float64)
    return {"mean_intensity": float(pixels.mean()),
            "bright_fraction": float(np.mean(pixels > BRIGHT_PIXEL_THRESHOLD))}


def _as_square_uint8(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 2:
        side = int(round(np.sqrt(images.shape[1])))
        if side * side != images.shape[1]:
            raise ReportError(f"Cannot reshape {images.shape[1]} pixels into a square image")
        images = images.reshape(images.shape[0], side, side)
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ReportError(f"Expected (n, side, side) images, got {images.shape}")
    if images.dtype == np.uint8:
        return images
    return np.round(np.clip(images.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def render_grid(images: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Tile images into one 8-bit canvas with 1-pixel separators; empty cells stay black"""
    tiles = _as_square_uint8(images)
    if rows < 1 or cols < 1:
        raise ReportError(f"Grid must have positive rows and cols, got {rows}x{cols}")
    if rows * cols < len(tiles):
        raise ReportError(f"A {rows}x{cols} grid cannot hold {len(tiles)} images")
    side = tiles.shape[1] if len(tiles) else 1
    canvas = np.full((rows * side + rows - 1, cols * side + cols - 1), GRID_SEPARATOR, dtype=np.uint8)
    for index in range(rows * cols):
        r, c = divmod(index, cols)
        y, x = r * (side + 1), c * (side + 1)
        canvas[y:y + side, x:x + side] = tiles[index] if index < len(tiles) else 0
    return canvas


def emit_image_grid(images: np.ndarray, rows: int, cols: int, path: Union[str, Path],
                    comment: Optional[str] = None) -> Path:
    """
    Write a binary PGM (P5) grid of images.

    Args:
        images: (n, side, side) or (n, side*side) array, uint8 or floats in [0, 1]
        rows: Grid rows
        cols: Grid columns
        path: Output file
        comment: Optional single-line header comment, e.g. the manifest hash

    Returns:
        Path of the written file
    """
    canvas = render_grid(images, rows, cols)
    header = "P5\n"
    if comment:
        header += f"# {comment.splitlines()[0]}\n"
    header += f"{canvas.shape[1]} {canvas.shape[0]}\n255\n"
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(header.encode("ascii") + canvas.tobytes())
    except OSError as exc:
        raise ReportError(f"Cannot write image grid to {path}: {exc}") from exc
    return path


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read a P5 file written by emit_image_grid"""
    data = Path(path).read_bytes()
    lines = []
    offset = 0
    while len(lines) < 3:
        end = data.index(b"\n", offset)
        line = data[offset:end].decode("ascii")
        offset = end + 1
        if not line.startswith("#"):
            lines.append(line)
    if lines[0] != "P5":
        raise ReportError(f"{path} is not a binary PGM")
    width, height = (int(v) for v in lines[1].split())
    return np.frombuffer(data[offset:offset + width * height], dtype=np.uint8).reshape(height, width)


class DebugReportBuilder:
    """
    Writes report files for one run.

    File names start with the run id; CSVs open with a `# manifest_hash=`
    comment line and JSON documents carry a manifest_hash field.
    """

    def __init__(self, output_dir: Union[str, Path], run_id: str, manifest_hash: str):
        self.output_dir = Path(output_dir)
        self.run_id = run_id
        self.manifest_hash = manifest_hash
        self.logger = logging.getLogger(__name__)
        self.written: List[Path] = []

    def _path(self, name: str, suffix: str) -> Path:
        return self.output_dir / f"{self.run_id}_{name}.{suffix}"

    def _record(self, path: Path) -> Path:
        self.written.append(path)
        self.logger.info(f"Wrote report {path}")
        return path

    def write_table(self, name: str, frame: pd.DataFrame) -> Path:
        path = self._path(name, "csv")
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="") as f:
                f.write(f"# manifest_hash={self.manifest_hash}\n")
                frame.to_csv(f, index=False, float_format="%.10g", lineterminator="\n")
        except OSError as exc:
            raise ReportError(f"Cannot write report {path}: {exc}") from exc
        return self._record(path)

    def write_json(self, name: str, payload: Mapping[str, Any]) -> Path:
        path = self._path(name, "json")
        document = {"manifest_hash": self.manifest_hash, "run_id": self.run_id}
        document.update(payload)
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                json.dump(document, f, indent=2, sort_keys=True, default=json_serializer)
        except OSError as exc:
            raise ReportError(f"Cannot write report {path}: {exc}") from exc
        return self._record(path)

    def write_text(self, name: str, lines: Sequence[str]) -> Path:
        path = self._path(name, "txt")
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                f.write(f"# manifest_hash={self.manifest_hash}\n")
                for line in lines:
                    f.write(f"{line}\n")
        except OSError as exc:
            raise ReportError(f"Cannot write report {path}: {exc}") from exc
        return self._record(path)

    def write_grid(self, name: str, images: np.ndarray, rows: int, cols: int) -> Path:
        path = self._path(name, "pgm")
        return self._record(emit_image_grid(images, rows, cols, path, f"manifest_hash={self.manifest_hash}"))

    def write_profile(self, name: str, profile: PositionalOovProfile) -> Path:
        return self.write_table(name, profile.to_dataframe())

    def write_oov_list(self, name: str, words: OovWordList) -> Path:
        return self.write_table(name, words.to_dataframe())

    def write_histogram(self, name: str, histogram: AccuracyHistogram) -> Path:
        return self.write_table(name, histogram.to_dataframe())


def json_serializer(obj):
    """`default` hook for json.dump: numpy scalars and arrays, paths"""
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")
