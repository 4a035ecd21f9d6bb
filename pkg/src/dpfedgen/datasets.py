"""
Synthetic Federated Datasets
Per-writer glyph images and per-user text corpora, plus the pixel-inversion
and token-concatenation bug injectors used in debugging scenarios
"""

import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .exceptions import DatasetError
from .seeding import make_rng

logger = logging.getLogger(__name__)

OOV_MARKER = "<unk>"
EOS_MARKER = "</s>"
BOS_MARKER = "<s>"
CHARACTER_ALPHABET = "abcdefghijklmnopqrstuvwxyz "

Sentence = Tuple[str, ...]


@dataclass(frozen=True)
class Vocabulary:
    """
    Fixed token vocabulary.

    Ids run over the content tokens first, then the OOV id (when present),
    then the end marker and finally the start marker. The start marker is an
    input-only id, so models emit ids in [0, output_size).
    """
    tokens: Tuple[str, ...]
    with_oov: bool = True
    character_level: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(set(self.tokens)) != len(self.tokens):
            raise DatasetError("Vocabulary tokens must be unique")
        for token in self.tokens:
            if not token:
                raise DatasetError("Vocabulary tokens must be nonempty")
            if not self.character_level and " " in token:
                raise DatasetError(f"Word vocabulary tokens cannot contain spaces: '{token}'")
            if self.character_level and len(token) != 1:
                raise DatasetError(f"Character vocabulary tokens must be single characters: '{token}'")

    @classmethod
    def characters(cls, alphabet: str = CHARACTER_ALPHABET) -> "Vocabulary":
        return cls(tuple(alphabet), with_oov=False, character_level=True)

    @cached_property
    def _index(self) -> Dict[str, int]:
        return {token: i for i, token in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def oov_id(self) -> Optional[int]:
        return len(self.tokens) if self.with_oov else None

    @property
    def eos_id(self) -> int:
        return len(self.tokens) + (1 if self.with_oov else 0)

    @property
    def bos_id(self) -> int:
        return self.eos_id + 1

    @property
    def output_size(self) -> int:
        """Ids a model can emit: content tokens, OOV and end marker"""
        return self.bos_id

    @property
    def input_size(self) -> int:
        return self.bos_id + 1

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def encode(self, tokens: Sequence[str]) -> List[int]:
        ids = []
        for token in tokens:
            if token in self._index:
                ids.append(self._index[token])
            elif self.with_oov:
                ids.append(self.oov_id)
            else:
                raise DatasetError(f"Token '{token}' is outside a vocabulary without OOV id")
        return ids

    def decode(self, ids: Sequence[int]) -> List[str]:
        words = []
        for token_id in ids:
            token_id = int(token_id)
            if 0 <= token_id < len(self.tokens):
                words.append(self.tokens[token_id])
            elif token_id == self.oov_id:
                words.append(OOV_MARKER)
            elif token_id == self.eos_id:
                words.append(EOS_MARKER)
            elif token_id == self.bos_id:
                words.append(BOS_MARKER)
            else:
                raise DatasetError(f"Token id {token_id} is outside the vocabulary")
        return words

    def to_dict(self) -> Dict[str, Any]:
        return {"tokens": list(self.tokens), "with_oov": self.with_oov,
                "character_level": self.character_level}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Vocabulary":
        return cls(tuple(data["tokens"]), bool(data["with_oov"]), bool(data["character_level"]))


@dataclass(frozen=True)
class WriterStyle:
    """Handwriting properties shared by every image of one writer"""
    thickness: float
    slant: float
    scale: float
    shift_x: float
    shift_y: float
    noise: float
    jitter_seed: int


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """One user's examples: glyph images with labels, or token sentences"""
    client_id: int
    images: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    sentences: Optional[Tuple[Sentence, ...]] = None
    style: Optional[WriterStyle] = None

    def __post_init__(self):
        if self.client_id < 0:
            raise DatasetError(f"Client ids must be nonnegative, got {self.client_id}")
        if (self.images is None) == (self.sentences is None):
            raise DatasetError(f"Client {self.client_id} must hold either images or sentences")
        if self.images is not None:
            images = np.array(self.images, dtype=np.uint8, copy=True)
            labels = np.array(self.labels if self.labels is not None else [], dtype=np.int64, copy=True)
            if images.ndim != 3 or images.shape[1] != images.shape[2]:
                raise DatasetError(f"Client {self.client_id} images must be (n, side, side), got {images.shape}")
            if labels.shape != (images.shape[0],):
                raise DatasetError(f"Client {self.client_id} has {images.shape[0]} images but {labels.size} labels")
            images.setflags(write=False)
            labels.setflags(write=False)
            object.__setattr__(self, "images", images)
            object.__setattr__(self, "labels", labels)
        else:
            object.__setattr__(self, "sentences", tuple(tuple(s) for s in self.sentences))

    @property
    def is_image(self) -> bool:
        return self.images is not None

    @property
    def num_examples(self) -> int:
        return int(self.images.shape[0]) if self.is_image else len(self.sentences)

    @property
    def pixels(self) -> np.ndarray:
        """Flattened images mapped to [0, 1]"""
        return self.images.reshape(self.images.shape[0], -1).astype(np.float64) / 255.0

    def subset(self, indices: Sequence[int]) -> "ClientDataset":
        indices = list(indices)
        if self.is_image:
            return replace(self, images=self.images[indices], labels=self.labels[indices])
        return replace(self, sentences=tuple(self.sentences[i] for i in indices))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClientDataset):
            return NotImplemented
        if self.client_id != other.client_id or self.style != other.style:
            return False
        if self.is_image != other.is_image:
            return False
        if self.is_image:
            return np.array_equal(self.images, other.images) and np.array_equal(self.labels, other.labels)
        return self.sentences == other.sentences

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Population:
    """Immutable set of clients ordered by client id"""
    kind: str
    clients: Tuple[ClientDataset, ...]
    image_side: Optional[int] = None
    num_classes: Optional[int] = None
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("images", "text", "characters"):
            raise DatasetError(f"Unknown population kind '{self.kind}'")
        clients = tuple(sorted(self.clients, key=lambda c: c.client_id))
        ids = [c.client_id for c in clients]
        if len(set(ids)) != len(ids):
            raise DatasetError("Client ids must be unique within a population")
        for client in clients:
            if client.is_image != (self.kind == "images"):
                raise DatasetError(f"Client {client.client_id} does not match population kind '{self.kind}'")
        object.__setattr__(self, "clients", clients)
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __len__(self) -> int:
        return len(self.clients)

    def __iter__(self) -> Iterator[ClientDataset]:
        return iter(self.clients)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Population):
            return NotImplemented
        return (self.kind == other.kind and self.image_side == other.image_side
                and self.num_classes == other.num_classes and self.clients == other.clients)

    __hash__ = None

    @property
    def client_ids(self) -> List[int]:
        return [c.client_id for c in self.clients]

    @cached_property
    def _by_id(self) -> Dict[int, ClientDataset]:
        return {c.client_id: c for c in self.clients}

    def get(self, client_id: int) -> ClientDataset:
        if client_id not in self._by_id:
            raise KeyError(f"Client {client_id} is not in the population")
        return self._by_id[client_id]

    def with_clients(self, clients: Sequence[ClientDataset], **metadata: Any) -> "Population":
        merged = dict(self.metadata)
        merged.update(metadata)
        return Population(self.kind, tuple(clients), self.image_side, self.num_classes, merged)

    def sentences(self) -> Iterator[Sentence]:
        for client in self.clients:
            yield from client.sentences

    @property
    def total_examples(self) -> int:
        return sum(c.num_examples for c in self.clients)

    def content_hash(self) -> str:
        """SHA-256 over kind, dimensions and every client's examples (metadata excluded)"""
        digest = hashlib.sha256()
        digest.update(f"{self.kind}|{self.image_side}|{self.num_classes}".encode("utf-8"))
        for client in self.clients:
            digest.update(f"#{client.client_id}".encode("utf-8"))
            if client.is_image:
                digest.update(client.images.tobytes())
                digest.update(client.labels.astype("<i8").tobytes())
            else:
                for sentence in client.sentences:
                    digest.update("\x1f".join(sentence).encode("utf-8") + b"\x1e")
        return digest.hexdigest()


@dataclass(frozen=True)
class BugSpec:
    """A data bug to inject before training"""
    kind: str
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("pixel-inversion", "token-concatenation"):
            raise DatasetError(f"Unknown bug kind '{self.kind}'")
        if not 0.0 <= self.fraction <= 1.0:
            raise DatasetError(f"Bug fraction must lie in [0, 1], got {self.fraction}")

    def apply(self, population: Population) -> Population:
        if self.kind == "pixel-inversion":
            return apply_pixel_inversion(population, self.fraction, self.seed)
        return apply_concat_bug(population, self.fraction, self.seed)


# Glyph images

Segment = Tuple[Tuple[float, float], Tuple[float, float]]

_SQUARE = [((0.25, 0.25), (0.75, 0.25)), ((0.75, 0.25), (0.75, 0.75)),
           ((0.75, 0.75), (0.25, 0.75)), ((0.25, 0.75), (0.25, 0.25))]

GLYPH_TEMPLATES: Dict[int, List[Segment]] = {
    0: [((0.5, 0.15), (0.5, 0.85))],
    1: [((0.15, 0.5), (0.85, 0.5))],
    2: _SQUARE,
    3: [((0.2, 0.2), (0.8, 0.8)), ((0.8, 0.2), (0.2, 0.8))],
    4: [((0.75, 0.15), (0.25, 0.85))],
    5: [((0.25, 0.15), (0.75, 0.85))],
    6: [((0.5, 0.2), (0.5, 0.8)), ((0.2, 0.5), (0.8, 0.5))],
    7: [((0.2, 0.2), (0.8, 0.2)), ((0.5, 0.2), (0.5, 0.85))],
    8: [((0.3, 0.15), (0.3, 0.8)), ((0.3, 0.8), (0.8, 0.8))],
    9: [((0.2, 0.2), (0.8, 0.2)), ((0.8, 0.2), (0.2, 0.8)), ((0.2, 0.8), (0.8, 0.8))],
}


def _class_templates(num_classes: int, seed: int) -> List[List[Segment]]:
    templates = [GLYPH_TEMPLATES[c] for c in range(min(num_classes, len(GLYPH_TEMPLATES)))]
    rng = make_rng(seed, "glyph-templates")
    while len(templates) < num_classes:
        count = int(rng.integers(2, 4))
        points = rng.uniform(0.15, 0.85, size=(count, 2, 2))
        templates.append([(tuple(p[0]), tuple(p[1])) for p in points])
    return templates


def _segment_distance(u: np.ndarray, v: np.ndarray, segment: Segment) -> np.ndarray:
    (x0, y0), (x1, y1) = segment
    dx, dy = x1 - x0, y1 - y0
    length2 = dx * dx + dy * dy
    t = np.clip(((u - x0) * dx + (v - y0) * dy) / length2, 0.0, 1.0)
    return np.hypot(u - (x0 + t * dx), v - (y0 + t * dy))


def render_glyph(segments: Sequence[Segment], side: int, style: WriterStyle,
                 rng: np.random.Generator) -> np.ndarray:
    """Render one glyph as an 8-bit (side, side) image in the writer's style"""
    centers = (np.arange(side) + 0.5) / side
    xs, ys = np.meshgrid(centers, centers)
    jitter = rng.uniform(-0.03, 0.03, size=2)
    u = (xs - 0.5 - style.shift_x - jitter[0]) / style.scale + 0.5
    v = (ys - 0.5 - style.shift_y - jitter[1]) / style.scale + 0.5
    u = u + style.slant * (v - 0.5)
    distance = np.min([_segment_distance(u, v, s) for s in segments], axis=0)
    intensity = np.exp(-(distance / style.thickness) ** 2)
    intensity = intensity + rng.normal(0.0, style.noise, size=intensity.shape)
    return np.round(np.clip(intensity, 0.0, 1.0) * 255.0).astype(np.uint8)


def _writer_style(seed: int, client_id: int) -> WriterStyle:
    rng = make_rng(seed, "writer-style", client_id)
    return WriterStyle(
        thickness=float(rng.uniform(0.07, 0.12)),
        slant=float(rng.uniform(-0.15, 0.15)),
        scale=float(rng.uniform(0.85, 1.05)),
        shift_x=float(rng.uniform(-0.05, 0.05)),
        shift_y=float(rng.uniform(-0.05, 0.05)),
        noise=float(rng.uniform(0.02, 0.06)),
        jitter_seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def make_glyph_population(num_users: int, examples_per_user_range: Tuple[int, int],
                          num_classes: int, image_side: int, seed: int,
                          first_client_id: int = 0) -> Population:
    """
    Generate a per-writer glyph population.

    Args:
        num_users: Number of writers
        examples_per_user_range: Inclusive (min, max) examples per writer
        num_classes: Glyph classes, >= 2
        image_side: Image side in pixels, >= 8
        seed: Generation seed
        first_client_id: Id of the first writer

    Returns:
        Image Population with labels cycled so every writer is class-balanced
    """
    low, high = examples_per_user_range
    if num_users < 1:
        raise DatasetError(f"num_users must be >= 1, got {num_users}")
    if not 1 <= low <= high:
        raise DatasetError(f"Invalid examples_per_user_range {examples_per_user_range}")
    if num_classes < 2:
        raise DatasetError(f"num_classes must be >= 2, got {num_classes}")
    if image_side < 8:
        raise DatasetError(f"image_side must be >= 8, got {image_side}")

    templates = _class_templates(num_classes, seed)
    clients = []
    for client_id in range(first_client_id, first_client_id + num_users):
        style = _writer_style(seed, client_id)
        rng = make_rng(seed, "writer-examples", client_id)
        count = int(rng.integers(low, high + 1))
        labels = (int(rng.integers(num_classes)) + np.arange(count)) % num_classes
        labels = labels[rng.permutation(count)]
        jitter_rng = np.random.default_rng(style.jitter_seed)
        images = np.stack([render_glyph(templates[label], image_side, style, jitter_rng) for label in labels])

        expected = count / num_classes
        counts = np.bincount(labels, minlength=num_classes)
        if np.any(np.abs(counts - expected) > max(1.0, 0.2 * expected)):
            raise DatasetError(f"Client {client_id} labels are unbalanced: {counts.tolist()}")
        clients.append(ClientDataset(client_id, images=images, labels=labels, style=style))

    population = Population("images", tuple(clients), image_side, num_classes,
                            {"generator": "glyphs", "seed": seed, "bugs": []})
    logger.info(f"Generated glyph population: {num_users} writers, {population.total_examples} images, "
                f"{num_classes} classes, {image_side}x{image_side}")
    return population


def apply_pixel_inversion(population: Population, fraction_users: float, seed: int) -> Population:
    """
    Invert every pixel (p -> 1 - p) for floor(fraction * num_users) seeded writers.

    Labels and the client partition are untouched; the input population is
    not modified.
    """
    if population.kind != "images":
        raise DatasetError("Pixel inversion needs an image population")
    if not 0.0 <= fraction_users <= 1.0:
        raise DatasetError(f"fraction_users must lie in [0, 1], got {fraction_users}")
    count = int(math.floor(fraction_users * len(population) + 1e-9))
    rng = make_rng(seed, "pixel-inversion")
    chosen = set(int(c) for c in rng.choice(population.client_ids, size=count, replace=False))

    clients = [replace(c, images=255 - c.images) if c.client_id in chosen else c for c in population]
    bugs = list(population.metadata.get("bugs", []))
    bugs.append({"kind": "pixel-inversion", "fraction": fraction_users, "seed": seed,
                 "clients": sorted(chosen)})
    logger.info(f"Pixel inversion applied to {count} of {len(population)} writers")
    return population.with_clients(clients, bugs=bugs)


def inverted_clients(population: Population) -> List[int]:
    """Writers whose images are currently inverted, from the bug history"""
    state: Dict[int, bool] = {}
    for bug in population.metadata.get("bugs", []):
        if bug.get("kind") == "pixel-inversion":
            for client_id in bug["clients"]:
                state[client_id] = not state.get(client_id, False)
    return sorted(c for c, flipped in state.items() if flipped)


# Text corpora

OPENERS = ("i", "you", "we", "they", "it", "this", "he", "she")
VERBS = ("have", "need", "want", "use", "get", "see", "like", "make", "try", "know",
         "found", "got", "call", "run", "build", "fix", "add", "open", "read", "write")
DETERMINERS = ("the", "a", "my", "this", "that", "your")
ADJECTIVES = ("new", "old", "simple", "big", "small", "custom", "default", "empty",
              "same", "other", "first", "last")
PREPOSITIONS = ("in", "on", "with", "for", "from", "to")
LINKS = ("is", "was", "looks", "seems")
FUNCTION_WORDS = ("how", "do", "and", "when")

# slot sequences with sampling weights; every template yields 4 to 10 tokens
SENTENCE_TEMPLATES: Tuple[Tuple[Tuple[str, ...], float], ...] = (
    (("opener", "verb", "det", "noun"), 0.12),
    (("opener", "verb", "det", "adj", "noun"), 0.12),
    (("det", "noun", "link", "adj", "prep", "det", "noun"), 0.10),
    (("opener", "verb", "det", "noun", "prep", "det", "noun"), 0.12),
    (("opener", "verb", "det", "adj", "noun", "prep", "det", "noun"), 0.12),
    (("how", "do", "opener", "verb", "det", "noun", "prep", "det", "noun"), 0.10),
    (("when", "opener", "verb", "det", "noun", "opener", "verb", "det", "noun"), 0.10),
    (("opener", "verb", "det", "noun", "and", "opener", "verb", "det", "adj", "noun"), 0.10),
    (("opener", "verb", "det", "noun", "prep", "det", "noun", "prep", "det", "noun"), 0.12),
)

_CONSONANTS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"


def _zipf_weights(count: int, exponent: float) -> np.ndarray:
    weights = 1.0 / np.arange(1, count + 1) ** exponent
    return weights / weights.sum()


def _coin_words(rng: np.random.Generator, count: int, syllables: Tuple[int, int],
                taken: Set[str]) -> List[str]:
    words: List[str] = []
    while len(words) < count:
        length = int(rng.integers(syllables[0], syllables[1] + 1))
        word = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                       for _ in range(length))
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


@dataclass(frozen=True)
class TextGrammar:
    """
    Seeded lexicon and slot distributions of the synthetic corpus.

    `personal_words` is a pool of names and handles kept apart from the shared
    lexicon. Each user owns a few of them and any token, whatever its slot, is
    swapped for one at `personal_word_rate`, so the rare words a frequency cut
    drops are spread evenly over sentence positions.
    """
    nouns: Tuple[str, ...]
    personal_words: Tuple[str, ...]
    noun_exponent: float = 0.9
    personal_word_rate: float = 0.05

    @classmethod
    def from_seed(cls, seed: int, num_nouns: int = 120, num_personal: int = 4000) -> "TextGrammar":
        rng = make_rng(seed, "lexicon")
        taken = set(OPENERS + VERBS + DETERMINERS + ADJECTIVES + PREPOSITIONS + LINKS + FUNCTION_WORDS)
        nouns = _coin_words(rng, num_nouns, (2, 3), taken)
        personal = _coin_words(rng, num_personal, (3, 4), taken)
        return cls(tuple(nouns), tuple(personal))

    @cached_property
    def _slot_weights(self) -> Dict[str, Tuple[Tuple[str, ...], np.ndarray]]:
        return {
            "opener": (OPENERS, _zipf_weights(len(OPENERS), 1.0)),
            "verb": (VERBS, _zipf_weights(len(VERBS), 1.0)),
            "det": (DETERMINERS, _zipf_weights(len(DETERMINERS), 0.8)),
            "adj": (ADJECTIVES, _zipf_weights(len(ADJECTIVES), 0.8)),
            "prep": (PREPOSITIONS, _zipf_weights(len(PREPOSITIONS), 0.8)),
            "link": (LINKS, _zipf_weights(len(LINKS), 1.0)),
            "noun": (self.nouns, _zipf_weights(len(self.nouns), self.noun_exponent)),
        }

    def sentence(self, rng: np.random.Generator, personal: Sequence[str]) -> Sentence:
        weights = np.array([w for _, w in SENTENCE_TEMPLATES])
        template = SENTENCE_TEMPLATES[int(rng.choice(len(SENTENCE_TEMPLATES), p=weights / weights.sum()))][0]
        words = []
        for slot in template:
            if personal and rng.random() < self.personal_word_rate:
                words.append(personal[int(rng.integers(len(personal)))])
            elif slot not in self._slot_weights:
                words.append(slot)
            else:
                choices, probs = self._slot_weights[slot]
                words.append(choices[int(rng.choice(len(choices), p=probs))])
        return tuple(words)


def make_text_population(num_users: int, sentences_per_user: Union[int, Tuple[int, int]],
                         grammar_seed: int) -> Population:
    """
    Generate a per-user corpus from a seeded probabilistic grammar.

    Shared words follow Zipf laws and every user mixes in a few personal words,
    so a frequency-cut vocabulary leaves an OOV tail that is flat across
    sentence positions.
    """
    if isinstance(sentences_per_user, int):
        low = high = sentences_per_user
    else:
        low, high = sentences_per_user
    if num_users < 1:
        raise DatasetError(f"num_users must be >= 1, got {num_users}")
    if not 1 <= low <= high:
        raise DatasetError(f"sentences_per_user must be >= 1, got {sentences_per_user}")

    grammar = TextGrammar.from_seed(grammar_seed)
    pool = grammar.personal_words
    clients = []
    for client_id in range(num_users):
        rng = make_rng(grammar_seed, "user-corpus", client_id)
        count = int(rng.integers(low, high + 1))
        personal = tuple(pool[int(i)] for i in rng.choice(len(pool), size=4, replace=False))
        sentences = tuple(grammar.sentence(rng, personal) for _ in range(count))
        clients.append(ClientDataset(client_id, sentences=sentences))

    population = Population("text", tuple(clients), metadata={"generator": "grammar", "seed": grammar_seed,
                                                              "bugs": []})
    logger.info(f"Generated text population: {num_users} users, {population.total_examples} sentences")
    return population


def mark_oov(sentence: Sequence[str], vocab: Vocabulary) -> List[bool]:
    """True for every token outside the vocabulary"""
    return [token not in vocab for token in sentence]


def oov_rate(population: Population, vocab: Vocabulary) -> float:
    total = 0
    oov = 0
    for sentence in population.sentences():
        flags = mark_oov(sentence, vocab)
        total += len(flags)
        oov += sum(flags)
    if total == 0:
        raise DatasetError("Corpus has no tokens")
    return oov / total


def build_vocabulary(population: Population, size: Optional[int] = None,
                     target_oov_rate: float = 0.04,
                     oov_bounds: Tuple[float, float] = (0.03, 0.10)) -> Vocabulary:
    """
    Frequency-cut word vocabulary.

    With size=None the smallest cut whose OOV rate on this corpus is at most
    target_oov_rate is used, and the resulting rate must fall inside
    oov_bounds.
    """
    counts = Counter(token for sentence in population.sentences() for token in sentence if " " not in token)
    total = sum(len(s) for s in population.sentences())
    if total == 0:
        raise DatasetError("Cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))

    if size is None:
        covered = 0
        size = len(ranked)
        for index, (_, count) in enumerate(ranked):
            covered += count
            if 1.0 - covered / total <= target_oov_rate:
                size = index + 1
                break
        vocab = Vocabulary(tuple(word for word, _ in ranked[:size]))
        rate = oov_rate(population, vocab)
        if not oov_bounds[0] <= rate <= oov_bounds[1]:
            raise DatasetError(f"Clean OOV rate {rate:.4f} is outside {oov_bounds}")
    else:
        vocab = Vocabulary(tuple(word for word, _ in ranked[:size]))
        rate = oov_rate(population, vocab)
        if not oov_bounds[0] <= rate <= oov_bounds[1]:
            logger.warning(f"OOV rate {rate:.4f} with vocabulary size {size} is outside {oov_bounds}")
    logger.info(f"Vocabulary of {vocab.size} words, OOV rate {rate:.4f}")
    return vocab


def apply_concat_bug(population: Population, fraction_sentences: float, seed: int) -> Population:
    """
    Join the first two tokens of an i.i.d. Bernoulli(fraction) share of sentences.

    Selection uses one uniform draw per sentence across all users in client
    order, so larger fractions affect a superset of sentences. Sentences
    shorter than two tokens are left unchanged and counted as skipped.
    """
    if population.kind != "text":
        raise DatasetError("Token concatenation needs a text population")
    if not 0.0 <= fraction_sentences <= 1.0:
        raise DatasetError(f"fraction_sentences must lie in [0, 1], got {fraction_sentences}")
    rng = make_rng(seed, "concat-bug")
    draws = rng.random(population.total_examples)

    affected = 0
    skipped = 0
    position = 0
    clients = []
    for client in population:
        sentences = []
        for sentence in client.sentences:
            selected = draws[position] < fraction_sentences
            position += 1
            if selected and len(sentence) >= 2:
                sentences.append((f"{sentence[0]} {sentence[1]}",) + tuple(sentence[2:]))
                affected += 1
            else:
                if selected:
                    skipped += 1
                sentences.append(sentence)
        clients.append(replace(client, sentences=tuple(sentences)))

    if skipped:
        logger.warning(f"Concatenation bug skipped {skipped} sentences shorter than two tokens")
    bugs = list(population.metadata.get("bugs", []))
    bugs.append({"kind": "token-concatenation", "fraction": fraction_sentences, "seed": seed,
                 "affected": affected, "skipped": skipped})
    logger.info(f"Concatenation bug affected {affected} of {population.total_examples} sentences")
    return population.with_clients(clients, bugs=bugs)


def oov_word_population(population: Population, vocab: Vocabulary,
                        alphabet: str = CHARACTER_ALPHABET) -> Population:
    """
    Per-user character sequences of every OOV token occurrence.

    Users without OOV tokens are left out. Tokens with characters outside the
    alphabet are dropped.
    """
    allowed = set(alphabet)
    clients = []
    for client in population:
        words = tuple(tuple(token) for sentence in client.sentences for token, flag in
                      zip(sentence, mark_oov(sentence, vocab)) if flag and set(token) <= allowed)
        if words:
            clients.append(ClientDataset(client.client_id, sentences=words))
    if not clients:
        raise DatasetError("No user has out-of-vocabulary words")
    result = Population("characters", tuple(clients), metadata={"source": "oov-words",
                                                                "bugs": list(population.metadata.get("bugs", []))})
    logger.info(f"OOV word population: {len(result)} users, {result.total_examples} words")
    return result
