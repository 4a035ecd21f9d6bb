"""
Population Container Storage
Exports populations to a versioned directory container and loads external
federated image or text data from the same format
"""

import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from .datasets import ClientDataset, Population, WriterStyle
from .exceptions import PopulationFormatError

logger = logging.getLogger(__name__)

CONTAINER_SCHEMA_VERSION = 1
MANIFEST_FILE = "manifest.json"
RECORDS_FILE = "records.bin"
LEXICON_FILE = "vocab.json"
STYLES_FILE = "styles.json"

RECORD_HEADER = np.dtype([("client_id", "<i8"), ("num_examples", "<u4"), ("payload_len", "<u4")])


def _image_payload(client: ClientDataset) -> bytes:
    return client.labels.astype("<i4").tobytes() + client.images.astype(np.uint8).tobytes()


def _text_payload(client: ClientDataset, lexicon: Dict[str, int]) -> bytes:
    parts = []
    for sentence in client.sentences:
        parts.append(np.array([len(sentence)], dtype="<u4").tobytes())
        parts.append(np.array([lexicon[token] for token in sentence], dtype="<i4").tobytes())
    return b"".join(parts)


def export_population(population: Population, directory: Union[str, Path]) -> Path:
    """
    Write a population container.

    Layout: manifest.json (schema version, kind, counts, image dims), a
    records.bin with one header + payload per client, vocab.json listing
    every token for text populations, and styles.json for writer styles.

    Args:
        population: Population to export
        directory: Target directory, created if missing

    Returns:
        The container directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    is_image = population.kind == "images"

    lexicon: Dict[str, int] = {}
    if not is_image:
        for sentence in population.sentences():
            for token in sentence:
                lexicon.setdefault(token, len(lexicon))

    with open(directory / RECORDS_FILE, "wb") as f:
        for client in population:
            payload = _image_payload(client) if is_image else _text_payload(client, lexicon)
            header = np.array([(client.client_id, client.num_examples, len(payload))], dtype=RECORD_HEADER)
            f.write(header.tobytes())
            f.write(payload)

    manifest = {
        "schema_version": CONTAINER_SCHEMA_VERSION,
        "kind": population.kind,
        "num_clients": len(population),
        "total_examples": population.total_examples,
        "image_side": population.image_side,
        "num_classes": population.num_classes,
        "content_hash": population.content_hash(),
    }
    with open(directory / MANIFEST_FILE, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    if not is_image:
        with open(directory / LEXICON_FILE, "w", encoding="utf-8") as f:
            json.dump(list(lexicon), f, indent=1)

    styles = {str(c.client_id): asdict(c.style) for c in population if c.style is not None}
    if styles:
        with open(directory / STYLES_FILE, "w", encoding="utf-8") as f:
            json.dump(styles, f, indent=1, sort_keys=True)

    logger.info(f"Exported {len(population)} {population.kind} clients to {directory}")
    return directory


def _read_json(path: Path) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise PopulationFormatError(f"Missing container file {path.name}") from exc
    except json.JSONDecodeError as exc:
        raise PopulationFormatError(f"{path.name} is not valid JSON: {exc}") from exc


def _read_manifest(directory: Path) -> Dict[str, Any]:
    manifest = _read_json(directory / MANIFEST_FILE)
    if not isinstance(manifest, dict):
        raise PopulationFormatError("Manifest must be a JSON object")
    if manifest.get("schema_version") != CONTAINER_SCHEMA_VERSION:
        raise PopulationFormatError(f"Unsupported container schema version {manifest.get('schema_version')!r}")
    if manifest.get("kind") not in ("images", "text", "characters"):
        raise PopulationFormatError(f"Unknown population kind {manifest.get('kind')!r}")
    if manifest["kind"] == "images":
        side = manifest.get("image_side")
        if not isinstance(side, int) or side < 1:
            raise PopulationFormatError(f"Image containers need a positive image_side, got {side!r}")
    return manifest


class _RecordReader:
    """Bounds-checked cursor over records.bin"""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    @property
    def exhausted(self) -> bool:
        return self.offset >= len(self.data)

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise PopulationFormatError(
                f"Truncated {what}: need {count} bytes, {len(self.data) - self.offset} remain", offset=self.offset)
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk


def _parse_images(payload: bytes, count: int, side: int, client_id: int, offset: int) -> ClientDataset:
    expected = count * 4 + count * side * side
    if len(payload) != expected:
        raise PopulationFormatError(f"Image payload holds {len(payload)} bytes, expected {expected}",
                                    offset=offset, client_id=client_id)
    labels = np.frombuffer(payload[:count * 4], dtype="<i4").astype(np.int64)
    images = np.frombuffer(payload[count * 4:], dtype=np.uint8).reshape(count, side, side)
    return ClientDataset(client_id, images=images, labels=labels)


def _parse_sentences(payload: bytes, count: int, lexicon: List[str], client_id: int, offset: int) -> ClientDataset:
    reader = _RecordReader(payload)
    sentences = []
    try:
        for _ in range(count):
            length = int(np.frombuffer(reader.take(4, "sentence length"), dtype="<u4")[0])
            ids = np.frombuffer(reader.take(4 * length, "sentence tokens"), dtype="<i4")
            if ids.size and (ids.min() < 0 or ids.max() >= len(lexicon)):
                raise PopulationFormatError("Token id outside the lexicon", offset=offset + reader.offset,
                                            client_id=client_id)
            sentences.append(tuple(lexicon[i] for i in ids))
    except PopulationFormatError as exc:
        if exc.client_id is not None:
            raise
        raise PopulationFormatError(f"Malformed text record: {exc}", offset=offset + reader.offset,
                                    client_id=client_id) from exc
    if not reader.exhausted:
        raise PopulationFormatError("Trailing bytes in text record", offset=offset + reader.offset,
                                    client_id=client_id)
    return ClientDataset(client_id, sentences=tuple(sentences))


def load_external_federated_images(path: Union[str, Path]) -> Population:
    """
    Load a population container written by export_population or by an
    external converter.

    Validation errors name the offending record: truncation reports the byte
    offset, empty or malformed records report the client id.

    Args:
        path: Container directory

    Returns:
        The parsed Population
    """
    directory = Path(path)
    if not directory.is_dir():
        raise PopulationFormatError(f"{directory} is not a population container directory")
    manifest = _read_manifest(directory)
    kind = manifest["kind"]
    lexicon = _read_json(directory / LEXICON_FILE) if kind != "images" else []
    styles_path = directory / STYLES_FILE
    styles = _read_json(styles_path) if styles_path.exists() else {}

    try:
        data = (directory / RECORDS_FILE).read_bytes()
    except FileNotFoundError as exc:
        raise PopulationFormatError(f"Missing container file {RECORDS_FILE}") from exc

    reader = _RecordReader(data)
    clients = []
    seen = set()
    while not reader.exhausted:
        record_offset = reader.offset
        header = np.frombuffer(reader.take(RECORD_HEADER.itemsize, "record header"), dtype=RECORD_HEADER)[0]
        client_id = int(header["client_id"])
        count = int(header["num_examples"])
        payload = reader.take(int(header["payload_len"]), "record payload")
        if client_id < 0:
            raise PopulationFormatError("Negative client id", offset=record_offset, client_id=client_id)
        if client_id in seen:
            raise PopulationFormatError("Duplicate client record", offset=record_offset, client_id=client_id)
        if count == 0:
            raise PopulationFormatError("Empty client record", offset=record_offset, client_id=client_id)
        seen.add(client_id)
        if kind == "images":
            client = _parse_images(payload, count, manifest["image_side"], client_id, record_offset)
        else:
            client = _parse_sentences(payload, count, lexicon, client_id, record_offset)
        style = styles.get(str(client_id))
        if style is not None:
            client = ClientDataset(client.client_id, client.images, client.labels, client.sentences,
                                   WriterStyle(**style))
        clients.append(client)

    if len(clients) != manifest.get("num_clients"):
        raise PopulationFormatError(
            f"Manifest declares {manifest.get('num_clients')} clients, records hold {len(clients)}")
    population = Population(kind, tuple(clients), manifest.get("image_side"), manifest.get("num_classes"),
                            {"source": str(directory)})
    if population.total_examples != manifest.get("total_examples"):
        raise PopulationFormatError(
            f"Manifest declares {manifest.get('total_examples')} examples, records hold {population.total_examples}")
    logger.info(f"Loaded {len(population)} {kind} clients from {directory}")
    return population
