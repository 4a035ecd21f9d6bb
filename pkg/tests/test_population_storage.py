"""
Tests for the population container format
"""

import json

import numpy as np
import pytest

from dpfedgen.datasets import apply_concat_bug
from dpfedgen.exceptions import PopulationFormatError
from dpfedgen.population_storage import (MANIFEST_FILE, RECORD_HEADER, RECORDS_FILE, export_population,
                                         load_external_federated_images)


def edit_manifest(directory, **changes):
    path = directory / MANIFEST_FILE
    manifest = json.loads(path.read_text())
    manifest.update(changes)
    path.write_text(json.dumps(manifest))


class TestRoundTrip:

    def test_images(self, glyphs, tmp_path):
        loaded = load_external_federated_images(export_population(glyphs, tmp_path / "glyphs"))
        assert loaded == glyphs
        assert loaded.content_hash() == glyphs.content_hash()

    def test_text_with_joined_tokens(self, corpus, tmp_path):
        bugged = apply_concat_bug(corpus, 0.5, seed=1)
        loaded = load_external_federated_images(export_population(bugged, tmp_path / "text"))
        assert loaded == bugged

    def test_manifest_contents(self, glyphs, tmp_path):
        directory = export_population(glyphs, tmp_path / "glyphs")
        manifest = json.loads((directory / MANIFEST_FILE).read_text())
        assert manifest["num_clients"] == len(glyphs)
        assert manifest["total_examples"] == glyphs.total_examples
        assert manifest["image_side"] == 8
        assert manifest["content_hash"] == glyphs.content_hash()


class TestMalformedContainers:

    def test_not_a_directory(self, tmp_path):
        with pytest.raises(PopulationFormatError):
            load_external_federated_images(tmp_path / "missing")

    def test_missing_records(self, glyphs, tmp_path):
        directory = export_population(glyphs, tmp_path / "glyphs")
        (directory / RECORDS_FILE).unlink()
        with pytest.raises(PopulationFormatError):
            load_external_federated_images(directory)

    def test_unsupported_schema(self, glyphs, tmp_path):
        directory = export_population(glyphs, tmp_path / "glyphs")
        edit_manifest(directory, schema_version=99)
        with pytest.raises(PopulationFormatError):
            load_external_federated_images(directory)

    def test_truncated_records_report_offset(self, glyphs, tmp_path):
        directory = export_population(glyphs, tmp_path / "glyphs")
        records = directory / RECORDS_FILE
        data = records.read_bytes()
        records.write_bytes(data[:-3])
        with pytest.raises(PopulationFormatError) as info:
            load_external_federated_images(directory)
        assert info.value.offset is not None
        assert 0 <= info.value.offset < len(data)

    def test_empty_record_reports_client(self, glyphs, tmp_path):
        directory = export_population(glyphs, tmp_path / "glyphs")
        header = np.array([(7, 0, 0)], dtype=RECORD_HEADER)
        (directory / RECORDS_FILE).write_bytes(header.tobytes())
        edit_manifest(directory, num_clients=1, total_examples=0)
        with pytest.raises(PopulationFormatError) as info:
            load_external_federated_images(directory)
        assert info.value.client_id == 7

    def test_duplicate_record(self, glyphs, tmp_path):
        single = glyphs.with_clients([glyphs.clients[0]])
        directory = export_population(single, tmp_path / "one")
        records = directory / RECORDS_FILE
        records.write_bytes(records.read_bytes() * 2)
        with pytest.raises(PopulationFormatError) as info:
            load_external_federated_images(directory)
        assert info.value.client_id == single.client_ids[0]

    def test_count_mismatch(self, glyphs, tmp_path):
        directory = export_population(glyphs, tmp_path / "glyphs")
        edit_manifest(directory, num_clients=len(glyphs) + 1)
        with pytest.raises(PopulationFormatError):
            load_external_federated_images(directory)
