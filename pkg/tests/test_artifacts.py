"""Tests for ArtifactStore."""

import json
import tempfile
from pathlib import Path

import pytest

from consdetect.core.artifacts.manager import ArtifactStore, format_cell, read_csv
from consdetect.core.models import RunManifest


@pytest.fixture
def temp_dir():
    """Create a temporary output directory."""
    with tempfile.TemporaryDirectory() as temp_dir:
        yield Path(temp_dir)


@pytest.fixture
def store(temp_dir):
    """A store writing into a fresh run directory."""
    return ArtifactStore(temp_dir / "run", {"config_hash": "abc123", "master_seed": 11})


@pytest.mark.parametrize(
    ("value", "text"),
    [(None, ""), (True, "true"), (False, "false"), (3, "3"), (0.1, "0.1"), (1e-300, "1e-300"), ("optimal", "optimal")],
)
def test_format_cell(value, text):
    """Cells render to stable text."""
    assert format_cell(value) == text


def test_float_cells_round_trip():
    """repr keeps every digit."""
    value = 0.1 + 0.2
    assert float(format_cell(value)) == value


class TestArtifactStore:
    """Test cases for ArtifactStore."""

    def test_creates_directory(self, store):
        """The output directory is created on construction."""
        assert store.output_dir.is_dir()
        assert store.written == []

    def test_write_csv(self, store):
        """CSV files start with the provenance header."""
        path = store.write_csv("curves.csv", ("sensor", "k", "p_hat"), [[1, 1, 0.25], [1, 2, None]])
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[:3] == ["# config_hash=abc123", "# master_seed=11", "sensor,k,p_hat"]
        assert lines[3:] == ["1,1,0.25", "1,2,"]
        assert store.written == ["curves.csv"]

    def test_read_csv(self, store):
        """read_csv splits the header from the rows."""
        path = store.write_csv("rates.csv", ("sensor", "regime", "sufficient_met"), [[0, "optimal", True]])
        meta, rows = read_csv(path)
        assert meta == {"config_hash": "abc123", "master_seed": "11"}
        assert rows == [{"sensor": "0", "regime": "optimal", "sufficient_met": "true"}]

    def test_write_json_model(self, store):
        """Pydantic documents are written with indentation."""
        manifest = RunManifest(command="simulate", config_hash="abc123", master_seed=11, wall_time_s=0.5, version="0.1.0")
        path = store.write_json("manifest.json", manifest)
        data = json.loads(path.read_text(encoding="utf-8"))
        assert data["command"] == "simulate"
        assert data["source_revision"] is None

    def test_write_json_mapping(self, store):
        """Plain mappings are written with sorted keys."""
        path = store.write_json("extra.json", {"b": 1, "a": 2})
        assert path.read_text(encoding="utf-8").index('"a"') < path.read_text(encoding="utf-8").index('"b"')

    def test_written_once(self, store):
        """Rewriting a file does not duplicate it in `written`."""
        store.write_csv("curves.csv", ("k",), [[1]])
        store.write_csv("curves.csv", ("k",), [[2]])
        store.write_json("comparison.json", {})
        assert store.written == ["curves.csv", "comparison.json"]

    def test_identical_outputs(self, temp_dir):
        """The same rows give byte-identical files."""
        rows = [[1, 0.123456789012345678, True]]
        a = ArtifactStore(temp_dir / "a", {"master_seed": 1}).write_csv("x.csv", ("a", "b", "c"), rows)
        b = ArtifactStore(temp_dir / "b", {"master_seed": 1}).write_csv("x.csv", ("a", "b", "c"), rows)
        assert a.read_bytes() == b.read_bytes()
