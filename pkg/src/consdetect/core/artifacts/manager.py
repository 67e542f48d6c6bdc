"""Output directory writer: CSV tables with provenance headers and JSON documents."""

import csv
import json
import logging
from collections.abc import Generator, Iterable, Mapping, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Any, TextIO, Union

from pydantic import BaseModel

logger = logging.getLogger(__name__)

Cell = Union[str, int, float, bool, None]


def format_cell(value: Cell) -> str:
    """Render one CSV cell; floats use repr so they round-trip exactly."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ArtifactStore:
    """Writes the files of one run into an output directory."""

    def __init__(self, output_dir: Path, meta: Mapping[str, Cell]):
        """Initialize the store; `meta` becomes the `# key=value` header of every CSV."""
        self.output_dir = output_dir
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.meta = dict(meta)
        self.written: list[str] = []

    @contextmanager
    def writer(self, name: str) -> Generator[TextIO, None, None]:
        """Context manager for one output file, recorded in `written` once closed."""
        path = self.output_dir / name
        fh = open(path, "w", newline="", encoding="utf-8")  # noqa: SIM115
        try:
            yield fh
        finally:
            fh.close()
        if name not in self.written:
            self.written.append(name)
        logger.debug("Wrote %s", path)

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Cell]]) -> Path:
        with self.writer(name) as fh:
            for key, value in self.meta.items():
                fh.write(f"# {key}={format_cell(value)}\n")
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(header)
            for row in rows:
                out.writerow([format_cell(cell) for cell in row])
        return self.output_dir / name

    def write_json(self, name: str, document: Union[BaseModel, Mapping[str, Any]]) -> Path:
        with self.writer(name) as fh:
            if isinstance(document, BaseModel):
                fh.write(document.model_dump_json(indent=2, by_alias=True))
            else:
                fh.write(json.dumps(document, indent=2, sort_keys=True))
            fh.write("\n")
        return self.output_dir / name


def read_csv(path: Path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Read a CSV written by ArtifactStore back into (header meta, rows)."""
    meta: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = [line for line in lines if not line.startswith("# ")]
    for line in lines:
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            meta[key] = value
    reader = csv.DictReader(body)
    return meta, list(reader)
