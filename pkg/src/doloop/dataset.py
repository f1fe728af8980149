"""Sampled data batches with intervention provenance, plus CSV round-tripping."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError


@dataclass(frozen=True)
class Intervention:
    """A do-intervention: pin `node` to `value`, severing its incoming edges."""

    node: int
    value: float

    def as_dict(self) -> dict:
        return {"node": int(self.node), "value": float(self.value)}


class Dataset:
    """A (samples x nodes) block of float64 values plus provenance.

    Values are stored column-major because every consumer reads per-node
    columns. `intervention is None` marks observational data.
    """

    def __init__(
        self,
        values: np.ndarray,
        columns: tuple[str, ...] | list[str],
        intervention: Intervention | None = None,
        seed: int | None = None,
    ):
        values = np.asfortranarray(np.asarray(values, dtype=np.float64))
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError("dataset needs a 2-d block with at least one row")
        if values.shape[1] != len(columns):
            raise ValueError("column names do not match value width")
        if intervention is not None:
            col = values[:, intervention.node]
            if not np.all(col == intervention.value):
                raise ValueError("intervened column must be constant at the pinned value")
        self.values = values
        self.columns = tuple(columns)
        self.intervention = intervention
        self.seed = seed

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def column(self, i: int) -> np.ndarray:
        return self.values[:, i]

    def __repr__(self) -> str:
        tag = "obs" if self.intervention is None else f"do({self.intervention.node}={self.intervention.value})"
        return f"Dataset({self.n_rows}x{self.n_cols}, {tag})"


def save_dataset_csv(ds: Dataset, path: str | Path) -> None:
    """Write the dataset as CSV (header = column names) plus a provenance sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ds.columns)
        for row in ds.values:
            writer.writerow([repr(float(v)) for v in row])
    sidecar = {
        "intervention": "observational" if ds.intervention is None else ds.intervention.as_dict(),
        "seed": ds.seed,
        "n": ds.n_rows,
    }
    path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(sidecar, indent=2))


def load_dataset_csv(path: str | Path) -> Dataset:
    """Read a dataset written by `save_dataset_csv` (sidecar optional)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")

    intervention = None
    seed = None
    sidecar = path.with_suffix(path.suffix + ".meta.json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if isinstance(meta.get("intervention"), dict):
            intervention = Intervention(int(meta["intervention"]["node"]), float(meta["intervention"]["value"]))
        seed = meta.get("seed")
    return Dataset(np.array(rows), tuple(header), intervention=intervention, seed=seed)
