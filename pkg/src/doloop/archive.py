"""Static time-series archive with named regimes; queries draw training rows.

A row pairs features observed at time t with the next-period target, so a
returned row is directly a supervision example. Selecting which regime to
sample from plays the role an intervention plays in the live environments.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, EmptyRegime, MissingColumn, ParseError


@dataclass(frozen=True)
class Regime:
    start: date
    end: date
    label: str


@dataclass(frozen=True)
class RegimeQuery:
    regime: int
    n: int


class Archive:
    """Immutable archive: ordered timestamps, feature columns, target column, regimes."""

    def __init__(
        self,
        timestamps: list[date],
        features: np.ndarray,
        target: np.ndarray,
        feature_names: tuple[str, ...],
        target_name: str,
        regimes: list[Regime],
    ):
        features = np.asarray(features, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != len(timestamps) or target.shape != (len(timestamps),):
            raise ConfigError("feature/target shapes do not match timestamps")
        for a, b in zip(timestamps, timestamps[1:]):
            if not a < b:
                raise ParseError("timestamps must be strictly increasing")
        if len(regimes) < 2:
            raise ConfigError("need at least two regimes")
        spans = sorted((r.start, r.end) for r in regimes)
        for (s1, e1), (s2, _) in zip(spans, spans[1:]):
            if s2 <= e1:
                raise ConfigError("regimes must not overlap")
        self.timestamps = list(timestamps)
        self.features = features
        self.target = target
        self.feature_names = tuple(feature_names)
        self.target_name = target_name
        self.regimes = list(regimes)
        self._regime_rows = []
        for r in regimes:
            rows = np.array([i for i, t in enumerate(timestamps) if r.start <= t <= r.end], dtype=int)
            if rows.size == 0:
                raise EmptyRegime(f"regime {r.label!r} contains no rows")
            self._regime_rows.append(rows)

    @property
    def n_rows(self) -> int:
        return len(self.timestamps)

    @property
    def n_regimes(self) -> int:
        return len(self.regimes)

    def regime_rows(self, regime: int) -> np.ndarray:
        if not (0 <= regime < self.n_regimes):
            raise EmptyRegime(f"no regime {regime}")
        return self._regime_rows[regime]

    @property
    def columns(self) -> tuple[str, ...]:
        return self.feature_names + (self.target_name,)


def query(archive: Archive, q: RegimeQuery, rng: np.random.Generator) -> Dataset:
    """Sample q.n archive rows uniformly with replacement from the regime."""
    if q.n < 1:
        raise ConfigError("need at least one row")
    rows = archive.regime_rows(q.regime)
    picks = rng.choice(rows, size=q.n, replace=True)
    values = np.column_stack([archive.features[picks], archive.target[picks]])
    # Regime choice severs nothing, so the rows stay observational; the caller
    # tracks which regime was queried.
    return Dataset(values, archive.columns)


def load_archive(csv_path: str | Path, regime_spec: list[dict] | list[Regime]) -> Archive:
    """Parse a CSV (timestamp, features..., target) and attach regimes.

    The first column must be an ISO-8601 date, the last column is the target,
    and everything between is a feature. Rows with missing fields are rejected
    (dropped); non-numeric values raise ParseError.
    """
    csv_path = Path(csv_path)
    regimes = [r if isinstance(r, Regime) else Regime(date.fromisoformat(r["start"]), date.fromisoformat(r["end"]), str(r["label"])) for r in regime_spec]
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{csv_path}: empty file")
        if len(header) < 3:
            raise MissingColumn(f"{csv_path}: need timestamp, at least one feature, and a target column")
        timestamps: list[date] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{csv_path}:{lineno}: expected {len(header)} fields")
            if any(v.strip() == "" for v in row):
                continue  # missing value: reject the row
            try:
                timestamps.append(date.fromisoformat(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(f"{csv_path}:{lineno}: {exc}") from None
    if not rows:
        raise ParseError(f"{csv_path}: no usable rows")
    block = np.array(rows)
    return Archive(
        timestamps=timestamps,
        features=block[:, :-1],
        target=block[:, -1],
        feature_names=tuple(header[1:-1]),
        target_name=header[-1],
        regimes=regimes,
    )


def save_archive(archive: Archive, csv_path: str | Path) -> None:
    """Write the archive back to CSV; floats use shortest round-trip repr."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("timestamp",) + archive.columns)
        for i, t in enumerate(archive.timestamps):
            writer.writerow([t.isoformat()] + [repr(float(v)) for v in archive.features[i]] + [repr(float(archive.target[i]))])


def save_regime_spec(archive: Archive, path: str | Path) -> None:
    doc = [{"start": r.start.isoformat(), "end": r.end.isoformat(), "label": r.label} for r in archive.regimes]
    Path(path).write_text(json.dumps(doc, indent=2))


def load_regime_spec(path: str | Path) -> list[dict]:
    return json.loads(Path(path).read_text())


def generate_synthetic_archive(
    n_rows: int,
    regimes: int,
    rng: np.random.Generator,
    start: date = date(1990, 1, 1),
) -> Archive:
    """Synthetic stand-in for an economic archive with alternating regimes.

    One global nonlinear response maps three features to the next-period
    target. Even-indexed regimes are calm: features stay near zero, where the
    response is nearly linear, and noise is small. Odd-indexed regimes are
    volatile: wide feature excursions expose the curvature, and noise is
    larger. Target variance therefore orders calm < volatile by construction.
    """
    if regimes < 2:
        raise ConfigError("need at least two regimes")
    if n_rows < 2 * regimes:
        raise ConfigError("need at least two rows per regime")

    def response(f1, f2, f3):
        return np.sin(1.2 * f1) + 0.4 * f2**2 + 0.3 * f3

    bounds = np.linspace(0, n_rows, regimes + 1).astype(int)
    feats = np.empty((n_rows, 3))
    targ = np.empty(n_rows)
    regime_list = []
    timestamps = [start + timedelta(days=i) for i in range(n_rows)]
    for r in range(regimes):
        lo, hi = bounds[r], bounds[r + 1]
        size = hi - lo
        volatile = r % 2 == 1
        scale = 1.5 if volatile else 0.3
        noise = 0.3 if volatile else 0.05
        f = rng.normal(0.0, scale, size=(size, 3))
        feats[lo:hi] = f
        targ[lo:hi] = response(f[:, 0], f[:, 1], f[:, 2]) + rng.normal(0.0, noise, size=size)
        label = f"{'volatile' if volatile else 'calm'}_{r}"
        regime_list.append(Regime(timestamps[lo], timestamps[hi - 1], label))
    return Archive(
        timestamps=timestamps,
        features=feats,
        target=targ,
        feature_names=("f1", "f2", "f3"),
        target_name="target_next",
        regimes=regime_list,
    )
