"""Series frames: CSV ingestion, min-max normalization, and windowing.

Data CSVs carry a ``timestamp,<m1>,...,<mN>`` header; an optional sibling
label file (``<stem>_labels.csv``) carries ``timestamp,label`` with 0/1
labels covering every timestamp.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, IngestionError

SEGMENTS = 5  # every window splits into five equal parts; the last is the target


@dataclass
class SeriesFrame:
    """An N-metric x T-point matrix with timestamps and optional point labels."""

    metric_names: list[str]
    timestamps: np.ndarray          # (T,) int64, strictly increasing, constant spacing
    values: np.ndarray              # (N, T) float64
    labels: np.ndarray | None = None  # (T,) int8 in {0, 1}
    meta: dict = field(default_factory=dict)

    @property
    def n_metrics(self) -> int:
        return self.values.shape[0]

    @property
    def n_points(self) -> int:
        return self.values.shape[1]

    def sliced(self, lo: int, hi: int) -> "SeriesFrame":
        return SeriesFrame(
            metric_names=list(self.metric_names),
            timestamps=self.timestamps[lo:hi].copy(),
            values=self.values[:, lo:hi].copy(),
            labels=None if self.labels is None else self.labels[lo:hi].copy(),
            meta=dict(self.meta),
        )


@dataclass
class NormalizationStats:
    """Per-metric min/max from the fit split."""

    metric_names: list[str]
    mins: np.ndarray  # (N,)
    maxs: np.ndarray  # (N,)


@dataclass
class WindowSample:
    """One window cut into five equal time segments, earliest first."""

    segments: np.ndarray  # (5, N, t_e)
    origin: int           # index of the window's first point in the source frame

    @property
    def t_e(self) -> int:
        return self.segments.shape[2]

    def stacked(self) -> np.ndarray:
        """The window as one (N, 5*t_e) matrix, time order restored."""
        return np.concatenate(list(self.segments), axis=1)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _parse_float(text: str, line_no: int) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise IngestionError(f"line {line_no}: unparsable float {text!r}") from None


def labels_path_for(data_path: str | Path) -> Path:
    p = Path(data_path)
    return p.with_name(p.stem + "_labels" + p.suffix)


def load_csv(path: str | Path, labels_path: str | Path | None = None) -> SeriesFrame:
    """Parse a data CSV (plus sibling label CSV when present) into a frame.

    Rows are sorted by timestamp. Missing values are forward-filled, leading
    gaps back-filled; a metric with no values at all is rejected. Duplicate
    timestamps, ragged rows, and non-constant spacing raise IngestionError
    naming the offending line.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "timestamp":
            raise IngestionError(
                f"{path}: header must be 'timestamp,<m1>,...,<mN>' with N >= 2, got {header!r}"
            )
        names = header[1:]
        rows: list[tuple[int, int, list[float]]] = []  # (timestamp, line_no, values)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(
                    f"line {line_no}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                ts = int(row[0])
            except ValueError:
                raise IngestionError(f"line {line_no}: bad timestamp {row[0]!r}") from None
            rows.append((ts, line_no, [_parse_float(v, line_no) for v in row[1:]]))

    if not rows:
        raise IngestionError(f"{path}: no data rows")
    rows.sort(key=lambda r: (r[0], r[1]))
    seen: dict[int, int] = {}
    for ts, line_no, _ in rows:
        if ts in seen:
            raise IngestionError(
                f"line {line_no}: duplicate timestamp {ts} (first seen on line {seen[ts]})"
            )
        seen[ts] = line_no
    timestamps = np.array([r[0] for r in rows], dtype=np.int64)
    if len(timestamps) > 2:
        steps = np.diff(timestamps)
        bad = np.nonzero(steps != steps[0])[0]
        if bad.size:
            raise IngestionError(
                f"line {rows[bad[0] + 1][1]}: non-constant timestamp spacing "
                f"({steps[bad[0]]} vs {steps[0]})"
            )
    values = np.array([r[2] for r in rows], dtype=np.float64).T  # (N, T)

    for i, name in enumerate(names):
        col = values[i]
        if np.all(np.isnan(col)):
            raise IngestionError(f"metric {name!r} has no values at all")
        # forward-fill, then back-fill any leading gap
        mask = np.isnan(col)
        if mask.any():
            idx = np.where(~mask, np.arange(col.size), 0)
            np.maximum.accumulate(idx, out=idx)
            col = col[idx]
            first = np.argmin(np.isnan(col))
            col[:first] = col[first]
            values[i] = col

    labels = None
    lp = Path(labels_path) if labels_path is not None else labels_path_for(path)
    if lp.exists():
        labels = _load_labels(lp, timestamps)
    frame = SeriesFrame(metric_names=names, timestamps=timestamps, values=values, labels=labels)
    if frame.n_metrics < 2:
        raise IngestionError(f"{path}: need at least 2 metrics, got {frame.n_metrics}")
    return frame


def _load_labels(path: Path, timestamps: np.ndarray) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "label"]:
            raise IngestionError(f"{path}: label header must be 'timestamp,label'")
        table: dict[int, int] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise IngestionError(f"line {line_no}: expected 2 fields, got {len(row)}")
            try:
                ts, lab = int(row[0]), int(row[1])
            except ValueError:
                raise IngestionError(f"line {line_no}: bad label row {row!r}") from None
            if lab not in (0, 1):
                raise IngestionError(f"line {line_no}: label must be 0 or 1, got {lab}")
            table[ts] = lab
    missing = [int(t) for t in timestamps if int(t) not in table]
    if missing:
        raise IngestionError(
            f"{path}: label coverage incomplete ({len(missing)} timestamps unlabeled, "
            f"first missing {missing[0]})"
        )
    return np.array([table[int(t)] for t in timestamps], dtype=np.int8)


def save_csv(frame: SeriesFrame, path: str | Path) -> None:
    """Write a frame as a data CSV; floats use repr so round-trips are exact."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp"] + list(frame.metric_names))
        for j in range(frame.n_points):
            writer.writerow([int(frame.timestamps[j])] + [repr(float(v)) for v in frame.values[:, j]])


def save_labels(frame: SeriesFrame, path: str | Path) -> None:
    if frame.labels is None:
        raise ContractError("frame has no labels to save")
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "label"])
        for j in range(frame.n_points):
            writer.writerow([int(frame.timestamps[j]), int(frame.labels[j])])


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

CLAMP_LO, CLAMP_HI = -0.5, 1.5


def fit_normalize(frame: SeriesFrame, fit_range: tuple[int, int]) -> tuple[SeriesFrame, NormalizationStats]:
    """Min-max scale each metric to [0,1] using stats from fit_range only.

    Out-of-range values clamp to [-0.5, 1.5]; constant metrics map to 0.0.
    """
    lo, hi = fit_range
    if hi <= lo:
        raise ContractError(f"fit_range ({lo}, {hi}) is empty")
    window = frame.values[:, lo:hi]
    mins = window.min(axis=1)
    maxs = window.max(axis=1)
    stats = NormalizationStats(metric_names=list(frame.metric_names), mins=mins, maxs=maxs)
    return apply_normalization(frame, stats), stats


def apply_normalization(frame: SeriesFrame, stats: NormalizationStats) -> SeriesFrame:
    if stats.metric_names != frame.metric_names:
        raise DataError("normalization stats were fit on different metrics")
    span = stats.maxs - stats.mins
    scaled = np.zeros_like(frame.values)
    nonconst = span > 0
    scaled[nonconst] = (frame.values[nonconst] - stats.mins[nonconst, None]) / span[nonconst, None]
    np.clip(scaled, CLAMP_LO, CLAMP_HI, out=scaled)
    return SeriesFrame(
        metric_names=list(frame.metric_names),
        timestamps=frame.timestamps.copy(),
        values=scaled,
        labels=None if frame.labels is None else frame.labels.copy(),
        meta=dict(frame.meta),
    )


def invert_normalization(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Map normalized values back to the original scale (non-constant metrics)."""
    span = (stats.maxs - stats.mins)[:, None]
    return values * span + stats.mins[:, None]


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------


def make_windows(frame: SeriesFrame, t_e: int, stride: int) -> list[WindowSample]:
    """Cut the frame into five-segment windows starting at 0, stride, 2*stride, ...

    Count is floor((T - 5*t_e) / stride) + 1.
    """
    if t_e < 1 or stride < 1:
        raise ContractError("t_e and stride must be positive")
    window_len = SEGMENTS * t_e
    if frame.n_points < window_len:
        raise DataError(
            f"series too short: {frame.n_points} points, need at least {window_len} (5*t_e)"
        )
    samples = []
    for start in range(0, frame.n_points - window_len + 1, stride):
        block = frame.values[:, start:start + window_len]
        segments = np.stack([block[:, s * t_e:(s + 1) * t_e] for s in range(SEGMENTS)])
        samples.append(WindowSample(segments=segments, origin=start))
    return samples


def windows_array(values: np.ndarray, starts: np.ndarray, t_e: int) -> np.ndarray:
    """Stack windows at the given starts into a (B, N, 5, t_e) batch."""
    window_len = SEGMENTS * t_e
    n = values.shape[0]
    out = np.empty((len(starts), n, SEGMENTS, t_e), dtype=np.float64)
    for b, start in enumerate(starts):
        out[b] = values[:, start:start + window_len].reshape(n, SEGMENTS, t_e)
    return out
