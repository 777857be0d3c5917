"""Reconstruction errors to anomaly verdicts.

Per-metric gates come from a histogram CDF of reconstruction errors: with
anomaly rate A_R and correction eta, the gate is the upper edge of the first
bin where the empirical CDF reaches (1 - (A_R + eta)) of the sample count.
A point is anomalous per metric when its error strictly exceeds that
metric's gate; the entity is anomalous when at least ``gate_entity`` metrics
are simultaneously anomalous. Evaluation uses the point-adjust convention:
hitting any point of a true anomaly segment credits the whole segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .checkpoint import Checkpoint
from .data import SEGMENTS, SeriesFrame, windows_array
from .errors import ContractError, DataError, ShapeError

DEFAULT_BINS = 1000
ETA_GRID = tuple(i / 1000.0 for i in range(-10, 11))


@dataclass
class ErrorSeries:
    """Absolute reconstruction error per metric and scored point."""

    timestamps: np.ndarray   # (T',) int64
    metric_names: list[str]
    errors: np.ndarray       # (N, T'), >= 0

    @property
    def n_metrics(self) -> int:
        return self.errors.shape[0]

    def sliced(self, lo: int, hi: int) -> "ErrorSeries":
        return ErrorSeries(self.timestamps[lo:hi], list(self.metric_names),
                           self.errors[:, lo:hi])


@dataclass
class ThresholdModel:
    gates: np.ndarray        # (N,) per-metric gate values
    gate_entity: int         # min count of simultaneously anomalous metrics
    a_r: float
    eta: float
    bin_width: np.ndarray    # (N,) histogram bin width per metric
    bins: int = DEFAULT_BINS


@dataclass
class DetectionResult:
    metric_flags: np.ndarray  # (N, T') int8
    counts: np.ndarray        # (T',) number of anomalous metrics
    entity_flags: np.ndarray  # (T',) int8; 1 iff counts >= gate_entity


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    segments: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def score(frame: SeriesFrame, ckpt: Checkpoint, batch: int = 32) -> ErrorSeries:
    """Slide windows at stride t_e and score every point in [4*t_e, T).

    The frame must already be normalized with the checkpoint's stats.
    """
    model = ckpt.to_model()
    t_e = model.config.t_e
    window = SEGMENTS * t_e
    T = frame.n_points
    if T < window:
        raise DataError(f"frame too short to score: {T} points, need {window}")
    lead = window - t_e
    starts = list(range(0, T - window + 1, t_e))
    grid_end = starts[-1] + window
    tail_start = None
    if grid_end < T:
        tail_start = T - window  # one extra window covers the ragged tail
        starts.append(tail_start)
    errors = np.empty((frame.n_metrics, T - lead), dtype=np.float64)
    for chunk_lo in range(0, len(starts), batch):
        chunk = starts[chunk_lo:chunk_lo + batch]
        windows = windows_array(frame.values, np.asarray(chunk), t_e)
        recon = mdl.reconstruct_many(model, windows)
        err = np.abs(windows[:, :, mdl.TARGET_SEG, :] - recon)
        for b, s in enumerate(chunk):
            # window at s scores error columns [s, s+t_e); the tail window
            # only fills columns the stride grid left unscored
            col_lo, seg_off = s, 0
            if tail_start is not None and s == tail_start:
                col_lo = grid_end - lead
                seg_off = col_lo - s
            errors[:, col_lo:s + t_e] = err[b][:, seg_off:]
    return ErrorSeries(
        timestamps=frame.timestamps[lead:].copy(),
        metric_names=list(frame.metric_names),
        errors=errors,
    )


# ---------------------------------------------------------------------------
# thresholds
# ---------------------------------------------------------------------------


def estimate_gate(errors, a_r: float, eta: float = 0.0, bins: int = DEFAULT_BINS) -> float:
    """Histogram-CDF quantile gate: upper edge of the first bin where the
    cumulative count reaches (1 - (a_r + eta)) of the sample count."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ContractError("estimate_gate: empty error sample")
    rate = a_r + eta
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"estimate_gate: a_r + eta = {rate} outside [0, 1)")
    lo, hi = float(e.min()), float(e.max())
    if lo == hi:
        return lo
    counts, edges = np.histogram(e, bins=bins, range=(lo, hi))
    cdf = np.cumsum(counts)
    need = (1.0 - rate) * e.size
    j = int(np.searchsorted(cdf, need, side="left"))
    j = min(j, bins - 1)
    return float(edges[j + 1])


def quantile_gate_oracle(errors, a_r: float, eta: float = 0.0) -> float:
    """Exact sorted-quantile reference: smallest value with CDF >= 1 - A_R'."""
    e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    rate = a_r + eta
    k = int(np.ceil((1.0 - rate) * e.size))
    return float(e[max(k, 1) - 1])


def calibrate(
    errors: ErrorSeries,
    labels: np.ndarray | None,
    a_r: float,
    eta_grid=ETA_GRID,
    max_gate_entity: int = 5,
    bins: int = DEFAULT_BINS,
) -> ThresholdModel:
    """Fit per-metric gates on validation errors; with labels, grid-search the
    rate correction eta and the entity gate jointly for best point-adjusted F1."""
    if not 0.0 < a_r < 1.0:
        raise ContractError(f"a_r must be in (0, 1), got {a_r}")
    if errors.errors.shape[1] == 0:
        raise ContractError("calibrate: validation slice is empty")
    n = errors.n_metrics
    spans = errors.errors.max(axis=1) - errors.errors.min(axis=1)
    bin_width = spans / bins

    def gates_for(eta: float) -> np.ndarray:
        return np.array([estimate_gate(errors.errors[i], a_r, eta, bins) for i in range(n)])

    if labels is None:
        return ThresholdModel(gates=gates_for(0.0), gate_entity=1, a_r=a_r, eta=0.0,
                              bin_width=bin_width, bins=bins)
    labels = np.asarray(labels)
    if labels.shape != (errors.errors.shape[1],):
        raise ShapeError("calibrate: labels must align with the error series")

    # Cross-fitted selection: gates fit near the in-sample maximum score zero
    # validation false positives by construction, so a raw argmax drifts to
    # the most negative eta. Instead, estimate gates on one interleaved half
    # of the slice and score F1 on the other (both directions). The entity
    # gate is chosen by its mean score across the whole eta grid (a single
    # (eta, gate) cell is too noisy on a few hundred validation points), then
    # eta by its score at that gate. Final gates refit on the full slice.
    even = np.arange(errors.errors.shape[1]) % 2 == 0
    folds = ((even, ~even), (~even, even))
    cv: dict[tuple[float, int], float] = {}
    etas = [e for e in eta_grid if 0.0 <= a_r + e < 1.0]
    gate_range = range(1, min(n, max_gate_entity) + 1)
    for eta in etas:
        fold_counts = []
        for fit, hold in folds:
            fold_gates = np.array([
                estimate_gate(errors.errors[i, fit], a_r, eta, bins) for i in range(n)
            ])
            fold_counts.append(
                ((errors.errors[:, hold] > fold_gates[:, None]).sum(axis=0), hold))
        for gate_entity in gate_range:
            scores = []
            for counts, hold in fold_counts:
                flags = (counts >= gate_entity).astype(np.int8)
                held = labels[hold]
                scores.append(prf1(point_adjust(flags, held), held).f1)
            cv[(eta, gate_entity)] = float(np.mean(scores))
    gate_entity = max(gate_range,
                      key=lambda ge: np.mean([cv[(eta, ge)] for eta in etas]))
    eta = max(etas, key=lambda e: cv[(e, gate_entity)])
    return ThresholdModel(gates=gates_for(eta), gate_entity=gate_entity, a_r=a_r,
                          eta=eta, bin_width=bin_width, bins=bins)


def detect_two_level(errors: ErrorSeries, th: ThresholdModel) -> DetectionResult:
    """Metric i fires at t iff error > gate[i]; the entity fires iff at least
    gate_entity metrics fire together."""
    if errors.n_metrics != th.gates.shape[0]:
        raise ShapeError(
            f"detect_two_level: {errors.n_metrics} metrics vs {th.gates.shape[0]} gates"
        )
    metric_flags = (errors.errors > th.gates[:, None]).astype(np.int8)
    counts = metric_flags.sum(axis=0)
    entity_flags = (counts >= th.gate_entity).astype(np.int8)
    return DetectionResult(metric_flags=metric_flags, counts=counts, entity_flags=entity_flags)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def truth_segments(truth: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, end) extents of maximal runs of 1s."""
    padded = np.concatenate([[0], np.asarray(truth, dtype=np.int8), [0]])
    edges = np.flatnonzero(np.diff(padded))
    return [(int(edges[i]), int(edges[i + 1])) for i in range(0, len(edges), 2)]


def point_adjust(pred, truth) -> np.ndarray:
    """Credit whole truth segments that contain at least one predicted point.

    Predictions outside truth segments are left unchanged.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ShapeError(f"point_adjust: shapes differ, {pred.shape} vs {truth.shape}")
    adjusted = pred.astype(np.int8).copy()
    for lo, hi in truth_segments(truth):
        if adjusted[lo:hi].any():
            adjusted[lo:hi] = 1
    return adjusted


def prf1(pred, truth) -> EvalReport:
    """Pointwise precision/recall/F1 with a per-segment detection table.

    Zero denominators yield zero scores.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ShapeError(f"prf1: shapes differ, {pred.shape} vs {truth.shape}")
    p = pred.astype(bool)
    t = truth.astype(bool)
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    segments = [
        {"start": lo, "end": hi, "detected": bool(p[lo:hi].any())}
        for lo, hi in truth_segments(truth)
    ]
    return EvalReport(tp=tp, fp=fp, fn=fn, precision=precision, recall=recall,
                      f1=f1, segments=segments)
