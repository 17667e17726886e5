"""Flood status labelling, status metrics and rolling evaluation reports."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .exceptions import DataError, DimensionError

__all__ = [
    "FLOOD_THRESHOLD",
    "SPEED_COEFFS",
    "DEPTH_AT_MIN_SPEED",
    "MIN_SPEED",
    "StatusSeries",
    "Confusion",
    "EvalRow",
    "EvalReport",
    "status_from_speed",
    "mae_rmse",
    "confusion_counts",
    "precision_recall",
    "depth_to_speed",
    "speed_to_depth",
    "evaluate_statuses",
    "rolling_eval",
    "horizon_eval",
]

FLOOD_THRESHOLD = 0.10

# speed (km/h) as a quadratic in water depth (mm): a*w^2 + b*w + c
SPEED_COEFFS = (0.0009, -0.5529, 86.9948)
DEPTH_AT_MIN_SPEED = -SPEED_COEFFS[1] / (2.0 * SPEED_COEFFS[0])
MIN_SPEED = SPEED_COEFFS[2] - SPEED_COEFFS[1] ** 2 / (4.0 * SPEED_COEFFS[0])

ZERO_PREDICTED = 1
ZERO_OBSERVED = 2


def depth_to_speed(depth_mm):
    """Vehicle speed in km/h through water ``depth_mm`` deep.

    Past the quadratic's minimum (about 307 mm) vehicles are taken as
    stalled and the speed is 0.
    """
    w = np.asarray(depth_mm, dtype=np.float64)
    if np.any(w < 0) or np.any(np.isnan(w)):
        raise DataError("water depth must be non-negative")
    a, b, c = SPEED_COEFFS
    v = (a * w + b) * w + c
    v = np.where(w > DEPTH_AT_MIN_SPEED, 0.0, np.maximum(v, 0.0))
    return float(v) if v.ndim == 0 else v


def speed_to_depth(speed_kmh):
    """Invert :func:`depth_to_speed` on its decreasing branch (smaller root)."""
    s = np.asarray(speed_kmh, dtype=np.float64)
    a, b, c = SPEED_COEFFS
    if np.any(~(s >= MIN_SPEED)) or np.any(~(s <= c)):
        raise DataError(f"speed must lie in [{MIN_SPEED!r}, {c!r}] km/h to be invertible")
    c0 = c - s
    disc = np.maximum(b * b - 4.0 * a * c0, 0.0)
    # smaller root of a w^2 + b w + c0, written to avoid cancellation
    w = 2.0 * c0 / (-b + np.sqrt(disc))
    return float(w) if w.ndim == 0 else w


def status_from_speed(speed, historical, threshold: float = FLOOD_THRESHOLD):
    """1 where a segment counts as flooded, else 0.

    Null speeds (``None`` or NaN) are flooded; otherwise a segment is flooded
    when ``speed / historical < threshold``.
    """
    if speed is None:
        speed = np.nan
    sp = np.asarray(speed, dtype=np.float64)
    hist = np.asarray(historical, dtype=np.float64)
    if np.any(~(hist > 0)):
        raise DataError("historical speed must be positive")
    with np.errstate(invalid="ignore"):
        flooded = np.isnan(sp) | (sp / hist < threshold)
    out = flooded.astype(np.int8)
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class StatusSeries:
    """Binary (steps, M) statuses tagged as observed or predicted."""

    values: np.ndarray
    provenance: str = "observed"

    def __post_init__(self):
        v = np.asarray(self.values)
        if not np.all((v == 0) | (v == 1)):
            raise DataError("status values must be 0 or 1")
        if self.provenance not in ("observed", "predicted"):
            raise DataError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "values", v.astype(np.int8))


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, StatusSeries) else x)


def _pair(pred, obs):
    p, o = _values(pred), _values(obs)
    if p.shape != o.shape:
        raise DimensionError(f"predicted shape {p.shape} differs from observed shape {o.shape}")
    return p.astype(np.float64), o.astype(np.float64)


def mae_rmse(pred, obs) -> tuple[float, float]:
    """Mean absolute and root-mean-square status error over all cells."""
    p, o = _pair(pred, obs)
    diff = p - o
    if diff.size == 0:
        return 0.0, 0.0
    return float(np.mean(np.abs(diff))), float(np.sqrt(np.mean(diff * diff)))


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(pred, obs) -> Confusion:
    p, o = _pair(pred, obs)
    p, o = p.astype(bool), o.astype(bool)
    return Confusion(int(np.sum(p & o)), int(np.sum(p & ~o)), int(np.sum(~p & o)), int(np.sum(~p & ~o)))


def precision_recall(pred, obs) -> tuple[float, float, Confusion, int]:
    """Precision and recall with flooded as the positive class.

    An empty denominator yields 1.0 and sets a bit in the returned flag:
    1 when nothing was predicted flooded, 2 when nothing was observed
    flooded.
    """
    cm = confusion_counts(pred, obs)
    flag = 0
    if cm.tp + cm.fp == 0:
        precision = 1.0
        flag |= ZERO_PREDICTED
    else:
        precision = cm.tp / (cm.tp + cm.fp)
    if cm.tp + cm.fn == 0:
        recall = 1.0
        flag |= ZERO_OBSERVED
    else:
        recall = cm.tp / (cm.tp + cm.fn)
    return precision, recall, cm, flag


@dataclass(frozen=True)
class EvalRow:
    horizon_hours: float
    mae: float
    rmse: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int
    zero_positive_flag: int


REPORT_COLUMNS = tuple(f.name for f in fields(EvalRow))
_INT_COLUMNS = {"tp", "fp", "fn", "tn", "zero_positive_flag"}


def evaluate_statuses(pred, obs, horizon_hours: float) -> EvalRow:
    mae, rmse = mae_rmse(pred, obs)
    precision, recall, cm, flag = precision_recall(pred, obs)
    return EvalRow(float(horizon_hours), mae, rmse, precision, recall, cm.tp, cm.fp, cm.fn, cm.tn, flag)


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for row in self.rows:
                writer.writerow([_fmt(getattr(row, c)) for c in REPORT_COLUMNS])

    def write_long_csv(self, path, label: str = "") -> None:
        """One ``(series, horizon_hours, metric, value)`` line per metric, for plotting."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("series", "horizon_hours", "metric", "value"))
            for row in self.rows:
                for metric in ("mae", "rmse", "precision", "recall"):
                    writer.writerow((label, _fmt(row.horizon_hours), metric, _fmt(getattr(row, metric))))

    @classmethod
    def read_csv(cls, path) -> EvalReport:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
                raise DataError(f"{path}: unexpected report header {reader.fieldnames}")
            rows = [EvalRow(**{k: int(v) if k in _INT_COLUMNS else float(v) for k, v in rec.items()})
                    for rec in reader]
        return cls(rows)

    def to_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.rows]


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def _observed_status(observed, speeds, historical, threshold):
    if observed is not None:
        return np.asarray(observed).astype(np.int8)
    return status_from_speed(speeds, historical[None, :], threshold)


def rolling_eval(forecaster, speeds, historical, start: int, *, observed=None, hours: float = 72,
                 interval_hours: float = 4, step_minutes: float = 5, threshold: float = FLOOD_THRESHOLD
                 ) -> EvalReport:
    """Forecast ``hours`` ahead from the history ending just before ``start``.

    ``forecaster.forecast(history, steps)`` receives the (start, M) km/h
    history (NaN = null) and returns (steps, M) km/h forecasts. Step ``s``
    predicts time index ``start + s``, so the mark ``h`` hours out is step
    ``h * steps_per_hour - 1``. Observed statuses come from ``observed``
    (T, M) flags when given, else from ``speeds`` via the threshold rule.
    """
    speeds = np.asarray(speeds, dtype=np.float64)
    historical = np.asarray(historical, dtype=np.float64)
    per_hour = 60.0 / step_minutes
    total = int(round(hours * per_hour))
    every = int(round(interval_hours * per_hour))
    if every < 1 or total < every:
        raise DataError(f"invalid rolling window {hours}:{interval_hours}")
    if start < 1 or start + total > speeds.shape[0]:
        raise DataError(
            f"traces must cover time index {start + total - 1} (start {start} + {hours} h); "
            f"they end at index {speeds.shape[0] - 1}")
    obs = _observed_status(observed, speeds, historical, threshold)
    forecast = np.asarray(forecaster.forecast(speeds[:start], total))
    pred = status_from_speed(forecast, historical[None, :], threshold)
    report = EvalReport()
    for mark in range(every, total + 1, every):
        s = mark - 1
        report.rows.append(evaluate_statuses(pred[s], obs[start + s], mark / per_hour))
    return report


def horizon_eval(forecaster, speeds, historical, start: int, stop: int | None = None, *, observed=None,
                 horizons_hours=(2, 4, 6), anchor_every: int = 12, step_minutes: float = 5,
                 threshold: float = FLOOD_THRESHOLD) -> EvalReport:
    """Aggregate status metrics per forecast horizon over many anchors.

    Anchors run from ``start`` every ``anchor_every`` steps while the longest
    horizon still fits before ``stop``; each anchor forecasts from the history
    preceding it. Confusion counts are pooled over anchors.
    """
    speeds = np.asarray(speeds, dtype=np.float64)
    historical = np.asarray(historical, dtype=np.float64)
    stop = speeds.shape[0] if stop is None else stop
    per_hour = 60.0 / step_minutes
    steps = [int(round(h * per_hour)) for h in horizons_hours]
    longest = max(steps)
    anchors = list(range(start, stop - longest + 1, anchor_every))
    if not anchors:
        raise DataError(f"no anchor in [{start}, {stop}) leaves room for a {max(horizons_hours)} h horizon")
    obs = _observed_status(observed, speeds, historical, threshold)
    if hasattr(forecaster, "forecast_batch"):
        forecasts = forecaster.forecast_batch([speeds[:a] for a in anchors], longest)
    else:
        forecasts = [forecaster.forecast(speeds[:a], longest) for a in anchors]
    forecasts = np.asarray(forecasts)
    report = EvalReport()
    for h, s in zip(horizons_hours, steps):
        pred = status_from_speed(forecasts[:, s - 1], historical[None, :], threshold)
        truth = np.stack([obs[a + s - 1] for a in anchors])
        report.rows.append(evaluate_statuses(pred, truth, h))
    return report
