"""Synthetic road networks, flood contagion and traffic speed traces.

The contagion rule: every step, each flooded segment ignites each
not-yet-flooded neighbour with a fixed probability, provided the neighbour
sits no more than ``elevation_tolerance_m`` above it. Neighbours are the
support of the distance adjacency (optionally cut at ``radius_km``). A
segment floods once; its depth rises linearly to the peak and then recedes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np

from .exceptions import ConfigError, DataError
from .graph import RoadSegment, distance_weights
from .metrics import FLOOD_THRESHOLD, depth_to_speed

__all__ = [
    "ScenarioConfig",
    "TraceTable",
    "GroundTruth",
    "SimulationResult",
    "generate_network",
    "simulate",
    "write_traces",
    "ingest_traces",
    "write_ground_truth",
    "read_ground_truth",
    "read_config_file",
    "write_config_file",
]

TRACE_COLUMNS = ("segment_id", "timestamp_min", "speed_kmh", "historical_kmh")
TRUTH_COLUMNS = ("segment_id", "timestamp_min", "flooded", "depth_mm")
HISTORICAL_RANGE = (40.0, 112.7)


@dataclass(frozen=True)
class ScenarioConfig:
    """Parameters of a synthetic flood scenario.

    Defaults describe the reference scenario: a 10 x 10 lattice at 5 km
    spacing plus 100 scattered segments, one week of 5-minute steps and one
    flood event starting at hour 60.
    """

    topology: str = "grid"
    grid_rows: int = 10
    grid_cols: int = 10
    grid_spacing_km: float = 5.0
    extra_segments: int = 100
    n_segments: int = 200
    extent_km: float = 45.0
    radius_km: float = math.inf
    bump_count: int = 6
    bump_amplitude_m: float = 15.0
    bump_width_km: float = 8.0
    clusters: str = "quadrant"
    seed_count: int = 3
    seed_step: int = 720
    spread_probability: float = 0.01
    elevation_tolerance_m: float = 1.0
    rise_steps: int = 12
    peak_depth_mm: float = 1500.0
    fall_steps: int = 1500
    step_minutes: float = 5.0
    total_steps: int = 2016
    noise_std_kmh: float = 3.0
    threshold: float = FLOOD_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        if self.topology not in ("grid", "random_geometric"):
            raise ConfigError(f"topology must be 'grid' or 'random_geometric', got {self.topology!r}")
        if self.clusters not in ("quadrant", "single"):
            raise ConfigError(f"clusters must be 'quadrant' or 'single', got {self.clusters!r}")
        if not 0.0 <= self.spread_probability <= 1.0:
            raise ConfigError(f"spread_probability must lie in [0, 1], got {self.spread_probability}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        for name in ("grid_rows", "grid_cols", "n_segments", "seed_count", "rise_steps", "fall_steps",
                     "total_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("extra_segments", "bump_count", "seed_step"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("grid_spacing_km", "extent_km", "radius_km", "bump_width_km", "step_minutes"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.peak_depth_mm < 0 or self.noise_std_kmh < 0 or self.elevation_tolerance_m < 0:
            raise ConfigError("peak_depth_mm, noise_std_kmh and elevation_tolerance_m must be >= 0")
        if self.segment_count < 2:
            raise ConfigError("a scenario needs at least two segments")
        if self.seed_count > self.segment_count:
            raise ConfigError(f"seed_count {self.seed_count} exceeds the {self.segment_count} segments")

    @property
    def segment_count(self) -> int:
        if self.topology == "grid":
            return self.grid_rows * self.grid_cols + self.extra_segments
        return self.n_segments

    @property
    def steps_per_hour(self) -> float:
        return 60.0 / self.step_minutes


def _coerce(field_type, raw: str):
    kind = field_type if isinstance(field_type, str) else field_type.__name__
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def read_config_file(path, cls=ScenarioConfig):
    """Parse a ``key = value`` file (``#`` comments) into a config dataclass."""
    known = {f.name: f.type for f in fields(cls)}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _coerce(known[key], raw)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value {raw!r} for {key}") from None
    return cls(**values)


def write_config_file(path, config) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(config):
            value = getattr(config, f.name)
            fh.write(f"{f.name} = {repr(value) if isinstance(value, float) else value}\n")


def _streams(seed: int):
    network, flood = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(network), np.random.default_rng(flood)


def generate_network(config: ScenarioConfig) -> list[RoadSegment]:
    """Lay out segments, sample the elevation field, speeds and cluster labels."""
    rng, _ = _streams(config.seed)
    if config.topology == "grid":
        r, c = np.meshgrid(np.arange(config.grid_rows), np.arange(config.grid_cols), indexing="ij")
        lattice = np.column_stack([c.ravel(), r.ravel()]).astype(np.float64) * config.grid_spacing_km
        hi = np.array([config.grid_cols - 1, config.grid_rows - 1], dtype=np.float64) * config.grid_spacing_km
        extra = rng.uniform(0.0, 1.0, size=(config.extra_segments, 2)) * hi
        pos = np.vstack([lattice, extra])
    else:
        hi = np.array([config.extent_km, config.extent_km])
        pos = rng.uniform(0.0, config.extent_km, size=(config.n_segments, 2))
    centres = rng.uniform(0.0, 1.0, size=(config.bump_count, 2)) * hi
    amplitudes = config.bump_amplitude_m * rng.uniform(0.5, 1.5, size=config.bump_count)
    elevation = np.zeros(len(pos))
    for centre, amp in zip(centres, amplitudes):
        d2 = np.sum((pos - centre) ** 2, axis=1)
        elevation += amp * np.exp(-d2 / (2.0 * config.bump_width_km ** 2))
    historical = rng.uniform(*HISTORICAL_RANGE, size=len(pos))
    lengths = rng.uniform(100.0, 1000.0, size=len(pos))
    if config.clusters == "quadrant":
        mid = hi / 2.0
        labels = 1 + (pos[:, 0] >= mid[0]).astype(int) + 2 * (pos[:, 1] >= mid[1]).astype(int)
    else:
        labels = np.ones(len(pos), dtype=int)
    width = len(str(len(pos) - 1))
    return [
        RoadSegment(f"s{i:0{width}d}", float(pos[i, 0]), float(pos[i, 1]), float(elevation[i]),
                    float(lengths[i]), int(labels[i]), float(historical[i]))
        for i in range(len(pos))
    ]


@dataclass(frozen=True, eq=False)
class TraceTable:
    """Dense (T, M) speeds on a uniform time grid; NaN marks null records."""

    segment_ids: tuple[str, ...]
    timestamps: np.ndarray
    speeds: np.ndarray
    historical: np.ndarray

    @property
    def null_mask(self) -> np.ndarray:
        return np.isnan(self.speeds)

    @property
    def tensor(self) -> np.ndarray:
        """Speeds as a (T, M, 1) array."""
        return self.speeds[:, :, None]

    @property
    def step_minutes(self) -> float:
        return float(self.timestamps[1] - self.timestamps[0]) if len(self.timestamps) > 1 else 5.0

    def select(self, ids) -> TraceTable:
        index = {s: i for i, s in enumerate(self.segment_ids)}
        try:
            cols = [index[s] for s in ids]
        except KeyError as exc:
            raise DataError(f"segment {exc.args[0]!r} is not present in the traces") from None
        return TraceTable(tuple(ids), self.timestamps, self.speeds[:, cols], self.historical[cols])


@dataclass(frozen=True, eq=False)
class GroundTruth:
    segment_ids: tuple[str, ...]
    timestamps: np.ndarray
    flooded: np.ndarray
    depth_mm: np.ndarray

    def select(self, ids) -> GroundTruth:
        index = {s: i for i, s in enumerate(self.segment_ids)}
        try:
            cols = [index[s] for s in ids]
        except KeyError as exc:
            raise DataError(f"segment {exc.args[0]!r} is not present in the ground truth") from None
        return GroundTruth(tuple(ids), self.timestamps, self.flooded[:, cols], self.depth_mm[:, cols])


@dataclass(frozen=True, eq=False)
class SimulationResult:
    traces: TraceTable
    truth: GroundTruth
    ignition_step: np.ndarray
    ignition_edges: tuple[tuple[int, int, int], ...]


def _depth_profile(config: ScenarioConfig, ignition: np.ndarray, t: int) -> np.ndarray:
    since = t - ignition + 1
    rise, fall = config.rise_steps, config.fall_steps
    depth = config.peak_depth_mm * np.minimum(since / rise, (rise + fall - since) / fall)
    active = (ignition >= 0) & (since >= 1) & (since < rise + fall)
    return np.where(active, np.maximum(depth, 0.0), 0.0)


def simulate(config: ScenarioConfig, segments) -> SimulationResult:
    """Run the contagion and emit traces plus the ground truth.

    Speed of a flooded segment follows the depth-speed curve (capped at the
    historical speed); an unflooded one is its historical speed plus Gaussian
    noise. Speeds below the threshold fraction of historical are emitted as
    null.
    """
    _, rng = _streams(config.seed)
    m = len(segments)
    pos = np.array([s.midpoint for s in segments])
    elev = np.array([s.elevation_m for s in segments])
    hist = np.array([s.historical_speed_kmh for s in segments])
    neighbours = distance_weights(pos) > 0
    if math.isfinite(config.radius_km):
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        neighbours &= d <= config.radius_km
    reachable = neighbours & (elev[None, :] <= elev[:, None] + config.elevation_tolerance_m)

    ignition = np.full(m, -1, dtype=np.int64)
    seeds = np.argsort(elev, kind="stable")[:config.seed_count]
    edges: list[tuple[int, int, int]] = []
    n = config.total_steps
    speeds = np.empty((n, m))
    depth = np.empty((n, m))
    for t in range(n):
        if t == config.seed_step:
            ignition[seeds[ignition[seeds] < 0]] = t
        depth[t] = _depth_profile(config, ignition, t)
        flooded = depth[t] > 0
        candidates = reachable & flooded[:, None] & (ignition < 0)[None, :]
        src, dst = np.nonzero(candidates)
        if len(src):
            hits = rng.random(len(src)) < config.spread_probability
            for i, j in zip(src[hits], dst[hits]):
                if ignition[j] < 0:
                    ignition[j] = t + 1
                    edges.append((t, int(i), int(j)))
        noise = rng.normal(0.0, config.noise_std_kmh, size=m)
        dry = np.maximum(hist + noise, 0.0)
        wet = np.minimum(depth_to_speed(depth[t]), hist)
        speeds[t] = np.where(flooded, wet, dry)
    speeds[speeds < config.threshold * hist[None, :]] = np.nan
    ids = tuple(s.id for s in segments)
    stamps = np.arange(n, dtype=np.int64) * config.step_minutes
    traces = TraceTable(ids, stamps, speeds, hist)
    truth = GroundTruth(ids, stamps, (depth > 0).astype(np.int8), depth)
    return SimulationResult(traces, truth, ignition, tuple(edges))


def _fmt_stamp(value) -> str:
    value = float(value)
    return str(int(value)) if value.is_integer() else repr(value)


def write_traces(path, traces: TraceTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for t, stamp in enumerate(traces.timestamps):
            ts = _fmt_stamp(stamp)
            for j, sid in enumerate(traces.segment_ids):
                v = traces.speeds[t, j]
                writer.writerow((sid, ts, "null" if np.isnan(v) else repr(float(v)), repr(float(traces.historical[j]))))


def _grid(path, records, segment_ids, what):
    """Place ``(segment, stamp, values)`` records onto a dense uniform grid."""
    by_seg: dict[str, dict[float, tuple]] = {}
    for sid, stamp, values in records:
        by_seg.setdefault(sid, {})[stamp] = values
    if segment_ids is None:
        segment_ids = tuple(by_seg)
    else:
        segment_ids = tuple(segment_ids)
        unknown = [s for s in by_seg if s not in set(segment_ids)]
        if unknown:
            raise DataError(f"{path}: unknown segment id {unknown[0]!r}")
    if not by_seg:
        raise DataError(f"{path}: no {what} records")
    stamps = sorted({st for recs in by_seg.values() for st in recs})
    if len(stamps) > 1:
        step = stamps[1] - stamps[0]
        expected = [stamps[0] + k * step for k in range(len(stamps))]
        if any(abs(a - b) > 1e-9 for a, b in zip(stamps, expected)):
            raise DataError(f"{path}: timestamps do not form a uniform grid")
    for sid in segment_ids:
        recs = by_seg.get(sid, {})
        for st in stamps:
            if st not in recs:
                raise DataError(f"{path}: missing record for segment {sid!r} at timestamp {_fmt_stamp(st)}")
    return segment_ids, np.array(stamps), by_seg


def ingest_traces(path, segment_ids=None) -> TraceTable:
    """Read a trace CSV into a dense table; ``null`` speeds become NaN."""
    records = []
    hist: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(h.strip() for h in next(reader, ()))
        if header != TRACE_COLUMNS:
            raise DataError(f"{path}: expected header {','.join(TRACE_COLUMNS)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid, stamp, speed, h = (v.strip() for v in row)
                value = math.nan if speed.lower() == "null" else float(speed)
                records.append((sid, float(stamp), (value,)))
                hist[sid] = float(h)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not (math.isnan(value) or value >= 0) or not hist[sid] > 0:
                raise DataError(f"{path}:{lineno}: speeds must be >= 0 and historical speeds > 0")
    ids, stamps, by_seg = _grid(path, records, segment_ids, "trace")
    speeds = np.array([[by_seg[s][st][0] for s in ids] for st in stamps]).reshape(len(stamps), len(ids))
    return TraceTable(ids, stamps, speeds, np.array([hist[s] for s in ids]))


def write_ground_truth(path, truth: GroundTruth) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRUTH_COLUMNS)
        for t, stamp in enumerate(truth.timestamps):
            ts = _fmt_stamp(stamp)
            for j, sid in enumerate(truth.segment_ids):
                writer.writerow((sid, ts, int(truth.flooded[t, j]), repr(float(truth.depth_mm[t, j]))))


def read_ground_truth(path, segment_ids=None) -> GroundTruth:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(h.strip() for h in next(reader, ()))
        if header != TRUTH_COLUMNS:
            raise DataError(f"{path}: expected header {','.join(TRUTH_COLUMNS)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid, stamp, flooded, depth = (v.strip() for v in row)
                records.append((sid, float(stamp), (int(flooded), float(depth))))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    ids, stamps, by_seg = _grid(path, records, segment_ids, "ground-truth")
    flooded = np.array([[by_seg[s][st][0] for s in ids] for st in stamps], dtype=np.int8).reshape(len(stamps), -1)
    depth = np.array([[by_seg[s][st][1] for s in ids] for st in stamps]).reshape(len(stamps), -1)
    return GroundTruth(ids, stamps, flooded, depth)
