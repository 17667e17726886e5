"""Road graphs, their adjacency weightings and Chebyshev graph filters.

Units: segment midpoints in kilometres, elevations in metres. Both Gaussian
kernels divide the squared difference by 100 in those units.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import DataError, DimensionError, NumericError

__all__ = [
    "ADJACENCY_KINDS",
    "DISTANCE_THRESHOLD",
    "W_MAX",
    "RoadSegment",
    "RoadGraph",
    "SpectralCache",
    "ChebFilter",
    "distance_weights",
    "elevation_weights",
    "first_adjacency",
    "second_adjacency",
    "third_adjacency",
    "build_graph",
    "normalized_laplacian",
    "power_iteration",
    "cheb_apply",
    "partition_by_cluster",
    "read_segments",
    "write_segments",
]

ADJACENCY_KINDS = ("distance", "elevation", "product")
DISTANCE_THRESHOLD = 0.3
W_MAX = 1.0
SEGMENT_COLUMNS = ("id", "mid_x_km", "mid_y_km", "elevation_m", "length_m", "cluster", "historical_speed_kmh")


@dataclass(frozen=True)
class RoadSegment:
    id: str
    mid_x_km: float
    mid_y_km: float
    elevation_m: float
    length_m: float
    cluster: int | None
    historical_speed_kmh: float

    def __post_init__(self):
        if not self.historical_speed_kmh > 0:
            raise DataError(f"segment {self.id!r}: historical speed must be positive, got {self.historical_speed_kmh}")
        if not self.length_m > 0:
            raise DataError(f"segment {self.id!r}: length must be positive, got {self.length_m}")

    @property
    def midpoint(self) -> tuple[float, float]:
        return (self.mid_x_km, self.mid_y_km)


def _positions(segments: Sequence[RoadSegment]) -> np.ndarray:
    pos = np.array([s.midpoint for s in segments], dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pos)):
        bad = [s.id for s in segments if not all(map(math.isfinite, s.midpoint))]
        raise DataError(f"non-finite midpoint coordinates for segments {bad}")
    return pos


def _elevations(segments: Sequence[RoadSegment]) -> np.ndarray:
    elev = np.array([s.elevation_m for s in segments], dtype=np.float64)
    if not np.all(np.isfinite(elev)):
        bad = [s.id for s in segments if not math.isfinite(s.elevation_m)]
        raise DataError(f"non-finite elevations for segments {bad}")
    return elev


def distance_weights(positions: np.ndarray) -> np.ndarray:
    """Thresholded Gaussian kernel of midpoint distance (km)."""
    diff = positions[:, None, :] - positions[None, :, :]
    w = np.exp(-np.sum(diff * diff, axis=-1) / 100.0)
    w[w <= DISTANCE_THRESHOLD] = 0.0
    np.fill_diagonal(w, 0.0)
    return w


def elevation_weights(elevations: np.ndarray, w_max: float = W_MAX) -> np.ndarray:
    """Directed elevation weights, ``e_ij = elevation_i - elevation_j``.

    Pairs where i lies below j get ``w_max``; pairs where i lies above j get
    ``exp(-e_ij**2 / 100)``; equal elevations get 1.0.
    """
    e = elevations[:, None] - elevations[None, :]
    w = np.where(e < 0, w_max, np.exp(-(e * e) / 100.0))
    np.fill_diagonal(w, 0.0)
    return w


@dataclass(frozen=True, eq=False)
class RoadGraph:
    segments: tuple[RoadSegment, ...]
    weights: np.ndarray
    kind: str

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        m = len(self.segments)
        if w.shape != (m, m):
            raise DimensionError(f"weight matrix shape {w.shape} does not match {m} segments")
        if self.kind not in ADJACENCY_KINDS:
            raise DataError(f"unknown adjacency kind {self.kind!r}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DataError("adjacency weights must be finite and non-negative")
        if np.any(np.diag(w) != 0):
            raise DataError("adjacency weights must have a zero diagonal")
        w.flags.writeable = False
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "weights", w)

    @property
    def n_segments(self) -> int:
        return len(self.segments)


def first_adjacency(segments: Sequence[RoadSegment]) -> RoadGraph:
    if len(segments) < 2:
        raise DataError("at least two segments are required to build an adjacency")
    return RoadGraph(tuple(segments), distance_weights(_positions(segments)), "distance")


def second_adjacency(segments: Sequence[RoadSegment], w_max: float = W_MAX) -> RoadGraph:
    return RoadGraph(tuple(segments), elevation_weights(_elevations(segments), w_max), "elevation")


def third_adjacency(segments: Sequence[RoadSegment], w_max: float = W_MAX) -> RoadGraph:
    w = first_adjacency(segments).weights * second_adjacency(segments, w_max).weights
    return RoadGraph(tuple(segments), w, "product")


def build_graph(segments: Sequence[RoadSegment], kind: str, w_max: float = W_MAX) -> RoadGraph:
    if kind == "distance":
        return first_adjacency(segments)
    if kind == "elevation":
        return second_adjacency(segments, w_max)
    if kind == "product":
        return third_adjacency(segments, w_max)
    raise DataError(f"unknown adjacency kind {kind!r}; expected one of {ADJACENCY_KINDS}")


@dataclass(frozen=True, eq=False)
class SpectralCache:
    laplacian: np.ndarray
    lambda_max: float
    scaled: np.ndarray
    kind: str = "distance"

    @property
    def n_segments(self) -> int:
        return self.laplacian.shape[0]

    @classmethod
    def from_scaled(cls, scaled: np.ndarray, lambda_max: float, kind: str) -> SpectralCache:
        scaled = np.array(scaled, dtype=np.float64)
        m = scaled.shape[0]
        laplacian = (scaled + np.eye(m)) * (lambda_max / 2.0)
        return cls(_frozen(laplacian), float(lambda_max), _frozen(scaled), kind)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def power_iteration(matrix: np.ndarray, tol: float = 1e-9, max_iter: int = 10_000) -> float:
    """Magnitude of the dominant eigenvalue of ``matrix``.

    Plain power iteration first. A non-symmetric matrix whose dominant
    eigenvalues form a complex pair never settles on one vector, so on
    failure a two-vector subspace iteration is tried. Raises NumericError
    if neither settles to ``tol`` (relative) within ``max_iter`` iterations.
    """
    m = matrix.shape[0]
    v = np.random.default_rng(0).uniform(0.5, 1.5, m)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(max_iter):
        w = matrix @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        # ||A v|| of the normalised iterate converges to |lambda| for symmetric and non-normal A alike
        if abs(norm - estimate) <= tol * norm:
            return float(norm)
        estimate = norm
        v = w / norm
    if m >= 2:
        found = _pair_iteration(matrix, tol, max_iter)
        if found is not None:
            return found
    raise NumericError(f"power iteration did not converge in {max_iter} iterations", iterations=max_iter)


def _pair_iteration(matrix: np.ndarray, tol: float, max_iter: int) -> float | None:
    q, _ = np.linalg.qr(np.random.default_rng(1).uniform(0.5, 1.5, (matrix.shape[0], 2)))
    estimate = 0.0
    for _ in range(max_iter):
        q, _ = np.linalg.qr(matrix @ q)
        rho = float(np.abs(np.linalg.eigvals(q.T @ matrix @ q)).max())
        if rho == 0.0:
            return 0.0
        if abs(rho - estimate) <= tol * rho:
            return rho
        estimate = rho
    return None


def normalized_laplacian(graph: RoadGraph, tol: float = 1e-9, max_iter: int = 10_000) -> SpectralCache:
    """``L = I - D^-1/2 W D^-1/2`` with its largest eigenvalue and rescaling to [-1, 1].

    Isolated segments (zero degree) get a zero row and column in the
    normalised adjacency. If every segment is isolated, ``lambda_max`` is
    taken as 2.
    """
    w = graph.weights
    m = w.shape[0]
    degree = w.sum(axis=1)
    inv_sqrt = np.zeros(m)
    np.divide(1.0, np.sqrt(degree), out=inv_sqrt, where=degree > 0)
    lap = np.eye(m) - inv_sqrt[:, None] * w * inv_sqrt[None, :]
    if not np.any(degree > 0):
        lam = 2.0
    else:
        lam = power_iteration(lap, tol, max_iter)
    scaled = 2.0 * lap / lam - np.eye(m)
    return SpectralCache(_frozen(lap), lam, _frozen(scaled), graph.kind)


@dataclass(frozen=True, eq=False)
class ChebFilter:
    """Chebyshev coefficients with shape (K, C_in, C_out)."""

    theta: np.ndarray = field()

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim == 1:
            theta = theta.reshape(-1, 1, 1)
        if theta.ndim != 3 or theta.shape[0] < 1:
            raise DimensionError(f"Chebyshev coefficients must be (K, C_in, C_out), got {theta.shape}")
        object.__setattr__(self, "theta", theta)

    @property
    def order(self) -> int:
        return self.theta.shape[0]


def chebyshev_terms(scaled: np.ndarray, x, order: int) -> list:
    """``[T_0(L~) x, ..., T_{K-1}(L~) x]`` by the three-term recursion."""
    x = ad.as_tensor(x)
    terms = [x]
    if order > 1:
        terms.append(ad.graph_propagate(scaled, x))
    for _ in range(2, order):
        terms.append(2.0 * ad.graph_propagate(scaled, terms[-1]) - terms[-2])
    return terms


def cheb_apply(cache: SpectralCache, cheb_filter, x):
    """Filter a signal ``x`` of shape (..., M, C_in) into (..., M, C_out).

    ``cheb_filter`` is a ChebFilter or a (K, C_in, C_out) Tensor (the latter
    keeps the coefficients on the tape). Returns a Tensor when given one.
    """
    theta = cheb_filter.theta if isinstance(cheb_filter, ChebFilter) else cheb_filter
    theta = ad.as_tensor(theta)
    was_tensor = isinstance(x, ad.Tensor)
    x = ad.as_tensor(x)
    k, c_in, c_out = theta.shape
    if x.ndim < 2 or x.shape[-2] != cache.n_segments or x.shape[-1] != c_in:
        raise DimensionError(
            f"cheb_apply: signal {x.shape} incompatible with {cache.n_segments} segments and filter {theta.shape}")
    terms = chebyshev_terms(cache.scaled, x, k)
    stacked = terms[0] if k == 1 else ad.concat(terms, axis=-1)
    out = ad.linear(stacked, ad.reshape(theta, (k * c_in, c_out)))
    return out if was_tensor else out.numpy()


def partition_by_cluster(segments: Iterable[RoadSegment]) -> list[tuple[int, list[RoadSegment]]]:
    """Group segments by cluster label, ordered by label, original order within each group."""
    groups: dict[int, list[RoadSegment]] = {}
    for seg in segments:
        if seg.cluster is None:
            raise DataError(f"segment {seg.id!r} has no cluster label")
        groups.setdefault(seg.cluster, []).append(seg)
    return [(label, groups[label]) for label in sorted(groups)]


def read_segments(path) -> list[RoadSegment]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty segment table") from None
        missing = [c for c in SEGMENT_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        col = {name: header.index(name) for name in SEGMENT_COLUMNS}
        segments = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            row = [v.strip() for v in row]
            try:
                cluster = row[col["cluster"]]
                segments.append(RoadSegment(
                    id=row[col["id"]],
                    mid_x_km=float(row[col["mid_x_km"]]),
                    mid_y_km=float(row[col["mid_y_km"]]),
                    elevation_m=float(row[col["elevation_m"]]),
                    length_m=float(row[col["length_m"]]),
                    cluster=int(cluster) if cluster else None,
                    historical_speed_kmh=float(row[col["historical_speed_kmh"]]),
                ))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    ids = [s.id for s in segments]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate segment ids")
    return segments


def write_segments(path, segments: Sequence[RoadSegment]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SEGMENT_COLUMNS)
        for s in segments:
            writer.writerow([s.id, repr(s.mid_x_km), repr(s.mid_y_km), repr(s.elevation_m), repr(s.length_m),
                             "" if s.cluster is None else s.cluster, repr(s.historical_speed_kmh)])
