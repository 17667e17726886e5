"""scikit-learn style estimators wrapping the STGCN pipeline.

``SpeedScaler`` turns km/h traces into the normalised signal,
``STGCNForecaster`` fits one STGCN on a normalised (T, M) series, and
``FloodForecaster`` chains the two per cluster and speaks km/h and flood
statuses.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin, clone
from sklearn.utils.validation import check_is_fitted

from ._validation import check_series, check_windows
from .exceptions import DataError, DimensionError
from .graph import partition_by_cluster
from .metrics import FLOOD_THRESHOLD, status_from_speed
from .model import ModelConfig, StgcnModel, rollout
from .training import (
    Checkpoint,
    NormalizationStats,
    TrainConfig,
    apply_normalization,
    denormalize,
    make_windows,
    normalize,
    train,
)

__all__ = ["SpeedScaler", "STGCNForecaster", "FloodForecaster"]


class SpeedScaler(TransformerMixin, BaseEstimator):
    """Per-segment scaling of km/h speeds into [0, 1].

    Nulls (NaN) become 0 and each segment is divided by the larger of its
    historical speed and its observed maximum.
    """

    def fit(self, X, y=None, historical=None):
        X = check_series(X, allow_nan=True)
        if historical is None:
            raise DataError("SpeedScaler.fit needs the per-segment historical speeds")
        _, self.stats_ = normalize(X, historical)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features_in_:
            raise DimensionError(f"expected {self.n_features_in_} segments, got {X.shape[-1]}")
        return apply_normalization(X, self.stats_)

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        return denormalize(X, self.stats_)


class STGCNForecaster(RegressorMixin, BaseEstimator):
    """Next-step forecaster over a normalised (T, M) speed series on one road graph.

    ``fit`` builds stride-1 windows from the whole series it is given, so
    hold-out data must be sliced off by the caller. ``predict`` maps
    histories of shape (T, M) or (B, T, M) (the last ``n_history`` steps are
    used) to next-step predictions of shape (M,) or (B, M).
    """

    def __init__(self, architecture="model1", blocks=None, n_history=None, temporal_kernel=3, cheb_order=3,
                 channels=(64, 16, 64), w_max=1.0, epochs=20, batch_size=16, batches_per_epoch=8,
                 learning_rate=1e-3, beta1=0.9, beta2=0.999, patience=10, input_noise=0.1, random_state=0):
        self.architecture = architecture
        self.blocks = blocks
        self.n_history = n_history
        self.temporal_kernel = temporal_kernel
        self.cheb_order = cheb_order
        self.channels = channels
        self.w_max = w_max
        self.epochs = epochs
        self.batch_size = batch_size
        self.batches_per_epoch = batches_per_epoch
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.patience = patience
        self.input_noise = input_noise
        self.random_state = random_state

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.architecture, None if self.blocks is None else tuple(self.blocks),
                           self.n_history, self.temporal_kernel, self.cheb_order, tuple(self.channels), self.w_max)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.batches_per_epoch, self.learning_rate,
                           self.beta1, self.beta2, patience=self.patience,
                           input_noise=self.input_noise, seed=self._seed())

    def _seed(self) -> int:
        return 0 if self.random_state is None else int(self.random_state)

    def fit(self, X, y=None, *, segments):
        X = check_series(X)
        if len(segments) != X.shape[1]:
            raise DimensionError(f"X has {X.shape[1]} segments but {len(segments)} were given")
        config = self.model_config()
        model = StgcnModel.build(config, segments, seed=self._seed())
        windows, _ = make_windows(X, config.n_history)
        self.model_, self.loss_curve_ = train(model, windows, self.train_config())
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: StgcnModel) -> STGCNForecaster:
        c = model.config
        est = cls(c.architecture, c.blocks, c.n_history, c.temporal_kernel, c.cheb_order, c.channels, c.w_max)
        est.model_ = model
        est.loss_curve_ = []
        est.n_features_in_ = model.n_segments
        return est

    def predict(self, X):
        check_is_fitted(self, "model_")
        windows, batched = check_windows(X, self.model_.config.n_history, self.n_features_in_)
        out = self.model_.predict(windows[..., None])
        return out if batched else out[0]

    def rollout(self, X, steps: int):
        check_is_fitted(self, "model_")
        windows, batched = check_windows(X, self.model_.config.n_history, self.n_features_in_)
        out = rollout(self.model_, windows[..., None], steps)
        return out if batched else out[0]


def _fit_one(job):
    est, Z, segments = job
    return est.fit(Z, segments=segments)


class FloodForecaster(BaseEstimator):
    """Cluster-wise STGCN forecasting of km/h speeds and flood statuses.

    One clone of ``forecaster`` is trained per cluster label (or one for the
    whole network when ``per_cluster`` is False). Forecasts are returned in
    ``segment_ids_`` order: clusters by ascending label, input order within
    each.
    """

    def __init__(self, forecaster=None, threshold=FLOOD_THRESHOLD, per_cluster=True, n_jobs=None):
        self.forecaster = forecaster
        self.threshold = threshold
        self.per_cluster = per_cluster
        self.n_jobs = n_jobs

    def fit(self, X, y=None, *, segments, historical=None):
        X = check_series(X, allow_nan=True, n_segments=len(segments))
        if historical is None:
            historical = np.array([s.historical_speed_kmh for s in segments])
        self.scaler_ = SpeedScaler().fit(X, historical=historical)
        Z = self.scaler_.transform(X)
        base = self.forecaster if self.forecaster is not None else STGCNForecaster()
        position = {s.id: i for i, s in enumerate(segments)}
        groups = partition_by_cluster(segments) if self.per_cluster else [(0, list(segments))]
        columns = [np.array([position[s.id] for s in group]) for _, group in groups]
        jobs = [(clone(base), Z[:, cols], group) for cols, (_, group) in zip(columns, groups)]
        workers = min(self.n_jobs or 1, len(jobs))
        if workers > 1:
            # clusters are independent and each fit is seeded, so results match the serial path
            with ProcessPoolExecutor(max_workers=workers) as pool:
                fitted = list(pool.map(_fit_one, jobs))
        else:
            fitted = [_fit_one(job) for job in jobs]
        historical = np.asarray(historical, dtype=np.float64)
        self.clusters_ = [(label, est, NormalizationStats(self.scaler_.stats_.divisors[cols]), historical[cols])
                          for (label, _), est, cols in zip(groups, fitted, columns)]
        self._index(segments)
        return self

    def _index(self, segments_or_ids):
        ids = [getattr(s, "id", s) for s in segments_or_ids]
        position = {sid: i for i, sid in enumerate(ids)}
        order = [sid for _, est, _, _ in self.clusters_ for sid in est.model_.segment_ids]
        self.segment_ids_ = tuple(order)
        self.historical_ = np.concatenate([h for *_, h in self.clusters_])
        self._input_order = np.array([position[s] for s in order]) if set(order) == set(ids) else None
        self.n_features_in_ = len(order)

    @property
    def n_history(self) -> int:
        return max(est.model_.config.n_history for _, est, _, _ in self.clusters_)

    def forecast(self, history, steps: int) -> np.ndarray:
        """km/h forecasts (steps, M) from a km/h history (T, M), or batched (B, T, M) -> (B, steps, M).

        History columns must follow ``segment_ids_``.
        """
        check_is_fitted(self, "clusters_")
        windows, batched = check_windows(history, self.n_history, self.n_features_in_, allow_nan=True)
        outputs, start = [], 0
        for _, est, stats, _ in self.clusters_:
            m = est.n_features_in_
            z = apply_normalization(windows[:, :, start:start + m], stats)
            outputs.append(denormalize(est.rollout(z, steps), stats))
            start += m
        out = np.concatenate(outputs, axis=-1)
        return out if batched else out[0]

    def forecast_batch(self, histories, steps: int) -> np.ndarray:
        n = self.n_history
        return self.forecast(np.stack([np.asarray(h)[-n:] for h in histories]), steps)

    def predict(self, X):
        """One-step km/h forecast."""
        out = self.forecast(X, 1)
        return out[..., 0, :]

    def predict_status(self, history, steps: int) -> np.ndarray:
        return status_from_speed(self.forecast(history, steps), self.historical_, self.threshold)

    def to_checkpoints(self, metadata=None) -> list[tuple[int, Checkpoint]]:
        check_is_fitted(self, "clusters_")
        meta = dict(metadata or {})
        return [(label, Checkpoint(est.model_, stats, hist, {**meta, "cluster": int(label),
                                                             "threshold": self.threshold,
                                                             "loss_curve": list(est.loss_curve_)}))
                for label, est, stats, hist in self.clusters_]

    @classmethod
    def from_checkpoints(cls, checkpoints) -> FloodForecaster:
        checkpoints = sorted(checkpoints, key=lambda c: c.metadata.get("cluster", 0))
        threshold = checkpoints[0].metadata.get("threshold", FLOOD_THRESHOLD) if checkpoints else FLOOD_THRESHOLD
        self = cls(threshold=threshold, per_cluster=len(checkpoints) > 1)
        self.clusters_ = [(c.metadata.get("cluster", 0), STGCNForecaster.from_model(c.model), c.stats,
                           np.asarray(c.historical)) for c in checkpoints]
        self._index([sid for c in checkpoints for sid in c.segment_ids])
        return self
