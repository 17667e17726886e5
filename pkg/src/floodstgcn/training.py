"""Normalisation, windowing, the training loop and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import (
    ArchitectureMismatchError,
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    DataError,
    DimensionError,
    TrainingError,
)
from .graph import SpectralCache
from .model import ModelConfig, StgcnModel, model_forward

__all__ = [
    "NormalizationStats",
    "WindowedDataset",
    "TrainConfig",
    "Adam",
    "normalize",
    "denormalize",
    "make_windows",
    "train",
    "checkpoint_save",
    "checkpoint_load",
    "Checkpoint",
    "CHECKPOINT_FORMAT",
    "CHECKPOINT_VERSION",
]

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "floodstgcn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    divisors: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.divisors, dtype=np.float64)
        if np.any(~(d > 0)):
            raise DataError("normalisation divisors must be positive")
        object.__setattr__(self, "divisors", d)


def normalize(speeds, historical) -> tuple[np.ndarray, NormalizationStats]:
    """Replace nulls (NaN) by 0 and divide each segment by max(historical, observed max)."""
    speeds = np.asarray(speeds, dtype=np.float64)
    historical = np.asarray(historical, dtype=np.float64)
    if speeds.ndim != 2 or historical.shape != (speeds.shape[1],):
        raise DimensionError(f"speeds {speeds.shape} and historical {historical.shape} do not align")
    if np.any(~(historical > 0)):
        raise DataError("historical speeds must be positive")
    all_null = np.all(np.isnan(speeds), axis=0)
    if np.any(all_null):
        warnings.warn(f"{int(all_null.sum())} segment(s) have only null speeds; they are kept as zeros",
                      stacklevel=2)
    observed_max = np.where(all_null, 0.0, np.nanmax(np.where(all_null[None, :], 0.0, speeds), axis=0))
    stats = NormalizationStats(np.maximum(historical, observed_max))
    return apply_normalization(speeds, stats), stats


def apply_normalization(speeds, stats: NormalizationStats) -> np.ndarray:
    speeds = np.asarray(speeds, dtype=np.float64)
    return np.where(np.isnan(speeds), 0.0, speeds) / stats.divisors


def denormalize(values, stats: NormalizationStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.divisors


@dataclass(frozen=True, eq=False)
class WindowedDataset:
    """Windows ``series[i : i + N]`` paired with targets ``series[i + N]``.

    ``starts`` holds each window's first time index into ``series``.
    """

    series: np.ndarray
    n_history: int
    starts: np.ndarray

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def target_index(self) -> np.ndarray:
        return self.starts + self.n_history

    def batch(self, index) -> tuple[np.ndarray, np.ndarray]:
        starts = self.starts[np.asarray(index)]
        offsets = starts[:, None] + np.arange(self.n_history)[None, :]
        x = self.series[offsets][..., None]
        y = self.series[starts + self.n_history]
        return x, y

    @property
    def inputs(self) -> np.ndarray:
        return self.batch(np.arange(len(self)))[0]

    @property
    def targets(self) -> np.ndarray:
        return self.batch(np.arange(len(self)))[1]


def make_windows(series, n_history: int, split_time: int | None = None
                 ) -> tuple[WindowedDataset, WindowedDataset]:
    """Stride-1 windows; a pair goes to the test set when its target index is >= ``split_time``.

    Training windows never read at or beyond ``split_time``.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 3 and series.shape[-1] == 1:
        series = series[..., 0]
    t = series.shape[0]
    if n_history < 1 or t < n_history + 1:
        raise DataError(f"series of length {t} is too short for windows of {n_history} steps plus a target")
    split_time = t if split_time is None else int(split_time)
    starts = np.arange(t - n_history)
    targets = starts + n_history
    train_starts = starts[targets < split_time]
    test_starts = starts[(targets >= split_time) & (starts >= 0)]
    return WindowedDataset(series, n_history, train_starts), WindowedDataset(series, n_history, test_starts)


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    ``batches_per_epoch`` caps how many mini-batches are drawn per epoch
    (without replacement, from a seeded shuffle); ``None`` uses every window.
    ``input_noise`` is the std of Gaussian noise added to each input window
    (targets stay clean). It keeps recursive rollouts from drifting away
    from states, such as a stalled segment's run of zeros, that the
    training data only ever shows exactly.
    """

    epochs: int = 20
    batch_size: int = 16
    batches_per_epoch: int | None = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    input_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs must be >= 0, batch_size and patience >= 1")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ConfigError("batches_per_epoch must be >= 1 or None")
        if not self.learning_rate > 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("learning_rate must be positive and betas in [0, 1)")
        if not self.input_noise >= 0:
            raise ConfigError(f"input_noise must be >= 0, got {self.input_noise}")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adaptive-moment gradient descent over a name -> array parameter map."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        updated = {}
        for name, value in params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            step = self.lr * (self.m[name] / corr1) / (np.sqrt(self.v[name] / corr2) + self.eps)
            updated[name] = value - step
        return updated


def mse_loss(model: StgcnModel, params, x, y):
    pred = model_forward(model, x, params)
    diff = pred - y
    return ad.mean(diff * diff)


def train(model: StgcnModel, dataset: WindowedDataset, config: TrainConfig = TrainConfig()
          ) -> tuple[StgcnModel, list[float]]:
    """Minimise next-step MSE with Adam; returns the trained model and per-epoch mean loss.

    Stops early once the epoch loss has not improved for ``patience``
    epochs. Raises TrainingError if the loss becomes non-finite.
    """
    if dataset.n_history != model.config.n_history:
        raise ConfigError(f"windows hold {dataset.n_history} steps, model expects {model.config.n_history}")
    if dataset.series.shape[1] != model.n_segments:
        raise DimensionError(f"dataset has {dataset.series.shape[1]} segments, model {model.n_segments}")
    if config.epochs == 0 or len(dataset) == 0:
        return model, []
    rng = np.random.default_rng(config.seed)
    noise_rng = np.random.default_rng([config.seed, 1])
    params = {k: v.copy() for k, v in model.params.items()}
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    curve: list[float] = []
    best, stale = np.inf, 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        batches = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        if config.batches_per_epoch is not None:
            batches = batches[:config.batches_per_epoch]
        total, count = 0.0, 0
        for idx in batches:
            x, y = dataset.batch(idx)
            if config.input_noise > 0:
                # stay inside the normalised range the model sees at forecast time
                x = np.clip(x + noise_rng.normal(0.0, config.input_noise, size=x.shape), 0.0, 1.0)
            tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
            loss = mse_loss(model, tensors, x, y)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss became {value} in epoch {epoch}", epoch=epoch)
            grads = ad.backward(loss, tensors)
            params = opt.step(params, grads)
            total += value * len(idx)
            count += len(idx)
        epoch_loss = total / count
        curve.append(epoch_loss)
        logger.info("epoch %d loss %.6g", epoch, epoch_loss)
        if epoch_loss < best:
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return model.with_params(params), curve


@dataclass(eq=False)
class Checkpoint:
    """A trained model plus everything needed to turn km/h traces into forecasts."""

    model: StgcnModel
    stats: NormalizationStats
    historical: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def segment_ids(self) -> tuple[str, ...]:
        return self.model.segment_ids


def _array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}


def _unarray(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def _payload(ckpt: Checkpoint) -> dict:
    model = ckpt.model
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model.config.to_dict(),
        "segment_ids": list(model.segment_ids),
        "adjacency": {kind: {"lambda_max": cache.lambda_max, "scaled": _array(cache.scaled)}
                      for kind, cache in sorted(model.caches.items())},
        "normalization": _array(ckpt.stats.divisors),
        "historical": _array(ckpt.historical),
        "metadata": ckpt.metadata,
        "params": {name: _array(value) for name, value in sorted(model.params.items())},
    }


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def checkpoint_save(ckpt: Checkpoint, path) -> None:
    payload = _payload(ckpt)
    body = _canonical(payload)
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write('{"sha256":"%s","payload":%s}\n' % (digest, body))


def checkpoint_load(path, expected_architecture: str | None = None) -> Checkpoint:
    """Load a checkpoint, verifying its checksum, version and (optionally) architecture."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        payload = doc["payload"]
        digest = doc["sha256"]
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if hashlib.sha256(_canonical(payload).encode("utf-8")).hexdigest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpointError(f"{path}: unknown format {payload.get('format')!r}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {payload.get('version')} is not supported (expected {CHECKPOINT_VERSION})")
    config = ModelConfig.from_dict(payload["model"])
    if expected_architecture is not None:
        expected = ModelConfig(expected_architecture).architecture
        if config.architecture != expected:
            raise ArchitectureMismatchError(
                f"{path}: checkpoint holds {config.architecture}, expected {expected}")
    caches = {kind: SpectralCache.from_scaled(_unarray(d["scaled"]), d["lambda_max"], kind)
              for kind, d in payload["adjacency"].items()}
    params = {name: _unarray(d) for name, d in payload["params"].items()}
    model = StgcnModel(config, caches, params, tuple(payload["segment_ids"]))
    return Checkpoint(model, NormalizationStats(_unarray(payload["normalization"])),
                      _unarray(payload["historical"]), payload["metadata"])
