"""STGCN layers, convolution blocks and the three flood architectures.

Parameters live in a flat ``name -> ndarray`` mapping so the optimiser and
the checkpoint code can treat them uniformly. Forward functions take the
same mapping with ``Tensor`` values, which keeps them on the tape.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigError, DimensionError, WindowTooShortError
from .graph import RoadSegment, SpectralCache, build_graph, cheb_apply, normalized_laplacian

__all__ = [
    "ARCHITECTURES",
    "BLOCK_GRAPHS",
    "ModelConfig",
    "StgcnModel",
    "temporal_forward",
    "graph_forward",
    "block_forward",
    "model_forward",
    "rollout",
    "post_block_extent",
]

ARCHITECTURES = {
    "model1": ("ST", "ST"),
    "model2": ("ET", "ST", "ST"),
    "model3": ("SET", "SET", "SET"),
}

BLOCK_GRAPHS = {
    "ST": ("distance",),
    "ET": ("elevation",),
    "SET": ("product",),
    "EST": ("elevation", "distance"),
}

_ALIASES = {"1": "model1", "2": "model2", "3": "model3"}


def post_block_extent(n_history: int, temporal_kernel: int, n_blocks: int) -> int:
    return n_history - 2 * n_blocks * (temporal_kernel - 1)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``blocks`` overrides the block sequence implied by ``architecture`` (for
    instance ``("EST", "EST")``). ``n_history=None`` picks 12 steps when that
    leaves at least 4 steps for the output layer, else the smallest history
    that does.
    """

    architecture: str = "model1"
    blocks: tuple[str, ...] | None = None
    n_history: int | None = None
    temporal_kernel: int = 3
    cheb_order: int = 3
    channels: tuple[int, int, int] = (64, 16, 64)
    w_max: float = 1.0

    def __post_init__(self):
        arch = _ALIASES.get(str(self.architecture).lower(), str(self.architecture).lower())
        if arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; expected one of {sorted(ARCHITECTURES)}")
        object.__setattr__(self, "architecture", arch)
        blocks = tuple(self.blocks) if self.blocks is not None else ARCHITECTURES[arch]
        for b in blocks:
            if b not in BLOCK_GRAPHS:
                raise ConfigError(f"unknown block kind {b!r}; expected one of {sorted(BLOCK_GRAPHS)}")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError(f"channels must be three positive integers, got {self.channels}")
        if self.temporal_kernel < 1 or self.cheb_order < 1:
            raise ConfigError("temporal_kernel and cheb_order must be >= 1")
        if self.n_history is None:
            n = 12 if post_block_extent(12, self.temporal_kernel, len(blocks)) >= 4 else \
                2 * len(blocks) * (self.temporal_kernel - 1) + 4
            object.__setattr__(self, "n_history", n)
        minimum = 2 * len(blocks) * (self.temporal_kernel - 1) + 1
        if self.n_history < minimum:
            raise ConfigError(
                f"history of {self.n_history} steps is too short for {len(blocks)} blocks with temporal kernel "
                f"{self.temporal_kernel}; need at least {minimum}")

    @property
    def adjacency_kinds(self) -> tuple[str, ...]:
        kinds = []
        for b in self.blocks:
            for k in BLOCK_GRAPHS[b]:
                if k not in kinds:
                    kinds.append(k)
        return tuple(kinds)

    @property
    def head_width(self) -> int:
        return post_block_extent(self.n_history, self.temporal_kernel, len(self.blocks))

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "blocks": list(self.blocks),
            "n_history": self.n_history,
            "temporal_kernel": self.temporal_kernel,
            "cheb_order": self.cheb_order,
            "channels": list(self.channels),
            "w_max": self.w_max,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        d = dict(d)
        d["blocks"] = tuple(d["blocks"])
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    kt, k = config.temporal_kernel, config.cheb_order
    c_t, c_g, c_out = config.channels
    params: dict[str, np.ndarray] = {}

    def temporal(prefix, c_in, c, width):
        params[f"{prefix}.kernel"] = _glorot(rng, (width, c_in, 2 * c), width * c_in, 2 * c)
        params[f"{prefix}.bias"] = np.zeros(2 * c)

    c_in = 1
    for i, kind in enumerate(config.blocks):
        temporal(f"block{i}.temporal1", c_in, c_t, kt)
        g_in = c_t
        for j, _ in enumerate(BLOCK_GRAPHS[kind]):
            params[f"block{i}.graph{j}.theta"] = _glorot(rng, (k, g_in, c_g), k * g_in, c_g)
            params[f"block{i}.graph{j}.bias"] = np.zeros(c_g)
            g_in = c_g
        temporal(f"block{i}.temporal2", c_g, c_out, kt)
        params[f"block{i}.norm.gain"] = np.ones(c_out)
        params[f"block{i}.norm.bias"] = np.zeros(c_out)
        c_in = c_out
    temporal("head.temporal", c_in, c_in, config.head_width)
    params["head.w"] = _glorot(rng, (c_in,), c_in, 1)
    params["head.b"] = np.zeros(())
    return params


def temporal_forward(x, kernel, bias=None):
    """Gated temporal convolution.

    The kernel has 2*C_out output channels, split into a value half P and a
    gate half Q. When C_in >= C_out the input's first C_out channels, aligned
    to the last step of each window, are added to P before gating.
    """
    x, kernel = ad.as_tensor(x), ad.as_tensor(kernel)
    kt, c_in, two_c = kernel.shape
    if two_c % 2:
        raise DimensionError(f"temporal kernel needs an even number of output channels, got {kernel.shape}")
    c_out = two_c // 2
    conv = ad.causal_conv1d(x, kernel, bias)
    residual = x[..., kt - 1:, :, :c_out] if c_in >= c_out else None
    return ad.split_glu(conv, residual)


def graph_forward(cache: SpectralCache, theta, bias, x):
    """Chebyshev graph convolution applied to every time slice, followed by ReLU."""
    h = cheb_apply(cache, theta, ad.as_tensor(x))
    if bias is not None:
        h = h + bias
    return ad.relu(h)


def block_forward(kind: str, params: Mapping, prefix: str, caches: Mapping[str, SpectralCache], x):
    """temporal -> graph conv(s) + ReLU -> temporal -> layer norm."""
    h = temporal_forward(x, params[f"{prefix}.temporal1.kernel"], params.get(f"{prefix}.temporal1.bias"))
    for j, adjacency in enumerate(BLOCK_GRAPHS[kind]):
        h = graph_forward(caches[adjacency], params[f"{prefix}.graph{j}.theta"],
                          params.get(f"{prefix}.graph{j}.bias"), h)
    h = temporal_forward(h, params[f"{prefix}.temporal2.kernel"], params.get(f"{prefix}.temporal2.bias"))
    return ad.layer_norm(h, params[f"{prefix}.norm.gain"], params[f"{prefix}.norm.bias"])


def model_forward(model: StgcnModel, x, params: Mapping | None = None):
    """Predict the next normalised speed of every segment.

    ``x`` is (N, M, 1) or batched (B, N, M, 1); the result is (M,) or (B, M).
    Pass ``params`` as Tensors to differentiate with respect to them.
    """
    config = model.config
    params = model.tensors() if params is None else params
    x = ad.as_tensor(x)
    if x.ndim not in (3, 4) or x.shape[-1] != 1:
        raise DimensionError(f"model input must be (N, M, 1) or (B, N, M, 1), got {x.shape}")
    if x.shape[-3] != config.n_history:
        raise ConfigError(
            f"model expects a history of exactly {config.n_history} steps (minimum for this architecture is "
            f"{2 * len(config.blocks) * (config.temporal_kernel - 1) + 1}), got {x.shape[-3]}")
    if x.shape[-2] != model.n_segments:
        raise DimensionError(f"model was built for {model.n_segments} segments, input has {x.shape[-2]}")
    h = x
    for i, kind in enumerate(config.blocks):
        h = block_forward(kind, params, f"block{i}", model.caches, h)
    h = temporal_forward(h, params["head.temporal.kernel"], params.get("head.temporal.bias"))
    c = h.shape[-1]
    out = ad.linear(h[..., 0, :, :], ad.reshape(params["head.w"], (c, 1))) + params["head.b"]
    return ad.reshape(out, out.shape[:-1])


def rollout(model: StgcnModel, history, steps: int) -> np.ndarray:
    """Recursive multi-step prediction.

    Each prediction is appended to the window (oldest step dropped) and fed
    back. ``history`` is (N, M, 1) or (B, N, M, 1); returns (steps, M) or
    (B, steps, M).
    """
    if steps < 1:
        raise ConfigError(f"rollout needs at least one step, got {steps}")
    window = np.array(ad.as_tensor(history).data, dtype=np.float64)
    batched = window.ndim == 4
    if not batched:
        window = window[None]
    n = model.config.n_history
    if window.shape[1] < n:
        raise WindowTooShortError(f"rollout history has {window.shape[1]} steps, model needs {n}")
    window = window[:, -n:]
    params = model.tensors()
    preds = np.empty((window.shape[0], steps, window.shape[2]))
    with ad.no_grad():
        for s in range(steps):
            nxt = model_forward(model, window, params).data
            preds[:, s] = nxt
            window = np.concatenate([window[:, 1:], nxt[:, None, :, None]], axis=1)
    return preds if batched else preds[0]


@dataclass(eq=False)
class StgcnModel:
    """An STGCN bound to one road graph (its spectral caches) and a parameter set."""

    config: ModelConfig
    caches: dict[str, SpectralCache]
    params: dict[str, np.ndarray]
    segment_ids: tuple[str, ...] = field(default=())

    @classmethod
    def build(cls, config: ModelConfig, segments: Sequence[RoadSegment], seed: int = 0) -> StgcnModel:
        caches = {kind: normalized_laplacian(build_graph(segments, kind, config.w_max))
                  for kind in config.adjacency_kinds}
        return cls(config, caches, init_params(config, seed), tuple(s.id for s in segments))

    @property
    def n_segments(self) -> int:
        return next(iter(self.caches.values())).n_segments

    def tensors(self, requires_grad: bool = False) -> dict[str, ad.Tensor]:
        return {name: ad.Tensor(value, requires_grad=requires_grad) for name, value in self.params.items()}

    def forward(self, x, params: Mapping | None = None):
        return model_forward(self, x, params)

    def predict(self, x) -> np.ndarray:
        with ad.no_grad():
            return model_forward(self, x).numpy()

    def rollout(self, history, steps: int) -> np.ndarray:
        return rollout(self, history, steps)

    def with_params(self, params: Mapping[str, np.ndarray]) -> StgcnModel:
        return replace(self, params={k: np.array(v, dtype=np.float64) for k, v in params.items()})

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))
