"""MLP feature extractor mapping inputs to the shared feature space."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (128, 128)
    feature_dim: int = 64
    leaky_slope: float = 0.1
    dropout_rate: float = 0.0
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.feature_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"encoder dims must be >= 1: {self}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.feature_dim]
        return list(zip(dims[:-1], dims[1:]))


def init_encoder(config: EncoderConfig) -> dict[str, np.ndarray]:
    """Weights ~ N(0, 1/fan_in), zero biases; keys ``enc.w{i}`` / ``enc.b{i}``."""
    rng = np.random.default_rng(config.init_seed)
    params = {}
    for i, (fan_in, fan_out) in enumerate(config.layer_dims):
        params[f"enc.w{i}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        params[f"enc.b{i}"] = np.zeros((1, fan_out))
    return params


def encode(
    params: Mapping[str, dc.Tensor],
    x,
    config: EncoderConfig,
    stochastic: bool = False,
    rng: np.random.Generator | None = None,
) -> dc.Tensor:
    """Features of a ``B x input_dim`` batch, shape ``B x feature_dim``.

    Hidden layers use leaky ReLU. With ``stochastic`` and a positive dropout
    rate, inverted-dropout masks are drawn from ``rng`` after every hidden
    layer; the output layer is linear.
    """
    x = dc.as_tensor(x)
    if x.cols != config.input_dim:
        raise DimensionError(f"encoder expects {config.input_dim} input columns, got {x.shape}")
    drop = stochastic and config.dropout_rate > 0.0
    if drop and rng is None:
        raise ValueError("stochastic encoding with dropout needs an rng")
    h = x
    n_layers = len(config.layer_dims)
    for i in range(n_layers):
        h = dc.matmul(h, params[f"enc.w{i}"]) + params[f"enc.b{i}"]
        if i == n_layers - 1:
            break
        h = dc.leaky_relu(h, config.leaky_slope)
        if drop:
            keep = rng.random(h.shape) >= config.dropout_rate
            h = h * (keep / (1.0 - config.dropout_rate))
    return h
