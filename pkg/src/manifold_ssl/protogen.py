"""Prototype generator: K prototypes for each of C classes.

Prototype (i, j) is ``MLP([E_k[i], E_c[j]])`` where ``E_k`` and ``E_c`` are
learned embedding tables, so the parameter count grows with K + C rather
than K * C. Rows are class-major: row ``j * K + i``.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .errors import ConfigError

# Incremented on every generation; the trainer's warm-up must leave it untouched.
CALLS: Counter = Counter()


@dataclass(frozen=True)
class PrototypeConfig:
    n_classes: int
    n_per_class: int = 20
    output_dim: int = 64
    embed_dim_k: int = 32
    embed_dim_c: int = 32
    mlp_hidden: tuple[int, ...] = (128,)
    leaky_slope: float = 0.1
    embed_init_std: float = 0.05
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))
        if self.n_per_class < 1 or self.n_classes < 2:
            raise ConfigError(f"need K >= 1 and C >= 2, got K={self.n_per_class}, C={self.n_classes}")
        if min(self.output_dim, self.embed_dim_k, self.embed_dim_c, *self.mlp_hidden) < 1:
            raise ConfigError(f"prototype dims must be >= 1: {self}")

    @property
    def n_prototypes(self) -> int:
        return self.n_per_class * self.n_classes

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.embed_dim_k + self.embed_dim_c, *self.mlp_hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class PrototypeSet:
    """``P x d_f`` prototype matrix with the class of each row."""

    vectors: dc.Tensor
    labels: np.ndarray
    n_per_class: int
    iteration: int | None = None

    @property
    def n_classes(self) -> int:
        return len(self.labels) // self.n_per_class

    def __len__(self):
        return len(self.labels)

    def to_csv(self) -> str:
        d = self.vectors.cols
        lines = ["class," + ",".join(f"v{i}" for i in range(d))]
        for lab, row in zip(self.labels, self.vectors.data):
            lines.append(f"{int(lab)}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def init_prototypes(config: PrototypeConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.init_seed)
    params = {
        "proto.ek": rng.normal(0.0, config.embed_init_std, size=(config.n_per_class, config.embed_dim_k)),
        "proto.ec": rng.normal(0.0, config.embed_init_std, size=(config.n_classes, config.embed_dim_c)),
    }
    for i, (fan_in, fan_out) in enumerate(config.layer_dims):
        params[f"proto.w{i}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        params[f"proto.b{i}"] = np.zeros((1, fan_out))
    return params


def prototype_labels(n_classes: int, n_per_class: int) -> np.ndarray:
    return np.repeat(np.arange(n_classes), n_per_class)


def _selectors(k: int, c: int) -> tuple[np.ndarray, np.ndarray]:
    eye_k, eye_c = np.eye(k), np.eye(c)
    return np.tile(eye_k, (c, 1)), np.repeat(eye_c, k, axis=0)


def generate_all(
    params: Mapping[str, dc.Tensor],
    config: PrototypeConfig,
    iteration: int | None = None,
) -> PrototypeSet:
    CALLS["generate_all"] += 1
    k, c = config.n_per_class, config.n_classes
    sel_k, sel_c = _selectors(k, c)
    cond = dc.concat([dc.matmul(sel_k, params["proto.ek"]),
                      dc.matmul(sel_c, params["proto.ec"])], axis=1)
    h = cond
    n_layers = len(config.layer_dims)
    for i in range(n_layers):
        h = dc.matmul(h, params[f"proto.w{i}"]) + params[f"proto.b{i}"]
        if i < n_layers - 1:
            h = dc.leaky_relu(h, config.leaky_slope)
    return PrototypeSet(h, prototype_labels(c, k), k, iteration)


def class_centers(protos: PrototypeSet) -> dc.Tensor:
    """Per-class mean prototype, ``C x d_f``."""
    c = protos.n_classes
    avg = np.zeros((c, len(protos)))
    avg[protos.labels, np.arange(len(protos))] = 1.0 / protos.n_per_class
    return dc.matmul(avg, protos.vectors)


def parameter_count(config: PrototypeConfig) -> int:
    mlp = sum(i * o + o for i, o in config.layer_dims)
    return config.n_per_class * config.embed_dim_k + config.n_classes * config.embed_dim_c + mlp
