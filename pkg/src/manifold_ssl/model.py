"""The full pipeline: encoder -> (manifold graph with prototypes) -> classifier."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .encoder import EncoderConfig, encode, init_encoder
from .errors import ConfigError
from .graph import GraphConfig, classify, forward_batch, init_graph
from .protogen import PrototypeConfig, PrototypeSet, generate_all, init_prototypes, prototype_labels

PROTOTYPE_SOURCES = ("generated", "random_images")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    prototypes: PrototypeConfig
    graph: GraphConfig
    use_graph: bool = True
    prototype_source: str = "generated"

    def __post_init__(self):
        if self.prototype_source not in PROTOTYPE_SOURCES:
            raise ConfigError(f"prototype_source must be one of {PROTOTYPE_SOURCES}")
        d_f = self.encoder.feature_dim
        if self.prototypes.output_dim != d_f or self.graph.feature_dim != d_f:
            raise ConfigError("encoder, prototype and graph feature dims must agree")
        if self.prototypes.n_classes != self.graph.n_classes:
            raise ConfigError("prototype and classifier class counts differ")

    @property
    def n_classes(self) -> int:
        return self.graph.n_classes


class Model:
    """Parameter arrays plus the configuration needed to run them.

    ``params`` maps names to float64 arrays and is updated in place by the
    optimiser. For the ``random_images`` prototype source, ``proto_inputs``
    holds the raw inputs whose (detached) features act as prototypes.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray],
                 proto_inputs: np.ndarray | None = None):
        self.config = config
        self.params = params
        self.proto_inputs = proto_inputs

    @classmethod
    def initialize(cls, config: ModelConfig) -> "Model":
        params = {}
        params.update(init_encoder(config.encoder))
        params.update(init_graph(config.graph))
        if config.prototype_source == "generated":
            params.update(init_prototypes(config.prototypes))
        return cls(config, params)

    def leaves(self, requires_grad: bool = True) -> dict[str, dc.Tensor]:
        if requires_grad:
            return {k: dc.Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}
        return {k: dc.Tensor._wrap(v) for k, v in self.params.items()}

    def prototypes(self, leaves: Mapping[str, dc.Tensor], iteration: int | None = None) -> PrototypeSet:
        cfg = self.config
        if cfg.prototype_source == "generated":
            return generate_all(leaves, cfg.prototypes, iteration)
        if self.proto_inputs is None:
            raise ConfigError("random_images prototypes need proto_inputs")
        feats = encode(leaves, self.proto_inputs, cfg.encoder)
        labels = prototype_labels(cfg.prototypes.n_classes, cfg.prototypes.n_per_class)
        return PrototypeSet(dc.detach(feats), labels, cfg.prototypes.n_per_class, iteration)

    def features(self, leaves, x, stochastic=False, rng=None) -> dc.Tensor:
        return encode(leaves, x, self.config.encoder, stochastic, rng)

    def head(self, leaves, feats: dc.Tensor, protos: PrototypeSet | None) -> dc.Tensor:
        """Logits from encoder features; refines through the graph when
        ``protos`` is given."""
        if protos is not None:
            feats = forward_batch(leaves, feats, protos, self.config.graph)
        return classify(leaves, feats)

    def logits(self, x, use_graph: bool | None = None, chunk: int = 1024) -> np.ndarray:
        """Deterministic inference logits for raw inputs."""
        if use_graph is None:
            use_graph = self.config.use_graph
        leaves = self.leaves(requires_grad=False)
        protos = self.prototypes(leaves) if use_graph else None
        x = np.asarray(x, dtype=np.float64)
        out = [self.head(leaves, self.features(leaves, x[i:i + chunk]), protos).data
               for i in range(0, len(x), chunk)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.n_classes))

    def predict(self, x, use_graph: bool | None = None) -> np.ndarray:
        return np.argmax(self.logits(x, use_graph), axis=1)
