"""Per-instance attention graph over one image feature and all prototypes.

Each instance forms its own graph of ``P + 1`` nodes (the instance first,
then the prototypes). Edge embeddings ``g = leaky_relu(f W + b)`` give edge
weights ``softmax_j(g_i . g_j)`` with the self edge removed; each node is then
refined as ``f_hat = leaky_relu(f + psi([g_i, sum_j w_ij g_j]))``.

Instances never share edges, so a batch is just many independent graphs.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, DegenerateError, DimensionError
from .protogen import PrototypeSet

CALLS: Counter = Counter()


@dataclass(frozen=True)
class GraphConfig:
    feature_dim: int
    n_classes: int
    heads: int = 1
    edge_embed_dim: int | None = None
    layers: int = 1
    leaky_slope: float = 0.1
    logit_scaling: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.edge_embed_dim is None:
            object.__setattr__(self, "edge_embed_dim", self.feature_dim)
        if self.heads < 1 or self.layers < 1:
            raise ConfigError(f"need heads >= 1 and layers >= 1, got {self.heads}, {self.layers}")
        if self.feature_dim < 1 or self.edge_embed_dim < 1 or self.n_classes < 2:
            raise ConfigError(f"invalid graph dims: {self}")


@dataclass
class EdgeMatrix:
    """Row-stochastic ``(P+1) x (P+1)`` weights, one per head, zero diagonal."""

    weights: list[dc.Tensor]

    @property
    def heads(self) -> int:
        return len(self.weights)

    def to_csv(self) -> str:
        n = self.weights[0].cols
        lines = ["head,node," + ",".join(f"w{j}" for j in range(n))]
        for h, w in enumerate(self.weights):
            for i, row in enumerate(w.data):
                lines.append(f"{h},{i}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def init_graph(config: GraphConfig) -> dict[str, np.ndarray]:
    """phi (edge embedding) per head and layer, psi (refinement) per layer,
    plus the linear classifier head ``cls.w``/``cls.b``."""
    rng = np.random.default_rng(config.init_seed)
    d, e, hds = config.feature_dim, config.edge_embed_dim, config.heads
    params = {}
    for layer in range(config.layers):
        for h in range(hds):
            params[f"graph.l{layer}.phi{h}.w"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, e))
            params[f"graph.l{layer}.phi{h}.b"] = np.zeros((1, e))
        fan_in = 2 * hds * e
        params[f"graph.l{layer}.psi.w"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, d))
        params[f"graph.l{layer}.psi.b"] = np.zeros((1, d))
    params["cls.w"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, config.n_classes))
    params["cls.b"] = np.zeros((1, config.n_classes))
    return params


def edge_embed(params, f, config: GraphConfig, layer: int = 0) -> list[dc.Tensor]:
    return [
        dc.leaky_relu(dc.matmul(f, params[f"graph.l{layer}.phi{h}.w"], rowwise=True)
                      + params[f"graph.l{layer}.phi{h}.b"], config.leaky_slope)
        for h in range(config.heads)
    ]


def _logits(gi, gj_t, config: GraphConfig):
    z = dc.matmul(gi, gj_t, rowwise=True)
    if config.logit_scaling:
        z = dc.scale(z, 1.0 / np.sqrt(config.edge_embed_dim))
    return z


def learn_edges(params: Mapping[str, dc.Tensor], f, config: GraphConfig, layer: int = 0) -> EdgeMatrix:
    """Attention weights over a fully connected graph of the rows of ``f``."""
    f = dc.as_tensor(f)
    if f.rows < 2:
        raise DegenerateError(f"a graph needs at least 2 nodes, got {f.rows}")
    CALLS["learn_edges"] += 1
    return _edges_from_embeddings(edge_embed(params, f, config, layer), config)


def _edges_from_embeddings(gs, config) -> EdgeMatrix:
    n = gs[0].rows
    off_diag = ~np.eye(n, dtype=bool)
    return EdgeMatrix([dc.softmax_rows(_logits(g, dc.transpose(g), config), off_diag) for g in gs])


def refine(params, f, edges: EdgeMatrix, config: GraphConfig, layer: int = 0,
           gs: list[dc.Tensor] | None = None) -> dc.Tensor:
    """Refined node features ``leaky_relu(f + psi([g, W g]))``.

    ``gs`` may pass the edge embeddings already computed by
    :func:`learn_edges`; otherwise they are recomputed from ``f``.
    """
    f = dc.as_tensor(f)
    if gs is None:
        gs = edge_embed(params, f, config, layer)
    aggs = [dc.matmul(w, g, rowwise=True) for w, g in zip(edges.weights, gs)]
    return _residual(params, f, gs, aggs, config, layer)


def _residual(params, f, gs, aggs, config, layer):
    msg_in = dc.concat([*gs, *aggs], axis=1)
    h = dc.matmul(msg_in, params[f"graph.l{layer}.psi.w"], rowwise=True) + params[f"graph.l{layer}.psi.b"]
    return dc.leaky_relu(f + h, config.leaky_slope)


def _as_matrix(protos) -> dc.Tensor:
    return protos.vectors if isinstance(protos, PrototypeSet) else dc.as_tensor(protos)


def _instance_rows(params, feats, proto_mat, config: GraphConfig) -> dc.Tensor:
    # Single-layer refinement of instance nodes only. Every op here is
    # row-wise, so row b never depends on the other rows of ``feats``.
    g_inst = edge_embed(params, feats, config, 0)
    g_prot = edge_embed(params, proto_mat, config, 0)
    aggs = []
    for gi, gp in zip(g_inst, g_prot):
        w = dc.softmax_rows(_logits(gi, dc.transpose(gp), config))
        aggs.append(dc.matmul(w, gp, rowwise=True))
    return _residual(params, feats, g_inst, aggs, config, 0)


def forward_instance(params, instance_feature, protos, config: GraphConfig):
    """Build the ``(P+1)``-node graph for one instance.

    Returns ``(refined_instance 1 x d_f, refined_protos P x d_f, edges)``
    where ``edges`` are those of the first layer.
    """
    inst = dc.as_tensor(instance_feature)
    pm = _as_matrix(protos)
    if inst.rows != 1:
        raise DimensionError(f"forward_instance takes one row, got {inst.shape}")
    if pm.cols != inst.cols or inst.cols != config.feature_dim:
        raise DimensionError(
            f"prototype width {pm.cols} / instance width {inst.cols} != feature_dim {config.feature_dim}")
    CALLS["forward_instance"] += 1
    nodes = dc.concat([inst, pm], axis=0)
    first_edges = None
    refined_inst = None
    for layer in range(config.layers):
        gs = edge_embed(params, nodes, config, layer)
        edges = _edges_from_embeddings(gs, config)
        CALLS["learn_edges"] += 1
        if first_edges is None:
            first_edges = edges
        refined = refine(params, nodes, edges, config, layer, gs)
        if config.layers == 1:
            # same code path as the batched forward
            refined_inst = _instance_rows(params, inst, pm, config)
        nodes = refined
    if refined_inst is None:
        refined_inst = dc.take_rows(nodes, [0])
    refined_protos = dc.take_rows(nodes, np.arange(1, nodes.rows))
    return refined_inst, refined_protos, first_edges


def forward_batch(params, features, protos, config: GraphConfig) -> dc.Tensor:
    """Refined features for a ``B x d_f`` batch, one independent graph per row."""
    feats = dc.as_tensor(features)
    pm = _as_matrix(protos)
    if pm.cols != feats.cols or feats.cols != config.feature_dim:
        raise DimensionError(
            f"prototype width {pm.cols} / feature width {feats.cols} != feature_dim {config.feature_dim}")
    CALLS["forward_batch"] += 1
    if config.layers == 1:
        return _instance_rows(params, feats, pm, config)
    outs = [forward_instance(params, dc.take_rows(feats, [b]), pm, config)[0]
            for b in range(feats.rows)]
    return dc.concat(outs, axis=0)


def refine_prototypes(params, protos, config: GraphConfig) -> dc.Tensor:
    """Prototypes refined through a graph over the prototypes alone."""
    nodes = _as_matrix(protos)
    for layer in range(config.layers):
        gs = edge_embed(params, nodes, config, layer)
        nodes = refine(params, nodes, _edges_from_embeddings(gs, config), config, layer, gs)
    return nodes


def classify(params, features) -> dc.Tensor:
    """Class logits ``features @ W_cls + b``."""
    return dc.matmul(features, params["cls.w"]) + params["cls.b"]
