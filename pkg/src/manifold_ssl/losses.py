"""Loss terms and their weighted composition.

Semi-supervised part: cross-entropy on labeled rows, KL consistency against a
virtual adversarial perturbation, and entropy minimisation on unlabeled rows.
Prototype part: anchor loss (magnitude + angle triplet + boundary), divergence
loss between same-class prototypes, and cross-entropy on the prototypes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .data import Batch
from .errors import ConfigError, NonFiniteError
from .graph import refine_prototypes
from .model import Model
from .protogen import PrototypeSet, class_centers

PROB_FLOOR = 1e-12
TRIPLET_CAP = 20_000
TERMS = ("l_clf_i", "l_con", "l_em", "l_mag", "l_ang", "l_bound", "l_div", "l_clf_p")


@dataclass(frozen=True)
class LossWeights:
    consistency: float = 1.0    # lambda1
    entropy: float = 0.1        # lambda2
    anchor: float = 1.0         # lambda3
    divergence: float = 1.0     # lambda4
    proto_clf: float = 0.1      # lambda5
    proto_clf_refined: bool = False

    def __post_init__(self):
        if min(self.consistency, self.entropy, self.anchor, self.divergence, self.proto_clf) < 0:
            raise ConfigError(f"loss weights must be >= 0: {self}")

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Margins:
    magnitude: float = 0.1      # margin_l
    angle: float = 0.15         # margin_a
    divergence: float = 0.75    # margin_d

    def __post_init__(self):
        if self.magnitude < 0 or self.angle < 0 or not 0 <= self.divergence < 1:
            raise ConfigError(f"invalid margins: {self}")


@dataclass(frozen=True)
class VatConfig:
    eps: float = 0.5
    xi: float = 1e-6
    power_iters: int = 1

    def __post_init__(self):
        if self.eps <= 0 or self.xi <= 0 or self.power_iters < 1:
            raise ConfigError(f"invalid VAT config: {self}")


def _onehot(labels, n_classes):
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _safe_log(p: dc.Tensor) -> dc.Tensor:
    return dc.log(dc.clamp_min(p, PROB_FLOOR))


# -- semi-supervised terms -----------------------------------------------------

def cross_entropy(probs: dc.Tensor, labels) -> dc.Tensor:
    """Mean of ``-log p[label]`` with probabilities floored at 1e-12."""
    labels = np.asarray(labels, dtype=np.intp)
    picked = dc.sum_(probs * _onehot(labels, probs.cols), axis=1)
    return dc.neg(dc.mean(_safe_log(picked)))


def entropy_min(probs: dc.Tensor) -> dc.Tensor:
    """Mean row entropy ``-sum_c p log p``."""
    return dc.neg(dc.scale(dc.sum_(probs * _safe_log(probs)), 1.0 / probs.rows))


def kl_rows(p_clean, q: dc.Tensor) -> dc.Tensor:
    """Per-row ``KL(p || q)`` (N x 1) with ``p`` held constant."""
    p = dc.constant(p_clean)
    log_p = np.log(np.maximum(p.data, PROB_FLOOR))
    return dc.sum_(p * (log_p - _safe_log(q)), axis=1)


def consistency(pred_clean, pred_perturbed: dc.Tensor) -> dc.Tensor:
    """Mean over rows of ``KL(clean || perturbed)``; no gradient reaches the
    clean predictions."""
    return dc.mean(kl_rows(pred_clean, pred_perturbed))


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def vat_direction(predict: Callable[[dc.Tensor], dc.Tensor], x, cfg: VatConfig,
                  rng: np.random.Generator, p_clean=None) -> np.ndarray:
    """Virtual adversarial perturbation, one row per input, each of norm ``eps``.

    ``predict`` maps an input tensor to logits. The perturbation follows the
    gradient of ``KL(p(x) || p(x + r))`` at a tiny random ``r`` (power
    iteration); rows whose gradient vanishes keep the random direction.
    """
    x = np.asarray(x, dtype=np.float64)
    if p_clean is None:
        p_clean = dc.softmax_rows(predict(dc.Tensor(x))).data
    d = _unit_rows(rng.normal(size=x.shape))
    for _ in range(cfg.power_iters):
        r = dc.Tensor(cfg.xi * d, requires_grad=True)
        q = dc.softmax_rows(predict(dc.add(x, r)))
        g = dc.backward(dc.sum_(kl_rows(p_clean, q)), wrt=[r])[r]
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        ok = (norm > 0) & np.isfinite(norm)
        d = np.where(ok, g / np.where(ok, norm, 1.0), d)
    return cfg.eps * d


# -- prototype terms ---------------------------------------------------------

def pseudo_label(features, centers) -> np.ndarray:
    """Index of the most cosine-similar centre; ties go to the lower index."""
    sims = dc.cosine_matrix(dc.constant(features), dc.constant(centers)).data
    return np.argmax(sims, axis=1)


def anchor_magnitude(centers: dc.Tensor, l_avg: float, margin_l: float) -> dc.Tensor:
    """``mean_c max(|‖p_c‖ / l_avg - 1| - margin_l, 0)^2``; ``l_avg`` is a constant."""
    if l_avg <= 0:
        raise ConfigError(f"l_avg must be positive, got {l_avg}")
    ratio = dc.scale(dc.rows_l2_norm(centers), 1.0 / l_avg) - 1.0
    return dc.mean(dc.square(dc.hinge(dc.abs_(ratio) - margin_l)))


def triplet_selection(labels, n_classes: int, cap: int, rng) -> list | None:
    """Random subset of ``cap`` triplets, as one boolean (pos x neg) mask per
    class, or None when every triplet fits under the cap."""
    labels = np.asarray(labels)
    shapes = [(int((labels == c).sum()), int((labels != c).sum())) for c in range(n_classes)]
    sizes = [p * n for p, n in shapes]
    total = sum(sizes)
    if total <= cap:
        return None
    flat = np.zeros(total, dtype=bool)
    flat[rng.choice(total, size=cap, replace=False)] = True
    cuts = np.cumsum(sizes)[:-1]
    return [part.reshape(shape) for part, shape in zip(np.split(flat, cuts), shapes)]


def anchor_triplet(centers: dc.Tensor, entities: dc.Tensor, labels, margin_a: float,
                   cap: int = TRIPLET_CAP, rng=None, selection=None) -> dc.Tensor:
    """Squared-hinge triplet loss anchored at the class centres.

    For centre ``c``, every (same-class entity j, other-class entity k) pair
    contributes ``max(S(p_c, f_k) - S(p_c, f_j) + margin_a, 0)^2``; the result
    averages the strictly positive terms.
    """
    labels = np.asarray(labels)
    n_classes = centers.rows
    if len(np.unique(labels)) < 2:
        warnings.warn("anchor_triplet: fewer than two classes present; loss is 0", RuntimeWarning)
        return dc.Tensor(0.0)
    if selection is None and rng is not None:
        selection = triplet_selection(labels, n_classes, cap, rng)
    sims = dc.cosine_matrix(entities, centers)
    sums, count = [], 0
    for c in range(n_classes):
        pos, neg = np.flatnonzero(labels == c), np.flatnonzero(labels != c)
        if len(pos) == 0 or len(neg) == 0:
            continue
        col = dc.matmul(sims, np.eye(n_classes)[:, c:c + 1])
        s_pos, s_neg = dc.take_rows(col, pos), dc.take_rows(col, neg)
        terms = dc.square(dc.hinge(dc.transpose(s_neg) - s_pos + margin_a))
        if selection is not None:
            terms = terms * selection[c]
        sums.append(dc.sum_(terms))
        count += int(np.count_nonzero(terms.data > 0))
    if count == 0:
        return dc.Tensor(0.0)
    total = sums[0]
    for s in sums[1:]:
        total = total + s
    return dc.scale(total, 1.0 / count)


def anchor_boundary(centers: dc.Tensor, entities: dc.Tensor, labels) -> dc.Tensor:
    """``max(margin_c - S(f, p_c), 0)`` per entity of class ``c``, averaged over
    non-zero terms. ``margin_c`` is the highest similarity of centre ``c`` to
    any other centre (-1 when there is no other centre)."""
    labels = np.asarray(labels, dtype=np.intp)
    n_classes = centers.rows
    if n_classes < 2:
        return dc.Tensor(0.0)
    margins = dc.max_rows(dc.cosine_matrix(centers, centers), mask=~np.eye(n_classes, dtype=bool))
    onehot = _onehot(labels, n_classes)
    own_sim = dc.sum_(dc.cosine_matrix(entities, centers) * onehot, axis=1)
    own_margin = dc.matmul(onehot, margins)
    return dc.mean_nonzero(dc.hinge(own_margin - own_sim))


def divergence(protos: PrototypeSet, l_avg: float, margin_d: float) -> dc.Tensor:
    """Sum over unordered same-class prototype pairs of
    ``min(magnitude term, angular term)``, each normalised to [0, 1]."""
    if not 0 <= margin_d < 1:
        raise ConfigError(f"margin_d must lie in [0, 1), got {margin_d}")
    k = protos.n_per_class
    if k < 2:
        return dc.Tensor(0.0)
    norm = 1.0 / (1.0 - margin_d)
    upper = np.triu(np.ones((k, k)), k=1)
    total = None
    for c in range(protos.n_classes):
        v = dc.take_rows(protos.vectors, np.flatnonzero(protos.labels == c))
        lengths = dc.rows_l2_norm(v)
        gap = dc.abs_(lengths - dc.transpose(lengths))
        mag = dc.scale(dc.hinge(dc.scale(gap, -0.5 / l_avg) + (1.0 - margin_d)), norm)
        ang = dc.scale(dc.hinge(dc.cosine_matrix(v, v) - margin_d), norm)
        pair_min = mag - dc.hinge(mag - ang)
        part = dc.sum_(pair_min * upper)
        total = part if total is None else total + part
    return total


# -- composition ---------------------------------------------------------------

@dataclass
class LossContext:
    """Quantities treated as constants by the gradient.

    The first evaluation fills them in; passing the same context again
    reproduces exactly the same function of the parameters, which is what a
    finite-difference check needs.
    """

    filled: bool = False
    dropout_seed: int | None = None
    p_clean: np.ndarray | None = None
    r_adv: np.ndarray | None = None
    l_avg: float | None = None
    l_avg_protos: float | None = None
    pseudo_labels: np.ndarray | None = None
    triplet_selection: list | None = None


@dataclass
class LossResult:
    total: dc.Tensor
    terms: dict[str, float]
    weighted: dict[str, float]
    context: LossContext
    used_graph: bool = False
    extras: dict = field(default_factory=dict)

    def recombined(self) -> float:
        return float(sum(self.weighted.values()))


def _weights_for(weights: LossWeights) -> dict[str, float]:
    return {
        "l_clf_i": 1.0, "l_con": weights.consistency, "l_em": weights.entropy,
        "l_mag": weights.anchor, "l_ang": weights.anchor, "l_bound": weights.anchor,
        "l_div": weights.divergence, "l_clf_p": weights.proto_clf,
    }


def total_loss(
    model: Model,
    leaves,
    batch: Batch,
    weights: LossWeights,
    margins: Margins,
    vat: VatConfig,
    stage: str,
    rng: np.random.Generator,
    context: LossContext | None = None,
    triplet_cap: int = TRIPLET_CAP,
    iteration: int | None = None,
) -> LossResult:
    """Full objective on one batch.

    ``stage == "warmup"`` classifies raw encoder features and skips the graph
    and every prototype term. Terms whose weight is 0 are not evaluated and
    are reported as 0.
    """
    if batch.tainted:
        raise ConfigError("batch exposes hidden labels; refusing to compute a loss on it")
    if np.any(batch.y_labeled < 0):
        raise ConfigError("labeled part of the batch carries unknown labels")
    ctx = context if context is not None else LossContext()
    reuse = ctx.filled
    if not reuse:
        ctx.dropout_seed = int(rng.integers(2**63 - 1))
    drop_rng = np.random.default_rng(ctx.dropout_seed)

    lam = _weights_for(weights)
    n_cls = model.config.n_classes
    use_graph = stage != "warmup" and model.config.use_graph
    proto_terms = use_graph and (weights.anchor > 0 or weights.divergence > 0 or weights.proto_clf > 0)
    nl, nu = batch.n_labeled, batch.n_unlabeled

    protos = model.prototypes(leaves, iteration) if use_graph else None
    feats = model.features(leaves, batch.x, stochastic=True, rng=drop_rng)
    probs = dc.softmax_rows(model.head(leaves, feats, protos))
    terms: dict[str, dc.Tensor] = {}

    if nl > 0:
        terms["l_clf_i"] = cross_entropy(dc.take_rows(probs, np.arange(nl)), batch.y_labeled)
    if nu > 0 and (weights.consistency > 0 or weights.entropy > 0):
        p_unl = dc.take_rows(probs, np.arange(nl, nl + nu))
        if weights.entropy > 0:
            terms["l_em"] = entropy_min(p_unl)
        if weights.consistency > 0:
            if not reuse:
                ctx.p_clean = p_unl.data.copy()
                const = model.leaves(requires_grad=False)
                const_protos = None
                if use_graph:
                    const_protos = PrototypeSet(dc.detach(protos.vectors), protos.labels, protos.n_per_class)

                def predict(z):
                    return model.head(const, model.features(const, z), const_protos)

                ctx.r_adv = vat_direction(predict, batch.x_unlabeled, vat, rng, ctx.p_clean)
            x_adv = batch.x_unlabeled + ctx.r_adv
            feats_adv = model.features(leaves, x_adv, stochastic=True, rng=drop_rng)
            p_adv = dc.softmax_rows(model.head(leaves, feats_adv, protos))
            terms["l_con"] = consistency(ctx.p_clean, p_adv)

    if proto_terms:
        centers = class_centers(protos)
        if not reuse:
            ctx.l_avg = float(np.linalg.norm(feats.data, axis=1).mean())
            ctx.l_avg_protos = float(np.linalg.norm(protos.vectors.data, axis=1).mean())
            ctx.pseudo_labels = pseudo_label(feats.data[nl:], centers.data) if nu else np.zeros(0, int)
        if weights.anchor > 0:
            ent = dc.concat([feats, protos.vectors], axis=0)
            ent_labels = np.concatenate([batch.y_labeled, ctx.pseudo_labels, protos.labels])
            if not reuse:
                ctx.triplet_selection = triplet_selection(ent_labels, n_cls, triplet_cap, rng)
            terms["l_mag"] = anchor_magnitude(centers, ctx.l_avg, margins.magnitude)
            terms["l_ang"] = anchor_triplet(centers, ent, ent_labels, margins.angle,
                                            selection=ctx.triplet_selection)
            terms["l_bound"] = anchor_boundary(centers, ent, ent_labels)
        if weights.divergence > 0:
            terms["l_div"] = divergence(protos, ctx.l_avg_protos, margins.divergence)
        if weights.proto_clf > 0:
            pv = protos.vectors
            if weights.proto_clf_refined:
                pv = refine_prototypes(leaves, protos, model.config.graph)
            proto_probs = dc.softmax_rows(model.head(leaves, pv, None))
            terms["l_clf_p"] = cross_entropy(proto_probs, protos.labels)

    ctx.filled = True
    values = {name: 0.0 for name in TERMS}
    for name, t in terms.items():
        v = t.item()
        if not np.isfinite(v):
            raise NonFiniteError(f"loss term {name} is {v}", name)
        values[name] = v
    total = None
    for name, t in terms.items():
        if lam[name] == 0:
            continue
        part = t if lam[name] == 1.0 else dc.scale(t, lam[name])
        total = part if total is None else total + part
    if total is None:
        total = dc.Tensor(0.0)
    weighted = {name: lam[name] * values[name] for name in TERMS}
    return LossResult(total, values, weighted, ctx, use_graph,
                      {"protos": protos, "features": feats})
