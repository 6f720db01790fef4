"""Error metrics, diagnostic exports and the ablation driver."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .data import Dataset
from .errors import ConfigError
from .graph import forward_instance
from .model import Model
from .trainer import OptimizerState, TrainReport, train


@dataclass
class Metrics:
    error_rate: float
    per_class_accuracy: list[float]
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return {"error_rate": self.error_rate, "per_class_accuracy": self.per_class_accuracy,
                "confusion": self.confusion}


def metrics_from_predictions(y_true, y_pred, n_classes: int) -> Metrics:
    """Confusion matrix has true classes on rows, predictions on columns."""
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    if len(y_true) == 0:
        raise ConfigError("no labeled rows to evaluate")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    support = conf.sum(axis=1)
    per_class = [float(conf[c, c] / support[c]) if support[c] else 0.0 for c in range(n_classes)]
    error = 1.0 - float(np.trace(conf)) / len(y_true)
    return Metrics(error, per_class, conf.tolist())


def evaluate(model: Model, dataset: Dataset, use_graph: bool | None = None) -> Metrics:
    """Deterministic inference on every row with a known true label.

    ``use_graph=False`` classifies raw encoder features (the warm-up path).
    """
    keep = dataset.y >= 0
    pred = model.predict(dataset.X[keep], use_graph)
    return metrics_from_predictions(dataset.y[keep], pred, model.config.n_classes)


# -- exports -------------------------------------------------------------------

def export_adjacency(model: Model, instance) -> str:
    """CSV of the first-layer edge matrix of the graph built around ``instance``
    (a raw input row); columns ``head,node,w0..wP``."""
    leaves = model.leaves(requires_grad=False)
    x = np.asarray(instance, dtype=np.float64).reshape(1, -1)
    protos = model.prototypes(leaves)
    _, _, edges = forward_instance(leaves, model.features(leaves, x), protos, model.config.graph)
    return edges.to_csv()


def export_prototypes(model: Model) -> str:
    return model.prototypes(model.leaves(requires_grad=False)).to_csv()


def pca_2d(X, tol: float = 1e-9, max_iter: int = 20_000) -> tuple[np.ndarray, np.ndarray]:
    """Projection onto the top two principal axes, found by power iteration
    with deflation on the covariance matrix. Returns ``(projection, axes)``."""
    X = np.asarray(X, dtype=np.float64)
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / max(len(X) - 1, 1)
    d = cov.shape[0]
    axes = []
    for comp in range(min(2, d)):
        v = np.ones(d) + 0.01 * np.arange(d)
        for u in axes:
            v -= (v @ u) * u
        if np.linalg.norm(v) == 0:
            v = np.eye(d)[comp]
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = cov @ v
            for u in axes:
                w -= (w @ u) * u
            nw = np.linalg.norm(w)
            if nw == 0:
                break
            w /= nw
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        axes.append(v)
    while len(axes) < 2:
        axes.append(np.zeros(d))
    axes = np.array(axes)
    return centered @ axes.T, axes


def export_embeddings(model: Model, dataset: Dataset) -> str:
    """PCA of encoder features of every dataset row plus the prototypes.
    Columns: ``pc1,pc2,label,is_prototype,is_labeled``."""
    leaves = model.leaves(requires_grad=False)
    feats = model.features(leaves, dataset.X).data
    protos = model.prototypes(leaves)
    proj, _ = pca_2d(np.vstack([feats, protos.vectors.data]))
    labels = np.concatenate([dataset.y, protos.labels])
    is_proto = np.r_[np.zeros(len(dataset), int), np.ones(len(protos), int)]
    is_lab = np.r_[dataset.labeled_mask.astype(int), np.zeros(len(protos), int)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pc1", "pc2", "label", "is_prototype", "is_labeled"])
    for (a, b), lab, p, l in zip(proj, labels, is_proto, is_lab):
        w.writerow([repr(float(a)), repr(float(b)), int(lab), int(p), int(l)])
    return buf.getvalue()


# -- experiments ---------------------------------------------------------------

@dataclass
class RunResult:
    model: Model
    report: TrainReport
    state: OptimizerState
    metrics: Metrics
    train_set: Dataset
    test_set: Dataset


def run_experiment(config: RunConfig) -> RunResult:
    """Build data from ``config``, train, and evaluate on the test set."""
    train_ds, test_ds = config.datasets()
    model_cfg = config.model_config(train_ds.dim, max(train_ds.n_classes, test_ds.n_classes))
    model, report, state = train(train_ds, model_cfg, config.train_config(), config.loss_weights(),
                                 config.margins(), config.vat())
    metrics = evaluate(model, test_ds)
    report.final = {"test_error": metrics.error_rate,
                    "train_labeled_error": evaluate(model, _labeled_only(train_ds)).error_rate}
    return RunResult(model, report, state, metrics, train_ds, test_ds)


def _labeled_only(ds: Dataset) -> Dataset:
    m = ds.labeled_mask
    return Dataset(ds.X[m], ds.y[m], np.ones(int(m.sum()), bool), ds.name, ds.seed)


ABLATION_VARIANTS: dict[str, dict] = {
    "full": {},
    "random_images": {"model.prototype_source": "random_images", "loss.lambda3": 0.0,
                      "loss.lambda4": 0.0, "loss.lambda5": 0.0},
    "no_anchor": {"loss.lambda3": 0.0},
    "no_divergence": {"loss.lambda4": 0.0},
    "no_either": {"loss.lambda3": 0.0, "loss.lambda4": 0.0},
}


@dataclass
class AblationRow:
    variant: str
    errors: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def std(self) -> float:
        return float(np.std(self.errors, ddof=1))


def run_ablation(base: RunConfig, variants: dict[str, dict] | None = None, seeds=(0, 1),
                 keep_results: bool = False):
    """Train every variant for every seed; one row per variant with the mean
    and sample std (n - 1) of test error. With ``keep_results`` also returns
    the per-run :class:`RunResult` objects keyed by ``(variant, seed)``."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigError("an ablation needs at least two seeds")
    variants = ABLATION_VARIANTS if variants is None else variants
    rows, results = [], {}
    for name, overrides in variants.items():
        errs = []
        for s in seeds:
            res = run_experiment(base.with_overrides({**overrides, "train.seed": s}))
            errs.append(res.metrics.error_rate)
            if keep_results:
                results[(name, s)] = res
        rows.append(AblationRow(name, errs))
    return (rows, results) if keep_results else rows


def ablation_csv(rows: list[AblationRow]) -> str:
    n = len(rows[0].errors) if rows else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "mean_error", "std_error", *[f"seed{i}" for i in range(n)]])
    for r in rows:
        w.writerow([r.variant, repr(r.mean), repr(r.std), *[repr(e) for e in r.errors]])
    return buf.getvalue()


def nearest_feature_class_rate(protos_vec: np.ndarray, proto_labels, feats: np.ndarray, feat_labels) -> float:
    """Fraction of prototypes whose most cosine-similar feature shares their class."""
    sims = dc.cosine_matrix(dc.Tensor(protos_vec), dc.Tensor(feats)).data
    nearest = np.asarray(feat_labels)[np.argmax(sims, axis=1)]
    return float(np.mean(nearest == np.asarray(proto_labels)))


def collapse_rate(protos_vec: np.ndarray, proto_labels, threshold: float = 0.999) -> float:
    """Fraction of same-class prototype pairs with cosine similarity above ``threshold``."""
    labels = np.asarray(proto_labels)
    sims = dc.cosine_matrix(dc.Tensor(protos_vec), dc.Tensor(protos_vec)).data
    same = (labels[:, None] == labels[None, :]) & np.triu(np.ones_like(sims, bool), k=1)
    if not same.any():
        return 0.0
    return float(np.mean(sims[same] > threshold))
