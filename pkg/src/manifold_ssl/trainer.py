"""SGD with Nesterov momentum under a four-stage one-cycle schedule."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .data import BatchSampler, Dataset
from .errors import ConfigError, NonFiniteError
from .losses import TERMS, LossWeights, Margins, VatConfig, total_loss
from .model import Model, ModelConfig

STAGES = ("warmup", "rampup", "rampdown", "ending")


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 5000
    stage_fractions: tuple[float, float, float, float] = (2 / 282, 120 / 282, 120 / 282, 40 / 282)
    lr_warm_start: float = 2e-4
    lr_base: float = 2e-3
    lr_max: float = 2e-2
    lr_final: float = 2e-5
    momentum_high: float = 0.95
    momentum_low: float = 0.85
    batch_labeled: int = 32
    batch_unlabeled: int = 128
    clip_norm: float | None = 10.0
    triplet_cap: int = 20_000
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.stage_fractions)
        object.__setattr__(self, "stage_fractions", fr)
        if len(fr) != 4 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"stage fractions must be 4 non-negative values summing to 1, got {fr}")
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")
        if min(self.lr_warm_start, self.lr_base, self.lr_max, self.lr_final) <= 0:
            raise ConfigError("learning rates must be positive")
        if not (0 <= self.momentum_low < 1 and 0 <= self.momentum_high < 1):
            raise ConfigError("momentum values must lie in [0, 1)")

    def boundaries(self) -> tuple[int, int, int, int]:
        """Iteration at which each stage ends; the last equals ``iters``."""
        t = self.iters
        warm, up, down, _ = self.stage_fractions
        b1 = int(round(t * warm))
        b2 = b1 + int(round(t * up))
        b3 = min(t, b2 + int(round(t * down)))
        return b1, min(b2, t), b3, t


def _lerp(a, b, frac):
    # exact at both ends (a + (b - a) * 1 can miss b by an ulp)
    return a * (1.0 - frac) + b * frac


def stage_at(cfg: TrainConfig, it: int) -> str:
    b1, b2, b3, _ = cfg.boundaries()
    if it < b1:
        return "warmup"
    if it < b2:
        return "rampup"
    if it < b3:
        return "rampdown"
    return "ending"


def schedule_at(cfg: TrainConfig, it) -> tuple[float, float]:
    """(learning rate, momentum) at iteration ``it`` in ``[0, iters]``.

    Warm-up: lr_warm_start -> lr_base at momentum_high. Ramp-up: lr_base ->
    lr_max while momentum drops to momentum_low. Ramp-down mirrors ramp-up.
    Ending: lr_base -> lr_final at momentum_high. All pieces are linear and
    meet exactly at the stage boundaries.
    """
    t = cfg.iters
    if not 0 <= it <= t:
        raise ConfigError(f"iteration {it} outside [0, {t}]")
    b1, b2, b3, _ = cfg.boundaries()
    hi, lo = cfg.momentum_high, cfg.momentum_low
    if it <= b1 and b1 > 0:
        return _lerp(cfg.lr_warm_start, cfg.lr_base, it / b1), hi
    if it <= b2 and b2 > b1:
        frac = (it - b1) / (b2 - b1)
        return _lerp(cfg.lr_base, cfg.lr_max, frac), _lerp(hi, lo, frac)
    if it <= b3 and b3 > b2:
        frac = (it - b2) / (b3 - b2)
        return _lerp(cfg.lr_max, cfg.lr_base, frac), _lerp(lo, hi, frac)
    if t > b3:
        return _lerp(cfg.lr_base, cfg.lr_final, (it - b3) / (t - b3)), hi
    return cfg.lr_base, hi


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: OptimizerState, lr: float, momentum: float) -> dict[str, np.ndarray]:
    """Nesterov update in place: ``v <- mu v - lr g``; ``p <- p + mu v - lr g``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}", name)
        p = params[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v - lr * g
        state.velocity[name] = v
        p += momentum * v - lr * g
    state.iteration += 1
    return params


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * factor
    return norm


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    seed: int = 0
    wall_clock_s: float = 0.0
    final: dict = field(default_factory=dict)

    COLUMNS = ("iter", *TERMS, "total", "lr", "momentum")

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for row in self.rows:
            writer.writerow([row["iter"]] + [repr(float(row[c])) for c in self.COLUMNS[1:]])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"seed": self.seed, "iters": len(self.rows), "wall_clock_s": self.wall_clock_s,
                **self.final}


class TrainingDiverged(NonFiniteError):
    """Training hit a non-finite value; ``last_good`` holds the parameters of
    the last finite iteration."""

    def __init__(self, message, name, iteration, last_good):
        super().__init__(message, name)
        self.iteration = iteration
        self.last_good = last_good


def choose_image_prototypes(ds: Dataset, n_classes: int, k: int, rng) -> np.ndarray:
    """K labeled inputs per class (with replacement when a class has fewer)."""
    vis = ds.visible_labels()
    rows = []
    for c in range(n_classes):
        pool = np.flatnonzero(vis == c)
        rows.append(rng.choice(pool, size=k, replace=len(pool) < k))
    return ds.X[np.concatenate(rows)]


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    weights: LossWeights = LossWeights(),
    margins: Margins = Margins(),
    vat: VatConfig = VatConfig(),
    callback=None,
) -> tuple[Model, TrainReport, OptimizerState]:
    """Train from scratch; fully determined by ``train_config.seed``.

    ``callback(it, stage, result)`` runs after every iteration.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(train_config.seed)
    model = Model.initialize(model_config)
    if model_config.prototype_source == "random_images":
        model.proto_inputs = choose_image_prototypes(
            dataset, model_config.n_classes, model_config.prototypes.n_per_class, rng)
    sampler = BatchSampler(dataset, train_config.batch_labeled, train_config.batch_unlabeled, rng)
    state = OptimizerState()
    report = TrainReport(seed=train_config.seed)
    last_good = {k: v.copy() for k, v in model.params.items()}

    for it in range(train_config.iters):
        stage = stage_at(train_config, it)
        lr, mom = schedule_at(train_config, it)
        batch = sampler.sample()
        leaves = model.leaves()
        try:
            res = total_loss(model, leaves, batch, weights, margins, vat, stage, rng,
                             triplet_cap=train_config.triplet_cap, iteration=it)
            if res.total.requires_grad:
                g = dc.backward(res.total)
                grads = {k: g[t] for k, t in leaves.items()}
                clip_by_global_norm(grads, train_config.clip_norm)
                sgd_step(model.params, grads, state, lr, mom)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}; parameters of iteration {it - 1} kept",
                                   exc.name, it, last_good) from exc
        last_good = {k: v.copy() for k, v in model.params.items()}
        report.rows.append({"iter": it, **res.terms, "total": res.total.item(), "lr": lr,
                            "momentum": mom, "stage": stage})
        if callback is not None:
            callback(it, stage, res)
    report.wall_clock_s = time.perf_counter() - start
    return model, report, state


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: Model, state: OptimizerState, config_text: str,
                    config_hash: str) -> None:
    """``.npz`` container: ``param/*``, ``velocity/*``, optional
    ``proto_inputs`` and a JSON ``meta`` record."""
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays.update({f"velocity/{k}": v for k, v in state.velocity.items()})
    if model.proto_inputs is not None:
        arrays["proto_inputs"] = model.proto_inputs
    meta = {"format_version": CHECKPOINT_VERSION, "iteration": state.iteration,
            "config": config_text, "config_hash": config_hash}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], OptimizerState, np.ndarray | None, dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('format_version')}")
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        vel = {k[len("velocity/"):]: z[k].copy() for k in z.files if k.startswith("velocity/")}
        proto_inputs = z["proto_inputs"].copy() if "proto_inputs" in z.files else None
    return params, OptimizerState(vel, meta["iteration"]), proto_inputs, meta
