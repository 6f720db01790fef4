"""Flat run configuration: ``key = value`` lines, ``#`` comments.

Every accepted key is listed in :data:`KEYS` with its type, default and a
one-line description; unknown keys are errors.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .data import GENERATORS, Dataset, SplitSpec, load_csv, split_labeled
from .encoder import EncoderConfig
from .errors import ConfigError
from .graph import GraphConfig
from .losses import LossWeights, Margins, VatConfig
from .model import ModelConfig
from .protogen import PrototypeConfig
from .trainer import TrainConfig


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    text = str(text).strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str(text) -> str:
    return str(text).strip()


# key: (parser, default, description)
KEYS: dict[str, tuple] = {
    "data.generator": (_str, "two_moons", "two_moons, blobs, rings or csv"),
    "data.path": (_str, "", "training CSV when data.generator = csv"),
    "data.test_path": (_str, "", "test CSV (csv generator); defaults to the training file"),
    "data.n": (int, 1000, "number of generated training points"),
    "data.test_n": (int, 1000, "number of generated test points"),
    "data.n_classes": (int, 2, "classes for blobs / rings (two_moons is always 2)"),
    "data.noise_std": (float, 0.1, "Gaussian noise added by the generator"),
    "data.centers_spread": (float, 3.0, "blob centre radius"),
    "data.radii": (_floats, (), "ring radii, comma separated (default 1..C)"),
    "data.seed": (int, 0, "generator seed; the test set uses seed + 1000"),
    "data.n_labeled": (int, 6, "labels kept visible"),
    "data.stratified": (_bool, True, "stratified labeled split"),
    "encoder.hidden_dims": (_ints, (128, 128), "hidden layer widths, comma separated"),
    "encoder.feature_dim": (int, 64, "feature dimension shared by encoder, prototypes and graph"),
    "encoder.leaky_slope": (float, 0.1, "leaky ReLU negative slope"),
    "encoder.dropout_rate": (float, 0.0, "dropout after hidden layers"),
    "proto.k": (int, 20, "prototypes per class"),
    "proto.embed_dim_k": (int, 32, "instance embedding width"),
    "proto.embed_dim_c": (int, 32, "class embedding width"),
    "proto.mlp_hidden": (_ints, (128,), "generator MLP hidden widths"),
    "proto.embed_init_std": (float, 0.05, "std of the embedding table init"),
    "graph.heads": (int, 1, "attention heads"),
    "graph.edge_embed_dim": (int, 0, "edge embedding width (0 = feature_dim)"),
    "graph.layers": (int, 1, "stacked graph layers"),
    "graph.logit_scaling": (_bool, False, "divide edge logits by sqrt(edge_embed_dim)"),
    "model.use_graph": (_bool, True, "refine features through the manifold graph"),
    "model.prototype_source": (_str, "generated", "generated or random_images"),
    "loss.lambda1": (float, 1.0, "consistency weight"),
    "loss.lambda2": (float, 0.1, "entropy minimisation weight"),
    "loss.lambda3": (float, 1.0, "anchor loss weight"),
    "loss.lambda4": (float, 1.0, "divergence loss weight"),
    "loss.lambda5": (float, 0.1, "prototype classification weight"),
    "loss.proto_clf_refined": (_bool, False, "classify graph-refined prototypes in the prototype term"),
    "loss.margin_l": (float, 0.1, "anchor magnitude margin"),
    "loss.margin_a": (float, 0.15, "anchor triplet margin"),
    "loss.margin_d": (float, 0.75, "divergence margin"),
    "loss.triplet_cap": (int, 20_000, "triplets per batch before subsampling"),
    "vat.eps": (float, 0.5, "adversarial perturbation norm"),
    "vat.xi": (float, 1e-6, "power-iteration probe norm"),
    "vat.power_iters": (int, 1, "power iterations"),
    "train.iters": (int, 5000, "total iterations"),
    "train.stage_fractions": (_floats, (2 / 282, 120 / 282, 120 / 282, 40 / 282),
                              "warm-up, ramp-up, ramp-down, ending fractions"),
    "train.lr_warm_start": (float, 2e-4, "learning rate at iteration 0"),
    "train.lr_base": (float, 2e-3, "learning rate at the end of warm-up"),
    "train.lr_max": (float, 2e-2, "peak learning rate"),
    "train.lr_final": (float, 2e-5, "learning rate at the last iteration"),
    "train.momentum_high": (float, 0.95, "momentum in warm-up and ending"),
    "train.momentum_low": (float, 0.85, "momentum at the peak learning rate"),
    "train.batch_labeled": (int, 32, "labeled rows per batch"),
    "train.batch_unlabeled": (int, 128, "unlabeled rows per batch"),
    "train.clip_norm": (float, 10.0, "global gradient-norm clip (0 disables)"),
    "train.seed": (int, 0, "seed for the split, initialisation and sampling"),
}


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    return str(value)


class RunConfig:
    """Validated flat configuration."""

    def __init__(self, values: dict | None = None, **overrides):
        self.values = {k: spec[1] for k, spec in KEYS.items()}
        self.update(values or {})
        self.update({k.replace("__", "."): v for k, v in overrides.items()})

    def update(self, values: dict) -> "RunConfig":
        for key, raw in values.items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                self.values[key] = KEYS[key][0](raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
        return self

    def with_overrides(self, values: dict) -> "RunConfig":
        return RunConfig(dict(self.values)).update(values)

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in KEYS:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = value
        return cls(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in sorted(self.values))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    # -- builders -----------------------------------------------------------

    def datasets(self) -> tuple[Dataset, Dataset]:
        """(training set with the labeled split applied, test set)."""
        v = self.values
        gen = v["data.generator"]
        if gen == "csv":
            if not v["data.path"]:
                raise ConfigError("data.generator = csv needs data.path")
            train_ds = load_csv(v["data.path"])
            test_ds = load_csv(v["data.test_path"] or v["data.path"])
            if train_ds.n_labeled > v["data.n_labeled"]:
                train_ds = split_labeled(train_ds, SplitSpec(v["data.n_labeled"], v["data.stratified"],
                                                             v["train.seed"]))
            return train_ds, test_ds
        if gen not in GENERATORS:
            raise ConfigError(f"unknown generator {gen!r}")
        train_ds = self._generate(gen, v["data.n"], v["data.seed"])
        test_ds = self._generate(gen, v["data.test_n"], v["data.seed"] + 1000)
        split = SplitSpec(v["data.n_labeled"], v["data.stratified"], v["train.seed"])
        return split_labeled(train_ds, split), test_ds

    def _generate(self, gen, n, seed) -> Dataset:
        v = self.values
        if gen == "two_moons":
            return GENERATORS[gen](n, v["data.noise_std"], seed)
        if gen == "blobs":
            return GENERATORS[gen](n, v["data.n_classes"], v["data.centers_spread"], v["data.noise_std"], seed)
        radii = v["data.radii"] or None
        return GENERATORS[gen](n, v["data.n_classes"], radii, v["data.noise_std"], seed)

    def model_config(self, input_dim: int, n_classes: int) -> ModelConfig:
        v = self.values
        seeds = np.random.SeedSequence(v["train.seed"]).generate_state(3)
        d_f = v["encoder.feature_dim"]
        enc = EncoderConfig(input_dim, v["encoder.hidden_dims"], d_f, v["encoder.leaky_slope"],
                            v["encoder.dropout_rate"], int(seeds[0]))
        proto = PrototypeConfig(n_classes, v["proto.k"], d_f, v["proto.embed_dim_k"], v["proto.embed_dim_c"],
                                v["proto.mlp_hidden"], v["encoder.leaky_slope"], v["proto.embed_init_std"],
                                int(seeds[1]))
        graph = GraphConfig(d_f, n_classes, v["graph.heads"], v["graph.edge_embed_dim"] or None,
                            v["graph.layers"], v["encoder.leaky_slope"], v["graph.logit_scaling"],
                            int(seeds[2]))
        return ModelConfig(enc, proto, graph, v["model.use_graph"], v["model.prototype_source"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            iters=v["train.iters"], stage_fractions=v["train.stage_fractions"],
            lr_warm_start=v["train.lr_warm_start"], lr_base=v["train.lr_base"],
            lr_max=v["train.lr_max"], lr_final=v["train.lr_final"],
            momentum_high=v["train.momentum_high"], momentum_low=v["train.momentum_low"],
            batch_labeled=v["train.batch_labeled"], batch_unlabeled=v["train.batch_unlabeled"],
            clip_norm=v["train.clip_norm"] or None, triplet_cap=v["loss.triplet_cap"],
            seed=v["train.seed"])

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(v["loss.lambda1"], v["loss.lambda2"], v["loss.lambda3"],
                           v["loss.lambda4"], v["loss.lambda5"], v["loss.proto_clf_refined"])

    def margins(self) -> Margins:
        v = self.values
        return Margins(v["loss.margin_l"], v["loss.margin_a"], v["loss.margin_d"])

    def vat(self) -> VatConfig:
        v = self.values
        return VatConfig(v["vat.eps"], v["vat.xi"], v["vat.power_iters"])


def reference_table() -> str:
    """Markdown table of every key."""
    lines = ["| key | default | meaning |", "|---|---|---|"]
    for key, (_, default, doc) in KEYS.items():
        shown = f"`{_render(default)}`" if _render(default) else "(empty)"
        lines.append(f"| `{key}` | {shown} | {doc} |")
    return "\n".join(lines)
