"""Synthetic datasets, CSV ingestion, labeled/unlabeled splits and batching.

CSV schema: header ``x0,...,x{d-1},label``; ``label`` is an integer class id
or ``-1`` for an unlabeled row.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError


@dataclass(frozen=True)
class Dataset:
    """Features ``X`` (N x d), labels ``y`` and the labeled mask.

    ``y`` keeps the true label of every row when it is known (generated data)
    so evaluation can use it; training code only sees :meth:`visible_labels`.
    Rows with unknown labels carry ``-1``.
    """

    X: np.ndarray
    y: np.ndarray
    labeled_mask: np.ndarray
    name: str = ""
    seed: int | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        mask = np.asarray(self.labeled_mask, dtype=bool)
        if X.ndim != 2 or y.shape != (len(X),) or mask.shape != (len(X),):
            raise ConfigError(f"inconsistent dataset shapes X={X.shape}, y={y.shape}, mask={mask.shape}")
        if np.any(y[mask] < 0):
            raise ConfigError("labeled rows must carry a class id")
        for arr in (X, y, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "labeled_mask", mask)

    def __len__(self):
        return len(self.X)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    @property
    def n_labeled(self) -> int:
        return int(self.labeled_mask.sum())

    def visible_labels(self) -> np.ndarray:
        return np.where(self.labeled_mask, self.y, -1)


@dataclass(frozen=True)
class SplitSpec:
    n_labeled: int
    stratified: bool = True
    seed: int = 0


def _check_sizes(n, n_classes, noise_std):
    if n_classes < 2 or n < 2 * n_classes:
        raise ConfigError(f"need n >= 2C and C >= 2, got n={n}, C={n_classes}")
    if noise_std < 0:
        raise ConfigError(f"noise_std must be >= 0, got {noise_std}")


def _class_sizes(n, n_classes):
    sizes = np.full(n_classes, n // n_classes)
    sizes[: n % n_classes] += 1
    return sizes


def _finish(X, y, rng, name, seed):
    order = rng.permutation(len(X))
    return Dataset(X[order], y[order], np.ones(len(X), dtype=bool), name, seed)


def gen_two_moons(n: int, noise_std: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved unit half-circles: class 0 centred at (0, 0) on the
    upper half, class 1 centred at (1, 0.5) on the lower half."""
    _check_sizes(n, 2, noise_std)
    rng = np.random.default_rng(seed)
    n0, n1 = _class_sizes(n, 2)
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    outer = np.column_stack([np.cos(t0), np.sin(t0)])
    inner = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.vstack([outer, inner])
    y = np.repeat([0, 1], [n0, n1])
    X = X + rng.normal(0.0, noise_std, size=X.shape) if noise_std > 0 else X
    return _finish(X, y, rng, "two_moons", seed)


def gen_blobs(n: int, n_classes: int = 3, centers_spread: float = 3.0,
              noise_std: float = 0.5, seed: int = 0) -> Dataset:
    """Isotropic Gaussian blobs with centres evenly spaced on a circle of
    radius ``centers_spread``."""
    _check_sizes(n, n_classes, noise_std)
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    centers = centers_spread * np.column_stack([np.cos(angles), np.sin(angles)])
    y = np.repeat(np.arange(n_classes), _class_sizes(n, n_classes))
    X = centers[y] + rng.normal(0.0, noise_std, size=(n, 2))
    return _finish(X, y, rng, "blobs", seed)


def gen_rings(n: int, n_classes: int = 2, radii=None, noise_std: float = 0.1,
              seed: int = 0) -> Dataset:
    """Concentric rings, class ``c`` on radius ``radii[c]`` (default ``c + 1``)."""
    _check_sizes(n, n_classes, noise_std)
    radii = np.arange(1, n_classes + 1, dtype=float) if radii is None else np.asarray(radii, float)
    if radii.shape != (n_classes,) or np.any(radii <= 0):
        raise ConfigError(f"need {n_classes} positive radii, got {radii}")
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(n_classes), _class_sizes(n, n_classes))
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    X = radii[y, None] * np.column_stack([np.cos(theta), np.sin(theta)])
    X = X + rng.normal(0.0, noise_std, size=X.shape)
    return _finish(X, y, rng, "rings", seed)


GENERATORS = {"two_moons": gen_two_moons, "blobs": gen_blobs, "rings": gen_rings}


def load_csv(path) -> Dataset:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if len(cols) < 2 or cols[-1] != "label" or cols[:-1] != [f"x{i}" for i in range(len(cols) - 1)]:
            raise ParseError(f"bad header {header!r}; expected x0,...,x{{d-1}},label", 1)
        d = len(cols) - 1
        X, y = [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != d + 1:
                raise ParseError(f"expected {d + 1} fields, found {len(fields)}", lineno)
            try:
                X.append([float(v) for v in fields[:-1]])
                y.append(int(fields[-1]))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if y[-1] < -1:
                raise ParseError(f"label {y[-1]} is neither a class id nor -1", lineno)
    y = np.array(y, dtype=np.int64)
    mask = y >= 0
    if not mask.any():
        raise ConfigError(f"{path}: no labeled rows")
    return Dataset(np.array(X, dtype=np.float64).reshape(-1, d), y, mask, name=path.stem)


def to_csv(ds: Dataset, reveal: bool = False) -> str:
    """CSV text; unlabeled rows are written with label -1 unless ``reveal``."""
    labels = ds.y if reveal else ds.visible_labels()
    lines = [",".join([f"x{i}" for i in range(ds.dim)] + ["label"])]
    for row, lab in zip(ds.X, labels):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(lab)}")
    return "\n".join(lines) + "\n"


def save_csv(ds: Dataset, path, reveal: bool = False) -> None:
    Path(path).write_text(to_csv(ds, reveal), encoding="utf-8")


def split_labeled(ds: Dataset, spec: SplitSpec) -> Dataset:
    """Keep exactly ``spec.n_labeled`` labels visible; X and y are untouched."""
    known = np.flatnonzero(ds.y >= 0)
    n_classes = ds.n_classes
    if not n_classes <= spec.n_labeled <= len(known):
        raise ConfigError(f"need C={n_classes} <= n_labeled={spec.n_labeled} <= {len(known)}")
    rng = np.random.default_rng(spec.seed)
    if spec.stratified:
        quota = np.full(n_classes, spec.n_labeled // n_classes)
        quota[rng.permutation(n_classes)[: spec.n_labeled % n_classes]] += 1
        chosen = []
        for c in range(n_classes):
            members = known[ds.y[known] == c]
            if len(members) < quota[c]:
                raise ConfigError(f"class {c} has {len(members)} rows, needs {quota[c]} labels")
            chosen.append(rng.choice(members, size=quota[c], replace=False))
        chosen = np.concatenate(chosen)
    else:
        chosen = rng.choice(known, size=spec.n_labeled, replace=False)
        if len(np.unique(ds.y[chosen])) < n_classes:
            raise ConfigError("random split left a class without labels; use stratified=True")
    mask = np.zeros(len(ds), dtype=bool)
    mask[chosen] = True
    return replace(ds, labeled_mask=mask)


@dataclass
class Batch:
    """Labeled rows first, then unlabeled rows.

    ``labels`` holds visible labels only (-1 on unlabeled rows). ``tainted``
    marks a batch built with hidden labels exposed; losses refuse those.
    """

    x: np.ndarray
    labels: np.ndarray
    n_labeled: int
    indices: np.ndarray
    tainted: bool = False

    def __post_init__(self):
        if np.any(np.asarray(self.labels)[self.n_labeled:] >= 0):
            self.tainted = True

    @property
    def n_unlabeled(self) -> int:
        return len(self.x) - self.n_labeled

    @property
    def x_labeled(self):
        return self.x[: self.n_labeled]

    @property
    def x_unlabeled(self):
        return self.x[self.n_labeled:]

    @property
    def y_labeled(self):
        return self.labels[: self.n_labeled]


class _EpochSampler:
    def __init__(self, pool: np.ndarray, rng: np.random.Generator):
        self.pool = pool
        self.rng = rng
        self.order = rng.permutation(pool)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(self.pool)
                self.pos = 0
            step = min(k, len(self.order) - self.pos)
            out.append(self.order[self.pos:self.pos + step])
            self.pos += step
            k -= step
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


class BatchSampler:
    """Draws ``B_l`` labeled + ``B_u`` unlabeled rows per batch, without
    replacement within an epoch of each pool and reshuffled every epoch."""

    def __init__(self, ds: Dataset, batch_labeled: int, batch_unlabeled: int,
                 rng: np.random.Generator):
        labeled = np.flatnonzero(ds.labeled_mask)
        unlabeled = np.flatnonzero(~ds.labeled_mask)
        if len(labeled) == 0:
            raise ConfigError("no labeled rows to sample from")
        if batch_labeled > len(labeled):
            raise ConfigError(f"batch_labeled={batch_labeled} exceeds the {len(labeled)} labeled rows")
        if batch_labeled < 1 or batch_unlabeled < 0:
            raise ConfigError("batch sizes must be positive")
        self.ds = ds
        self._visible = ds.visible_labels()
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled if len(unlabeled) else 0
        self._lab = _EpochSampler(labeled, rng)
        self._unl = _EpochSampler(unlabeled, rng) if len(unlabeled) else None

    def sample(self) -> Batch:
        idx_l = self._lab.take(self.batch_labeled)
        idx_u = self._unl.take(self.batch_unlabeled) if self._unl else np.zeros(0, dtype=np.int64)
        idx = np.concatenate([idx_l, idx_u])
        return Batch(self.ds.X[idx], self._visible[idx], len(idx_l), idx)


def sample_batch(ds: Dataset, batch_labeled: int, batch_unlabeled: int,
                 rng: np.random.Generator) -> Batch:
    """One batch from a fresh sampler; use :class:`BatchSampler` to keep
    epoch state across batches."""
    return BatchSampler(ds, batch_labeled, batch_unlabeled, rng).sample()
