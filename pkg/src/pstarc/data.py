"""Synthetic Gaussian-blob domains, vector-space augmentation, batching and CSV I/O."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

# SeedSequence spawn keys; keep the streams of one seed disjoint
_SOURCE_STREAM = 0
_TARGET_STREAM = 1


@dataclass
class Shift:
    rotation: np.ndarray
    translation: np.ndarray
    noise: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float).reshape(-1)

    @classmethod
    def identity(cls, dim: int) -> "Shift":
        return cls(np.eye(dim), np.zeros(dim), 0.0)

    def validate(self, dim: int | None = None):
        r = self.rotation
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ConfigError(f"rotation must be square, got {r.shape}")
        if dim is not None and r.shape[0] != dim:
            raise ConfigError(f"rotation is {r.shape}, domain dim is {dim}")
        if self.translation.shape != (r.shape[0],):
            raise ConfigError(f"translation has shape {self.translation.shape}")
        if not np.allclose(r.T @ r, np.eye(r.shape[0]), rtol=0, atol=1e-8):
            raise ConfigError("rotation is not orthogonal (R^T R != I within 1e-8)")
        if self.noise < 0:
            raise ConfigError("shift noise must be >= 0")

    def to_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "noise": self.noise,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["rotation"]), np.array(d["translation"]), float(d.get("noise", 0.0)))


def plane_rotation(dim: int, degrees: float, i: int = 0, j: int = 1) -> np.ndarray:
    """Rotation by ``degrees`` in the (i, j) coordinate plane."""
    r = np.eye(dim)
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random orthogonal matrix (QR of a Gaussian matrix with sign fix)."""
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


@dataclass
class DomainSpec:
    means: np.ndarray  # C x D
    sigma_class: float = 1.0
    samples_per_class: int = 100
    seed: int = 0
    shift: Shift | None = None

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))

    @property
    def classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def validate(self):
        if self.classes < 1 or self.dim < 1:
            raise ConfigError(f"degenerate domain: {self.classes} classes, dim {self.dim}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.sigma_class < 0:
            raise ConfigError("sigma_class must be >= 0")
        if self.shift is not None:
            self.shift.validate(self.dim)

    def to_dict(self):
        return {
            "means": self.means.tolist(),
            "sigma_class": self.sigma_class,
            "samples_per_class": self.samples_per_class,
            "seed": self.seed,
            "shift": None if self.shift is None else self.shift.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        shift = d.get("shift")
        return cls(
            means=np.array(d["means"]),
            sigma_class=float(d.get("sigma_class", 1.0)),
            samples_per_class=int(d.get("samples_per_class", 100)),
            seed=int(d.get("seed", 0)),
            shift=None if shift is None else Shift.from_dict(shift),
        )


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    classes: int

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.X.shape[0] != self.y.shape[0]:
            raise ConfigError(f"{self.X.shape[0]} samples but {self.y.shape[0]} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise ConfigError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _draw_blobs(spec: DomainSpec, rng: np.random.Generator) -> Dataset:
    n = spec.samples_per_class
    y = np.repeat(np.arange(spec.classes), n)
    X = spec.means[y] + spec.sigma_class * rng.normal(size=(y.size, spec.dim))
    return Dataset(X, y, spec.classes)


def make_source_domain(spec: DomainSpec, draw: int = 0) -> Dataset:
    """Isotropic Gaussian blob per class, ``samples_per_class`` each, rows grouped by class.

    ``draw`` selects an independent sample from the same distribution, so a
    held-out source test set is ``make_source_domain(spec, draw=1)``.
    """
    spec.validate()
    return _draw_blobs(spec, _stream(spec.seed, _SOURCE_STREAM, draw))


def make_shifted_domain(spec: DomainSpec, shift: Shift | None = None, draw: int = 0) -> Dataset:
    """Fresh class-conditional draws mapped through ``x -> R x + t + noise``."""
    spec.validate()
    shift = shift if shift is not None else spec.shift
    if shift is None:
        raise ConfigError("no shift given and spec.shift is unset")
    shift.validate(spec.dim)
    rng = _stream(spec.seed, _TARGET_STREAM, draw)
    base = _draw_blobs(spec, rng)
    X = base.X @ shift.rotation.T + shift.translation
    if shift.noise > 0:
        X = X + shift.noise * rng.normal(size=X.shape)
    return Dataset(X, base.y, spec.classes)


@dataclass
class AugmentConfig:
    """Additive Gaussian noise followed by coordinate dropout."""

    sigma: float = 0.5
    dropout: float = 0.1
    seed: int = 0
    rng: np.random.Generator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("augmentation sigma must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("augmentation dropout must lie in [0, 1)")
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    def to_dict(self):
        return {"sigma": self.sigma, "dropout": self.dropout, "seed": self.seed}


def strong_augment(X: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    rng = cfg.rng
    out = X + cfg.sigma * rng.normal(size=X.shape) if cfg.sigma > 0 else X.copy()
    if cfg.dropout > 0:
        out = out * (rng.random(size=X.shape) >= cfg.dropout)
    return out


@dataclass
class Batch:
    X: np.ndarray
    X_aug: np.ndarray
    y_true: np.ndarray
    index: np.ndarray  # dataset rows of this batch

    def __len__(self):
        return self.X.shape[0]


def batch_stream(ds: Dataset, batch_size: int, aug: AugmentConfig, seed: int) -> list[Batch]:
    """One shuffled pass over ``ds``; the last batch may be short."""
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    if len(ds) == 0:
        raise ConfigError("cannot stream an empty dataset")
    order = np.random.default_rng(seed).permutation(len(ds))
    batches = []
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        X = ds.X[idx]
        batches.append(Batch(X, strong_augment(X, aug), ds.y[idx], idx))
    return batches


# ------------------------------------------------------------------- files


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_dataset(ds: Dataset, path, seed: int | None = None, spec: dict | None = None) -> Path:
    """Write ``label,f0..`` CSV plus a JSON manifest next to it."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(ds.dim)])
        for label, row in zip(ds.y, ds.X):
            w.writerow([int(label)] + [repr(float(v)) for v in row])
    manifest = {"dim": ds.dim, "classes": ds.classes, "count": len(ds), "seed": seed, "spec": spec}
    _manifest_path(path).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = _manifest_path(path)
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        dim, classes, count = int(manifest["dim"]), int(manifest["classes"]), int(manifest["count"])
    except FileNotFoundError:
        raise ParseError(f"{mpath}: manifest missing") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"{mpath}: bad manifest ({exc})") from None

    expected = ["label"] + [f"f{j}" for j in range(dim)]
    X = np.empty((count, dim))
    y = np.empty(count, dtype=np.int64)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise ParseError(f"{path}:1: header {header!r} does not match dim={dim}")
        n = 0
        for lineno, row in enumerate(reader, start=2):
            if n >= count:
                raise ParseError(f"{path}:{lineno}: more rows than manifest count {count}")
            if len(row) != dim + 1:
                raise ParseError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(row)}")
            try:
                y[n] = int(row[0])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: field 'label': {row[0]!r} is not an integer") from None
            if not 0 <= y[n] < classes:
                raise ParseError(f"{path}:{lineno}: field 'label': {y[n]} outside [0, {classes})")
            for j, tok in enumerate(row[1:]):
                try:
                    X[n, j] = float(tok)
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: field 'f{j}': {tok!r} is not a number") from None
            n += 1
    if n != count:
        raise ParseError(f"{path}: {n} rows but manifest count is {count}")
    return Dataset(X, y, classes)
