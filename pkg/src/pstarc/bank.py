"""Pseudo-source feature bank synthesized from a frozen classifier head."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import ConfigError, NumericError, ParseError
from .model import Classifier

BANK_FORMAT_VERSION = 1


def _probs_node(f, H: Classifier) -> nm.Node:
    return nm.softmax(H.graph(f))


def loss_ent(f, H: Classifier, eps: float = nm.LOG_EPS) -> nm.Node:
    """Mean prediction entropy of the rows of ``f`` under ``H``."""
    p = _probs_node(f, H)
    return nm.scale(nm.mean(nm.row_sum(nm.mul(p, nm.log(p, eps)))), -1.0)


def loss_div(f, H: Classifier, eps: float = nm.LOG_EPS) -> nm.Node:
    """Negative entropy of the mean prediction; minimum ``-log C`` at a uniform marginal."""
    p_mean = nm.col_mean(_probs_node(f, H))
    return nm.total(nm.mul(p_mean, nm.log(p_mean, eps)))


def partition(labels: np.ndarray, classes: int) -> list[np.ndarray]:
    labels = np.asarray(labels)
    return [np.flatnonzero(labels == c) for c in range(classes)]


@dataclass
class FeatureBank:
    features: np.ndarray  # N x d
    scores: np.ndarray  # N x C
    labels: np.ndarray  # N
    normalized: np.ndarray  # N x d, unit rows
    partitions: list[np.ndarray]
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_features(cls, features: np.ndarray, H: Classifier, provenance: dict | None = None):
        features = np.array(features, dtype=float)
        scores = H.probs(features)
        return cls.from_scores(features, scores, provenance)

    @classmethod
    def from_scores(cls, features, scores, provenance=None):
        features = np.array(features, dtype=float)
        scores = np.array(scores, dtype=float)
        labels = scores.argmax(axis=1)
        normalized = nm.row_l2_normalize(features).value
        return cls(features, scores, labels, normalized, partition(labels, scores.shape[1]), dict(provenance or {}))

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def classes(self) -> int:
        return self.scores.shape[1]

    def class_counts(self) -> list[int]:
        return [len(s) for s in self.partitions]


def generate_feature_bank(
    H: Classifier,
    n_c: int = 20,
    steps: int = 50,
    lr: float = 0.01,
    beta: float = 5.0,
    seed: int = 0,
    eps: float = nm.LOG_EPS,
) -> FeatureBank:
    """Optimize ``C * n_c`` standard-normal features so that ``H`` labels them
    confidently (entropy term) and evenly (diversity term, weight ``beta``).

    Full-batch Adam on the features only; ``H`` is read, never written.
    Initial and final values of both terms are kept in ``provenance``.
    """
    C, d = H.classes, H.in_dim
    if n_c < 1:
        raise ConfigError("n_c must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(23,)))
    f = rng.standard_normal((C * n_c, d))
    state = nm.AdamState.zeros(f.shape, lr=lr)
    trace = []
    for step in range(steps + 1):
        node = nm.leaf(f)
        ent = loss_ent(node, H, eps)
        div = loss_div(node, H, eps)
        loss = nm.add(ent, nm.scale(div, beta))
        trace.append((float(ent.value[0, 0]), float(div.value[0, 0])))
        if not np.isfinite(loss.value[0, 0]):
            raise NumericError(f"feature bank loss non-finite at step {step}")
        if step == steps:
            break
        nm.backward(loss)
        f = nm.adam_step(f, node.grad, state)
    provenance = {
        "n_c": n_c, "steps": steps, "lr": lr, "beta": beta, "seed": seed,
        "loss_ent": [trace[0][0], trace[-1][0]],
        "loss_div": [trace[0][1], trace[-1][1]],
    }
    return FeatureBank.from_features(f, H, provenance)


@dataclass
class BankReport:
    ok: bool
    K: int
    counts: list[int]
    deficient: dict[int, int]

    def __bool__(self):
        return self.ok

    def describe(self) -> str:
        if self.ok:
            return f"bank ok: every class has >= {self.K} features"
        items = ", ".join(f"class {c}: {n}" for c, n in self.deficient.items())
        return f"bank deficient (need {self.K} per class): {items}"


def validate_bank(bank: FeatureBank, K: int = 5) -> BankReport:
    counts = bank.class_counts()
    deficient = {c: n for c, n in enumerate(counts) if n < K}
    return BankReport(not deficient, K, counts, deficient)


def bank_summary(bank: FeatureBank) -> dict:
    """Per-class counts, confidence, marginal balance and cosine geometry."""
    C = bank.classes
    ent = -(bank.scores * np.log(bank.scores + nm.LOG_EPS)).sum(axis=1)
    p_mean = bank.scores.mean(axis=0)
    kl = float(np.sum(p_mean * np.log(p_mean * C + 1e-300)))
    cos = bank.normalized @ bank.normalized.T
    same = bank.labels[:, None] == bank.labels[None, :]
    off = ~np.eye(bank.size, dtype=bool)

    def stats(mask):
        vals = cos[mask]
        if vals.size == 0:
            return None
        return {"mean": float(vals.mean()), "min": float(vals.min()), "max": float(vals.max())}

    return {
        "size": bank.size,
        "classes": C,
        "dim": bank.dim,
        "per_class_counts": bank.class_counts(),
        "mean_entropy": float(ent.mean()),
        "marginal_kl_to_uniform": kl,
        "cosine_within_class": stats(same & off),
        "cosine_between_class": stats(~same),
        "provenance": bank.provenance,
    }


def bank_to_dict(bank: FeatureBank) -> dict:
    return {
        "version": BANK_FORMAT_VERSION,
        "C": bank.classes,
        "n_c": bank.provenance.get("n_c", bank.size // max(bank.classes, 1)),
        "d": bank.dim,
        "features": bank.features.tolist(),
        "scores": bank.scores.tolist(),
        "labels": bank.labels.tolist(),
        "provenance": bank.provenance,
    }


def bank_from_dict(doc: dict) -> FeatureBank:
    try:
        if doc["version"] != BANK_FORMAT_VERSION:
            raise ParseError(f"unsupported bank version {doc['version']}")
        features = np.array(doc["features"], dtype=float).reshape(-1, int(doc["d"]))
        scores = np.array(doc["scores"], dtype=float).reshape(-1, int(doc["C"]))
        labels = np.array(doc["labels"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed bank document: {exc!r}") from None
    if features.shape[0] != scores.shape[0] or labels.shape != (features.shape[0],):
        raise ParseError("bank features, scores and labels disagree in length")
    bank = FeatureBank.from_scores(features, scores, doc.get("provenance"))
    if not np.array_equal(bank.labels, labels):
        raise ParseError("bank labels are not the argmax of the stored scores")
    return bank


def save_bank(bank: FeatureBank, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(bank_to_dict(bank)), encoding="utf-8")
    return path


def load_bank(path) -> FeatureBank:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return bank_from_dict(doc)
