"""Source model: MLP feature extractor with optional batch norm, weight-normalized head."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .data import Dataset
from .errors import ConfigError, DimensionError, NumericError, ParseError

MODEL_FORMAT_VERSION = 1
BN_MOMENTUM = 0.1


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, width: int) -> "BatchNormLayer":
        return cls(np.ones((1, width)), np.zeros((1, width)), np.zeros((1, width)), np.ones((1, width)))


@dataclass
class FeatureExtractor:
    """``relu(Linear)`` stack ending in a projection to ``d``, then optional batch norm."""

    weights: list[np.ndarray]  # each out x in
    biases: list[np.ndarray]  # each 1 x out
    bn: BatchNormLayer | None = None

    def __post_init__(self):
        for k in range(1, len(self.weights)):
            if self.weights[k].shape[1] != self.weights[k - 1].shape[0]:
                raise DimensionError(f"layer {k} input {self.weights[k].shape[1]} != previous output")
        if self.out_dim < 2:
            raise ConfigError("feature dimension must be >= 2")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            params[f"W{k}"] = W
            params[f"b{k}"] = b
        if self.bn is not None:
            params["bn_gamma"] = self.bn.gamma
            params["bn_beta"] = self.bn.beta
        return params

    def set_parameter(self, name: str, value: np.ndarray):
        if name.startswith("W"):
            self.weights[int(name[1:])] = value
        elif name.startswith("b") and name[1:].isdigit():
            self.biases[int(name[1:])] = value
        elif name == "bn_gamma":
            self.bn.gamma = value
        elif name == "bn_beta":
            self.bn.beta = value
        else:
            raise KeyError(name)

    def graph(self, X, training: bool, nodes: dict | None = None):
        """Build the forward graph.

        ``nodes`` maps parameter names to tape leaves that should receive
        gradients; parameters not in it enter as constants. Returns the
        feature node and the pre-normalization activations (for the
        running-statistics update).
        """
        nodes = nodes or {}
        h = nm.constant(X)
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            Wk = nodes.get(f"W{k}", W)
            bk = nodes.get(f"b{k}", b)
            h = nm.relu(nm.add(nm.matmul(h, nm.transpose(Wk)), bk))
        pre = h.value
        if self.bn is not None:
            h = nm.batch_norm(
                h,
                nodes.get("bn_gamma", self.bn.gamma),
                nodes.get("bn_beta", self.bn.beta),
                self.bn.running_mean,
                self.bn.running_var,
                training=training,
            )
        return h, pre

    def update_running(self, pre: np.ndarray, momentum: float = BN_MOMENTUM):
        if self.bn is None:
            return
        self.bn.running_mean, self.bn.running_var = nm.bn_running_update(
            self.bn.running_mean, self.bn.running_var, pre, momentum
        )


@dataclass
class Classifier:
    """Weight-normalized linear head without bias: ``logit_c = g_c * <v_c / |v_c|, f>``."""

    V: np.ndarray  # C x d
    g: np.ndarray  # C x 1

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=float)
        self.g = np.asarray(self.g, dtype=float).reshape(-1, 1)
        if self.V.ndim != 2 or self.g.shape[0] != self.V.shape[0]:
            raise DimensionError(f"gains {self.g.shape[0]} do not match {self.V.shape[0]} direction rows")
        if np.any(np.linalg.norm(self.V, axis=1) == 0):
            raise ConfigError("classifier direction rows must be nonzero")

    @property
    def classes(self) -> int:
        return self.V.shape[0]

    @property
    def in_dim(self) -> int:
        return self.V.shape[1]

    def effective_weight(self) -> np.ndarray:
        return self.g * self.V / np.linalg.norm(self.V, axis=1, keepdims=True)

    def logits(self, f: np.ndarray) -> np.ndarray:
        return np.asarray(f) @ self.effective_weight().T

    def probs(self, f: np.ndarray) -> np.ndarray:
        return nm.softmax_rows(self.logits(f))

    def graph(self, f, nodes: dict | None = None):
        nodes = nodes or {}
        V = nodes.get("V", self.V)
        g = nodes.get("g", self.g)
        w = nm.mul(nm.row_l2_normalize(V), g)
        return nm.matmul(f, nm.transpose(w))


@dataclass
class SourceModel:
    extractor: FeatureExtractor
    classifier: Classifier
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.extractor.out_dim != self.classifier.in_dim:
            raise DimensionError(
                f"extractor emits {self.extractor.out_dim} features, classifier takes {self.classifier.in_dim}"
            )

    @property
    def dims(self):
        return self.extractor.in_dim, self.extractor.out_dim, self.classifier.classes

    def clone(self) -> "SourceModel":
        return copy.deepcopy(self)


def build_model(D: int, d: int = 32, C: int = 2, hidden=(64, 64), batch_norm: bool = True, seed: int = 0):
    """He-initialized extractor ``D -> hidden... -> d`` and a random unit-gain head."""
    if C < 1 or D < 1:
        raise ConfigError(f"bad model dims D={D} C={C}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    sizes = [D, *hidden, d]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(scale=np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros((1, fan_out)))
    bn = BatchNormLayer.fresh(d) if batch_norm else None
    head = Classifier(rng.normal(scale=1.0 / np.sqrt(d), size=(C, d)), np.ones((C, 1)))
    meta = {"D": D, "d": d, "C": C, "hidden": list(hidden), "batch_norm": batch_norm, "seed": seed}
    return SourceModel(FeatureExtractor(weights, biases, bn), head, meta)


def label_smooth(y, C: int, alpha: float = 0.1) -> np.ndarray:
    """Smoothed targets ``(1 - alpha) * onehot + alpha / C``; one row per label."""
    if not 0 <= alpha <= 1:
        raise ConfigError("label smoothing alpha must lie in [0, 1]")
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    out = np.full((y.size, C), alpha / C)
    out[np.arange(y.size), y] += 1.0 - alpha
    return out


def entropy_of(probs, eps: float = nm.LOG_EPS) -> np.ndarray:
    probs = nm.as_matrix(probs)
    return -(probs * np.log(probs + eps)).sum(axis=1)


def forward(model: SourceModel, X, mode: str = "eval", update_stats: bool = False):
    """Features and softmax probabilities. Train mode normalizes with batch statistics."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    X = nm.as_matrix(X)
    if X.shape[1] != model.extractor.in_dim:
        raise DimensionError(f"input width {X.shape[1]} != model input {model.extractor.in_dim}")
    feats, pre = model.extractor.graph(X, training=mode == "train")
    if mode == "train" and update_stats:
        model.extractor.update_running(pre)
    return feats.value, model.classifier.probs(feats.value)


def predict(model: SourceModel, X) -> np.ndarray:
    return forward(model, X, "eval")[1].argmax(axis=1)


def accuracy(model: SourceModel, ds: Dataset) -> float:
    return float(np.mean(predict(model, ds.X) == ds.y))


def source_loss_graph(model: SourceModel, X, targets, nodes: dict, training: bool = True):
    """Label-smoothed cross entropy over a batch; returns (loss node, pre-BN activations)."""
    feats, pre = model.extractor.graph(X, training=training, nodes=nodes)
    probs = nm.softmax(model.classifier.graph(feats, nodes))
    ce = nm.row_sum(nm.mul(nm.log(probs), targets))
    return nm.scale(nm.mean(ce), -1.0), pre


def all_parameters(model: SourceModel) -> dict[str, np.ndarray]:
    params = model.extractor.parameters()
    params["V"] = model.classifier.V
    params["g"] = model.classifier.g
    return params


def set_parameter(model: SourceModel, name: str, value: np.ndarray):
    if name == "V":
        model.classifier.V = value
    elif name == "g":
        model.classifier.g = value
    else:
        model.extractor.set_parameter(name, value)


def train_source(
    model: SourceModel,
    ds: Dataset,
    epochs: int = 30,
    lr: float = 0.05,
    alpha: float = 0.1,
    batch_size: int = 64,
    momentum: float = 0.9,
    seed: int = 0,
    history: list | None = None,
) -> SourceModel:
    """Minibatch SGD-Nesterov on label-smoothed cross entropy, all parameters trainable.

    The shuffle stream is derived from ``seed`` alone, so data-generation
    streams are never touched. Appends the mean loss of each epoch to
    ``history`` when given (index 0 is the loss at initialization).
    """
    if len(ds) == 0:
        raise ConfigError("cannot train on an empty dataset")
    D, _, C = model.dims
    if ds.dim != D or ds.classes != C:
        raise DimensionError(f"dataset (D={ds.dim}, C={ds.classes}) vs model (D={D}, C={C})")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    targets = label_smooth(ds.y, C, alpha)
    states = {
        name: nm.SgdMomentumState.zeros(p.shape, lr=lr, momentum=momentum, nesterov=True)
        for name, p in all_parameters(model).items()
    }
    if history is not None:
        history.append(_full_loss(model, ds.X, targets))
    for epoch in range(epochs):
        order = rng.permutation(len(ds))
        losses = []
        for bi, start in enumerate(range(0, len(ds), batch_size)):
            idx = order[start : start + batch_size]
            nodes = {name: nm.leaf(p) for name, p in all_parameters(model).items()}
            try:
                loss, pre = source_loss_graph(model, ds.X[idx], targets[idx], nodes)
            except NumericError as exc:
                raise NumericError(f"source training diverged at epoch {epoch}, batch {bi}: {exc}") from None
            value = float(loss.value[0, 0])
            if not np.isfinite(value):
                raise NumericError(f"source training diverged at epoch {epoch}, batch {bi}")
            nm.backward(loss)
            for name, node in nodes.items():
                set_parameter(model, name, nm.sgd_nesterov_step(node.value, node.grad, states[name]))
            model.extractor.update_running(pre)
            losses.append(value * len(idx))
        if history is not None:
            history.append(sum(losses) / len(ds))
    model.meta["train_config"] = {
        "epochs": epochs, "lr": lr, "alpha": alpha, "batch_size": batch_size,
        "momentum": momentum, "seed": seed,
    }
    return model


def _full_loss(model, X, targets) -> float:
    loss, _ = source_loss_graph(model, X, targets, {}, training=False)
    return float(loss.value[0, 0])


# ------------------------------------------------------------------- files


def model_to_dict(model: SourceModel) -> dict:
    D, d, C = model.dims
    ext = model.extractor
    bn = None
    if ext.bn is not None:
        bn = {k: getattr(ext.bn, a).reshape(-1).tolist() for k, a in
              (("gamma", "gamma"), ("beta", "beta"), ("mean", "running_mean"), ("var", "running_var"))}
    return {
        "version": MODEL_FORMAT_VERSION,
        "D": D,
        "d": d,
        "C": C,
        "layers": [{"W": W.tolist(), "b": b.reshape(-1).tolist()} for W, b in zip(ext.weights, ext.biases)],
        "classifier": {"V": model.classifier.V.tolist(), "g": model.classifier.g.reshape(-1).tolist()},
        "bn": bn,
        "seed": model.meta.get("seed"),
        "meta": model.meta,
    }


def model_from_dict(d: dict) -> SourceModel:
    try:
        if d["version"] != MODEL_FORMAT_VERSION:
            raise ParseError(f"unsupported model version {d['version']}")
        weights = [np.array(layer["W"], dtype=float) for layer in d["layers"]]
        biases = [np.array(layer["b"], dtype=float).reshape(1, -1) for layer in d["layers"]]
        bn = None
        if d.get("bn") is not None:
            b = d["bn"]
            bn = BatchNormLayer(*(np.array(b[k], dtype=float).reshape(1, -1) for k in ("gamma", "beta", "mean", "var")))
        head = Classifier(np.array(d["classifier"]["V"], dtype=float), np.array(d["classifier"]["g"], dtype=float))
        model = SourceModel(FeatureExtractor(weights, biases, bn), head, dict(d.get("meta") or {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed model document: {exc!r}") from None
    if model.dims != (d["D"], d["d"], d["C"]):
        raise ParseError(f"model dims {model.dims} disagree with header {(d['D'], d['d'], d['C'])}")
    return model


def save_model(model: SourceModel, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model)), encoding="utf-8")
    return path


def load_model(path) -> SourceModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return model_from_dict(doc)


def random_classifier(C: int, d: int, seed: int = 0, gain=(1.0, 3.0)) -> Classifier:
    """Gaussian directions with gains drawn uniformly from ``gain``.

    A head with exactly equal gains is perfectly class-symmetric, which makes
    the class marginal of random features uniform from the start.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(31,)))
    return Classifier(rng.normal(size=(C, d)), rng.uniform(gain[0], gain[1], size=C))
