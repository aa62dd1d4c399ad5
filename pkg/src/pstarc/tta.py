"""Online adaptation: one optimizer step per test batch, classifier and bank frozen.

Per batch, confident samples (entropy strictly below the batch mean) are
pulled toward their K nearest class-matched pseudo-source score vectors,
uncertain ones toward a detached copy of their own prediction. An
augmentation-consistency term and a dispersion term over the other batch
members complete the objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .bank import FeatureBank, validate_bank
from .data import AugmentConfig, Batch
from .errors import BankDeficiencyError, ConfigError, NumericError
from .metrics import MetricsRecord
from .model import SourceModel, entropy_of, forward


@dataclass
class TtaConfig:
    K: int = 5
    lam: float = 1.0
    lr: float = 5e-4
    momentum: float = 0.9
    nesterov: bool = True
    batch_size: int = 128
    exclude_nearest: bool = True
    eps: float = nm.LOG_EPS
    use_aug: bool = True
    use_attr: bool = True
    use_disp: bool = True
    # running-statistic EMA during train-mode forwards; 0 keeps them frozen
    bn_momentum: float = 0.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not 0 <= self.bn_momentum <= 1:
            raise ConfigError("bn_momentum must lie in [0, 1]")

    @property
    def required_per_class(self) -> int:
        return self.K + (1 if self.exclude_nearest else 0)

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "K", "lam", "lr", "momentum", "nesterov", "batch_size", "exclude_nearest", "eps",
            "use_aug", "use_attr", "use_disp", "bn_momentum",
        )}
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TtaConfig":
        d = dict(d)
        aug = d.pop("augment", None)
        cfg = cls(**d)
        if aug is not None:
            cfg.augment = AugmentConfig(**aug)
        return cfg


@dataclass
class BatchOutcome:
    predictions: np.ndarray
    loss_aug: float
    loss_attr: float
    loss_disp: float
    total: float
    tau: float
    low_frac: float
    batch_acc: float
    pseudo_labels: np.ndarray | None = None
    low_mask: np.ndarray | None = None


def threshold(entropies) -> tuple[float, np.ndarray]:
    """Batch-mean entropy and the LOW mask (strictly below the mean; ties are HIGH)."""
    e = np.asarray(entropies, dtype=float).reshape(-1)
    if e.size == 0:
        raise ConfigError("threshold of an empty batch")
    tau = float(e.mean())
    return tau, e < tau


def knn_indices(feature, bank: FeatureBank, c: int, K: int, exclude_nearest: bool = True) -> np.ndarray:
    """Bank rows of class ``c`` ranked by cosine similarity to ``feature``.

    Takes the top ``K + 1`` and drops the first when ``exclude_nearest``,
    otherwise the top ``K``. Ties break toward the lower bank index.
    """
    members = bank.partitions[c]
    need = K + (1 if exclude_nearest else 0)
    if len(members) < need:
        raise BankDeficiencyError(
            f"class {c} has {len(members)} bank features, need {need}", {c: len(members)}
        )
    q = nm.row_l2_normalize(nm.as_matrix(feature)).value[0]
    sims = bank.normalized[members] @ q
    order = np.argsort(-sims, kind="stable")[:need]
    if exclude_nearest:
        order = order[1:]
    return members[order]


def knn_positives(feature, bank: FeatureBank, c: int, K: int, exclude_nearest: bool = True) -> np.ndarray:
    """Score rows (K x C) of the selected class-``c`` neighbours."""
    return bank.scores[knn_indices(feature, bank, c, K, exclude_nearest)]


def build_positives(feats: np.ndarray, probs: np.ndarray, low: np.ndarray, bank: FeatureBank, cfg: TtaConfig):
    """B x K x C positive score tensor; constants of the step."""
    B, C = probs.shape
    pos = np.repeat(probs[:, None, :], cfg.K, axis=1)
    labels = probs.argmax(axis=1)
    for k in np.flatnonzero(low):
        pos[k] = knn_positives(feats[k], bank, int(labels[k]), cfg.K, cfg.exclude_nearest)
    return pos


def init_optimizer(model: SourceModel, cfg: TtaConfig) -> dict[str, nm.SgdMomentumState]:
    return {
        name: nm.SgdMomentumState.zeros(p.shape, lr=cfg.lr, momentum=cfg.momentum, nesterov=cfg.nesterov)
        for name, p in model.extractor.parameters().items()
    }


def _loss_terms(probs: nm.Node, probs_aug: nm.Node, pos_sum: np.ndarray):
    """Per-sample (B x 1) augmentation, attraction and dispersion nodes."""
    B = probs.shape[0]
    aug = nm.scale(nm.row_sum(nm.mul(probs, probs_aug)), -1.0)
    attr = nm.scale(nm.row_sum(nm.mul(probs, pos_sum)), -1.0)
    gram = nm.matmul(probs, nm.transpose(probs))
    disp = nm.row_sum(nm.mul(gram, 1.0 - np.eye(B)))
    return aug, attr, disp


def adapt_batch(
    model: SourceModel,
    bank: FeatureBank,
    batch: Batch,
    cfg: TtaConfig,
    state: dict[str, nm.SgdMomentumState] | None = None,
    index: int = 0,
) -> BatchOutcome:
    """One adaptation step on ``batch`` followed by eval-mode prediction.

    Only ``batch.X`` and ``batch.X_aug`` reach the objective; ``batch.y_true``
    is read after the step, for ``batch_acc`` alone.
    """
    if state is None:
        state = init_optimizer(model, cfg)
    ext, head = model.extractor, model.classifier
    nodes = {name: nm.leaf(p) for name, p in ext.parameters().items()}
    try:
        feats, pre = ext.graph(batch.X, training=True, nodes=nodes)
        feats_aug, pre_aug = ext.graph(batch.X_aug, training=True, nodes=nodes)
        probs = nm.softmax(head.graph(feats))
        probs_aug = nm.softmax(head.graph(feats_aug))

        p = probs.value
        tau, low = threshold(entropy_of(p, cfg.eps))
        pos = build_positives(feats.value, p, low, bank, cfg)
        aug, attr, disp = _loss_terms(probs, probs_aug, pos.sum(axis=1))

        per_sample = None
        for on, term, w in ((cfg.use_aug, aug, 1.0), (cfg.use_attr, attr, 1.0), (cfg.use_disp, disp, cfg.lam)):
            if on:
                term = term if w == 1.0 else nm.scale(term, w)
                per_sample = term if per_sample is None else nm.add(per_sample, term)
        loss = nm.mean(per_sample) if per_sample is not None else None
    except NumericError as exc:
        raise NumericError(f"batch {index}: {exc}") from None

    total = float(loss.value[0, 0]) if loss is not None else 0.0
    if not np.isfinite(total):
        raise NumericError(f"batch {index}: non-finite adaptation loss")
    if loss is not None:
        nm.backward(loss)
        for name, node in nodes.items():
            ext.set_parameter(name, nm.sgd_nesterov_step(node.value, node.grad, state[name]))
    if cfg.bn_momentum > 0:
        ext.update_running(pre, cfg.bn_momentum)
        ext.update_running(pre_aug, cfg.bn_momentum)

    pred = forward(model, batch.X, "eval")[1].argmax(axis=1)
    return BatchOutcome(
        predictions=pred,
        loss_aug=float(aug.value.mean()),
        loss_attr=float(attr.value.mean()),
        loss_disp=float(disp.value.mean()),
        total=total,
        tau=tau,
        low_frac=float(low.mean()),
        batch_acc=float(np.mean(pred == batch.y_true)),
        pseudo_labels=p.argmax(axis=1),
        low_mask=low,
    )


def check_bank(bank: FeatureBank, cfg: TtaConfig):
    report = validate_bank(bank, cfg.required_per_class)
    if not report.ok:
        raise BankDeficiencyError(report.describe(), report.deficient)
    return report


def run_tta(model, bank, stream, cfg: TtaConfig, state=None, record: MetricsRecord | None = None):
    """Single sequential pass; mutates ``model`` and ``state`` in place."""
    check_bank(bank, cfg)
    if model.classifier.in_dim != bank.dim or model.classifier.classes != bank.classes:
        raise ConfigError(f"bank (d={bank.dim}, C={bank.classes}) does not match model {model.dims}")
    if state is None:
        state = init_optimizer(model, cfg)
    record = record if record is not None else MetricsRecord(bank.classes)
    for i, batch in enumerate(stream):
        record.append(adapt_batch(model, bank, batch, cfg, state, index=i), batch.y_true)
    return record


@dataclass
class CttaResult:
    records: list[MetricsRecord]

    @property
    def accuracies(self) -> list[float]:
        return [r.total_acc for r in self.records]

    @property
    def average(self) -> float:
        return float(np.mean(self.accuracies))

    def summary(self) -> dict:
        return {
            "domains": [r.summary() for r in self.records],
            "per_domain_acc": self.accuracies,
            "sequence_avg_acc": self.average,
        }


def run_ctta(model, bank, streams, cfg: TtaConfig, state=None) -> CttaResult:
    """Domains in order with no reset of model, bank or optimizer momentum."""
    streams = list(streams)
    if not streams:
        raise ConfigError("continual adaptation needs at least one domain")
    if state is None:
        state = init_optimizer(model, cfg)
    return CttaResult([run_tta(model, bank, s, cfg, state) for s in streams])
