"""Reference synthetic scenario and the ablation runners built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bank import FeatureBank, generate_feature_bank
from .data import AugmentConfig, Dataset, DomainSpec, Shift, batch_stream, make_shifted_domain, make_source_domain
from .metrics import MetricsRecord
from .model import SourceModel, accuracy, build_model, predict, train_source
from .tta import TtaConfig, run_ctta, run_tta

TARGET_SOURCE_ONLY_ACC = 0.70


def graded_shift(dim: int, severity: float, rng_seed: int, translation: float = 1.0) -> Shift:
    """Rotation in random orthogonal planes plus a translation, both scaled by ``severity``.

    For a fixed ``rng_seed`` the directions are fixed, so ``severity`` moves
    along one path from the identity (0) to a strong shift.
    """
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed, spawn_key=(41,)))
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))
    angles = rng.uniform(0.5, 1.0, size=dim // 2) * (math.pi / 2)
    block = np.eye(dim)
    for i, a in enumerate(angles):
        c, s = math.cos(severity * a), math.sin(severity * a)
        j = 2 * i
        block[j, j], block[j, j + 1], block[j + 1, j], block[j + 1, j + 1] = c, -s, s, c
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    return Shift(q @ block @ q.T, severity * translation * direction, 0.0)


@dataclass
class ScenarioConfig:
    classes: int = 12
    dim: int = 24
    feature_dim: int = 32
    hidden: tuple = (64, 64)
    separation: float = 2.0
    sigma_class: float = 1.0
    source_per_class: int = 200
    target_per_class: int = 100
    source_epochs: int = 20
    source_lr: float = 0.05
    target_acc: float = TARGET_SOURCE_ONLY_ACC
    translation: float = 1.0
    n_c: int = 20
    domains: int = 1

    def to_dict(self):
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Scenario:
    seed: int
    spec: DomainSpec
    model: SourceModel
    bank: FeatureBank
    shifts: list[Shift]
    severities: list[float]
    targets: list[Dataset]
    source_only: list[float]
    source_test_acc: float
    config: ScenarioConfig = field(default_factory=ScenarioConfig)


def calibrate_severity(model, spec, shift_seed, target_acc, translation=1.0, draw=7, iters=18):
    """Bisection on severity so source-only accuracy on a calibration draw hits ``target_acc``."""
    lo, hi = 0.0, 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ds = make_shifted_domain(spec, graded_shift(spec.dim, mid, shift_seed, translation), draw=draw)
        if accuracy(model, ds) > target_acc:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def build_scenario(seed: int, cfg: ScenarioConfig | None = None) -> Scenario:
    """Train a source model, synthesize its bank, and build ``cfg.domains`` calibrated target domains."""
    cfg = cfg or ScenarioConfig()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    means = rng.normal(size=(cfg.classes, cfg.dim)) * cfg.separation
    spec = DomainSpec(means, cfg.sigma_class, cfg.source_per_class, seed=seed)
    source = make_source_domain(spec)
    model = build_model(cfg.dim, cfg.feature_dim, cfg.classes, cfg.hidden, seed=seed)
    train_source(model, source, epochs=cfg.source_epochs, lr=cfg.source_lr, seed=seed)
    source_test = accuracy(model, make_source_domain(spec, draw=1))
    bank = generate_feature_bank(model.classifier, n_c=cfg.n_c, seed=seed)

    tspec = replace(spec, samples_per_class=cfg.target_per_class)
    shifts, severities, targets, source_only = [], [], [], []
    for k in range(cfg.domains):
        shift_seed = seed * 1000 + k
        sev = calibrate_severity(model, tspec, shift_seed, cfg.target_acc, cfg.translation)
        shift = graded_shift(cfg.dim, sev, shift_seed, cfg.translation)
        target = make_shifted_domain(tspec, shift, draw=k)
        shifts.append(shift)
        severities.append(sev)
        targets.append(target)
        source_only.append(accuracy(model, target))
    return Scenario(seed, spec, model, bank, shifts, severities, targets, source_only, source_test, cfg)


def reference_tta_config(seed: int, **overrides) -> TtaConfig:
    """Adaptation settings used by the reference runs (desk-scale learning rate)."""
    base = dict(lr=1e-2, batch_size=64, augment=AugmentConfig(sigma=0.5, dropout=0.1, seed=seed))
    base.update(overrides)
    return TtaConfig(**base)


def _fresh_augment(cfg: TtaConfig, seed: int) -> TtaConfig:
    aug = AugmentConfig(cfg.augment.sigma, cfg.augment.dropout, seed)
    return replace(cfg, augment=aug)


def adapt_on(scn: Scenario, cfg: TtaConfig, domain: int = 0, stream_seed: int | None = None,
             return_model: bool = False):
    """Run TTA on a private copy of the scenario's model; the scenario is left untouched."""
    seed = scn.seed if stream_seed is None else stream_seed
    cfg = _fresh_augment(cfg, seed)
    stream = batch_stream(scn.targets[domain], cfg.batch_size, cfg.augment, seed)
    model = scn.model.clone()
    record = run_tta(model, scn.bank, stream, cfg)
    return (record, model) if return_model else record


def adapt_sequence(scn: Scenario, cfg: TtaConfig, order=None, stream_seed: int | None = None):
    seed = scn.seed if stream_seed is None else stream_seed
    cfg = _fresh_augment(cfg, seed)
    order = list(range(len(scn.targets))) if order is None else list(order)
    streams = [batch_stream(scn.targets[k], cfg.batch_size, cfg.augment, seed + 101 * i) for i, k in enumerate(order)]
    return run_ctta(scn.model.clone(), scn.bank, streams, cfg)


# ---------------------------------------------------------------- ablations

LOSS_COMBOS = [(a, t, d) for a in (False, True) for t in (False, True) for d in (False, True)]
# the four on/off combinations the original loss ablation reports
REPORTED_ROWS = [(True, True, False), (True, False, True), (False, True, True), (True, True, True)]


def combo_name(combo) -> str:
    names = [n for n, on in zip(("aug", "attr", "disp"), combo) if on]
    return "+".join(names) if names else "none"


def _mean_std(xs):
    xs = np.asarray(xs, dtype=float)
    return float(xs.mean()), float(xs.std())


def ablate_losses(seeds=range(5), scenario_cfg: ScenarioConfig | None = None, tta_overrides: dict | None = None,
                  scenarios: dict | None = None):
    """Accuracy for each of the 8 on/off combinations of the three loss terms."""
    scenarios = scenarios if scenarios is not None else {}
    cells = {combo: [] for combo in LOSS_COMBOS}
    distinct = {combo: [] for combo in LOSS_COMBOS}
    final_distinct = {combo: [] for combo in LOSS_COMBOS}
    source_only = []
    for seed in seeds:
        scn = scenarios.get(seed) or build_scenario(seed, scenario_cfg)
        scenarios[seed] = scn
        source_only.append(scn.source_only[0])
        for combo in LOSS_COMBOS:
            a, t, d = combo
            cfg = reference_tta_config(seed, use_aug=a, use_attr=t, use_disp=d, **(tta_overrides or {}))
            rec, adapted = adapt_on(scn, cfg, return_model=True)
            cells[combo].append(rec.total_acc)
            distinct[combo].append(rec.distinct_predicted())
            # classes the adapted model still predicts on the whole target domain
            final_distinct[combo].append(int(np.unique(predict(adapted, scn.targets[0].X)).size))
    rows = []
    for combo in LOSS_COMBOS:
        m, s = _mean_std(cells[combo])
        rows.append({
            "combo": combo_name(combo), "aug": combo[0], "attr": combo[1], "disp": combo[2],
            "reported_row": combo in REPORTED_ROWS, "acc_mean": m, "acc_std": s,
            "acc": cells[combo], "distinct_classes": distinct[combo],
            "final_distinct_classes": final_distinct[combo],
            "final_distinct_mean": float(np.mean(final_distinct[combo])),
        })
    return {"rows": rows, "source_only": source_only, "seeds": list(seeds)}


def ablate_batch_size(sizes=(8, 16, 32, 64, 128), seeds=range(5), scenario_cfg: ScenarioConfig | None = None,
                      tta_overrides: dict | None = None, scenarios: dict | None = None):
    scenarios = scenarios if scenarios is not None else {}
    acc = {b: [] for b in sizes}
    for seed in seeds:
        scn = scenarios.get(seed) or build_scenario(seed, scenario_cfg)
        scenarios[seed] = scn
        for b in sizes:
            cfg = reference_tta_config(seed, batch_size=b, **(tta_overrides or {}))
            acc[b].append(adapt_on(scn, cfg).total_acc)
    rows = [{"batch_size": b, "acc_mean": _mean_std(acc[b])[0], "acc_std": _mean_std(acc[b])[1], "acc": acc[b]}
            for b in sizes]
    out = {"rows": rows, "seeds": list(seeds)}
    if 64 in acc and 8 in acc:
        out["trend_64_minus_8"] = _mean_std(acc[64])[0] - _mean_std(acc[8])[0]
    return out
