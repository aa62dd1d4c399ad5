"""Command-line entry point: ``pstarc <command> [--config FILE] [--seed N] [--out DIR] ...``.

Every command resolves its settings as built-in defaults, then the JSON
config file, then explicit flags (flags win). The seed falls back to the
``PSTARC_SEED`` environment variable when neither flag nor config sets it.
Each run writes ``run.json``; ``pstarc replay run.json`` re-executes it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .accounting import memory_accounting
from .bank import bank_summary, generate_feature_bank, load_bank, save_bank, validate_bank
from .data import AugmentConfig, DomainSpec, batch_stream, load_dataset, make_shifted_domain, make_source_domain, save_dataset
from .errors import BankDeficiencyError, ConfigError, PstarcError
from .experiments import ScenarioConfig, ablate_batch_size, ablate_losses, graded_shift
from .metrics import emit_metrics
from .model import accuracy, build_model, load_model, save_model, train_source
from .tta import TtaConfig, run_ctta, run_tta

log = logging.getLogger("pstarc")

TTA_DEFAULTS = {
    "K": 5, "lam": 1.0, "lr": 5e-4, "momentum": 0.9, "batch_size": 128,
    "exclude_nearest": True, "bn_momentum": 0.0,
    "use_aug": True, "use_attr": True, "use_disp": True,
    "aug_sigma": 0.5, "aug_dropout": 0.1,
}

DEFAULTS = {
    "synth": {
        "classes": 12, "dim": 24, "per_class": 100, "separation": 2.0, "sigma_class": 1.0,
        "severity": 0.0, "translation": 1.0, "noise": 0.0, "draw": 0, "shift_seed": None,
    },
    "train-source": {
        "data": None, "feature_dim": 32, "hidden": [64, 64], "batch_norm": True,
        "epochs": 20, "lr": 0.05, "alpha": 0.1, "batch_size": 64, "momentum": 0.9,
    },
    "gen-bank": {"model": None, "n_c": 20, "steps": 50, "lr": 0.01, "beta": 5.0, "K": 5},
    "tta": {"model": None, "bank": None, "data": None, "save_model": None, **TTA_DEFAULTS},
    "ctta": {"model": None, "bank": None, "data": [], "save_model": None, **TTA_DEFAULTS},
    "ablate-losses": {"n_seeds": 5, "lr": 1e-2, "batch_size": 64, "classes": 12, "dim": 24},
    "ablate-batch": {"n_seeds": 5, "lr": 1e-2, "sizes": [8, 16, 32, 64, 128], "classes": 12, "dim": 24},
    "mem-report": {"bank": None, "N": 240, "d": 256, "C": 12},
}

REQUIRED = {
    "train-source": ["data"],
    "gen-bank": ["model"],
    "tta": ["model", "bank", "data"],
    "ctta": ["model", "bank", "data"],
}


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def _tta_config(cfg: dict, seed: int) -> TtaConfig:
    return TtaConfig(
        K=cfg["K"], lam=cfg["lam"], lr=cfg["lr"], momentum=cfg["momentum"], batch_size=cfg["batch_size"],
        exclude_nearest=cfg["exclude_nearest"], bn_momentum=cfg["bn_momentum"],
        use_aug=cfg["use_aug"], use_attr=cfg["use_attr"], use_disp=cfg["use_disp"],
        augment=AugmentConfig(cfg["aug_sigma"], cfg["aug_dropout"], seed),
    )


# ------------------------------------------------------------------ commands


def cmd_synth(cfg, seed, out: Path):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    means = rng.normal(size=(cfg["classes"], cfg["dim"])) * cfg["separation"]
    spec = DomainSpec(means, cfg["sigma_class"], cfg["per_class"], seed=seed)
    if cfg["severity"] > 0 or cfg["noise"] > 0:
        shift_seed = seed if cfg["shift_seed"] is None else cfg["shift_seed"]
        shift = graded_shift(cfg["dim"], cfg["severity"], shift_seed, cfg["translation"])
        shift.noise = cfg["noise"]
        spec.shift = shift
        ds = make_shifted_domain(spec, draw=cfg["draw"])
    else:
        ds = make_source_domain(spec, draw=cfg["draw"])
    save_dataset(ds, out / "dataset.csv", seed=seed, spec=spec.to_dict())
    return {"samples": len(ds), "dataset": str(out / "dataset.csv")}


def cmd_train_source(cfg, seed, out: Path):
    ds = load_dataset(cfg["data"])
    model = build_model(ds.dim, cfg["feature_dim"], ds.classes, tuple(cfg["hidden"]), cfg["batch_norm"], seed=seed)
    history = []
    train_source(model, ds, epochs=cfg["epochs"], lr=cfg["lr"], alpha=cfg["alpha"],
                 batch_size=cfg["batch_size"], momentum=cfg["momentum"], seed=seed, history=history)
    save_model(model, out / "model.json")
    summary = {"train_acc": accuracy(model, ds), "loss_history": history}
    _write_json(out / "train_summary.json", summary)
    return summary


def cmd_gen_bank(cfg, seed, out: Path):
    model = load_model(cfg["model"])
    bank = generate_feature_bank(model.classifier, n_c=cfg["n_c"], steps=cfg["steps"], lr=cfg["lr"],
                                 beta=cfg["beta"], seed=seed)
    save_bank(bank, out / "bank.json")
    summary = bank_summary(bank)
    report = validate_bank(bank, cfg["K"])
    summary["validation"] = {"ok": report.ok, "K": report.K, "deficient": report.deficient}
    _write_json(out / "bank_summary.json", summary)
    if not report.ok:
        raise BankDeficiencyError(report.describe(), report.deficient)
    return summary


def _summary_extra(cfg, seed):
    return {"config_digest": config_digest(cfg), "seed": seed}


def cmd_tta(cfg, seed, out: Path):
    model, bank = load_model(cfg["model"]), load_bank(cfg["bank"])
    ds = load_dataset(cfg["data"])
    tcfg = _tta_config(cfg, seed)
    source_only = accuracy(model, ds)
    record = run_tta(model, bank, batch_stream(ds, tcfg.batch_size, tcfg.augment, seed), tcfg)
    extra = _summary_extra(cfg, seed)
    extra["source_only_acc"] = source_only
    emit_metrics(record, out, "metrics", extra)
    # the summary file name the interface promises
    (out / "summary.json").write_text((out / "metrics_summary.json").read_text(), encoding="utf-8")
    if cfg["save_model"]:
        save_model(model, out / cfg["save_model"])
    return record.summary()


def cmd_ctta(cfg, seed, out: Path):
    paths = cfg["data"] if isinstance(cfg["data"], list) else [cfg["data"]]
    if not paths:
        raise ConfigError("ctta needs at least one --data path")
    model, bank = load_model(cfg["model"]), load_bank(cfg["bank"])
    domains = [load_dataset(p) for p in paths]
    tcfg = _tta_config(cfg, seed)
    source_only = [accuracy(model, ds) for ds in domains]
    streams = [batch_stream(ds, tcfg.batch_size, tcfg.augment, seed + 101 * i) for i, ds in enumerate(domains)]
    result = run_ctta(model, bank, streams, tcfg)
    for k, rec in enumerate(result.records):
        extra = _summary_extra(cfg, seed)
        extra.update({"domain": k, "data": str(paths[k]), "source_only_acc": source_only[k]})
        emit_metrics(rec, out, f"metrics_domain{k}", extra)
    summary = result.summary()
    summary.update(_summary_extra(cfg, seed))
    summary["source_only_acc"] = source_only
    _write_json(out / "summary.json", summary)
    if cfg["save_model"]:
        save_model(model, out / cfg["save_model"])
    return {"per_domain_acc": result.accuracies, "sequence_avg_acc": result.average}


def _scenario_cfg(cfg):
    return ScenarioConfig(classes=cfg["classes"], dim=cfg["dim"])


def cmd_ablate_losses(cfg, seed, out: Path):
    seeds = [seed + i for i in range(cfg["n_seeds"])]
    res = ablate_losses(seeds, _scenario_cfg(cfg), {"lr": cfg["lr"], "batch_size": cfg["batch_size"]})
    _write_json(out / "ablate_losses.json", res)
    _write_table(out / "ablate_losses.csv", res["rows"],
                 ["combo", "aug", "attr", "disp", "reported_row", "acc_mean", "acc_std", "final_distinct_mean"])
    return {r["combo"]: round(r["acc_mean"], 4) for r in res["rows"]}


def cmd_ablate_batch(cfg, seed, out: Path):
    seeds = [seed + i for i in range(cfg["n_seeds"])]
    res = ablate_batch_size(tuple(cfg["sizes"]), seeds, _scenario_cfg(cfg), {"lr": cfg["lr"]})
    _write_json(out / "ablate_batch.json", res)
    _write_table(out / "ablate_batch.csv", res["rows"], ["batch_size", "acc_mean", "acc_std"])
    return {"trend_64_minus_8": res.get("trend_64_minus_8")}


def cmd_mem_report(cfg, seed, out: Path):
    if cfg["bank"]:
        report = memory_accounting(load_bank(cfg["bank"]))
    else:
        report = memory_accounting(N=cfg["N"], d=cfg["d"], C=cfg["C"])
    _write_json(out / "mem_report.json", report)
    return {"pstarc_scalars": report["pstarc"]["scalars"]}


def _write_table(path: Path, rows, columns):
    import csv

    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


COMMANDS = {
    "synth": cmd_synth,
    "train-source": cmd_train_source,
    "gen-bank": cmd_gen_bank,
    "tta": cmd_tta,
    "ctta": cmd_ctta,
    "ablate-losses": cmd_ablate_losses,
    "ablate-batch": cmd_ablate_batch,
    "mem-report": cmd_mem_report,
}


# -------------------------------------------------------------------- parsing


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _int_list(s: str):
    return [int(x) for x in s.split(",") if x]


def _add_common(p):
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON config file (or a run.json)")
    p.add_argument("--seed", type=int, default=S, help="seed; falls back to $PSTARC_SEED, then 0")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=S)


def _add_options(p, command):
    S = argparse.SUPPRESS
    for key, default in DEFAULTS[command].items():
        flag = "--" + key.replace("_", "-")
        if command == "ctta" and key == "data":
            p.add_argument(flag, action="append", default=S, help="target dataset CSV, repeat in domain order")
        elif isinstance(default, bool):
            p.add_argument(flag, type=_bool, default=S, metavar="BOOL")
        elif isinstance(default, list):
            p.add_argument(flag, type=_int_list, default=S, metavar="N,N,...")
        elif isinstance(default, float):
            p.add_argument(flag, type=float, default=S)
        elif isinstance(default, int):
            p.add_argument(flag, type=int, default=S)
        elif key == "shift_seed":
            p.add_argument(flag, type=int, default=S)
        else:
            p.add_argument(flag, default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pstarc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        _add_common(p)
        _add_options(p, command)
    rp = sub.add_parser("replay", help="re-execute a recorded run.json")
    rp.add_argument("run_json")
    rp.add_argument("--out", default=argparse.SUPPRESS)
    return parser


def resolve(command: str, flags: dict, env=None) -> tuple[dict, int]:
    """Merge defaults, config file and flags; return (config, seed)."""
    env = os.environ if env is None else env
    cfg = dict(DEFAULTS[command])
    file_cfg = {}
    if "config" in flags:
        try:
            file_cfg = json.loads(Path(flags["config"]).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {flags['config']}: {exc}") from None
        if "command" in file_cfg and "config" in file_cfg:
            file_cfg = dict(file_cfg["config"], seed=file_cfg.get("seed"))
    unknown = set(file_cfg) - set(cfg) - {"seed", "out"}
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    cfg.update({k: v for k, v in file_cfg.items() if k in cfg})
    cfg.update({k: v for k, v in flags.items() if k in cfg})

    if "seed" in flags:
        seed = flags["seed"]
    elif file_cfg.get("seed") is not None:
        seed = file_cfg["seed"]
    elif env.get("PSTARC_SEED"):
        try:
            seed = int(env["PSTARC_SEED"])
        except ValueError:
            raise ConfigError(f"PSTARC_SEED is not an integer: {env['PSTARC_SEED']!r}") from None
    else:
        seed = 0
    missing = [k for k in REQUIRED.get(command, []) if not cfg.get(k)]
    if missing:
        raise ConfigError(f"{command}: missing required option(s) {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg, int(seed)


def execute(command: str, cfg: dict, seed: int, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    run = {"command": command, "config": cfg, "seed": seed, "version": __version__}
    _write_json(out / "run.json", run)
    return COMMANDS[command](cfg, seed, out)


def _fail(exc: PstarcError, out: Path | None) -> int:
    err = {"error": exc.kind, "message": str(exc)}
    if isinstance(exc, BankDeficiencyError):
        err["deficient"] = {str(k): v for k, v in exc.deficient.items()}
    blob = json.dumps(err)
    print(blob, file=sys.stderr)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(blob, encoding="utf-8")
    return 2


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    logging.basicConfig(level=logging.INFO if args.pop("verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.pop("out", f"runs/{command}"))
    try:
        if command == "replay":
            try:
                run = json.loads(Path(args["run_json"]).read_text(encoding="utf-8"))
                command, cfg, seed = run["command"], run["config"], int(run["seed"])
            except (OSError, json.JSONDecodeError, KeyError) as exc:
                raise ConfigError(f"cannot replay {args['run_json']}: {exc}") from None
            if command not in COMMANDS:
                raise ConfigError(f"unknown command in run.json: {command!r}")
        else:
            cfg, seed = resolve(command, args)
        result = execute(command, cfg, seed, out)
    except PstarcError as exc:
        return _fail(exc, out)
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
