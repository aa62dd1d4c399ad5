"""Per-batch metric rows and accuracy summaries for adaptation runs."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CSV_COLUMNS = [
    "batch", "seen", "tau", "low_frac", "loss_aug", "loss_attr",
    "loss_disp", "loss_total", "batch_acc", "cum_acc",
]


def per_class_recall(pred: np.ndarray, y: np.ndarray, classes: int) -> list[float | None]:
    """Recall of each class; ``None`` for classes absent from ``y``."""
    out = []
    for c in range(classes):
        mask = y == c
        out.append(float(np.mean(pred[mask] == c)) if mask.any() else None)
    return out


@dataclass
class MetricsRecord:
    classes: int
    rows: list[dict] = field(default_factory=list)
    predictions: list[np.ndarray] = field(default_factory=list)
    labels: list[np.ndarray] = field(default_factory=list)
    _correct: int = field(default=0, repr=False)

    def append(self, outcome, y_true: np.ndarray):
        pred = np.asarray(outcome.predictions)
        y_true = np.asarray(y_true)
        seen = (self.rows[-1]["seen"] if self.rows else 0) + len(pred)
        self._correct += int(np.sum(pred == y_true))
        self.rows.append({
            "batch": len(self.rows),
            "seen": seen,
            "tau": outcome.tau,
            "low_frac": outcome.low_frac,
            "loss_aug": outcome.loss_aug,
            "loss_attr": outcome.loss_attr,
            "loss_disp": outcome.loss_disp,
            "loss_total": outcome.total,
            "batch_acc": outcome.batch_acc,
            "cum_acc": self._correct / seen,
        })
        self.predictions.append(pred)
        self.labels.append(y_true)

    @property
    def all_predictions(self) -> np.ndarray:
        return np.concatenate(self.predictions) if self.predictions else np.empty(0, dtype=np.int64)

    @property
    def all_labels(self) -> np.ndarray:
        return np.concatenate(self.labels) if self.labels else np.empty(0, dtype=np.int64)

    @property
    def total_acc(self) -> float:
        return self.rows[-1]["cum_acc"] if self.rows else float("nan")

    def distinct_predicted(self) -> int:
        return int(np.unique(self.all_predictions).size)

    def summary(self) -> dict:
        recalls = per_class_recall(self.all_predictions, self.all_labels, self.classes)
        present = [r for r in recalls if r is not None]
        return {
            "total_acc": self.total_acc,
            "class_avg_acc": float(np.mean(present)) if present else float("nan"),
            "per_class_recall": recalls,
            "batches": len(self.rows),
            "seen": self.rows[-1]["seen"] if self.rows else 0,
            "distinct_predicted": self.distinct_predicted(),
        }


def write_metrics_csv(record: MetricsRecord, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for row in record.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("batch", "seen") else float(v)) for k, v in r.items()} for r in rows]


def emit_metrics(record: MetricsRecord, out_dir, stem: str = "metrics", extra: dict | None = None):
    """Write ``<stem>.csv`` and ``<stem>_summary.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_metrics_csv(record, out_dir / f"{stem}.csv")
    summary = record.summary()
    summary.update(extra or {})
    json_path = out_dir / f"{stem}_summary.json"
    json_path.write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return csv_path, json_path
