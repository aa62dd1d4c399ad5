import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pstarc.accounting import (
    PASS_COUNTS, adacontrast_scalars, bank_scalars, memory_accounting, source_proxy_scalars,
)
from pstarc.metrics import CSV_COLUMNS, MetricsRecord, emit_metrics, per_class_recall, read_metrics_csv
from pstarc.tta import BatchOutcome


def _outcome(pred, y):
    pred = np.asarray(pred)
    return BatchOutcome(pred, -0.5, -1.0, 0.25, -1.25, 0.7, 0.5, float(np.mean(pred == np.asarray(y))))


def test_per_class_recall_and_absent_classes():
    assert per_class_recall(np.array([0, 1, 1, 0]), np.array([0, 1, 0, 0]), 3) == [2 / 3, 1.0, None]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=1, max_size=8), st.integers(0, 2**31 - 1))
def test_cumulative_accuracy_is_size_weighted_prefix(sizes, seed):
    rng = np.random.default_rng(seed)
    rec = MetricsRecord(3)
    correct = seen = 0
    for n in sizes:
        y = rng.integers(0, 3, n)
        pred = rng.integers(0, 3, n)
        rec.append(_outcome(pred, y), y)
        correct += int(np.sum(pred == y))
        seen += n
        assert rec.rows[-1]["cum_acc"] == pytest.approx(correct / seen, abs=1e-15)
        assert rec.rows[-1]["seen"] == seen


def test_summary_class_average_is_unweighted():
    rec = MetricsRecord(2)
    y = np.array([0, 0, 0, 1])
    rec.append(_outcome([0, 0, 0, 0], y), y)
    s = rec.summary()
    assert s["total_acc"] == 0.75 and s["class_avg_acc"] == 0.5
    assert s["distinct_predicted"] == 1 and s["batches"] == 1


def test_metrics_files_round_trip(tmp_path):
    rec = MetricsRecord(3)
    for k in range(4):
        y = np.array([k % 3, 1, 2])
        rec.append(_outcome([0, 1, 2], y), y)
    csv_path, json_path = emit_metrics(rec, tmp_path, extra={"seed": 7})
    rows = read_metrics_csv(csv_path)
    assert len(rows) == 4 and list(rows[0]) == CSV_COLUMNS
    assert rows == rec.rows
    assert '"seed": 7' in json_path.read_text()


def test_memory_accounting_values():
    assert bank_scalars(240, 256, 12) == 64320
    assert adacontrast_scalars() == 16384 * 257 + 1024 * 268
    assert source_proxy_scalars() == 12 * 25 * 112 * 112
    assert PASS_COUNTS["pstarc"] == {"forward": 2, "backward": 1}
    assert PASS_COUNTS["c_sfda"]["forward"] == 13
    rep = memory_accounting(N=240, d=256, C=12)
    assert rep["pstarc"]["scalars"] == 64320
    assert rep["references"]["adacontrast"]["scalars"] > rep["references"]["source_proxy_tta"]["scalars"] > 64320
    with pytest.raises(ValueError):
        memory_accounting(N=10)
