import math

import numpy as np
import pytest

from pstarc import numerics as nm
from pstarc.bank import (
    FeatureBank, bank_summary, generate_feature_bank, load_bank, loss_div, loss_ent, partition,
    save_bank, validate_bank,
)
from pstarc.errors import ConfigError, ParseError
from pstarc.model import Classifier, random_classifier


def _grad_check(loss_fn, H, f):
    node = nm.leaf(f)
    out = loss_fn(node, H)
    nm.backward(out)
    numeric = nm.finite_diff_grad(lambda x: loss_fn(x, H).value[0, 0], f)
    return nm.relative_error(node.grad, numeric)


def test_loss_ent_single_class_is_zero_up_to_log_guard():
    H = Classifier(np.array([[1.0, -2.0]]), np.array([2.0]))
    val = loss_ent(np.random.default_rng(0).normal(size=(5, 2)), H).value[0, 0]
    # softmax of one logit is exactly 1; the log guard leaves -log(1 + 1e-6)
    assert abs(val) <= 1e-5


def test_loss_ent_equal_logits_is_log_c():
    H = Classifier(np.ones((4, 3)), np.ones(4))
    f = np.zeros((3, 3))
    assert loss_ent(f, H).value[0, 0] == pytest.approx(math.log(4), abs=1e-5)


@pytest.mark.parametrize("seed", range(3))
def test_bank_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    H = Classifier(rng.normal(size=(3, 3)), rng.uniform(1, 3, size=3))
    f = rng.normal(size=(4, 3))
    assert _grad_check(loss_ent, H, f) < 1e-4
    assert _grad_check(loss_div, H, f) < 1e-4


def test_loss_div_uniform_marginal_is_minimum():
    H = Classifier(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([5.0, 5.0]))
    f = np.array([[3.0, 0.0], [-3.0, 0.0]])
    assert loss_div(f, H).value[0, 0] == pytest.approx(-math.log(2), abs=1e-5)


def test_loss_div_collapsed_marginal_near_zero():
    H = Classifier(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]), np.full(3, 50.0))
    f = np.tile([[5.0, 0.0]], (6, 1))
    assert abs(loss_div(f, H).value[0, 0]) <= 1e-5


def test_opposite_directions_split_into_both_classes():
    H = Classifier(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1.0, 1.0]))
    good = 0
    for seed in range(5):
        counts = generate_feature_bank(H, n_c=20, seed=seed).class_counts()
        good += min(counts) >= 10
    assert good >= 4


@pytest.mark.parametrize("C", [3, 12])
def test_generation_reduces_both_terms(C):
    for seed in range(5):
        bank = generate_feature_bank(random_classifier(C, 32, seed=seed), seed=seed)
        ent, div = bank.provenance["loss_ent"], bank.provenance["loss_div"]
        assert ent[1] < ent[0] and div[1] < div[0], seed


def test_generation_shapes_and_invariants():
    H = random_classifier(12, 32, seed=1)
    bank = generate_feature_bank(H, n_c=20, seed=1)
    assert bank.size == 240 and bank.dim == 32 and bank.classes == 12
    np.testing.assert_allclose(bank.scores.sum(axis=1), 1.0, atol=1e-12)
    assert np.array_equal(bank.labels, bank.scores.argmax(axis=1))
    np.testing.assert_allclose(np.linalg.norm(bank.normalized, axis=1), 1.0, atol=1e-12)
    joined = np.sort(np.concatenate(bank.partitions))
    assert np.array_equal(joined, np.arange(240))


def test_generation_deterministic_and_head_untouched():
    H = random_classifier(5, 8, seed=2)
    V, g = H.V.copy(), H.g.copy()
    a = generate_feature_bank(H, n_c=6, seed=9)
    b = generate_feature_bank(H, n_c=6, seed=9)
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(H.V, V) and np.array_equal(H.g, g)
    with pytest.raises(ConfigError):
        generate_feature_bank(H, n_c=0)


def test_validate_reports_deficient_class():
    C = 5
    labels = np.repeat(np.arange(C), [6, 6, 6, 4, 6])
    scores = np.eye(C)[labels] * 0.9 + 0.1 / C
    bank = FeatureBank.from_scores(np.random.default_rng(0).normal(size=(len(labels), 3)), scores)
    report = validate_bank(bank, K=5)
    assert not report and report.deficient == {3: 4}
    assert "class 3: 4" in report.describe()


def test_validate_full_bank_ok():
    labels = np.repeat(np.arange(4), 20)
    bank = FeatureBank.from_scores(np.ones((80, 2)), np.eye(4)[labels])
    assert validate_bank(bank, K=5).ok


def test_default_generation_passes_validation():
    passed = sum(validate_bank(generate_feature_bank(random_classifier(12, 32, seed=s), seed=s)).ok
                 for s in range(20))
    assert passed >= 19


def test_partition_from_scores():
    assert [p.tolist() for p in partition(np.array([2, 0, 2, 1]), 4)] == [[1], [3], [0, 2], []]


def test_bank_summary_fields():
    bank = generate_feature_bank(random_classifier(3, 4, seed=0), n_c=5, seed=0)
    s = bank_summary(bank)
    assert s["per_class_counts"] == bank.class_counts()
    assert 0 <= s["mean_entropy"] <= math.log(3)
    assert s["marginal_kl_to_uniform"] >= -1e-12
    assert s["provenance"]["n_c"] == 5


def test_bank_round_trip(tmp_path):
    bank = generate_feature_bank(random_classifier(3, 4, seed=0), n_c=5, seed=0)
    back = load_bank(save_bank(bank, tmp_path / "b.json"))
    assert back.features.tobytes() == bank.features.tobytes()
    assert np.array_equal(back.labels, bank.labels)


def test_bank_load_rejects_inconsistent_labels(tmp_path):
    import json

    bank = generate_feature_bank(random_classifier(3, 4, seed=0), n_c=5, seed=0)
    doc = json.loads(save_bank(bank, tmp_path / "b.json").read_text())
    doc["labels"][0] = (doc["labels"][0] + 1) % 3
    (tmp_path / "b.json").write_text(json.dumps(doc))
    with pytest.raises(ParseError, match="argmax"):
        load_bank(tmp_path / "b.json")
