import math

import numpy as np
import pytest

from conftest import two_blob_spec
from pstarc import numerics as nm
from pstarc.data import DomainSpec, make_source_domain
from pstarc.errors import ConfigError, DimensionError, ParseError
from pstarc.model import (
    Classifier, accuracy, all_parameters, build_model, entropy_of, forward, label_smooth, load_model,
    predict, save_model, set_parameter, source_loss_graph, train_source,
)


def test_label_smooth_examples():
    np.testing.assert_allclose(label_smooth([0], 3, 0.1), [[1 - 0.1 + 0.1 / 3, 0.1 / 3, 0.1 / 3]])
    np.testing.assert_allclose(label_smooth([1], 2, 0.0), [[0.0, 1.0]])
    np.testing.assert_allclose(label_smooth([2, 0], 4, 1.0), np.full((2, 4), 0.25))
    assert np.allclose(label_smooth(np.arange(5), 5, 0.3).sum(axis=1), 1.0)
    with pytest.raises(ConfigError):
        label_smooth([0], 2, 1.5)


def test_entropy_examples():
    # the log guard shifts the uniform value by about 1.2e-5
    assert entropy_of(np.full((1, 12), 1 / 12))[0] == pytest.approx(2.4849, abs=1e-4)
    onehot = np.zeros((1, 12))
    onehot[0, 4] = 1.0
    assert entropy_of(onehot)[0] <= 1e-5
    assert entropy_of([[0.5, 0.5]])[0] == pytest.approx(math.log(2), abs=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_weight_norm_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    V, g = rng.normal(size=(4, 6)), rng.uniform(0.5, 2.0, size=4)
    f = rng.normal(size=(5, 6))
    a = Classifier(V, g).logits(f)
    b = Classifier(V * rng.uniform(0.1, 50.0, size=(4, 1)), g).logits(f)
    assert np.max(np.abs(a - b)) < 1e-10


def test_classifier_shape_checks():
    with pytest.raises(DimensionError):
        Classifier(np.ones((3, 4)), np.ones(2))


def test_eval_forward_is_pure():
    model = build_model(5, 4, 3, hidden=(8,), seed=1)
    X = np.random.default_rng(0).normal(size=(7, 5))
    before = {k: v.copy() for k, v in all_parameters(model).items()}
    rm = model.extractor.bn.running_mean.copy()
    p1 = forward(model, X, "eval")[1]
    p2 = forward(model, X, "eval")[1]
    assert np.array_equal(p1, p2)
    assert np.array_equal(rm, model.extractor.bn.running_mean)
    assert all(np.array_equal(before[k], v) for k, v in all_parameters(model).items())


def test_train_forward_updates_stats_only_when_asked():
    model = build_model(5, 4, 3, hidden=(8,), seed=1)
    X = np.random.default_rng(0).normal(size=(7, 5)) + 3.0
    forward(model, X, "train")
    assert np.array_equal(model.extractor.bn.running_mean, np.zeros((1, 4)))
    forward(model, X, "train", update_stats=True)
    assert not np.array_equal(model.extractor.bn.running_mean, np.zeros((1, 4)))


def test_forward_errors():
    model = build_model(5, 4, 3, hidden=(8,))
    with pytest.raises(DimensionError):
        forward(model, np.zeros((2, 6)))
    with pytest.raises(ConfigError):
        forward(model, np.zeros((2, 5)), mode="test")
    with pytest.raises(ConfigError):
        build_model(5, 1, 3)


@pytest.mark.parametrize("batch_norm", [True, False])
def test_source_loss_gradient_matches_finite_differences(batch_norm):
    model = build_model(4, 3, 3, hidden=(5,), batch_norm=batch_norm, seed=3)
    rng = np.random.default_rng(3)
    X = rng.normal(size=(2, 4))
    T = label_smooth([0, 2], 3, 0.1)
    nodes = {k: nm.leaf(v) for k, v in all_parameters(model).items()}
    loss, _ = source_loss_graph(model, X, T, nodes)
    nm.backward(loss)
    for name, node in nodes.items():
        def f(v, name=name):
            keep = all_parameters(model)[name]
            set_parameter(model, name, v)
            out = float(source_loss_graph(model, X, T, {})[0].value[0, 0])
            set_parameter(model, name, keep)
            return out

        numeric = nm.finite_diff_grad(f, node.value, h=1e-6)
        assert nm.relative_error(node.grad, numeric) < 1e-4, name


def test_training_reduces_loss_in_most_seeds():
    decreased = 0
    for seed in range(5):
        spec = DomainSpec(np.random.default_rng(seed).normal(size=(3, 6)) * 2, 1.0, 40, seed=seed)
        model = build_model(6, 8, 3, hidden=(16,), seed=seed)
        hist = []
        train_source(model, make_source_domain(spec), epochs=5, seed=seed, history=hist)
        decreased += hist[-1] < hist[0]
    assert decreased >= 4


def test_training_is_deterministic():
    ds = make_source_domain(two_blob_spec(per_class=30))
    a = train_source(build_model(4, 4, 2, hidden=(8,), seed=0), ds, epochs=2, seed=5)
    b = train_source(build_model(4, 4, 2, hidden=(8,), seed=0), ds, epochs=2, seed=5)
    for k, v in all_parameters(a).items():
        assert np.array_equal(v, all_parameters(b)[k])


def test_identical_means_train_to_chance():
    spec = DomainSpec(np.zeros((2, 4)), 1.0, 500, seed=4)
    model = build_model(4, 8, 2, hidden=(16,), seed=4)
    train_source(model, make_source_domain(spec), epochs=5, seed=4)
    assert abs(accuracy(model, make_source_domain(spec, draw=1)) - 0.5) <= 0.05


def test_training_rejects_mismatched_data():
    ds = make_source_domain(two_blob_spec())
    with pytest.raises(DimensionError):
        train_source(build_model(5, 4, 2), ds)


def test_save_load_round_trip(tmp_path):
    model = build_model(5, 4, 3, hidden=(8, 6), seed=2)
    model.extractor.bn.running_mean[:] = 0.25
    path = save_model(model, tmp_path / "m.json")
    back = load_model(path)
    X = np.random.default_rng(1).normal(size=(9, 5))
    assert np.array_equal(predict(back, X), predict(model, X))
    assert np.array_equal(forward(back, X)[1], forward(model, X)[1])
    assert back.dims == (5, 4, 3)


def test_load_model_errors(tmp_path):
    (tmp_path / "a.json").write_text("{not json")
    with pytest.raises(ParseError):
        load_model(tmp_path / "a.json")
    (tmp_path / "b.json").write_text('{"version": 99}')
    with pytest.raises(ParseError, match="version"):
        load_model(tmp_path / "b.json")
    (tmp_path / "c.json").write_text('{"version": 1}')
    with pytest.raises(ParseError):
        load_model(tmp_path / "c.json")
