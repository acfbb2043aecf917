import numpy as np
import pytest

from secureftl.baselines import (
    LinearModel,
    train_linear_svm,
    train_logistic,
    train_sae_classifier,
)


def _separable(n=60, d=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    w = np.array([1.0, -0.5, 0.25, 0.75])[:d]
    labels = np.where(x @ w > 0, 1, -1)
    return x, labels


def test_linear_model_decision_and_predict():
    model = LinearModel(np.array([1.0, -1.0]), bias=0.5)
    x = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert np.allclose(model.decision(x), [1.5, -1.5])
    assert np.array_equal(model.predict(x), [1, -1])


def test_logistic_fits_separable_data():
    x, labels = _separable()
    model = train_logistic(x, labels, seed=0)
    acc = np.mean(model.predict(x) == labels)
    assert acc >= 0.95


def test_logistic_deterministic():
    x, labels = _separable(seed=3)
    a = train_logistic(x, labels, seed=1)
    b = train_logistic(x, labels, seed=1)
    assert np.array_equal(a.weights, b.weights) and a.bias == b.bias


def test_logistic_rejects_bad_labels():
    x = np.ones((4, 2))
    with pytest.raises(ValueError):
        train_logistic(x, np.array([0, 1, 0, 1]))


def test_svm_fits_separable_data():
    x, labels = _separable(seed=5)
    model = train_linear_svm(x, labels, seed=0)
    acc = np.mean(model.predict(x) == labels)
    assert acc >= 0.95


def test_svm_margin_pushes_past_one():
    x, labels = _separable(n=40, seed=7)
    model = train_linear_svm(x, labels, epochs=2000, learning_rate=1.0,
                             l2=1e-5, seed=0)
    margins = labels * model.decision(x)
    # hinge keeps pushing until most rows clear the unit margin
    assert np.mean(margins >= 1.0) >= 0.8


def test_sae_classifier_fits_and_uses_hidden_dim():
    x, labels = _separable(n=80, d=4, seed=9)
    model = train_sae_classifier(x, labels, layer_dims=[4, 3],
                                 pretrain_epochs=20, epochs=400, seed=0)
    assert model.head.weights.shape == (3,)
    acc = np.mean(model.predict(x) == labels)
    assert acc >= 0.9


def test_sae_decision_consistent_with_predict():
    x, labels = _separable(n=30, d=3, seed=2)
    model = train_sae_classifier(x, labels, layer_dims=[3, 2],
                                 pretrain_epochs=5, epochs=50, seed=0)
    assert np.array_equal(model.predict(x),
                          np.where(model.decision(x) >= 0, 1, -1))
