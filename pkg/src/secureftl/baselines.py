"""Self-learning baselines trained on the small labeled pool alone.

These are what the target party could do without any transfer: fit a
classifier on the co-occurrence samples it holds labels for and hope it
generalizes. Three flavors: logistic regression, a linear max-margin
classifier trained by hinge subgradient descent, and a stacked-autoencoder
classifier with the same architecture as the federated nets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import Network, autoencoder_pretrain, init_network, sigmoid


@dataclass
class LinearModel:
    """Affine decision function sign(x @ weights + bias)."""

    weights: np.ndarray
    bias: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.where(self.decision(x) >= 0, 1, -1)


def _check_labels(labels: np.ndarray):
    if not np.all(np.isin(labels, (-1, 1))):
        raise ValueError("labels must be -1 or +1")


def train_logistic(x: np.ndarray, labels: np.ndarray, epochs: int = 300,
                   learning_rate: float = 0.5, l2: float = 1e-3,
                   seed: int = 0) -> LinearModel:
    """Full-batch gradient descent on the regularized logistic loss."""
    _check_labels(labels)
    rng = np.random.default_rng(seed)
    w = 0.01 * rng.standard_normal(x.shape[1])
    b = 0.0
    y = labels.astype(float)
    for _ in range(epochs):
        z = x @ w + b
        # d/dz log(1+exp(-y z)) = -y * sigmoid(-y z)
        slope = -y * sigmoid(-y * z) / len(y)
        w -= learning_rate * (x.T @ slope + l2 * w)
        b -= learning_rate * float(np.sum(slope))
    return LinearModel(w, b)


def train_linear_svm(x: np.ndarray, labels: np.ndarray, epochs: int = 300,
                     learning_rate: float = 0.5, l2: float = 1e-3,
                     seed: int = 0) -> LinearModel:
    """Hinge-loss linear classifier by subgradient descent.

    A stand-in for a kernel SVM solver: same decision family, no external
    dependency, good enough as a self-learning reference point.
    """
    _check_labels(labels)
    rng = np.random.default_rng(seed)
    w = 0.01 * rng.standard_normal(x.shape[1])
    b = 0.0
    y = labels.astype(float)
    for _ in range(epochs):
        margin = y * (x @ w + b)
        active = margin < 1.0
        slope = np.where(active, -y, 0.0) / len(y)
        w -= learning_rate * (x.T @ slope + l2 * w)
        b -= learning_rate * float(np.sum(slope))
    return LinearModel(w, b)


@dataclass
class SaeClassifier:
    """Stacked-autoencoder representation with a logistic head on top."""

    net: Network
    head: LinearModel

    def decision(self, x: np.ndarray) -> np.ndarray:
        return self.head.decision(self.net.forward(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.where(self.decision(x) >= 0, 1, -1)


def train_sae_classifier(x: np.ndarray, labels: np.ndarray, layer_dims: list[int],
                         pretrain_epochs: int = 50, epochs: int = 300,
                         learning_rate: float = 0.5, l2: float = 1e-3,
                         seed: int = 0) -> SaeClassifier:
    """Greedy autoencoder pretraining, then joint logistic fine-tuning.

    layer_dims matches the federated nets ([input, hidden, ...]); the head
    gradient is backpropagated through the stack during fine-tuning.
    """
    _check_labels(labels)
    net = init_network(layer_dims, seed=seed)
    net = autoencoder_pretrain(net, x, epochs=pretrain_epochs, learning_rate=0.1)
    rng = np.random.default_rng(seed + 1)
    w = 0.01 * rng.standard_normal(net.hidden_dim)
    b = 0.0
    y = labels.astype(float)
    for _ in range(epochs):
        trace = net.forward_trace(x)
        u = trace[-1]
        z = u @ w + b
        slope = -y * sigmoid(-y * z) / len(y)
        grads = net.backward(trace, slope[:, None] * w[None, :])
        net.apply_gradients(grads, learning_rate)
        w -= learning_rate * (u.T @ slope + l2 * w)
        b -= learning_rate * float(np.sum(slope))
    return SaeClassifier(net, LinearModel(w, b))
