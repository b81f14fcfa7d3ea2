"""Toy end-to-end kNN: learn a linear feature map through SOFT top-k.

Two Gaussian classes in the plane are separated along the first axis but
carry a large nuisance spread along the second, so plain Euclidean kNN is
mediocre until the map learns to shrink the nuisance direction. Every query
in the training set uses the remaining training points as templates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .applications import knn_loss, knn_loss_grad, one_hot
from .backward import vjp_soft_topk
from .ot_core import EotConfig
from .topk import soft_topk


@dataclass(frozen=True)
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def make_dataset(seed=0, n_train=60, n_test=200, spread=(0.5, 10.0)) -> Dataset:
    rng = np.random.default_rng(seed)

    def draw(count):
        y = np.arange(count) % 2
        centers = np.where(y[:, None] == 0, [-1.0, 0.0], [1.0, 0.0])
        return centers + rng.standard_normal((count, 2)) * np.asarray(spread), y

    train_x, train_y = draw(n_train)
    test_x, test_y = draw(n_test)
    return Dataset(train_x, train_y, test_x, test_y)


def knn_accuracy(W, ref_x, ref_y, query_x, query_y, k) -> float:
    """Hard majority-vote kNN accuracy in the feature space ``x @ W.T``."""
    fr, fq = ref_x @ W.T, query_x @ W.T
    d = np.linalg.norm(fq[:, None, :] - fr[None, :, :], axis=-1)
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    votes = ref_y[nearest].mean(axis=1)
    pred = (votes > 0.5).astype(int)
    return float((pred == query_y).mean())


def loss_and_grad(W, x, y, k, cfg: EotConfig):
    """Mean negative kNN loss over all leave-one-out queries, and its gradient in ``W``."""
    n = x.shape[0]
    Y = one_hot(y, 2)
    total = 0.0
    grad = np.zeros_like(W)
    for j in range(n):
        rest = np.arange(n) != j
        u = x[rest] - x[j]
        fu = u @ W.T
        dist = np.linalg.norm(fu, axis=1)
        out = soft_topk(dist, k, cfg)
        templates, query = Y[:, rest], Y[:, j]
        total -= knn_loss(out, templates, query)
        g_dist = vjp_soft_topk(-knn_loss_grad(templates, query), out, cfg)
        # d|W u| / dW = (W u) u^T / |W u|
        grad += ((g_dist / dist)[:, None] * fu).T @ u
    scale = 1.0 / (n * k)
    return total * scale, grad * scale


@dataclass
class DemoResult:
    train_accuracy: float
    test_accuracy: float
    baseline_test_accuracy: float
    losses: list = field(default_factory=list)
    weights: np.ndarray | None = None


def run_demo(seed=0, k=5, epsilon=1e-2, steps=30, lr=0.5, max_iter=200) -> DemoResult:
    data = make_dataset(seed)
    cfg = EotConfig(epsilon=epsilon, max_iter=max_iter)
    W = np.eye(2)
    baseline = knn_accuracy(W, data.train_x, data.train_y, data.test_x, data.test_y, k)
    losses = []
    for _ in range(steps):
        loss, grad = loss_and_grad(W, data.train_x, data.train_y, k, cfg)
        losses.append(loss)
        W = W - lr * grad
    if steps:
        losses.append(loss_and_grad(W, data.train_x, data.train_y, k, cfg)[0])
    return DemoResult(
        train_accuracy=knn_accuracy(W, data.train_x, data.train_y, data.train_x, data.train_y, k),
        test_accuracy=knn_accuracy(W, data.train_x, data.train_y, data.test_x, data.test_y, k),
        baseline_test_accuracy=baseline,
        losses=losses,
        weights=W,
    )
