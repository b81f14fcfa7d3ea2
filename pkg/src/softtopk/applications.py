"""Small pure kernels that consume SOFT top-k outputs.

* kNN loss: soft count of top-k templates sharing the query's label.
* top-k attention: ``softmax(scores + log a)`` with ``a`` selecting the
  largest scores.
* beam step: rank-wise mixing of token embeddings and hidden states by a
  ``(V, k, k)`` rank-membership tensor, plus argmax backtracking.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .ot_core import EotConfig
from .topk import SortedTopkOutput, soft_topk

LOG_FLOOR = 1e-30


def one_hot(labels, num_classes) -> np.ndarray:
    """Label matrix of shape ``(num_classes, len(labels))`` with one-hot columns."""
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((num_classes, labels.size))
    out[labels, np.arange(labels.size)] = 1.0
    return out


def _check_label_matrix(Y):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2:
        raise ValueError("templates must be a (classes, samples) matrix")
    if not (np.isin(Y, (0.0, 1.0)).all() and np.all(Y.sum(axis=0) == 1)):
        raise ValueError("template columns must be one-hot")
    return Y


def _as_vector(a):
    return np.asarray(getattr(a, "a", a), dtype=float)


def knn_loss(a, templates, query_label) -> float:
    """``query_label @ templates @ a``: soft number of same-label neighbours.

    ``a`` is a :class:`TopkOutput` or its indicator vector over the
    templates (the columns of ``templates``).
    """
    a = _as_vector(a)
    Y = _check_label_matrix(templates)
    q = np.asarray(query_label, dtype=float)
    if Y.shape[1] != a.size or Y.shape[0] != q.size:
        raise ValueError(f"shape mismatch: templates {Y.shape}, a {a.shape}, query {q.shape}")
    return float(q @ Y @ a)


def knn_loss_grad(templates, query_label) -> np.ndarray:
    """Gradient of :func:`knn_loss` with respect to ``a`` (it is linear in ``a``)."""
    Y = _check_label_matrix(templates)
    return Y.T @ np.asarray(query_label, dtype=float)


def _softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def topk_attention_weights(scores, k, cfg: EotConfig = EotConfig()) -> np.ndarray:
    """Attention weights that favour the ``k`` largest compatibility scores.

    Near-zero indicator entries are floored at ``1e-30`` before the log.
    """
    scores = np.asarray(scores, dtype=float)
    a = soft_topk(scores, k, cfg, largest=True).a
    return _softmax(scores + np.log(np.maximum(a, LOG_FLOOR)))


class BeamMix(NamedTuple):
    next_embeddings: np.ndarray
    next_hidden: np.ndarray


def beam_step_mix(a_tensor, embeddings, hidden) -> BeamMix:
    """Mix embeddings ``(V, D)`` and hidden states ``(k, H)`` rank by rank.

    ``next_embeddings[l] = sum_{j,i} a[j, i, l] * embeddings[j]`` and
    ``next_hidden[l] = sum_{j,i} a[j, i, l] * hidden[i]``. Each rank slice
    ``a[:, :, l]`` is expected to sum to one; that is not enforced so the
    map stays linear.
    """
    A = np.asarray(a_tensor, dtype=float)
    W = np.asarray(embeddings, dtype=float)
    Hs = np.asarray(hidden, dtype=float)
    if A.ndim != 3 or A.shape[1] != A.shape[2]:
        raise ValueError(f"a_tensor must have shape (V, k, k), got {A.shape}")
    V, k, _ = A.shape
    if W.ndim != 2 or W.shape[0] != V:
        raise ValueError(f"embeddings must have shape ({V}, D), got {W.shape}")
    if Hs.ndim != 2 or Hs.shape[0] != k:
        raise ValueError(f"hidden must have shape ({k}, H), got {Hs.shape}")
    return BeamMix(
        next_embeddings=np.einsum("jil,jd->ld", A, W),
        next_hidden=np.einsum("jil,ih->lh", A, Hs),
    )


def beam_tensor(out: SortedTopkOutput, vocab_size: int) -> np.ndarray:
    """Reshape a sorted top-k output over ``V * k`` candidates to ``(V, k, k)``.

    Candidate ``(token j, beam i)`` is expected at flat index ``j * k + i``.
    """
    a = np.asarray(out.a if hasattr(out, "a") else out)
    n, k = a.shape
    if n != vocab_size * k:
        raise ValueError(f"expected {vocab_size * k} candidates, got {n}")
    return a.reshape(vocab_size, k, k)


def beam_backtrack(a_tensor, rank: int) -> tuple[int, int]:
    """``(token, predecessor)`` with the largest weight for ``rank``.

    Ties go to the lexicographically smallest ``(token, predecessor)``.
    """
    A = np.asarray(a_tensor, dtype=float)
    if not 0 <= rank < A.shape[2]:
        raise ValueError(f"rank must be in [0, {A.shape[2]}), got {rank}")
    j, i = np.unravel_index(np.argmax(A[:, :, rank]), A.shape[:2])
    return int(j), int(i)
