"""Pure NumPy implementation of the training hot kernels.

Same call signatures as the compiled extension ``fogsim._kernels``. The
parameter vector ``w`` is the (class_count, feature_dim) weight matrix
flattened in row-major order, so entries [c*d, (c+1)*d) belong to class c.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def _probs(w: np.ndarray, X: np.ndarray) -> np.ndarray:
    n, d = X.shape
    W = w.reshape(-1, d)
    z = X @ W.T
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_loss_grad(w: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy (nats) and its gradient over the batch.

    Returns (loss, grad) where grad has the same length as w.
    """
    n = X.shape[0]
    p = _probs(w, X)
    rows = np.arange(n)
    loss = float(-np.log(p[rows, y]).mean())
    p[rows, y] -= 1.0
    grad = (p.T @ X) / n
    return loss, grad.reshape(-1)


def gd_steps(w: np.ndarray, X: np.ndarray, y: np.ndarray, steps: int, lr: float) -> np.ndarray:
    """Run full-batch gradient descent steps; returns the updated vector."""
    out = np.array(w, dtype=np.float64, copy=True)
    for _ in range(steps):
        _, grad = softmax_loss_grad(out, X, y)
        out -= lr * grad
    return out


def eval_loss_correct(w: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and number of argmax-correct predictions.

    Argmax ties resolve to the lowest class index.
    """
    n = X.shape[0]
    p = _probs(w, X)
    loss = float(-np.log(p[np.arange(n), y]).mean())
    correct = int(np.count_nonzero(p.argmax(axis=1) == y))
    return loss, correct
