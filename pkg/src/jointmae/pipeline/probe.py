"""3D-only feature extraction and a squared-hinge linear probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dims import ModelDims
from ..embedding import embed_3d
from ..engine import ParameterTree, no_grad
from ..transformer import encode, encoder_inputs


def extract_features(tree: ParameterTree, dims: ModelDims, clouds, batch_size: int = 50) -> np.ndarray:
    """Max-pool plus mean-pool of the encoder's 3D tokens; the 2D branch never runs.

    Accepts one ``(N, 3)`` cloud (returns ``(C,)``) or a ``(B, N, 3)`` stack.
    """
    pts = np.asarray(clouds, dtype=float)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    if pts.shape[1] != dims.n_points:
        raise ValueError(f"extract_features: clouds have {pts.shape[1]} points, model expects {dims.n_points}")
    feats = []
    with no_grad():
        for s in range(0, len(pts), batch_size):
            tok = embed_3d(pts[s : s + batch_size], tree, dims)
            x3, _ = encoder_inputs(tok.tokens, tok.centers, None, None, tree)
            _, e3, _ = encode(x3, None, tree, dims)
            feats.append(e3.data.max(axis=1) + e3.data.mean(axis=1))
    out = np.concatenate(feats)
    return out[0] if single else out


@dataclass
class LinearProbe:
    weight: np.ndarray     # (D + 1, K), last row is the bias
    mean: np.ndarray
    scale: np.ndarray
    classes: np.ndarray
    iterations: int
    grad_norm: float

    def _design(self, x):
        z = (np.asarray(x, dtype=float) - self.mean) / self.scale
        return np.hstack([z, np.ones((len(z), 1))])

    def decision(self, x) -> np.ndarray:
        return self._design(x) @ self.weight

    def predict(self, x) -> np.ndarray:
        return self.classes[np.argmax(self.decision(x), axis=1)]


def probe_objective(w: np.ndarray, X: np.ndarray, Y: np.ndarray, reg: float) -> tuple[float, np.ndarray]:
    """Mean over samples of the summed one-vs-rest squared hinge, plus ``reg/2 |W|^2`` (bias excluded)."""
    n = len(X)
    margin = np.maximum(0.0, 1.0 - Y * (X @ w))
    wr = w.copy()
    wr[-1] = 0.0
    loss = (margin * margin).sum() / n + 0.5 * reg * (wr * wr).sum()
    grad = -2.0 * X.T @ (Y * margin) / n + reg * wr
    return loss, grad


def fit_linear_probe(x, y, reg: float = 1e-3, tol: float = 1e-6, max_iter: int = 10_000) -> LinearProbe:
    """One-vs-rest squared-hinge classifier by full-batch gradient descent.

    Features are standardized with the training statistics. The step is
    ``1/L`` with ``L`` the gradient's Lipschitz bound; iteration stops when the
    gradient norm falls below ``tol`` or after ``max_iter`` steps.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    X = np.hstack([(x - mean) / scale, np.ones((len(x), 1))])
    Y = np.where(y[:, None] == classes[None, :], 1.0, -1.0)
    L = 2.0 * np.linalg.eigvalsh(X.T @ X / len(X))[-1] + reg
    w = np.zeros((X.shape[1], len(classes)))
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        _, g = probe_objective(w, X, Y, reg)
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            break
        w -= g / L
    return LinearProbe(w, mean, scale, classes, it, gnorm)


def linear_probe(train_x, train_y, test_x, test_y, reg: float = 1e-3) -> float:
    """Test accuracy (fraction in [0, 1]) of a probe fitted on the training features."""
    clf = fit_linear_probe(train_x, train_y, reg)
    return float(np.mean(clf.predict(test_x) == np.asarray(test_y)))
