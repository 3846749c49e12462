"""Gaussian statistics, 2-Wasserstein distances, knowledge-aware margins and the training objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import DomainError, ShapeError, Tensor


@dataclass
class GaussianStats:
    """Mean and diagonal variance of a set of vectors."""

    mu: Tensor
    var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.var.shape:
            raise ShapeError(f"mu {self.mu.shape} and var {self.var.shape} differ")

    @classmethod
    def of(cls, mu, var) -> "GaussianStats":
        return cls(mu if isinstance(mu, Tensor) else Tensor(mu), var if isinstance(var, Tensor) else Tensor(var))


def estimate_gaussian(samples: Tensor) -> GaussianStats:
    if samples.data.ndim != 2 or samples.shape[0] == 0:
        raise DomainError(f"estimate_gaussian needs a non-empty [B×D] batch, got {samples.shape}")
    mu, var = gc.reduce_stats(samples)
    return GaussianStats(mu, var)


def _check_pair(g1: GaussianStats, g2: GaussianStats) -> None:
    if g1.mu.shape != g2.mu.shape:
        raise ShapeError(f"Gaussian dims differ: {g1.mu.shape} vs {g2.mu.shape}")


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _bures_sq(root1: np.ndarray, root2: np.ndarray) -> float:
    # Procrustes form: min over orthogonal U of ||root1 - root2 U||_F^2, U from the SVD of root2 root1.
    # Summing squared differences avoids the cancellation of tr A + tr B - 2 tr(...).
    w, _, vt = np.linalg.svd(root2 @ root1)
    diff = root1 - root2 @ (w @ vt)
    return float(np.sum(diff * diff))


def w2_gaussian(mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray) -> float:
    """2-Wasserstein distance between two Gaussians with full covariance matrices."""
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    cov1, cov2 = np.asarray(cov1, dtype=np.float64), np.asarray(cov2, dtype=np.float64)
    if np.array_equal(mu1, mu2) and np.array_equal(cov1, cov2):
        return 0.0
    d_mu = mu1 - mu2
    root1, root2 = _psd_sqrt(cov1), _psd_sqrt(cov2)
    # both argument orders, so swapping the Gaussians is bitwise neutral
    bures = 0.5 * (_bures_sq(root1, root2) + _bures_sq(root2, root1))
    return float(np.sqrt(d_mu @ d_mu + bures))


def w2_exact(g1: GaussianStats, g2: GaussianStats) -> float:
    """Closed-form 2-Wasserstein distance via the matrix (Bures) formula.

    Builds the covariance matrices from the diagonal variances and takes
    matrix square roots, so it shares no arithmetic with ``w2_approx``.
    """
    _check_pair(g1, g2)
    return w2_gaussian(g1.mu.data, np.diag(g1.var.data), g2.mu.data, np.diag(g2.var.data))


def w2_approx(g1: GaussianStats, g2: GaussianStats) -> Tensor:
    """sqrt(||mu1 - mu2||^2 + ||sqrt(var1) - sqrt(var2)||^2); differentiable."""
    _check_pair(g1, g2)
    mean_term = gc.sum(gc.square(g1.mu - g2.mu))
    cov_term = gc.sum(gc.square(gc.sqrt(g1.var) - gc.sqrt(g2.var)))
    return gc.sqrt(mean_term + cov_term)


def align_loss(rho_av: Tensor, rho_t_matched: Tensor) -> Tensor:
    """Distance between batch Gaussians of audio-visual and matched knowledge embeddings."""
    if rho_av.shape != rho_t_matched.shape:
        raise ShapeError(f"align_loss: {rho_av.shape} vs {rho_t_matched.shape}")
    if rho_av.shape[0] < 2:
        raise DomainError("align_loss needs a batch of at least 2 samples")
    return w2_approx(estimate_gaussian(rho_av), estimate_gaussian(rho_t_matched))


@dataclass
class MarginMatrix:
    m: np.ndarray
    alpha: float
    beta: float

    @classmethod
    def zeros(cls, n: int) -> "MarginMatrix":
        return cls(np.zeros((n, n)), 0.0, 0.0)


def compute_margins(class_knowledge_embedded: Sequence[Tensor], alpha: float = 1.0, beta: float = 0.2) -> MarginMatrix:
    """Pairwise margins alpha * W2(class i, class j) + beta over embedded descriptions.

    Uses the detached values; no gradient flows through the margins.
    """
    if len(class_knowledge_embedded) == 0:
        raise DomainError("compute_margins: no classes")
    if alpha < 0:
        raise DomainError("alpha must be non-negative")
    with gc.no_grad():
        stats = [estimate_gaussian(Tensor(np.atleast_2d(e.data if isinstance(e, Tensor) else e))) for e in class_knowledge_embedded]
        n = len(stats)
        m = np.full((n, n), float(beta))
        for i in range(n):
            for j in range(i + 1, n):
                d = w2_approx(stats[i], stats[j]).item()
                m[i, j] = m[j, i] = alpha * d + beta
    return MarginMatrix(m, float(alpha), float(beta))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean softmax cross-entropy without margins."""
    return gc.batch_cross_entropy(logits, labels)


def kaml_loss(logits: Tensor, labels: Sequence[int], margins: MarginMatrix) -> Tensor:
    """Cross-entropy where sample with label y adds m[y][k] to each competitor logit k."""
    y = np.asarray(labels, dtype=np.int64)
    C = logits.shape[1]
    if margins.m.shape != (C, C):
        raise ShapeError(f"margin matrix {margins.m.shape} does not match {C} classes")
    if np.any((y < 0) | (y >= C)):
        raise IndexError(f"label out of range for {C} classes")
    return gc.batch_cross_entropy(logits, y, margins.m[y])


@dataclass
class LossBreakdown:
    kaml: Tensor
    align: Tensor
    total: Tensor
    lam: float

    def values(self) -> dict:
        return {"kaml": self.kaml.item(), "align": self.align.item(), "total": self.total.item()}


def kda_objective(out, labels: Sequence[int], margins: MarginMatrix, lam: float) -> LossBreakdown:
    """Margin classification loss plus ``lam`` times the alignment loss.

    ``out`` is a forward output whose ``rho_t`` holds one embedded knowledge
    row per class; ``labels`` index into those rows.
    """
    if lam < 0:
        raise DomainError("lambda must be non-negative")
    rho_av, rho_t = out.rho_av, out.rho_t
    logits = gc.matmul(rho_av, gc.transpose(rho_t))
    kaml = kaml_loss(logits, labels, margins)
    align = align_loss(rho_av, gc.take_rows(rho_t, labels))
    if lam == 0.0:
        total = kaml
    else:
        total = kaml + gc.scale(align, float(lam))
    return LossBreakdown(kaml, align, total, float(lam))
