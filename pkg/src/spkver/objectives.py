"""Training objectives: softmax cross-entropy and angular-margin softmax.

The angular-margin loss replaces the target class logit ||x|| cos(theta)
with ||x|| psi(theta), where psi is the monotone piecewise extension of
cos(m * theta):

    psi(theta) = (-1)^k cos(m theta) - 2k   for theta in [k pi/m, (k+1) pi/m]

Non-target logits stay ||x|| cos(theta_j) against unit-norm classifier
columns.  An optional annealing weight mixes the margined target logit
with the plain cosine logit as (psi + lambda cos) / (1 + lambda), which
stabilizes early training when lambda is large.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class MarginConfig:
    """Integer angular margin and the current annealing weight."""

    m: int = 2
    anneal_lambda: float = 0.0

    def __post_init__(self):
        if self.m not in (1, 2, 3, 4):
            raise ValueError("margin m must be in {1, 2, 3, 4}")
        if self.anneal_lambda < 0:
            raise ValueError("anneal_lambda must be non-negative")


@dataclass
class LambdaSchedule:
    """Multiplicative decay of the annealing weight, floored.

    value(step) = max(floor, start * decay ** step).
    """

    start: float = 1000.0
    decay: float = 0.99
    floor: float = 5.0

    def value(self, step: int) -> float:
        return max(self.floor, self.start * self.decay ** step)


def _cos_multiple(c: np.ndarray, m: int) -> np.ndarray:
    """cos(m * theta) as a polynomial in c = cos(theta)."""
    if m == 1:
        return c
    if m == 2:
        return 2.0 * c * c - 1.0
    if m == 3:
        return (4.0 * c * c - 3.0) * c
    if m == 4:
        c2 = c * c
        return 8.0 * c2 * c2 - 8.0 * c2 + 1.0
    raise ValueError("margin m must be in {1, 2, 3, 4}")


def _dcos_multiple(c: np.ndarray, m: int) -> np.ndarray:
    if m == 1:
        return np.ones_like(c)
    if m == 2:
        return 4.0 * c
    if m == 3:
        return 12.0 * c * c - 3.0
    if m == 4:
        return (32.0 * c * c - 16.0) * c
    raise ValueError("margin m must be in {1, 2, 3, 4}")


def _interval_index(c: np.ndarray, m: int) -> np.ndarray:
    """k such that theta = arccos(c) lies in [k pi/m, (k+1) pi/m]."""
    k = np.zeros_like(c)
    for i in range(1, m):
        k += (c < np.cos(i * np.pi / m))
    return k


def psi_of_cos(c, m: int):
    """Margin profile psi evaluated from cos(theta); continuous and
    non-increasing in theta on [0, pi]."""
    c = np.clip(np.asarray(c, dtype=np.float64), -1.0, 1.0)
    k = _interval_index(c, m)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    return sign * _cos_multiple(c, m) - 2.0 * k


def _psi_grad_of_cos(c, m: int):
    c = np.clip(np.asarray(c, dtype=np.float64), -1.0, 1.0)
    k = _interval_index(c, m)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    return sign * _dcos_multiple(c, m)


def _check_labels(labels: np.ndarray, n_classes: int):
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("invalid label: out of range")


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class."""
    z = logits.data
    labels = np.asarray(labels, dtype=np.intp)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError("dimension error: logits (B, N) and one label per row")
    _check_labels(labels, z.shape[1])
    b = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(b), labels]))

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(b), labels] -= 1.0
        logits.accumulate_grad(float(g) * p / b)

    return Tensor(loss, parents=(logits,), backward=backward)


def asoftmax_loss(x: Tensor, w: Tensor, labels, cfg: MarginConfig) -> Tensor:
    """Angular-margin softmax cross-entropy over a feature batch.

    ``x`` holds pre-classifier features (B, D); ``w`` the raw classifier
    weights (D, N), whose columns are renormalized to unit length inside
    the graph, so the loss is invariant to positive column rescaling.
    The margin applies to the target class logit only.
    """
    labels = np.asarray(labels, dtype=np.intp)
    xv, wv = x.data, w.data
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ValueError("dimension error: features (B, D) and weights (D, N)")
    if labels.shape != (xv.shape[0],):
        raise ValueError("dimension error: one label per feature row")
    _check_labels(labels, wv.shape[1])

    b = xv.shape[0]
    rows = np.arange(b)
    w_norms = np.linalg.norm(wv, axis=0)
    if np.any(w_norms < 1e-12):
        raise ValueError("degenerate classifier column: zero norm")
    w_hat = wv / w_norms[None, :]
    x_norms = np.linalg.norm(xv, axis=1)
    if np.any(x_norms < 1e-12):
        raise ValueError("degenerate feature vector: zero norm")

    plain = xv @ w_hat                       # ||x|| cos(theta), all classes
    ct = np.clip(plain[rows, labels] / x_norms, -1.0, 1.0)
    lam = cfg.anneal_lambda
    psi = psi_of_cos(ct, cfg.m)
    dpsi = _psi_grad_of_cos(ct, cfg.m)
    logits = plain.copy()
    logits[rows, labels] = x_norms * (psi + lam * ct) / (1.0 + lam)

    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    loss = float(np.mean(lse - logits[rows, labels]))

    def backward(g):
        p = np.exp(logits - lse[:, None])
        p[rows, labels] -= 1.0
        grad_logits = float(g) * p / b

        # Plain-logit part for every entry, then swap in the true target rule.
        gx = grad_logits @ w_hat.T
        g_what = xv.T @ grad_logits
        gt = grad_logits[rows, labels]
        w_y = w_hat[:, labels].T             # (B, D)
        x_hat = xv / x_norms[:, None]

        gx -= gt[:, None] * w_y
        np.add.at(g_what.T, labels, -gt[:, None] * xv)

        q = (dpsi + lam) / (1.0 + lam)       # d logit / d (||x|| cos)
        r = (psi + lam * ct) / (1.0 + lam) - ct * q
        gx += gt[:, None] * (q[:, None] * w_y + r[:, None] * x_hat)
        np.add.at(g_what.T, labels, (gt * q)[:, None] * xv)

        # Through the column normalization back to the raw weights.
        proj = (w_hat * g_what).sum(axis=0)
        gw = (g_what - w_hat * proj[None, :]) / w_norms[None, :]
        x.accumulate_grad(gx)
        w.accumulate_grad(gw)

    return Tensor(loss, parents=(x, w), backward=backward)
