"""Classification losses with closed-form gradients w.r.t. the logits.

Every function accepts logits of shape ``(A,)`` or ``(n, A)``. Per-answer
weights ``mu`` broadcast against the logits; ``mu`` of all ones gives the
plain (unweighted) losses. Losses are summed over answers; batch reduction is
left to the caller (see :func:`reduce_batch`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from langprior.vocab import SoftLabel

LabelLike = Union[SoftLabel, np.ndarray]


@dataclass(frozen=True)
class LossGrad:
    loss: float | np.ndarray
    grad: np.ndarray


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(log_sigmoid(x))


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _prepare(logits, label: LabelLike, mu=None):
    p = np.asarray(logits, dtype=np.float64)
    a = label.scores if isinstance(label, SoftLabel) else np.asarray(label, dtype=np.float64)
    if a.shape != p.shape:
        raise ValueError(f"label shape {a.shape} does not match logits {p.shape}")
    if mu is None:
        return p, a, None
    m = np.asarray(mu, dtype=np.float64)
    if m.shape != p.shape:
        raise ValueError(f"weight shape {m.shape} does not match logits {p.shape}")
    return p, a, m


def _pack(loss: np.ndarray, grad: np.ndarray) -> LossGrad:
    if loss.ndim == 0:
        return LossGrad(float(loss), grad)
    return LossGrad(loss, grad)


def sigm_bce(logits, label: LabelLike, mu=None) -> LossGrad:
    """Per-answer sigmoid + binary cross entropy, weighted by ``mu``."""
    p, a, m = _prepare(logits, label, mu)
    if m is None:
        m = np.ones_like(p)
    log_s = log_sigmoid(p)
    log_1ms = log_sigmoid(-p)
    s = np.exp(log_s)
    loss = -np.sum(m * (a * log_s + (1.0 - a) * log_1ms), axis=-1)
    grad = m * ((1.0 - a) * s - a * (1.0 - s))
    return _pack(loss, grad)


def soft_ce(logits, label: LabelLike, mu=None) -> LossGrad:
    """Softmax + cross entropy against a soft target, weighted by ``mu``.

    The gradient is ``(sum_k mu_k a_k) * softmax(p) - mu * a``.
    """
    p, a, m = _prepare(logits, label, mu)
    if m is None:
        m = np.ones_like(p)
    log_q = log_softmax(p)
    ma = m * a
    loss = -np.sum(ma * log_q, axis=-1)
    grad = np.sum(ma, axis=-1, keepdims=True) * np.exp(log_q) - ma
    return _pack(loss, grad)


def focal(logits, label: LabelLike, alpha: float = 1.0, gamma: float = 2.0) -> LossGrad:
    """Sigmoid focal loss on soft labels.

    Each answer is a binary problem with ``p_t = s`` for the positive part
    (weight ``a``) and ``p_t = 1 - s`` for the negative part (weight
    ``1 - a``); both contribute ``-alpha * (1 - p_t)**gamma * log(p_t)``.
    With ``gamma == 0`` and ``alpha == 1`` this is exactly :func:`sigm_bce`.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if not gamma >= 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    p, a, _ = _prepare(logits, label)
    log_s = log_sigmoid(p)
    log_1ms = log_sigmoid(-p)
    s = np.exp(log_s)
    one_ms = np.exp(log_1ms)
    # (1 - s)**gamma written through logs so gamma == 0 gives exactly 1
    pos_mod = np.exp(gamma * log_1ms)
    neg_mod = np.exp(gamma * log_s)
    loss = -alpha * np.sum(a * pos_mod * log_s + (1.0 - a) * neg_mod * log_1ms, axis=-1)
    d_pos = gamma * s * pos_mod * log_s - pos_mod * one_ms
    d_neg = -gamma * one_ms * neg_mod * log_1ms + neg_mod * s
    grad = alpha * (a * d_pos + (1.0 - a) * d_neg)
    return _pack(loss, grad)


def combine_total(cls: LossGrad | float, mask: LossGrad | float | None = None) -> float:
    """Overall objective: classification loss plus (optional) mask loss."""
    total = float(cls.loss if isinstance(cls, LossGrad) else cls)
    if mask is not None:
        total += float(mask.loss if isinstance(mask, LossGrad) else mask)
    if not np.isfinite(total):
        raise FloatingPointError("non-finite loss")
    return total


def reduce_batch(res: LossGrad, reduction: str = "mean") -> tuple[float, np.ndarray]:
    """Reduce per-instance losses; the gradient is scaled to match."""
    loss = np.asarray(res.loss)
    if loss.ndim == 0:
        return float(loss), res.grad
    if reduction == "mean":
        n = loss.shape[0]
        return float(loss.sum() / n), res.grad / n
    if reduction == "sum":
        return float(loss.sum()), res.grad
    raise ValueError(f"unknown reduction {reduction!r}")
