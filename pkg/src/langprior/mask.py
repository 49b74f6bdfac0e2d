"""Answer mask: a question-conditioned gate over candidate answers.

The mask is ``m = softplus_g(W_q @ dropout(q))`` with a softplus capped at 1,
so it lives in ``(0, 1]`` and starts out around ``ln 2`` rather than 0.5. It
is trained with binary cross entropy against the 0/1 indicator of the
question type's answer set and gates predictions multiplicatively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from langprior.losses import LossGrad
from langprior.vocab import TypeCountTable

MASK_EPS = 1e-7
_LINEAR_BELOW = -30.0  # log(softplus(x)) == x to double precision below this


@dataclass
class MaskParams:
    W_q: np.ndarray
    dropout_rate: float = 0.0
    alpha: float = 1.0

    def __post_init__(self) -> None:
        self.W_q = np.asarray(self.W_q, dtype=np.float64)
        if self.W_q.ndim != 2:
            raise ValueError("W_q must be a matrix [answers x q_dim]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def num_answers(self) -> int:
        return self.W_q.shape[0]

    @property
    def q_dim(self) -> int:
        return self.W_q.shape[1]


def _check_alpha(alpha: float) -> None:
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")


def softplus_g(x, alpha: float = 1.0):
    """``min(1, log(1 + exp(alpha * x)) / alpha)``."""
    _check_alpha(alpha)
    out = np.minimum(1.0, np.logaddexp(0.0, alpha * np.asarray(x, dtype=np.float64)) / alpha)
    return float(out) if out.ndim == 0 else out


def log_softplus_g(x, alpha: float = 1.0) -> np.ndarray:
    """``log(softplus_g(x))`` without underflow for very negative ``x``."""
    _check_alpha(alpha)
    ax = alpha * np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        direct = np.log(np.logaddexp(0.0, ax) / alpha)
    out = np.where(ax < _LINEAR_BELOW, ax - np.log(alpha), direct)
    return np.minimum(out, 0.0)


def softplus_g_slope(m: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """d softplus_g / dx expressed through the output ``m``.

    Below the cap the slope is ``sigmoid(alpha x) = 1 - exp(-alpha m)``; on
    the capped region (``m >= 1``) it is 0.
    """
    m = np.asarray(m, dtype=np.float64)
    return np.where(m >= 1.0, 0.0, -np.expm1(-alpha * m))


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None) -> np.ndarray:
    """Inverted dropout; identity when ``rate == 0`` or ``rng`` is None."""
    if rate == 0.0 or rng is None:
        return x
    keep = rng.random(x.shape) >= rate
    return x * keep / (1.0 - rate)


def mask_preactivation(
    q_feat: np.ndarray,
    params: MaskParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(z, q_used)`` with ``z = q_used @ W_q.T``."""
    q = np.asarray(q_feat, dtype=np.float64)
    if q.shape[-1] != params.q_dim:
        raise ValueError(f"question feature dim {q.shape[-1]} != mask input dim {params.q_dim}")
    if training:
        if params.dropout_rate > 0.0 and rng is None:
            raise ValueError("training-mode dropout needs an rng")
        q = dropout(q, params.dropout_rate, rng)
    return q @ params.W_q.T, q


def mask_forward(
    q_feat: np.ndarray,
    params: MaskParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    z, _ = mask_preactivation(q_feat, params, training, rng)
    return softplus_g(z, params.alpha)


def mask_labels(j: int, table: TypeCountTable) -> np.ndarray:
    """0/1 indicator of the answer set of question type ``j``."""
    if not 0 <= j < table.num_types:
        raise ValueError(f"unknown question type id {j}")
    return (table.counts[j] > 0).astype(np.float64)


def mask_loss(m_p, m_a, alpha: float = 1.0, eps: float = MASK_EPS) -> LossGrad:
    """Binary cross entropy of the mask, gradient w.r.t. the pre-activation.

    ``m_p`` is clamped to ``[eps, 1 - eps]`` before the logs; clamped entries
    get zero gradient, as do entries on the capped flat part of softplus_g.
    Works on ``(A,)`` or ``(n, A)`` inputs; the loss is summed over answers.
    """
    m = np.asarray(m_p, dtype=np.float64)
    t = np.asarray(m_a, dtype=np.float64)
    if m.shape != t.shape:
        raise ValueError(f"mask shape {m.shape} does not match labels {t.shape}")
    c = np.clip(m, eps, 1.0 - eps)
    loss = -np.sum(t * np.log(c) + (1.0 - t) * np.log1p(-c), axis=-1)
    d_c = -(t / c - (1.0 - t) / (1.0 - c))
    inside = (m > eps) & (m < 1.0 - eps)
    grad = np.where(inside, d_c * softplus_g_slope(m, alpha), 0.0)
    return LossGrad(float(loss) if loss.ndim == 0 else loss, grad)


def apply_mask(probs, m_p) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    m = np.asarray(m_p, dtype=np.float64)
    if p.shape != m.shape:
        raise ValueError(f"mask shape {m.shape} does not match predictions {p.shape}")
    return p * m
