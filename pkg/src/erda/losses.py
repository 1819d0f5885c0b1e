"""Entropy-regularized distribution-alignment losses and their score-space gradients.

Every function works on the last axis, so a single K-vector and an N x K
batch of rows go through the same code. Logarithms are natural logs of
probabilities clamped at ``cfg.log_floor``.

Gradients are returned as dL/ds (callers negate for the update).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

PROB_TOL = 1e-9
DEFAULT_LOG_FLOOR = 1e-12

# Finite stand-in for the +/- infinite KLpq limits when q is one-hot.
SATURATED = 1e30


class InvalidInputError(ValueError):
    """Raised for non-finite scores or malformed probability vectors."""


class NumericalError(ArithmeticError):
    """A gradient intermediate went non-finite."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class Distance(str, enum.Enum):
    KLpq = "KLpq"
    KLqp = "KLqp"
    JS = "JS"
    MSE = "MSE"


class Situation(str, enum.Enum):
    P_ONEHOT = "P_ONEHOT"
    Q_UNIFORM = "Q_UNIFORM"
    Q_ONEHOT_MATCH = "Q_ONEHOT_MATCH"
    Q_ONEHOT_OTHER = "Q_ONEHOT_OTHER"


@dataclass(frozen=True)
class LossConfig:
    """Loss family member: ``lam * H(p) + da_weight * D(p, q)``.

    ``da_weight`` is 1 for every configuration except the entropy-only
    ablation, which switches the alignment term off.
    """

    distance: Distance = Distance.KLpq
    lam: float = 1.0
    log_floor: float = DEFAULT_LOG_FLOOR
    da_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "distance", Distance(self.distance))
        if not self.lam >= 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 0 < self.log_floor <= 1e-6:
            raise ValueError(f"log_floor must be in (0, 1e-6], got {self.log_floor}")
        if not self.da_weight >= 0:
            raise ValueError(f"da_weight must be >= 0, got {self.da_weight}")

    def with_(self, **changes) -> "LossConfig":
        return replace(self, **changes)


def _as_scores(s):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 0 or s.shape[-1] < 1:
        raise InvalidInputError("scores must have a class axis")
    if not np.all(np.isfinite(s)):
        bad = np.argwhere(~np.isfinite(s))[0]
        raise InvalidInputError(f"non-finite score at index {tuple(int(i) for i in bad)}")
    return s


def _as_prob(p, name="p"):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] < 2:
        raise InvalidInputError(f"{name} needs K >= 2 classes")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError(f"{name} has non-finite entries")
    if np.any(p < 0):
        raise InvalidInputError(f"{name} has negative entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > PROB_TOL):
        raise InvalidInputError(f"{name} rows must sum to 1 within {PROB_TOL}")
    return p


def _pair(p, q):
    p = _as_prob(p, "p")
    q = _as_prob(q, "q")
    if p.shape[-1] != q.shape[-1]:
        raise ValueError(f"class dimension mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    return p, q


def _log(x, floor):
    return np.log(np.maximum(x, floor))


def softmax(s):
    """Softmax along the last axis, computed with max subtraction."""
    s = _as_scores(s)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p, log_floor=DEFAULT_LOG_FLOOR):
    """Shannon entropy in nats; ``0 log 0`` contributes 0."""
    p = _as_prob(p)
    return -np.sum(p * _log(p, log_floor), axis=-1)


def cross_entropy(p, q, log_floor=DEFAULT_LOG_FLOOR):
    """H(p, q) = -sum_i p_i log q_i."""
    p, q = _pair(p, q)
    return -np.sum(p * _log(q, log_floor), axis=-1)


def _divergence(p, q, kind, floor):
    if kind is Distance.KLpq:
        return np.sum(p * (_log(p, floor) - _log(q, floor)), axis=-1)
    if kind is Distance.KLqp:
        return np.sum(q * (_log(q, floor) - _log(p, floor)), axis=-1)
    if kind is Distance.JS:
        m = 0.5 * (p + q)
        h = lambda v: -np.sum(v * _log(v, floor), axis=-1)  # noqa: E731
        return h(m) - 0.5 * h(p) - 0.5 * h(q)
    if kind is Distance.MSE:
        return 0.5 * np.sum((p - q) ** 2, axis=-1)
    raise ValueError(f"unknown distance {kind!r}")


def divergence(p, q, kind, log_floor=DEFAULT_LOG_FLOOR):
    """Distance between pseudo-label ``p`` and prediction ``q``; never negative."""
    p, q = _pair(p, q)
    return np.maximum(_divergence(p, q, Distance(kind), log_floor), 0.0)


def pseudo_loss(p, q, cfg: LossConfig):
    """``lam * H(p) + da_weight * D(p, q)`` for one point or a batch of rows."""
    p, q = _pair(p, q)
    out = cfg.lam * entropy(p, cfg.log_floor)
    if cfg.da_weight:
        out = out + cfg.da_weight * divergence(p, q, cfg.distance, cfg.log_floor)
    return out


def _p_times_dL_dp(p, q, cfg):
    """Return p * dL/dp up to an additive per-row multiple of p.

    Any component proportional to p cancels in the softmax chain rule, which
    keeps the KLqp branch free of the 1/p_i singularity.
    """
    floor = cfg.log_floor
    logp = _log(p, floor)
    # entropy part: d(lam*H)/dp_i = -lam (log p_i + 1)
    pd = -cfg.lam * p * logp
    w = cfg.da_weight
    if not w:
        return pd
    kind = cfg.distance
    if kind is Distance.KLpq:
        pd = pd + w * p * (logp - _log(q, floor))
    elif kind is Distance.KLqp:
        pd = pd - w * q
    elif kind is Distance.JS:
        pd = pd + w * p * (0.5 * logp - 0.5 * _log(0.5 * (p + q), floor))
    elif kind is Distance.MSE:
        pd = pd + w * p * (p - q)
    else:
        raise ValueError(f"unknown distance {kind!r}")
    return pd


def _chain_softmax(pd, p):
    # g_i = p_i d_i - p_i sum_j p_j d_j
    return pd - p * pd.sum(axis=-1, keepdims=True)


def _check_finite(g):
    if not np.all(np.isfinite(g)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(g))[0])
        raise NumericalError(f"non-finite gradient entry at index {bad}", index=bad)
    return g


def pseudo_loss_grad_scores(s, q, cfg: LossConfig):
    """dL_p/ds for ``p = softmax(s)``: the gradient on the pseudo-label branch."""
    p = softmax(s)
    _, q = _pair(p, q)
    return _check_finite(_chain_softmax(_p_times_dL_dp(p, q, cfg), p))


def grad_wrt_prediction_scores(p, z, cfg: LossConfig):
    """dL_p/dz for ``q = softmax(z)``: the gradient on the segmentation branch.

    The entropy term does not depend on ``q``; for KLpq the result is ``q - p``.
    """
    q = softmax(z)
    p, _ = _pair(p, q)
    w = cfg.da_weight
    floor = cfg.log_floor
    kind = cfg.distance
    if kind is Distance.KLpq:
        g = w * (q - p)
    else:
        # q * dD/dq, again up to multiples of q
        if kind is Distance.KLqp:
            qe = q * (_log(q, floor) - _log(p, floor))
        elif kind is Distance.JS:
            qe = 0.5 * q * (_log(q, floor) - _log(0.5 * (p + q), floor))
        elif kind is Distance.MSE:
            qe = q * (q - p)
        else:
            raise ValueError(f"unknown distance {kind!r}")
        g = w * _chain_softmax(qe, q)
    return _check_finite(g)


def finite_diff_grad(fn: Callable[[np.ndarray], float], s, eps=1e-5):
    """Central-difference gradient of a scalar function of a score vector."""
    if not 1e-8 <= eps <= 1e-3:
        raise ValueError(f"eps must be in [1e-8, 1e-3], got {eps}")
    s = np.array(s, dtype=np.float64)
    grad = np.empty_like(s)
    for i in np.ndindex(s.shape):
        orig = s[i]
        s[i] = orig + eps
        fplus = float(fn(s))
        s[i] = orig - eps
        fminus = float(fn(s))
        s[i] = orig
        grad[i] = (fplus - fminus) / (2 * eps)
    return grad


def is_saturated(x):
    return np.abs(np.asarray(x)) >= SATURATED


def _plogratio(p, floor):
    # A_i = p_i sum_j p_j log(p_i / p_j)
    logp = _log(p, floor)
    return p * (logp - np.sum(p * logp))


def limit_case_update(situation, p, q, cfg: LossConfig, tol=1e-6):
    """Closed-form update ``-dL/ds`` in the limiting regimes of the loss family.

    ``P_ONEHOT``: p is one-hot at k (within ``tol``).
    ``Q_UNIFORM``: q is exactly uniform (within 1e-9).
    ``Q_ONEHOT_MATCH`` / ``Q_ONEHOT_OTHER``: q is one-hot at k and the argmax of
    p does / does not agree with k. The returned vector uses the ``q_i -> 1``
    row at i = k and the ``q_k -> 1, k != i`` row elsewhere. Infinite limits
    (KLpq) come back as ``+/-SATURATED``.
    """
    situation = Situation(situation)
    p, q = _pair(p, q)
    if p.ndim != 1:
        raise ValueError("limit_case_update works on single vectors")
    if cfg.da_weight != 1.0:
        raise ValueError("limit rows are tabulated for da_weight == 1")
    K = p.size
    lam = cfg.lam
    floor = cfg.log_floor
    kind = cfg.distance
    A = _plogratio(p, floor)

    if situation is Situation.P_ONEHOT:
        k = int(np.argmax(p))
        if p[k] < 1 - tol:
            raise ValueError("P_ONEHOT needs p within tol of a one-hot vector")
        if kind is Distance.KLqp:
            return q - np.eye(K)[k]
        return np.zeros(K)

    if situation is Situation.Q_UNIFORM:
        if np.max(np.abs(q - 1.0 / K)) > PROB_TOL:
            raise ValueError("Q_UNIFORM needs q uniform")
        if kind is Distance.KLpq:
            return (lam - 1) * A
        if kind is Distance.KLqp:
            return 1.0 / K - p + lam * A
        if kind is Distance.MSE:
            return -p**2 + p * np.sum(p**2) + lam * A
        logp = _log(p, floor)
        out = np.empty(K)
        for i in range(K):
            j = np.arange(K) != i
            term = 0.5 * np.log((K * p[i] + 1) / (K * p[j] + 1)) + (lam - 0.5) * (logp[i] - logp[j])
            out[i] = p[i] * np.sum(p[j] * term)
        return out

    k = int(np.argmax(q))
    if q[k] < 1 - tol:
        raise ValueError(f"{situation.value} needs q within tol of a one-hot vector")
    agrees = int(np.argmax(p)) == k
    if agrees != (situation is Situation.Q_ONEHOT_MATCH):
        raise ValueError(f"{situation.value} inconsistent with argmax(p) vs hot class of q")

    out = np.empty(K)
    logp = _log(p, floor)
    for i in range(K):
        hot = i == k
        if kind is Distance.KLpq:
            out[i] = SATURATED if hot else -SATURATED
        elif kind is Distance.KLqp:
            out[i] = (1 - p[i] if hot else -p[i]) + lam * A[i]
        elif kind is Distance.MSE:
            base = -p[i] ** 2 + p[i] * np.sum(p**2) + lam * A[i]
            out[i] = base + (p[i] * (1 - p[i]) if hot else -p[i] * p[k])
        else:
            j = np.arange(K) != i
            if hot:
                js = 0.5 * (np.log(p[i] + 1) - logp[j])
            else:
                js = 0.5 * (logp[i] - _log(p[j] + (np.flatnonzero(j) == k), floor))
            out[i] = p[i] * np.sum(p[j] * (js + (lam - 0.5) * (logp[i] - logp[j])))
    return out
