"""Finite-difference suites for the analytic gradients.

Relative error of one gradient vector is ``max|a - n| / max(|a|_inf, |n|_inf)``,
so components that are tiny next to the rest of the vector do not dominate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import (
    Distance,
    LossConfig,
    finite_diff_grad,
    grad_wrt_prediction_scores,
    pseudo_loss,
    pseudo_loss_grad_scores,
    softmax,
)
from .pseudo import cosine_scores, cosine_scores_backward

LAMBDAS = (0.0, 1.0, 2.0)
CLASS_COUNTS = (2, 5, 13)


@dataclass
class CheckResult:
    suite: str
    distance: str
    lam: float
    K: int
    max_rel_err: float
    tol: float

    @property
    def ok(self):
        return self.max_rel_err < self.tol

    def line(self):
        status = "ok" if self.ok else "FAIL"
        return f"{self.suite:<12} {self.distance:<5} lam={self.lam:<4g} K={self.K:<3d} max_rel_err={self.max_rel_err:.3e} {status}"


def vector_rel_err(a, n):
    a, n = np.asarray(a), np.asarray(n)
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-300)
    return float(np.max(np.abs(a - n)) / scale)


def _random_pair(rng, K):
    s = rng.normal(scale=1.5, size=K)
    q = softmax(rng.normal(scale=1.5, size=K))
    return s, q


def check_pseudo_branch(distance, lam, K, trials=100, eps=1e-5, seed=0, tol=1e-5):
    cfg = LossConfig(distance, lam=lam)
    rng = np.random.default_rng([seed, list(Distance).index(distance), int(lam * 10), K])
    worst = 0.0
    for _ in range(trials):
        s, q = _random_pair(rng, K)
        fd = finite_diff_grad(lambda x: pseudo_loss(softmax(x), q, cfg), s, eps=eps)
        worst = max(worst, vector_rel_err(pseudo_loss_grad_scores(s, q, cfg), fd))
    return CheckResult("pseudo", distance.value, lam, K, worst, tol)


def check_prediction_branch(distance, lam, K, trials=100, eps=1e-5, seed=0, tol=1e-5):
    cfg = LossConfig(distance, lam=lam)
    rng = np.random.default_rng([seed + 1, list(Distance).index(distance), int(lam * 10), K])
    worst = 0.0
    for _ in range(trials):
        z, p = _random_pair(rng, K)
        fd = finite_diff_grad(lambda x: pseudo_loss(p, softmax(x), cfg), z, eps=eps)
        worst = max(worst, vector_rel_err(grad_wrt_prediction_scores(p, z, cfg), fd))
    return CheckResult("prediction", distance.value, lam, K, worst, tol)


def check_cosine_chain(K, dim=6, trials=20, eps=1e-6, seed=0, tol=1e-6):
    rng = np.random.default_rng([seed, K])
    worst = 0.0
    for _ in range(trials):
        h = rng.normal(size=(1, dim))
        c = rng.normal(size=(K, dim))
        w = rng.normal(size=K)
        _, cache = cosine_scores(h, c)
        analytic = cosine_scores_backward(w[None], cache)[0]
        fd = finite_diff_grad(lambda x: float(cosine_scores(x[None], c)[0][0] @ w), h[0], eps=eps)
        worst = max(worst, vector_rel_err(analytic, fd))
    return CheckResult("cosine", "-", 0.0, K, worst, tol)


def run_all(trials=100):
    """Every suite over all (distance, lambda, K); returns a list of results."""
    out = []
    for distance in Distance:
        for lam in LAMBDAS:
            for K in CLASS_COUNTS:
                out.append(check_pseudo_branch(distance, lam, K, trials))
                out.append(check_prediction_branch(distance, lam, K, trials))
    for K in CLASS_COUNTS:
        out.append(check_cosine_chain(K))
    return out
