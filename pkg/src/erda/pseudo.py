"""Prototype pseudo-labels: momentum class centroids and cosine scoring.

Centroids are statistics, not parameters. They are updated outside the
gradient graph, and the only gradient path into pseudo-labels runs through
the point's own projected feature (see :func:`cosine_scores_backward`).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .losses import softmax

NORM_FLOOR = 1e-12


class SelectionKind(str, enum.Enum):
    DENSE_SOFT = "dense"
    ONE_HOT = "onehot"
    TOP_K = "topk"
    THRESHOLD = "threshold"


@dataclass(frozen=True)
class SelectionStrategy:
    kind: SelectionKind = SelectionKind.DENSE_SOFT
    k: int | None = None
    tau: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SelectionKind(self.kind))
        if self.kind is SelectionKind.TOP_K and (self.k is None or self.k < 1):
            raise ValueError("TOP_K needs k >= 1")
        if self.kind is SelectionKind.THRESHOLD and not (self.tau is not None and 0 < self.tau < 1):
            raise ValueError("THRESHOLD needs tau in (0, 1)")

    @classmethod
    def parse(cls, text: str) -> "SelectionStrategy":
        """Parse ``dense``, ``onehot``, ``topk:64`` or ``threshold:0.9``."""
        name, _, arg = text.strip().partition(":")
        kind = SelectionKind(name.lower())
        if kind is SelectionKind.TOP_K:
            return cls(kind, k=int(arg))
        if kind is SelectionKind.THRESHOLD:
            return cls(kind, tau=float(arg))
        if arg:
            raise ValueError(f"selection {name!r} takes no argument")
        return cls(kind)

    def __str__(self):
        if self.kind is SelectionKind.TOP_K:
            return f"topk:{self.k}"
        if self.kind is SelectionKind.THRESHOLD:
            return f"threshold:{self.tau}"
        return self.kind.value


@dataclass
class PrototypeBank:
    """K class centroids in projected feature space, blended with momentum ``m``."""

    centroids: np.ndarray
    momentum: float = 0.999
    initialized: np.ndarray = field(default=None)

    def __post_init__(self):
        self.centroids = np.array(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2:
            raise ValueError("centroids must be K x D")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.initialized is None:
            self.initialized = np.zeros(len(self.centroids), dtype=bool)
        else:
            self.initialized = np.array(self.initialized, dtype=bool)

    @classmethod
    def empty(cls, K, D, momentum=0.999):
        return cls(np.zeros((K, D)), momentum)

    @property
    def num_classes(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]

    @property
    def ready(self):
        return bool(self.initialized.all())

    def copy(self):
        return PrototypeBank(self.centroids.copy(), self.momentum, self.initialized.copy())


def batch_class_means(features, labels, K):
    """Per-class mean of ``features``; ``None`` for classes absent from the batch."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    if features.shape[0] != labels.shape[0]:
        raise ValueError("features and labels disagree on the number of points")
    out = []
    for c in range(K):
        rows = features[labels == c]
        out.append(rows.mean(axis=0) if len(rows) else None)
    return out


def momentum_update(bank: PrototypeBank, batch_means):
    """``C_k <- m C_k + (1 - m) C_hat_k`` in place; first sighting copies the mean."""
    if len(batch_means) != bank.num_classes:
        raise ValueError("need one (optional) mean per class")
    m = bank.momentum
    for c, mean in enumerate(batch_means):
        if mean is None:
            continue
        mean = np.asarray(mean, dtype=np.float64)
        if mean.shape != (bank.dim,):
            raise ValueError(f"class {c}: mean has shape {mean.shape}, bank dim is {bank.dim}")
        if bank.initialized[c]:
            bank.centroids[c] = m * bank.centroids[c] + (1 - m) * mean
        else:
            bank.centroids[c] = mean
            bank.initialized[c] = True
    return bank


def l2_normalize(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), NORM_FLOOR)


def _check_scorable(bank):
    if not bank.ready:
        missing = np.flatnonzero(~bank.initialized).tolist()
        raise ValueError(f"classes {missing} have no centroid yet")
    if np.any(np.linalg.norm(bank.centroids, axis=1) == 0):
        raise ValueError("zero-norm centroid")


def score(bank: PrototypeBank, feature, temperature=1.0):
    """Cosine similarity of one feature to every centroid, divided by ``temperature``."""
    _check_scorable(bank)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    feature = np.asarray(feature, dtype=np.float64)
    norm = np.linalg.norm(feature)
    if norm == 0:
        raise ValueError("zero-norm feature")
    cos = bank.centroids @ feature / (np.linalg.norm(bank.centroids, axis=1) * norm)
    return np.clip(cos, -1.0, 1.0) / temperature


def pseudo_labels(bank: PrototypeBank, features, temperature=1.0):
    """Softmax over temperature-scaled cosine scores, one row per feature."""
    features = np.asarray(features, dtype=np.float64)
    _check_scorable(bank)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if np.any(np.linalg.norm(features, axis=1) == 0):
        raise ValueError("zero-norm feature")
    cos, _ = cosine_scores(features, bank.centroids)
    return softmax(cos / temperature)


def cosine_scores(features, centroids):
    """Cosine matrix (N x K) plus the cached unit vectors needed for backward."""
    u = l2_normalize(features)
    c = l2_normalize(centroids)
    return u @ c.T, (u, c, np.maximum(np.linalg.norm(features, axis=1), NORM_FLOOR))


def cosine_scores_backward(grad_cos, cache):
    """Gradient of the cosine matrix w.r.t. the features; centroids held fixed.

    d cos_k / d h = (c_k - cos_k u) / |h| with u = h / |h|.
    """
    u, c, norms = cache
    g = grad_cos @ c
    g = g - np.sum(grad_cos * (u @ c.T), axis=1, keepdims=True) * u
    return g / norms[:, None]


def apply_selection(pseudo, strategy: SelectionStrategy):
    """Filter/convert pseudo-labels the way label-selection baselines do.

    Returns ``(targets, keep)``: an N x K array and a boolean mask. Rows with
    ``keep`` False are unlabeled and their target rows are zero.
    DENSE_SOFT returns the input unchanged.
    """
    pseudo = np.asarray(pseudo, dtype=np.float64)
    n, K = pseudo.shape
    kind = strategy.kind
    if kind is SelectionKind.DENSE_SOFT:
        return pseudo.copy(), np.ones(n, dtype=bool)

    if kind is SelectionKind.TOP_K:
        label = selection_topk(pseudo, strategy.k)
        keep = label >= 0
    else:
        # argmax picks the lowest index among ties
        label = np.argmax(pseudo, axis=1)
        if kind is SelectionKind.ONE_HOT:
            keep = np.ones(n, dtype=bool)
        else:
            keep = pseudo.max(axis=1) >= strategy.tau
    targets = np.zeros_like(pseudo)
    rows = np.flatnonzero(keep)
    targets[rows, label[rows]] = 1.0
    return targets, keep


def selection_topk(pseudo, k):
    """Class assignment under per-class top-k selection, -1 for unselected rows.

    Each class keeps the k rows most confident in it (ties by lower row index).
    A row picked by several classes goes to the one it is most confident in.
    """
    n, K = pseudo.shape
    label = np.full(n, -1, dtype=np.int64)
    best = np.full(n, -np.inf)
    for c in range(K):
        order = np.argsort(-pseudo[:, c], kind="stable")[:k]
        better = pseudo[order, c] > best[order]
        label[order[better]] = c
        best[order[better]] = pseudo[order[better], c]
    return label
