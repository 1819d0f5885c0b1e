"""Synthetic blob scenes, weak-label masks and their text formats.

Scene file::

    erda-scene 1
    <N> <F> <K>
    x y z f_1 ... f_F label        (N rows)

Mask file: one labeled point index per line, strictly increasing. An empty
file is a valid mask with no labeled points.

Floats are written with 17 significant digits, so files round-trip exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCENE_MAGIC = "erda-scene 1"
# Class signal codes depend only on (K, feature_dim) so every scene shares them.
_CODEBOOK_SEED = 20_231_107


class ParseError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass
class Scene:
    coords: np.ndarray  # N x 3
    features: np.ndarray  # N x F
    gt_labels: np.ndarray  # N
    num_classes: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.gt_labels = np.asarray(self.gt_labels, dtype=np.int64)
        n = len(self.gt_labels)
        if self.coords.shape != (n, 3) or self.features.ndim != 2 or len(self.features) != n:
            raise ValueError("coords must be N x 3 and features N x F with matching N")
        if n < self.num_classes:
            raise ValueError(f"a scene needs at least K={self.num_classes} points")
        if n and (self.gt_labels.min() < 0 or self.gt_labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords must be finite")

    @property
    def n_points(self):
        return len(self.gt_labels)

    def __eq__(self, other):
        return (
            isinstance(other, Scene)
            and self.num_classes == other.num_classes
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.gt_labels, other.gt_labels)
        )


@dataclass
class LabelMask:
    labeled_indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.labeled_indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or np.any(np.diff(idx) <= 0)):
            raise ValueError("labeled indices must be non-negative and strictly increasing")
        self.labeled_indices = idx

    def as_bool(self, n_points):
        if self.labeled_indices.size and self.labeled_indices[-1] >= n_points:
            raise ValueError("mask index out of range for this scene")
        out = np.zeros(n_points, dtype=bool)
        out[self.labeled_indices] = True
        return out

    def __len__(self):
        return self.labeled_indices.size

    def __eq__(self, other):
        return isinstance(other, LabelMask) and np.array_equal(self.labeled_indices, other.labeled_indices)


class WeakKind(str, enum.Enum):
    ONE_PT = "1pt"
    RATIO = "ratio"


@dataclass(frozen=True)
class WeakSetting:
    kind: WeakKind = WeakKind.RATIO
    fraction: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "kind", WeakKind(self.kind))
        if self.kind is WeakKind.RATIO and not 0 < self.fraction <= 1:
            raise ValueError("RATIO fraction must be in (0, 1]")

    @classmethod
    def parse(cls, text):
        """``1pt`` or a fraction such as ``0.01`` / ``1%``."""
        text = text.strip()
        if text.lower() == "1pt":
            return cls(WeakKind.ONE_PT)
        if text.endswith("%"):
            return cls(WeakKind.RATIO, float(text[:-1]) / 100)
        return cls(WeakKind.RATIO, float(text))


def class_codebook(K, feature_dim):
    """Fixed per-class signal vectors (unit norm) shared by all scenes."""
    if feature_dim == 0:
        return np.zeros((K, 0))
    rng = np.random.default_rng([_CODEBOOK_SEED, K, feature_dim])
    codes = rng.normal(size=(K, feature_dim))
    return codes / np.linalg.norm(codes, axis=1, keepdims=True)


def scene_anchors(K, rng, spacing=2.0):
    """K distinct blob centres on a jittered planar grid (a room floor)."""
    side = int(np.ceil(np.sqrt(K)))
    cells = rng.permutation(side * side)[:K]
    grid = np.stack([cells // side, cells % side, np.zeros(K)], axis=1).astype(float)
    jitter = rng.uniform(-0.2, 0.2, size=(K, 3)) * [1, 1, 0]
    return (grid + jitter) * spacing


def gen_blob_scene(K, points_per_class, feature_dim, noise_sigma, seed, spacing=2.0):
    """K Gaussian blobs; features are coordinates followed by a noisy class code.

    Both the spatial spread and the feature noise scale with ``noise_sigma``,
    so ``noise_sigma=0`` collapses each class onto its anchor.
    """
    if K < 2 or points_per_class < 1:
        raise ValueError("need K >= 2 and points_per_class >= 1")
    rng = np.random.default_rng(seed)
    anchors = scene_anchors(K, rng, spacing)
    codes = class_codebook(K, feature_dim)
    labels = np.repeat(np.arange(K), points_per_class)
    n = labels.size
    coords = anchors[labels] + noise_sigma * rng.normal(size=(n, 3)) * [1, 1, 0.25]
    signal = codes[labels] + noise_sigma * rng.normal(size=(n, feature_dim))
    order = rng.permutation(n)
    coords, signal, labels = coords[order], signal[order], labels[order]
    return Scene(coords, np.hstack([coords, signal]), labels, K)


def noiseless_anchors(K, feature_dim, seed, spacing=2.0):
    """Full feature-space anchors (coords + code) that a seed's scene is built around."""
    rng = np.random.default_rng(seed)
    return np.hstack([scene_anchors(K, rng, spacing), class_codebook(K, feature_dim)])


def mask_labels(scene: Scene, setting: WeakSetting, seed) -> LabelMask:
    """Random weak-label mask with at least one labeled point per class."""
    rng = np.random.default_rng(seed)
    y = scene.gt_labels
    K = scene.num_classes
    n = scene.n_points
    if setting.kind is WeakKind.ONE_PT:
        picks = [rng.choice(np.flatnonzero(y == c)) for c in range(K) if np.any(y == c)]
        return LabelMask(np.sort(np.array(picks, dtype=np.int64)))

    count = min(n, max(int(round(setting.fraction * n)), K))
    order = rng.permutation(n)
    chosen = list(order[:count])
    rest = list(order[count:])
    for c in range(K):
        if np.any(y[chosen] == c) or not np.any(y == c):
            continue
        # swap in the first unchosen point of class c for the last chosen point
        # whose class is represented more than once
        incoming = next(i for i in rest if y[i] == c)
        counts = np.bincount(y[chosen], minlength=K)
        slot = next(s for s in range(len(chosen) - 1, -1, -1) if counts[y[chosen[s]]] > 1)
        rest.remove(incoming)
        rest.append(chosen[slot])
        chosen[slot] = incoming
    return LabelMask(np.sort(np.array(chosen, dtype=np.int64)))


def save_scene(scene: Scene, path):
    rows = np.hstack([scene.coords, scene.features])
    with open(path, "w") as fh:
        fh.write(f"{SCENE_MAGIC}\n{scene.n_points} {scene.features.shape[1]} {scene.num_classes}\n")
        for row, label in zip(rows, scene.gt_labels):
            fh.write(" ".join(f"{v:.17g}" for v in row) + f" {int(label)}\n")


def load_scene(path) -> Scene:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != SCENE_MAGIC:
        raise ParseError(path, 1, f"expected header {SCENE_MAGIC!r}")
    try:
        n, f, K = (int(t) for t in lines[1].split())
    except (IndexError, ValueError):
        raise ParseError(path, 2, "expected 'N F K'") from None
    if len(lines) - 2 != n:
        raise ParseError(path, len(lines), f"expected {n} point rows, found {len(lines) - 2}")
    coords = np.empty((n, 3))
    feats = np.empty((n, f))
    labels = np.empty(n, dtype=np.int64)
    for i, line in enumerate(lines[2:]):
        lineno = i + 3
        tok = line.split()
        if len(tok) != 4 + f:
            raise ParseError(path, lineno, f"expected {4 + f} columns, got {len(tok)}")
        try:
            vals = [float(t) for t in tok[:-1]]
            label = int(tok[-1])
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        if not 0 <= label < K:
            raise ParseError(path, lineno, f"label {label} outside [0, {K})")
        coords[i], feats[i], labels[i] = vals[:3], vals[3:], label
    try:
        return Scene(coords, feats, labels, K)
    except ValueError as exc:
        raise ParseError(path, 2, str(exc)) from None


def save_mask(mask: LabelMask, path):
    with open(path, "w") as fh:
        fh.writelines(f"{int(i)}\n" for i in mask.labeled_indices)


def load_mask(path, n_points=None) -> LabelMask:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            idx = int(line)
        except ValueError:
            raise ParseError(path, lineno, f"not an integer index: {line!r}") from None
        if idx < 0 or (n_points is not None and idx >= n_points):
            raise ParseError(path, lineno, f"index {idx} out of range")
        if out and idx <= out[-1]:
            raise ParseError(path, lineno, "indices must be strictly increasing")
        out.append(idx)
    return LabelMask(np.array(out, dtype=np.int64))
