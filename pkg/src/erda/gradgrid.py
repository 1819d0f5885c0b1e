"""Binary-class gradient field of the pseudo-label loss over (p, q).

For two classes the pseudo-label is ``(p, 1 - p)`` and the prediction
``(q, 1 - q)``; ``delta = -dL/ds_1`` is the update the first pseudo-label
score receives. Files hold one header line and ``p q delta`` rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import Distance, LossConfig, pseudo_loss_grad_scores


class GridExportError(OSError):
    pass


@dataclass(frozen=True)
class GradGridSpec:
    distance: Distance = Distance.KLpq
    lam: float = 1.0
    resolution: int = 101
    epsilon_margin: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "distance", Distance(self.distance))
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        if not 0 < self.epsilon_margin < 0.5:
            raise ValueError("epsilon_margin must be in (0, 0.5)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def axis_values(spec: GradGridSpec):
    """Evenly spaced values in [eps, 1-eps]; an odd resolution hits 0.5 exactly."""
    v = np.linspace(spec.epsilon_margin, 1.0 - spec.epsilon_margin, spec.resolution)
    if spec.resolution % 2:
        v[spec.resolution // 2] = 0.5
    return v


def gradient_grid(spec: GradGridSpec):
    """Return ``(p, q, delta)`` flattened with p varying slowest."""
    v = axis_values(spec)
    p, q = (a.ravel() for a in np.meshgrid(v, v, indexing="ij"))
    return p, q, binary_delta(p, q, spec.distance, spec.lam)


def binary_delta(p, q, distance, lam):
    """Update of the first class score for pseudo-label (p, 1-p), prediction (q, 1-q)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    s = np.stack([np.log(p), np.log1p(-p)], axis=-1)
    qv = np.stack([q, 1.0 - q], axis=-1)
    g = pseudo_loss_grad_scores(s, qv, LossConfig(Distance(distance), lam=lam))
    return -g[..., 0]


def export_gradient_grid(spec: GradGridSpec, path):
    p, q, delta = gradient_grid(spec)
    header = (f"# p q delta distance={spec.distance.value} lambda={spec.lam:g} "
              f"resolution={spec.resolution} epsilon={spec.epsilon_margin:g}\n")
    body = "".join(f"{a:.17g} {b:.17g} {c:.17g}\n" for a, b, c in zip(p, q, delta))
    try:
        Path(path).write_text(header + body)
    except OSError as exc:
        raise GridExportError(f"{path}: {exc.strerror or exc}") from exc
    return Path(path)


def load_gradient_grid(path):
    """Inverse of :func:`export_gradient_grid`; returns ``(p, q, delta)``."""
    data = np.loadtxt(path, comments="#", ndmin=2)
    return data[:, 0], data[:, 1], data[:, 2]


def zero_on_uniform_line(p, q, delta, tol=1e-9):
    """True when every cell with q exactly 0.5 has ``|delta| < tol``."""
    line = q == 0.5
    return bool(line.any() and np.all(np.abs(delta[line]) < tol))
