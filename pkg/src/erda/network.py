"""Small per-point MLPs with hand-written reverse mode, plus a kNN mean aggregation.

Everything is float64. ``SegNet`` wires the pieces used in training:

    x -> f1 (affine+relu) -> kNN mean -> f2 (affine+relu) = feat
    feat -> head (affine) = logits z,  q = softmax(z)
    feat -> g (MLP, final affine)    = projected feature for pseudo-labels
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class StaleTraceError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """``layer_widths`` lists input width then each layer's output width."""

    layer_widths: tuple
    activation: str = "relu"
    final_linear: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs an input width and at least one layer")
        if any(w <= 0 for w in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def d_in(self):
        return self.layer_widths[0]

    @property
    def d_out(self):
        return self.layer_widths[-1]


@dataclass
class Parameters:
    weights: list
    biases: list
    # bumped by every in-place update; traces remember the value they saw
    version: int = 0

    def arrays(self):
        return [*self.weights, *self.biases]

    def zeros_like(self):
        return Parameters([np.zeros_like(w) for w in self.weights],
                          [np.zeros_like(b) for b in self.biases])

    def copy(self):
        return Parameters([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                          self.version)


@dataclass
class ForwardTrace:
    inputs: list = field(default_factory=list)  # input to each layer
    pre: list = field(default_factory=list)  # pre-activation of each layer
    params_id: int = 0
    version: int = 0
    batch: int = 0


def init_params(spec: MlpSpec, seed) -> Parameters:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Parameters(weights, biases)


def _check_shapes(params, spec):
    if len(params.weights) != spec.n_layers:
        raise ValueError("parameter count does not match spec")
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        expect = (spec.layer_widths[l], spec.layer_widths[l + 1])
        if w.shape != expect or b.shape != (expect[1],):
            raise ValueError(f"layer {l}: got {w.shape}/{b.shape}, spec wants {expect}")


def forward(params: Parameters, spec: MlpSpec, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.d_in:
        raise ValueError(f"inputs must be B x {spec.d_in}, got {x.shape}")
    _check_shapes(params, spec)
    trace = ForwardTrace(params_id=id(params), version=params.version, batch=x.shape[0])
    last = spec.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        trace.inputs.append(x)
        z = x @ w + b
        trace.pre.append(z)
        x = z if (l == last and spec.final_linear) else np.maximum(z, 0.0)
    return x, trace


def backward(trace: ForwardTrace, params: Parameters, spec: MlpSpec, output_grads):
    """Reverse pass; returns ``(param_grads, input_grads)``."""
    if trace.params_id != id(params) or trace.version != params.version:
        raise StaleTraceError("trace was recorded with different parameters")
    g = np.asarray(output_grads, dtype=np.float64)
    if g.shape != (trace.batch, spec.d_out):
        raise ValueError(f"output_grads must be {trace.batch} x {spec.d_out}, got {g.shape}")
    grads = params.zeros_like()
    last = spec.n_layers - 1
    for l in range(last, -1, -1):
        if not (l == last and spec.final_linear):
            g = g * (trace.pre[l] > 0)
        grads.weights[l] = trace.inputs[l].T @ g
        grads.biases[l] = g.sum(axis=0)
        g = g @ params.weights[l].T
    return grads, g


def knn_mean_aggregate(points, features, k):
    """Replace each feature by the mean over its k nearest points (self included)."""
    points = np.asarray(points, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        return knn_mean_aggregate(points, features[:, None], k)[:, 0]
    if k > len(points):
        raise ValueError(f"k={k} exceeds the number of points ({len(points)})")
    return kernels.neighbor_mean(features, kernels.knn_indices(points, k))


@dataclass(frozen=True)
class NetConfig:
    in_dim: int
    num_classes: int
    hidden: int = 32
    proj_dim: int = 16
    proj_depth: int = 2  # 0 = no projection, 1 = linear, 2/3 = MLP
    knn_k: int = 8

    def __post_init__(self):
        if self.proj_depth not in (0, 1, 2, 3):
            raise ValueError("proj_depth must be 0, 1, 2 or 3")

    def specs(self):
        h = self.hidden
        out = {
            "f1": MlpSpec((self.in_dim, h), final_linear=False),
            "f2": MlpSpec((h, h), final_linear=False),
            "head": MlpSpec((h, self.num_classes)),
        }
        if self.proj_depth:
            widths = (h,) + (h,) * (self.proj_depth - 1) + (self.proj_dim,)
            out["g"] = MlpSpec(widths)
        return out

    @property
    def feature_dim(self):
        return self.proj_dim if self.proj_depth else self.hidden


def init_segnet(cfg: NetConfig, seed):
    """Independent parameter blocks for f1, f2, head and (optionally) g."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    specs = cfg.specs()
    return {name: init_params(spec, child) for (name, spec), child in
            zip(specs.items(), ss.spawn(len(specs)))}


class SegNet:
    """Forward/backward of the composed network on one batch of points."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        self.specs = cfg.specs()

    def forward(self, params, x, nbr):
        cache = {"nbr": nbr, "n": x.shape[0]}
        h1, cache["f1"] = forward(params["f1"], self.specs["f1"], x)
        agg = kernels.neighbor_mean(h1, nbr)
        feat, cache["f2"] = forward(params["f2"], self.specs["f2"], agg)
        logits, cache["head"] = forward(params["head"], self.specs["head"], feat)
        if "g" in self.specs:
            proj, cache["g"] = forward(params["g"], self.specs["g"], feat)
        else:
            proj = feat
        return logits, proj, cache

    def backward(self, params, cache, grad_logits, grad_proj=None):
        grads = {}
        grads["head"], g_feat = backward(cache["head"], params["head"], self.specs["head"],
                                         grad_logits)
        if "g" in self.specs:
            if grad_proj is None:
                grad_proj = np.zeros((cache["n"], self.specs["g"].d_out))
            grads["g"], g_from_proj = backward(cache["g"], params["g"], self.specs["g"], grad_proj)
            g_feat = g_feat + g_from_proj
        elif grad_proj is not None:
            g_feat = g_feat + grad_proj
        grads["f2"], g_agg = backward(cache["f2"], params["f2"], self.specs["f2"], g_feat)
        g_h1 = kernels.neighbor_mean_backward(g_agg, cache["nbr"], cache["n"])
        grads["f1"], _ = backward(cache["f1"], params["f1"], self.specs["f1"], g_h1)
        return grads
