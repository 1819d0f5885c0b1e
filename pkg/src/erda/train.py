"""Weakly supervised training with prototype pseudo-labels.

Objective per batch::

    L = mean_{labeled} CE(q, y) + alpha * mean_{unlabeled, selected} L_p(p, q)

Gradients of the unlabeled term reach the segmentation head through q and,
when ``grad_through_labels`` is on, the projection network and backbone
through p = softmax(cos(g(f(x)), C) / T). Centroids C are held fixed.
"""

from __future__ import annotations

import enum
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import LabelMask, Scene
from .kernels import knn_indices
from .losses import (
    Distance,
    InvalidInputError,
    LossConfig,
    NumericalError,
    grad_wrt_prediction_scores,
    pseudo_loss,
    pseudo_loss_grad_scores,
    softmax,
)
from .metrics import confusion_matrix, mean_pseudo_entropy, metrics
from .network import NetConfig, Parameters, SegNet, init_segnet
from .pseudo import (
    PrototypeBank,
    SelectionKind,
    SelectionStrategy,
    apply_selection,
    batch_class_means,
    cosine_scores,
    cosine_scores_backward,
    l2_normalize,
    momentum_update,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "erda-checkpoint"
CHECKPOINT_VERSION = 1


class Mode(str, enum.Enum):
    SUPERVISED_ONLY = "supervised"
    PSEUDO_BASELINE = "pseudo"
    ER_ONLY = "er"
    DA_ONLY = "da"
    ERDA = "erda"


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


class TrainingDiverged(FloatingPointError):
    def __init__(self, diagnostics):
        super().__init__(f"non-finite loss: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)
    momentum_m: float = 0.999
    temperature: float = 1.0
    lr: float = 0.01
    sgd_momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 1  # scenes per step
    clip_norm: float = 10.0
    selection: SelectionStrategy = field(default_factory=SelectionStrategy)
    mode: Mode = Mode.ERDA
    seed: int = 0
    grad_through_labels: bool = True
    proto_update: str = "step"  # or "epoch"
    proto_normalize: bool = False
    lr_schedule: str = "cosine"  # or "constant"
    hidden: int = 32
    proj_dim: int = 16
    proj_depth: int = 2
    knn_k: int = 8

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        checks = {
            "alpha": self.alpha >= 0,
            "momentum_m": 0 <= self.momentum_m < 1,
            "temperature": self.temperature > 0,
            "lr": self.lr >= 0,
            "sgd_momentum": 0 <= self.sgd_momentum < 1,
            "epochs": self.epochs >= 0,
            "batch_size": self.batch_size >= 1,
            "clip_norm": self.clip_norm > 0,
            "proto_update": self.proto_update in ("step", "epoch"),
            "lr_schedule": self.lr_schedule in ("cosine", "constant"),
            "knn_k": self.knn_k >= 1,
        }
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(key, f"invalid value {getattr(self, key)!r}")

    def effective_loss(self) -> LossConfig:
        """The pseudo-label loss the mode actually optimizes."""
        if self.mode is Mode.ER_ONLY:
            return self.loss.with_(da_weight=0.0)
        if self.mode is Mode.DA_ONLY:
            return self.loss.with_(lam=0.0)
        if self.mode is Mode.PSEUDO_BASELINE:
            # fixed targets trained with plain cross-entropy
            return LossConfig(Distance.KLpq, lam=1.0, log_floor=self.loss.log_floor)
        return self.loss

    def net_config(self, in_dim, num_classes):
        return NetConfig(in_dim, num_classes, self.hidden, self.proj_dim, self.proj_depth, self.knn_k)

    # flat key/value form used by config files, checkpoints and logs
    def to_flat(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "loss":
                out.update(distance=v.distance.value, lam=v.lam, log_floor=v.log_floor, da_weight=v.da_weight)
            elif f.name == "selection":
                out["selection"] = str(v)
            elif f.name == "mode":
                out["mode"] = v.value
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat(cls, d):
        d = dict(d)
        loss_keys = {"distance": "distance", "lam": "lam", "lambda": "lam",
                     "log_floor": "log_floor", "da_weight": "da_weight"}
        loss_kw = {}
        for key in list(d):
            if key in loss_keys:
                loss_kw[loss_keys[key]] = d.pop(key)
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, value in d.items():
            if key not in known or key == "loss":
                raise ConfigError(key, "unknown key")
            kw[key] = _coerce(key, known[key].type, value)
        try:
            loss = LossConfig(**{k: (Distance(v) if k == "distance" else float(v)) for k, v in loss_kw.items()})
        except (ValueError, TypeError) as exc:
            bad = next(iter(loss_kw), "distance")
            raise ConfigError(bad, str(exc)) from None
        try:
            return cls(loss=loss, **kw)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(next(iter(kw), "mode"), str(exc)) from None


def _coerce(key, annotation, value):
    try:
        if key == "selection":
            return value if isinstance(value, SelectionStrategy) else SelectionStrategy.parse(str(value))
        if key == "mode":
            return Mode(value)
        if annotation in ("bool", bool):
            if not isinstance(value, bool):
                raise ValueError("expected true/false")
            return value
        if annotation in ("int", int):
            if isinstance(value, bool) or int(value) != value:
                raise ValueError("expected an integer")
            return int(value)
        if annotation in ("float", float):
            if isinstance(value, bool):
                raise ValueError("expected a number")
            return float(value)
        return str(value)
    except (ValueError, TypeError) as exc:
        raise ConfigError(key, str(exc)) from None


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    labeled: np.ndarray  # bool mask
    nbr: np.ndarray

    @classmethod
    def from_scene(cls, scene: Scene, mask: LabelMask | None, k):
        labeled = mask.as_bool(scene.n_points) if mask is not None else np.zeros(scene.n_points, bool)
        return cls(scene.features, scene.gt_labels, labeled, knn_indices(scene.coords, min(k, scene.n_points)))

    @classmethod
    def concat(cls, batches):
        if len(batches) == 1:
            return batches[0]
        offsets = np.cumsum([0] + [len(b.labels) for b in batches[:-1]])
        return cls(
            np.vstack([b.features for b in batches]),
            np.concatenate([b.labels for b in batches]),
            np.concatenate([b.labeled for b in batches]),
            np.vstack([b.nbr + o for b, o in zip(batches, offsets)]),
        )


@dataclass
class TrainState:
    params: dict
    velocity: dict
    bank: PrototypeBank
    net_cfg: NetConfig
    epoch: int = 0
    step: int = 0
    rng: np.random.Generator = None

    @property
    def net(self):
        return SegNet(self.net_cfg)


def init_state(cfg: TrainConfig, in_dim, num_classes) -> TrainState:
    net_cfg = cfg.net_config(in_dim, num_classes)
    ss = np.random.SeedSequence(cfg.seed)
    init_seed, rng_seed = ss.spawn(2)
    params = init_segnet(net_cfg, init_seed)
    velocity = {k: p.zeros_like() for k, p in params.items()}
    bank = PrototypeBank.empty(num_classes, net_cfg.feature_dim, cfg.momentum_m)
    return TrainState(params, velocity, bank, net_cfg, rng=np.random.default_rng(rng_seed))


def objective_value(ce_labeled, lp_unlabeled, alpha):
    """Mean labeled CE plus alpha times mean unlabeled loss; empty sets add 0."""
    sup = float(np.mean(ce_labeled)) if len(ce_labeled) else 0.0
    unl = float(np.mean(lp_unlabeled)) if len(lp_unlabeled) else 0.0
    return sup + alpha * unl, sup, unl


def _log_floor_ce(q, y, floor):
    return -np.log(np.maximum(q[np.arange(len(y)), y], floor))


def _bank_features(proj, cfg):
    return l2_normalize(proj) if cfg.proto_normalize else proj


def update_bank(state, proj, batch, cfg):
    lab = batch.labeled
    means = batch_class_means(_bank_features(proj[lab], cfg), batch.labels[lab], state.bank.num_classes)
    momentum_update(state.bank, means)


def _objective(state, batch, cfg, fwd, want_grads):
    logits, proj, cache = fwd
    loss_cfg = cfg.effective_loss()
    floor = loss_cfg.log_floor
    n, K = logits.shape
    q = softmax(logits)
    lab = batch.labeled
    diag = {"n_labeled": int(lab.sum()), "n_unlabeled_used": 0, "pseudo_entropy": None}

    grad_logits = np.zeros_like(logits) if want_grads else None
    grad_proj = None
    n_l = int(lab.sum())
    if n_l:
        y = batch.labels[lab]
        ce = _log_floor_ce(q[lab], y, floor)
        if want_grads:
            g = q[lab].copy()
            g[np.arange(n_l), y] -= 1.0
            grad_logits[lab] = g / n_l
    else:
        ce = np.zeros(0)
        diag["warning"] = "no labeled points in batch"

    alpha = 0.0 if cfg.mode is Mode.SUPERVISED_ONLY else cfg.alpha
    lp = np.zeros(0)
    unl = np.flatnonzero(~lab)
    if alpha > 0 and state.bank.ready and unl.size:
        cos, ccache = cosine_scores(proj[unl], state.bank.centroids)
        s = cos / cfg.temperature
        p = softmax(s)
        diag["pseudo_entropy"] = mean_pseudo_entropy(p)
        if cfg.mode is Mode.PSEUDO_BASELINE:
            targets, keep = apply_selection(p, cfg.selection)
            through = False
        else:
            targets = p
            if cfg.selection.kind is SelectionKind.DENSE_SOFT:
                keep = np.ones(unl.size, dtype=bool)
            else:
                # selection decides which points count; their labels stay soft
                keep = apply_selection(p, cfg.selection)[1]
            through = cfg.grad_through_labels
        n_u = int(keep.sum())
        diag["n_unlabeled_used"] = n_u
        if n_u:
            rows = unl[keep]
            lp = pseudo_loss(targets[keep], q[rows], loss_cfg)
            if want_grads:
                scale = alpha / n_u
                grad_logits[rows] += scale * grad_wrt_prediction_scores(targets[keep], logits[rows], loss_cfg)
                if through:
                    g_cos = np.zeros_like(s)
                    g_cos[keep] = scale * pseudo_loss_grad_scores(s[keep], q[rows], loss_cfg) / cfg.temperature
                    grad_proj = np.zeros_like(proj)
                    grad_proj[unl] = cosine_scores_backward(g_cos, ccache)
    total, diag["supervised"], diag["unlabeled"] = objective_value(ce, lp, alpha)
    diag["total"] = total
    grads = state.net.backward(state.params, cache, grad_logits, grad_proj) if want_grads else None
    return total, diag, grads


def total_loss(batch: Batch, state: TrainState, cfg: TrainConfig):
    """Objective value and diagnostics with the bank as it currently stands."""
    fwd = state.net.forward(state.params, batch.features, batch.nbr)
    total, diag, _ = _objective(state, batch, cfg, fwd, want_grads=False)
    return total, diag


def loss_and_grads(batch: Batch, state: TrainState, cfg: TrainConfig):
    fwd = state.net.forward(state.params, batch.features, batch.nbr)
    return _objective(state, batch, cfg, fwd, want_grads=True)


def clip_global_norm(grads, clip_norm):
    norm = math.sqrt(sum(float(np.sum(a * a)) for g in grads.values() for a in g.arrays()))
    if math.isfinite(clip_norm) and norm > clip_norm:
        factor = clip_norm / norm
        for g in grads.values():
            for a in g.arrays():
                a *= factor
    return norm


def sgd_step(state, grads, lr, momentum):
    for name, p in state.params.items():
        v = state.velocity[name]
        for w, vel, g in zip(p.arrays(), v.arrays(), grads[name].arrays()):
            vel *= momentum
            vel += g
            w -= lr * vel
        p.version += 1


def train_step(batch: Batch, state: TrainState, cfg: TrainConfig, lr=None):
    """One optimization step; mutates and returns ``state`` plus diagnostics."""
    try:
        with np.errstate(over="raise", invalid="raise"):
            fwd = state.net.forward(state.params, batch.features, batch.nbr)
        if cfg.proto_update == "step":
            update_bank(state, fwd[1], batch, cfg)
        total, diag, grads = _objective(state, batch, cfg, fwd, want_grads=True)
    except (InvalidInputError, NumericalError, FloatingPointError) as exc:
        raise TrainingDiverged({"step": state.step, "epoch": state.epoch, "error": str(exc)}) from exc
    if not math.isfinite(total):
        raise TrainingDiverged(diag)
    with np.errstate(over="ignore"):
        diag["grad_norm"] = clip_global_norm(grads, cfg.clip_norm)
    if not math.isfinite(diag["grad_norm"]):
        raise TrainingDiverged({"step": state.step, "epoch": state.epoch, **diag})
    sgd_step(state, grads, cfg.lr if lr is None else lr, cfg.sgd_momentum)
    state.step += 1
    return state, diag


def _lr_at(cfg, step, total_steps):
    if cfg.lr_schedule == "constant" or total_steps == 0:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def predict(state, batch):
    logits, proj, _ = state.net.forward(state.params, batch.features, batch.nbr)
    return np.argmax(logits, axis=1), proj


def pseudo_label_entropy(state, batches, cfg):
    """Mean pseudo-label entropy over every unlabeled training point."""
    if not state.bank.ready:
        return None
    rows = []
    for b in batches:
        _, proj = predict(state, b)
        cos, _ = cosine_scores(proj[~b.labeled], state.bank.centroids)
        rows.append(softmax(cos / cfg.temperature))
    rows = np.vstack(rows)
    return mean_pseudo_entropy(rows) if len(rows) else None


def evaluate(state, batches, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for b in batches:
        pred, _ = predict(state, b)
        cm += confusion_matrix(b.labels, pred, num_classes)
    return metrics(cm)


def fit(train_scenes, masks, cfg: TrainConfig, val_scenes=None, state=None, stop_after=None):
    """Run epochs ``state.epoch .. cfg.epochs`` (or ``stop_after`` of them).

    Returns the state and one log record per epoch run in this call.
    """
    if len(train_scenes) != len(masks):
        raise ValueError("one mask per training scene")
    if not train_scenes:
        raise ValueError("no training scenes")
    K = train_scenes[0].num_classes
    covered = set()
    for s, m in zip(train_scenes, masks):
        covered.update(s.gt_labels[m.labeled_indices].tolist())
    if len(covered) < K:
        raise ValueError(f"classes {sorted(set(range(K)) - covered)} have no labeled point")

    if state is None:
        state = init_state(cfg, train_scenes[0].features.shape[1], K)
    batches = [Batch.from_scene(s, m, cfg.knn_k) for s, m in zip(train_scenes, masks)]
    val_batches = [Batch.from_scene(s, None, cfg.knn_k) for s in (val_scenes or [])]
    steps_per_epoch = math.ceil(len(batches) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    records = []
    last = cfg.epochs if stop_after is None else min(cfg.epochs, state.epoch + stop_after)
    while state.epoch < last:
        if cfg.proto_update == "epoch":
            for b in batches:
                update_bank(state, predict(state, b)[1], b, cfg)
        order = state.rng.permutation(len(batches))
        losses, unl_terms = [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = Batch.concat([batches[i] for i in order[start:start + cfg.batch_size]])
            _, diag = train_step(batch, state, cfg, lr=_lr_at(cfg, state.step, total_steps))
            losses.append(diag["total"])
            unl_terms.append(diag["unlabeled"])
        state.epoch += 1
        rec = {
            "epoch": state.epoch,
            "loss": float(np.mean(losses)),
            "unlabeled_loss": float(np.mean(unl_terms)),
            "pseudo_entropy": pseudo_label_entropy(state, batches, cfg),
            "val_miou": None,
            "val_oa": None,
        }
        if val_batches:
            rep = evaluate(state, val_batches, K)
            rec["val_miou"], rec["val_oa"] = rep.miou, rep.oa
        log.debug("epoch %d %s", state.epoch, rec)
        records.append(rec)
    return state, records


def format_log(records):
    """Line-delimited JSON, one record per epoch."""
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, state: TrainState, cfg: TrainConfig):
    """Write a ``.npz`` archive; every tensor is little-endian float64."""
    arrays = {}
    for group, blocks in (("params", state.params), ("velocity", state.velocity)):
        for name, p in blocks.items():
            for l, (w, b) in enumerate(zip(p.weights, p.biases)):
                arrays[f"{group}/{name}/W{l}"] = w.astype("<f8")
                arrays[f"{group}/{name}/b{l}"] = b.astype("<f8")
    arrays["bank/centroids"] = state.bank.centroids.astype("<f8")
    arrays["bank/initialized"] = state.bank.initialized.astype("<f8")
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_flat(),
        "net": asdict(state.net_cfg),
        "epoch": state.epoch,
        "step": state.step,
        "bank_momentum": state.bank.momentum,
        "rng_state": state.rng.bit_generator.state,
        "blocks": [[name, len(p.weights)] for name, p in state.params.items()],
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return ``(state, cfg)`` from :func:`save_checkpoint` output."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file")
        groups = {}
        for group in ("params", "velocity"):
            groups[group] = {
                name: Parameters([z[f"{group}/{name}/W{l}"].astype(np.float64) for l in range(n)],
                                 [z[f"{group}/{name}/b{l}"].astype(np.float64) for l in range(n)])
                for name, n in meta["blocks"]
            }
        bank = PrototypeBank(z["bank/centroids"].astype(np.float64), meta["bank_momentum"],
                             z["bank/initialized"] > 0)
    cfg = TrainConfig.from_flat(meta["config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(groups["params"], groups["velocity"], bank, NetConfig(**meta["net"]),
                       meta["epoch"], meta["step"], rng)
    return state, cfg
