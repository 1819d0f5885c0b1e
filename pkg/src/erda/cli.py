"""Command-line entry point: ``erda <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import experiments, gradcheck
from .data import ParseError, WeakSetting, gen_blob_scene, load_mask, load_scene, mask_labels, save_mask, save_scene
from .gradgrid import GradGridSpec, GridExportError, export_gradient_grid, gradient_grid, zero_on_uniform_line
from .losses import Distance, softmax
from .metrics import confusion_matrix, mean_pseudo_entropy, metrics
from .pseudo import cosine_scores
from .train import Batch, ConfigError, TrainConfig, fit, format_log, load_checkpoint, predict, save_checkpoint

log = logging.getLogger("erda")

DATA_KEYS = ("data_dir", "train_scenes", "train_masks", "val_scenes")


class CliError(Exception):
    pass


def read_config(path):
    """Parse a flat TOML file into ``(TrainConfig, data keys)``."""
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"{path}: {exc}") from None
    for key, value in raw.items():
        if isinstance(value, dict):
            raise CliError(f"{path}: config key {key!r}: tables are not supported, keys must be flat")
    data = {k: raw.pop(k) for k in DATA_KEYS if k in raw}
    try:
        cfg = TrainConfig.from_flat(raw)
    except ConfigError as exc:
        raise CliError(f"{path}: {exc}") from None
    return cfg, data


def _resolve_data(data, base_dir):
    def paths(key):
        value = data.get(key, [])
        value = [value] if isinstance(value, str) else value
        return [base_dir / p for p in value]

    if "data_dir" in data:
        root = base_dir / data["data_dir"]
        scenes = sorted(root.glob("scene_*.txt"))
        masks = sorted(root.glob("mask_*.txt"))
        val = sorted(root.glob("val_*.txt"))
    else:
        scenes, masks, val = paths("train_scenes"), paths("train_masks"), paths("val_scenes")
    if not scenes:
        raise CliError("config names no training scenes (set data_dir or train_scenes)")
    if len(masks) != len(scenes):
        raise CliError(f"{len(scenes)} training scenes but {len(masks)} masks")
    scenes = [load_scene(p) for p in scenes]
    masks = [load_mask(p, s.n_points) for p, s in zip(masks, scenes)]
    return scenes, masks, [load_scene(p) for p in val]


def cmd_gen(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setting = WeakSetting.parse(args.weak)
    for i in range(args.scenes):
        scene = gen_blob_scene(args.classes, args.points_per_class, args.feature_dim, args.noise, [args.seed, i])
        save_scene(scene, out / f"scene_{i:03d}.txt")
        save_mask(mask_labels(scene, setting, [args.seed, i]), out / f"mask_{i:03d}.txt")
    for i in range(args.val_scenes):
        scene = gen_blob_scene(args.classes, args.points_per_class, args.feature_dim, args.noise, [args.seed, 1000 + i])
        save_scene(scene, out / f"val_{i:03d}.txt")
    print(f"wrote {args.scenes} scenes, {args.scenes} masks, {args.val_scenes} validation scenes to {out}")
    return 0


def cmd_train(args):
    config_path = Path(args.config)
    cfg, data = read_config(config_path)
    scenes, masks, val = _resolve_data(data, config_path.parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    mode = "w"
    if args.resume:
        state, saved = load_checkpoint(args.resume)
        if saved != cfg:
            raise CliError(f"{args.resume}: checkpoint was trained with a different config")
        mode = "a"
    state, records = fit(scenes, masks, cfg, val, state=state, stop_after=args.stop_after)
    with open(out / "metrics.jsonl", mode) as fh:
        fh.write(format_log(records))
    save_checkpoint(out / "checkpoint.npz", state, cfg)
    last = records[-1] if records else {}
    print(f"epoch {state.epoch}/{cfg.epochs} loss={last.get('loss')} val_miou={last.get('val_miou')}")
    return 0


def cmd_eval(args):
    state, cfg = load_checkpoint(args.checkpoint)
    scenes = [load_scene(p) for p in args.scene]
    if args.mask and len(args.mask) != len(scenes):
        raise CliError("give one --mask per --scene or none")
    masks = [load_mask(p, s.n_points) for p, s in zip(args.mask, scenes)] if args.mask else [None] * len(scenes)
    K = state.bank.num_classes
    cm = np.zeros((K, K), dtype=np.int64)
    pseudo = []
    for scene, mask in zip(scenes, masks):
        batch = Batch.from_scene(scene, mask, cfg.knn_k)
        pred, proj = predict(state, batch)
        cm += confusion_matrix(scene.gt_labels, pred, K)
        if state.bank.ready:
            cos, _ = cosine_scores(proj[~batch.labeled], state.bank.centroids)
            pseudo.append(softmax(cos / cfg.temperature))
    ent = mean_pseudo_entropy(np.vstack(pseudo)) if pseudo and sum(map(len, pseudo)) else None
    text = json.dumps(metrics(cm, ent).to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args):
    results = gradcheck.run_all(trials=args.trials)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 1 if failed else 0


def cmd_gradgrid(args):
    out = Path(args.out)
    distances = list(Distance) if args.distance == "all" else [Distance(d) for d in args.distance.split(",")]
    lams = [float(v) for v in args.lambdas.split(",")]
    if out.suffix == "" or len(distances) * len(lams) > 1:
        out.mkdir(parents=True, exist_ok=True)
    for d in distances:
        for lam in lams:
            spec = GradGridSpec(d, lam, args.resolution, args.epsilon)
            path = out / f"grid_{d.value}_lam{lam:g}.txt" if out.is_dir() else out
            export_gradient_grid(spec, path)
            zero = zero_on_uniform_line(*gradient_grid(spec))
            print(f"{path}  zero on q=0.5: {'yes' if zero else 'no'}")
    return 0


def cmd_ablate(args):
    base = experiments.BENCHMARK_CONFIG
    if args.config:
        cfg, data = read_config(args.config)
        if data:
            raise CliError(f"{args.config}: config key {next(iter(data))!r} is not used by ablate")
        base = cfg
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    try:
        rows = experiments.ablate(base, args.axis, values, range(args.seeds))
    except ConfigError as exc:
        raise CliError(f"--values: {exc}") from None
    table = experiments.format_table(args.axis, rows)
    if args.out:
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="erda", description="Entropy-regularized pseudo-label training on synthetic point clouds.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate scenes and weak-label masks")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenes", type=int, default=5)
    p.add_argument("--val-scenes", type=int, default=0)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--points-per-class", type=int, default=200)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.4)
    p.add_argument("--weak", default="1%", help="'1pt' or a label fraction such as 0.01 or 1%%")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train from a config file; writes checkpoint.npz and metrics.jsonl")
    p.add_argument("--config", required=True, help="flat TOML config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, help="run at most this many epochs now")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", action="append", required=True, help="scene file (repeatable)")
    p.add_argument("--mask", action="append", help="mask per scene; masked points are left out of the entropy")
    p.add_argument("--out", help="report path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every analytic gradient")
    p.add_argument("--trials", type=int, default=100, help="random pairs per (distance, lambda, K)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gradgrid", help="export binary gradient-field grids")
    p.add_argument("--out", required=True, help="directory, or a file when exporting one grid")
    p.add_argument("--distance", default="all", help="comma list of KLpq,KLqp,JS,MSE or 'all'")
    p.add_argument("--lambda", dest="lambdas", default="0,1,2", help="comma list of lambda values")
    p.add_argument("--resolution", type=int, default=101)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradgrid)

    p = sub.add_parser("ablate", help="sweep one config axis on the standard benchmark")
    p.add_argument("--axis", required=True, choices=sorted(experiments.AXES))
    p.add_argument("--values", required=True, help="comma list, e.g. topk:64,topk:1000,dense")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--config", help="base config (default: benchmark settings)")
    p.add_argument("--out", help="also write the table here")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ParseError, GridExportError, ValueError, OSError) as exc:
        print(f"erda: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
