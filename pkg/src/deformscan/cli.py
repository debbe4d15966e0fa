"""Command-line entrypoint: data generation, training, evaluation, cost
accounting, gradient checking, and ablations.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Settings come from
an INI config file (sections [model], [train], [data]) overridden by flags.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .cost_model import decoder_cost_report, efficiency_report
from .dmf_decoder import DecoderConfig
from .synth_data import CameraModel, SceneConfig, gen_dataset
from .tensor import Tensor, grad_check
from .train_eval import (
    ABLATION_AXES,
    DESK_TRAIN,
    ModelConfig,
    SegDataset,
    TrainConfig,
    ablate,
    evaluate,
    load_checkpoint,
    render_ablation,
    train,
)


@dataclass
class DataConfig:
    height: int = 64
    width: int = 128
    n_samples: int = 500
    camera: str = "equidistant_fisheye"
    fov_deg: float = 120.0
    num_classes: int = 6
    master_seed: int = 0


@dataclass
class RunConfig:
    """Merged view of model, training and data settings."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: replace(DESK_TRAIN))
    data: DataConfig = field(default_factory=DataConfig)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _parse_value(raw: str, ftype):
    raw = raw.strip()
    if ftype is bool or ftype == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "tuple" in str(ftype):
        return tuple(int(v) for v in raw.split(","))
    if ftype is int or ftype == "int":
        return int(raw)
    if ftype is float or ftype == "float":
        return float(raw)
    return raw


def load_run_config(path: str | None) -> RunConfig:
    """INI file with flat keys under [model], [train], [data]; unknown keys rejected."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        known = {f.name: f for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            current = getattr(target, key)
            ftype = type(current) if current is not None else str
            setattr(target, key, _parse_value(raw, ftype))
    return cfg


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    mapping = {
        "seed": ("train", "seed"),
        "iters": ("train", "total_iters"),
        "lr": ("train", "lr"),
        "batch_size": ("train", "batch_size"),
        "warmup": ("train", "warmup_iters"),
        "channels": ("model", "channels"),
        "num_classes": ("model", "num_classes"),
        "encoder": ("model", "encoder"),
        "directions": ("model", "scan_directions"),
        "deformable": ("model", "deformable"),
        "upsample": ("model", "upsample"),
        "n": ("data", "n_samples"),
        "camera": ("data", "camera"),
        "height": ("data", "height"),
        "width": ("data", "width"),
    }
    for flag, (section, name) in mapping.items():
        val = getattr(args, flag, None)
        if val is not None:
            setattr(getattr(cfg, section), name, val)
    cfg.data.num_classes = cfg.model.num_classes
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _channels(arg: str) -> tuple[int, ...]:
    return tuple(int(v) for v in arg.split(","))


def build_parser() -> _Parser:
    parser = _Parser(prog="deformscan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-data", help="render a synthetic wide-FoV dataset")
    common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--camera", choices=("pinhole", "equidistant_fisheye", "equirectangular"))
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)

    p = sub.add_parser("train", help="train on a generated dataset")
    common(p)
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--channels", type=_channels)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--encoder", choices=("conv", "ss2d"))
    p.add_argument("--directions", type=int, choices=(1, 2, 4))
    p.add_argument("--deformable", type=lambda s: _parse_value(s, bool))
    p.add_argument("--upsample", choices=("pixelshuffle", "bilinear", "bicubic"))

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--channels", type=_channels)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--encoder", choices=("conv", "ss2d"))
    p.add_argument("--directions", type=int, choices=(1, 2, 4))
    p.add_argument("--deformable", type=lambda s: _parse_value(s, bool))
    p.add_argument("--upsample", choices=("pixelshuffle", "bilinear", "bicubic"))

    p = sub.add_parser("count", help="decoder parameter/FLOP report with target deltas")
    common(p)
    p.add_argument("--channels", type=_channels, default=(96, 192, 384, 768))
    p.add_argument("--res", type=int, default=512)
    p.add_argument("--num-classes", dest="num_classes", type=int, default=13)
    p.add_argument("--kv", action="store_true", help="emit machine-readable key=value lines")

    p = sub.add_parser("gradcheck", help="finite-difference check of one block")
    common(p)
    p.add_argument("--module", required=True,
                   choices=("conv", "linear", "ss2d", "dcn", "shuffle", "dmf", "e2e"))
    p.add_argument("--eps", type=float, default=1e-5)

    p = sub.add_parser("ablate", help="train variants along one axis over several seeds")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--seeds", type=lambda s: tuple(int(v) for v in s.split(",")), default=(0, 1, 2))
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    return parser


# -- subcommand bodies -----------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    out = Path(args.out or "data")
    scene = SceneConfig(height=cfg.data.height, width=cfg.data.width,
                        num_classes=cfg.data.num_classes)
    camera = CameraModel(cfg.data.camera, fov_deg=cfg.data.fov_deg)
    seed = cfg.data.master_seed if args.seed is None else args.seed
    manifest = gen_dataset(cfg.data.n_samples, out, scene, camera, master_seed=seed)
    print(f"wrote {cfg.data.n_samples} samples to {manifest}")
    return 0


def _cmd_train(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    dataset = SegDataset(args.data)
    cfg.model.num_classes = dataset.num_classes
    out = Path(args.out or "runs/train")
    model, lines = train(cfg.model, dataset, cfg.train, out_dir=out)
    metrics = evaluate(model, dataset, "val")
    (out / "metrics.txt").write_text(metrics.render() + "\n")
    (out / "metrics.kv").write_text(metrics.render_kv() + "\n")
    print(lines[-1])
    print(metrics.render())
    print(f"checkpoint: {out / 'checkpoint.dmck'}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    dataset = SegDataset(args.data)
    cfg.model.num_classes = dataset.num_classes
    model = load_checkpoint(args.checkpoint, cfg.model)
    metrics = evaluate(model, dataset, args.split)
    print(metrics.render())
    print(metrics.render_kv())
    return 0


def _cmd_count(args) -> int:
    cfg = DecoderConfig(channels=args.channels, num_classes=args.num_classes)
    if args.kv:
        print(decoder_cost_report(cfg, args.res).render_kv())
    else:
        print(efficiency_report(cfg, args.res))
    return 0


def _cmd_gradcheck(args) -> int:
    from .backbone import FeaturePyramid
    from .deform_conv import DeformConv2d
    from .dmf_decoder import DMFBlock, pixel_shuffle
    from .ssm_scan import SS2D
    from .train_eval import build_model

    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    name = args.module

    def scalar(out):
        return (out * T.sigmoid(out)).sum()

    if name == "conv":
        x = Tensor(rng.normal(size=(1, 3, 6, 6)), dtype=np.float64, requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), dtype=np.float64, requires_grad=True)
        err = grad_check(lambda x, w: scalar(T.conv2d(x, w, padding=1)), [x, w], eps=args.eps)
    elif name == "linear":
        x = Tensor(rng.normal(size=(5, 7)), dtype=np.float64, requires_grad=True)
        w = Tensor(rng.normal(size=(3, 7)), dtype=np.float64, requires_grad=True)
        err = grad_check(lambda x, w: scalar(T.linear(x, w)), [x, w], eps=args.eps)
    elif name == "shuffle":
        x = Tensor(rng.normal(size=(1, 8, 3, 4)), dtype=np.float64, requires_grad=True)
        err = grad_check(lambda x: scalar(pixel_shuffle(x)), [x], eps=args.eps)
    elif name == "ss2d":
        block = SS2D(4, d_state=4, rng=rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(1, 4, 3, 4)), dtype=np.float64, requires_grad=True)
        inputs = [x] + block.parameters()
        err = grad_check(lambda *a: scalar(block(a[0])), inputs, eps=args.eps,
                         max_coords_per_input=20, rng=rng)
    elif name == "dcn":
        from .deform_conv import perturb_predictors

        block = DeformConv2d(3, 3, rng=rng, dtype=np.float64)
        perturb_predictors(block, rng)
        x = Tensor(rng.normal(size=(1, 3, 4, 5)), dtype=np.float64, requires_grad=True)
        inputs = [x] + block.parameters()
        err = grad_check(lambda *a: scalar(block(a[0])), inputs, eps=args.eps,
                         max_coords_per_input=20, rng=rng)
    elif name == "dmf":
        from .deform_conv import perturb_predictors

        cfg = DecoderConfig(channels=(4, 8, 16, 32), num_classes=6, d_state=2, fusion_depth=1)
        block = DMFBlock(8, 4, cfg, last=False, rng=rng, dtype=np.float64)
        perturb_predictors(block, rng)
        e = Tensor(rng.normal(size=(1, 8, 4, 4)), dtype=np.float64, requires_grad=True)
        d = Tensor(rng.normal(size=(1, 8, 4, 4)), dtype=np.float64, requires_grad=True)
        inputs = [e, d] + block.parameters()
        err = grad_check(lambda *a: scalar(block(a[0], a[1])), inputs, eps=args.eps,
                         max_coords_per_input=6, rng=rng)
    else:  # e2e
        from .deform_conv import perturb_predictors

        mcfg = ModelConfig(channels=(4, 8, 16, 32), num_classes=4, depths=(1, 1, 1, 1), d_state=2)
        model = build_model(mcfg, 0, dtype=np.float64)
        perturb_predictors(model, rng)
        x = Tensor(rng.normal(size=(1, 3, 32, 32)), dtype=np.float64, requires_grad=True)
        inputs = [x] + model.parameters()
        err = grad_check(lambda *a: scalar(model(a[0])), inputs, eps=args.eps,
                         max_coords_per_input=2, rng=rng)
    passed = err < 1e-4
    print(f"module={name} max_rel_error={err:.3e} threshold=1e-4 {'PASS' if passed else 'FAIL'}")
    return 0 if passed else 2


def _cmd_ablate(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    dataset = SegDataset(args.data)
    cfg.model.num_classes = dataset.num_classes
    rows = ablate(args.axis, cfg.model, cfg.train, dataset, seeds=args.seeds)
    text = render_ablation(args.axis, rows)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation_{args.axis}.txt").write_text(text + "\n")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "count": _cmd_count,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, KeyError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
