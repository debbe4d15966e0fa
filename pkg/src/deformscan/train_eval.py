"""Desk-scale training, segmentation metrics, and the ablation runner.

Training uses decoupled-weight-decay adaptive moments, a linear warmup
followed by polynomial decay, cross-entropy ignoring label 255, and global
gradient-norm clipping. Everything is deterministic given the seed.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import Encoder
from .dmf_decoder import Decoder, DecoderConfig, SegHead
from .nn import Module
from .synth_data import IGNORE_ID, load_manifest, load_sample
from .tensor import Tensor, load_archive, save_archive


@dataclass
class ModelConfig:
    """Assembly settings for encoder, decoder and head."""

    channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    num_classes: int = 6
    encoder: str = "conv"
    depths: tuple[int, int, int, int] = (2, 2, 4, 2)
    d_state: int = 8
    expand: float = 1.0
    scan_directions: int = 4
    deformable: bool = True
    upsample: str = "pixelshuffle"
    fusion_depth: int = 2

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            channels=tuple(self.channels),
            num_classes=self.num_classes,
            fusion_depth=self.fusion_depth,
            scan_directions=self.scan_directions,
            deformable=self.deformable,
            upsample=self.upsample,
            d_state=self.d_state,
            expand=self.expand,
        )


@dataclass
class TrainConfig:
    lr: float = 6e-5
    weight_decay: float = 0.01
    warmup_iters: int = 1500
    total_iters: int = 80000
    poly_power: float = 0.9
    batch_size: int = 2
    seed: int = 0
    grad_clip: float = 1.0
    log_every: int = 25

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_iters > self.total_iters:
            raise ValueError("warmup cannot exceed the total iteration count")


# desk recipe: enough signal in 2k iterations on a 500-sample synthetic set
DESK_TRAIN = TrainConfig(lr=2e-3, warmup_iters=100, total_iters=2000)


class SegModel(Module):
    def __init__(self, cfg: ModelConfig, *, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.encoder = Encoder(channels=cfg.channels, depths=cfg.depths, kind=cfg.encoder,
                               d_state=cfg.d_state, rng=rng, dtype=dtype)
        self.decoder = Decoder(cfg.decoder_config(), rng=rng, dtype=dtype)
        self.head = SegHead(cfg.channels[0], cfg.num_classes, rng=rng, dtype=dtype)

    def __call__(self, images: Tensor) -> Tensor:
        return self.head(self.decoder(self.encoder(images)))


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> SegModel:
    return SegModel(cfg, rng=np.random.default_rng(seed), dtype=dtype)


# -- loss ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore: int = IGNORE_ID) -> Tensor:
    """Mean cross-entropy over non-ignored pixels; fused forward/backward."""
    b, k, h, w = logits.shape
    lab = labels.reshape(b, h, w).astype(np.int64)
    valid = lab != ignore
    count = max(1, int(valid.sum()))
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    labc = np.where(valid, lab, 0)[:, None]
    picked = np.take_along_axis(z - zmax - np.log(sez), labc, axis=1)[:, 0]
    loss = -float((picked * valid).sum() / count)

    def backward(g):
        grad = ez / sez
        np.put_along_axis(grad, labc, np.take_along_axis(grad, labc, axis=1) - 1.0, axis=1)
        grad *= valid[:, None] * (float(g) / count)
        logits.accumulate(grad.astype(logits.data.dtype))

    return Tensor.from_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward, "cross_entropy")


# -- optimizer and schedule ------------------------------------------------------------


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: list[Tensor], weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def lr_at(cfg: TrainConfig, it: int) -> float:
    """Linear warmup to cfg.lr, then (1 - t/T)^power decay to exactly zero."""
    if cfg.warmup_iters > 0 and it < cfg.warmup_iters:
        return cfg.lr * it / cfg.warmup_iters
    span = max(1, cfg.total_iters - cfg.warmup_iters)
    frac = (it - cfg.warmup_iters) / span
    return cfg.lr * (1.0 - frac) ** cfg.poly_power


# -- data ---------------------------------------------------------------------------


class SegDataset:
    """Manifest-backed dataset, fully loaded into memory."""

    def __init__(self, manifest_path):
        self.manifest_path = Path(manifest_path)
        manifest = load_manifest(manifest_path)
        self.num_classes = len(manifest["classes"])
        images, labels, splits = [], [], []
        for entry in manifest["samples"]:
            image, label = load_sample(manifest_path, entry)
            images.append(image)
            labels.append(label)
            splits.append(entry["split"])
        self.images = np.stack(images).astype(np.float32)
        self.labels = np.stack(labels)
        self.train_indices = [i for i, s in enumerate(splits) if s == "train"]
        self.val_indices = [i for i, s in enumerate(splits) if s == "val"]

    def indices(self, split: str) -> list[int]:
        if split == "train":
            return self.train_indices
        if split == "val":
            return self.val_indices
        raise ValueError(f"unknown split {split!r}")


# -- metrics ---------------------------------------------------------------------------


@dataclass
class Metrics:
    confusion: np.ndarray
    per_class_iou: np.ndarray = field(init=False)
    miou: float = field(init=False)
    macc: float = field(init=False)
    aacc: float = field(init=False)

    def __post_init__(self):
        conf = self.confusion.astype(np.float64)
        tp = np.diag(conf)
        gt = conf.sum(axis=1)
        pred = conf.sum(axis=0)
        union = gt + pred - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(union > 0, tp / np.maximum(union, 1e-12), np.nan)
            acc = np.where(gt > 0, tp / np.maximum(gt, 1e-12), np.nan)
        self.per_class_iou = iou
        self.miou = float(np.nanmean(iou) * 100.0) if np.any(union > 0) else 0.0
        self.macc = float(np.nanmean(acc) * 100.0) if np.any(gt > 0) else 0.0
        total = conf.sum()
        self.aacc = float(tp.sum() / total * 100.0) if total > 0 else 0.0

    def render(self) -> str:
        lines = [f"{'class':<10}{'iou':>8}"]
        for i, iou in enumerate(self.per_class_iou):
            val = f"{iou * 100:6.2f}" if np.isfinite(iou) else "   n/a"
            lines.append(f"class_{i:<4}{val:>8}")
        lines.append(f"mIoU {self.miou:6.2f}  mAcc {self.macc:6.2f}  aAcc {self.aacc:6.2f}")
        return "\n".join(lines)

    def render_kv(self) -> str:
        lines = [f"miou={self.miou:.4f}", f"macc={self.macc:.4f}", f"aacc={self.aacc:.4f}"]
        for i, iou in enumerate(self.per_class_iou):
            if np.isfinite(iou):
                lines.append(f"iou.class_{i}={iou * 100:.4f}")
        return "\n".join(lines)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore: int = IGNORE_ID) -> np.ndarray:
    valid = gt != ignore
    idx = gt[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


# -- train / evaluate -------------------------------------------------------------------


def train(model_cfg: ModelConfig, dataset: SegDataset, cfg: TrainConfig,
          out_dir=None) -> tuple[SegModel, list[str]]:
    """Train on the manifest's train split; returns the model and loss-log lines.

    When ``out_dir`` is given, writes ``loss_log.txt`` and ``checkpoint.dmck``.
    """
    if model_cfg.num_classes != dataset.num_classes:
        raise ValueError(
            f"model has {model_cfg.num_classes} classes, dataset {dataset.num_classes}"
        )
    model = build_model(model_cfg, cfg.seed)
    params = model.parameters()
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    train_idx = np.array(dataset.indices("train"))
    if len(train_idx) == 0:
        raise ValueError("empty training split")
    lines = ["iter, lr, loss"]
    queue: list[int] = []
    for it in range(cfg.total_iters):
        while len(queue) < cfg.batch_size:
            queue.extend(rng.permutation(len(train_idx)).tolist())
        picks = train_idx[[queue.pop(0) for _ in range(cfg.batch_size)]]
        images = Tensor(dataset.images[picks])
        labels = dataset.labels[picks]
        logits = model(images)
        loss = softmax_cross_entropy(logits, labels)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise RuntimeError(
                f"non-finite loss {loss_val} at iteration {it} "
                f"(lr {lr_at(cfg, it):.3e}, batch {picks.tolist()})"
            )
        for p in params:
            p.grad = None
        loss.backward()
        clip_grad_norm(params, cfg.grad_clip)
        opt.step(lr_at(cfg, it))
        if it % cfg.log_every == 0 or it == cfg.total_iters - 1:
            lines.append(f"{it}, {lr_at(cfg, it):.8e}, {loss_val:.6f}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "loss_log.txt").write_text("\n".join(lines) + "\n")
        save_checkpoint(out / "checkpoint.dmck", model)
    return model, lines


def save_checkpoint(path, model: SegModel) -> None:
    save_archive(path, list(model.state_dict().items()))


def load_checkpoint(path, model_cfg: ModelConfig) -> SegModel:
    model = build_model(model_cfg, seed=0)
    model.load_state_dict(load_archive(path))
    return model


def predict(model: SegModel, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Arg-max class map for a stack of images."""
    preds = []
    for lo in range(0, len(images), batch_size):
        logits = model(Tensor(images[lo : lo + batch_size]))
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds, axis=0)


def evaluate(model: SegModel, dataset: SegDataset, split: str = "val") -> Metrics:
    num_classes = model.cfg.num_classes
    if num_classes != dataset.num_classes:
        raise ValueError("class count mismatch between model head and dataset")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    idx = dataset.indices(split)
    preds = predict(model, dataset.images[idx])
    for p, g in zip(preds, dataset.labels[idx]):
        conf += confusion_matrix(p, g, num_classes)
    return Metrics(conf)


# -- ablations ---------------------------------------------------------------------------

ABLATION_AXES = {
    "scan": [("uni-direction", {"scan_directions": 1}),
             ("bi-direction", {"scan_directions": 2}),
             ("quadri-direction", {"scan_directions": 4})],
    "deformable": [("deformable-off", {"deformable": False}),
                   ("deformable-on", {"deformable": True})],
    "upsample": [("bilinear", {"upsample": "bilinear"}),
                 ("bicubic", {"upsample": "bicubic"}),
                 ("pixelshuffle", {"upsample": "pixelshuffle"})],
}


def ablate(axis: str, model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: SegDataset,
           seeds=(0, 1, 2)) -> list[dict]:
    """Train each variant per seed; report median mIoU/mAcc per variant."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    if len(seeds) < 3:
        raise ValueError("ablations need at least 3 seeds")
    rows = []
    for name, overrides in ABLATION_AXES[axis]:
        cfg = replace(model_cfg, **overrides)
        mious, maccs = [], []
        for seed in seeds:
            model, _ = train(cfg, dataset, replace(train_cfg, seed=seed))
            metrics = evaluate(model, dataset, "val")
            mious.append(metrics.miou)
            maccs.append(metrics.macc)
        rows.append(
            {
                "variant": name,
                "miou_median": statistics.median(mious),
                "macc_median": statistics.median(maccs),
                "miou_per_seed": mious,
                "macc_per_seed": maccs,
            }
        )
    return rows


def train_variant(manifest_path, model_overrides: dict, train_overrides: dict,
                  seed: int) -> tuple[float, float]:
    """Train one model variant and return (val mIoU, val mAcc).

    Convenience for ablation drivers and worker processes.
    """
    dataset = SegDataset(manifest_path)
    model_cfg = replace(ModelConfig(), **model_overrides)
    train_cfg = replace(TrainConfig(**train_overrides), seed=seed)
    model, _ = train(model_cfg, dataset, train_cfg)
    metrics = evaluate(model, dataset, "val")
    return metrics.miou, metrics.macc


def render_ablation(axis: str, rows: list[dict]) -> str:
    lines = [f"{axis:<18}{'mIoU':>8}{'mAcc':>8}   per-seed mIoU"]
    for row in rows:
        per_seed = ", ".join(f"{v:.2f}" for v in row["miou_per_seed"])
        lines.append(
            f"{row['variant']:<18}{row['miou_median']:>8.2f}{row['macc_median']:>8.2f}   [{per_seed}]"
        )
    return "\n".join(lines)
