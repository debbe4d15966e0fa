"""Procedural wide-FoV segmentation data.

Scenes of labeled geometric shapes are rendered with a pinhole camera and
rewarped through an equidistant fisheye (image radius proportional to the
incidence angle) or an equirectangular panorama. Images are resampled
bilinearly, labels with nearest neighbor, and pixels without source content
carry the ignore id 255.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import load_tensor, save_tensor

IGNORE_ID = 255

CAMERA_KINDS = ("pinhole", "equidistant_fisheye", "equirectangular")

DEFAULT_CLASS_SHAPES = {1: "disc", 2: "rect", 3: "bar", 4: "ellipse", 5: "cross"}

# distinguishable but overlapping base colors; shape matters near the overlaps
CLASS_COLORS = {
    0: (0.22, 0.23, 0.27),
    1: (0.80, 0.22, 0.18),
    2: (0.20, 0.68, 0.30),
    3: (0.22, 0.35, 0.82),
    4: (0.82, 0.72, 0.20),
    5: (0.34, 0.42, 0.80),
}


@dataclass
class CameraModel:
    kind: str = "equidistant_fisheye"
    fov_deg: float = 120.0
    focal: float | None = None  # pixels per radian for fisheye; derived if None

    def __post_init__(self):
        if self.kind not in CAMERA_KINDS:
            raise ValueError(f"unknown camera kind {self.kind!r}")
        if self.kind == "equidistant_fisheye" and self.fov_deg > 180.0:
            raise ValueError("fisheye field of view cannot exceed 180 degrees")


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 128
    num_classes: int = 6
    class_shapes: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_CLASS_SHAPES))
    min_shapes: int = 8
    max_shapes: int = 14
    color_jitter: float = 0.10
    pixel_noise: float = 0.02


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: np.ndarray  # (H, W) uint8 class ids, 255 = ignore
    seed: int
    camera: str = "pinhole"


# -- scene rendering ----------------------------------------------------------------


def _paint_shape(label, mask, cls):
    label[mask] = cls


def _shape_mask(kind, yy, xx, rng, h, w):
    cy = rng.uniform(0.1 * h, 0.9 * h)
    cx = rng.uniform(0.1 * w, 0.9 * w)
    ang = rng.uniform(0, math.pi)
    ca, sa = math.cos(ang), math.sin(ang)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    scale = min(h, w)
    if kind == "disc":
        r = rng.uniform(0.08, 0.22) * scale
        return u * u + v * v < r * r
    if kind == "rect":
        a = rng.uniform(0.10, 0.26) * scale
        b = rng.uniform(0.08, 0.20) * scale
        return (np.abs(u) < a) & (np.abs(v) < b)
    if kind == "bar":
        a = rng.uniform(0.35, 0.75) * scale
        b = rng.uniform(0.020, 0.045) * scale
        return (np.abs(u) < a) & (np.abs(v) < b)
    if kind == "ellipse":
        a = rng.uniform(0.12, 0.30) * scale
        b = rng.uniform(0.06, 0.14) * scale
        return (u / a) ** 2 + (v / b) ** 2 < 1.0
    if kind == "cross":
        a = rng.uniform(0.25, 0.55) * scale
        b = rng.uniform(0.022, 0.05) * scale
        return ((np.abs(u) < a) & (np.abs(v) < b)) | ((np.abs(v) < a) & (np.abs(u) < b))
    raise ValueError(f"unknown shape kind {kind!r}")


def render_scene(seed: int, cfg: SceneConfig) -> Sample:
    """Deterministic pinhole scene; background is class 0."""
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    label = np.zeros((h, w), dtype=np.uint8)
    image = np.empty((3, h, w), dtype=np.float64)
    base = np.array(CLASS_COLORS[0])
    grad = 0.08 * (yy / max(h - 1, 1) - 0.5)
    for c in range(3):
        image[c] = base[c] + grad
    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    class_ids = sorted(cfg.class_shapes)
    for _ in range(n_shapes):
        cls = int(rng.choice(class_ids))
        mask = _shape_mask(cfg.class_shapes[cls], yy, xx, rng, h, w)
        _paint_shape(label, mask, cls)
        color = np.array(CLASS_COLORS[cls]) + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3)
        for c in range(3):
            image[c][mask] = color[c]
    image += rng.normal(scale=cfg.pixel_noise, size=image.shape)
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32), label, seed, "pinhole")


# -- resampling helpers ---------------------------------------------------------------


def _bilinear_image(image: np.ndarray, sy: np.ndarray, sx: np.ndarray, valid: np.ndarray) -> np.ndarray:
    _, h, w = image.shape
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = (sy - y0)[None]
    fx = (sx - x0)[None]
    out = np.zeros((image.shape[0],) + sy.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            yc, xc = np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)
            out += wy * wx * image[:, yc, xc] * ok[None]
    return (out * valid[None]).astype(np.float32)


def _nearest_label(label: np.ndarray, sy: np.ndarray, sx: np.ndarray, valid: np.ndarray) -> np.ndarray:
    h, w = label.shape
    yi = np.rint(sy).astype(np.int64)
    xi = np.rint(sx).astype(np.int64)
    inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w) & valid
    out = np.full(sy.shape, IGNORE_ID, dtype=np.uint8)
    out[inside] = label[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)][inside]
    return out


# -- camera warps ----------------------------------------------------------------------


def warp_fisheye(sample: Sample, model: CameraModel) -> Sample:
    """Equidistant fisheye r = f * theta, inverse-mapped from the pinhole source.

    Pixels beyond the image circle, or whose ray leaves the source frame,
    are labeled ignore.
    """
    if model.kind != "equidistant_fisheye":
        raise ValueError("warp_fisheye expects an equidistant fisheye model")
    img, label = sample.image, sample.label
    _, h, w = img.shape
    cy, cx = h / 2.0, w / 2.0
    theta_max = math.radians(model.fov_deg) / 2.0
    r_max = w / 2.0
    f = model.focal if model.focal is not None else r_max / theta_max
    # source pinhole focal: the widest covered angle lands on the half-width
    cov = min(theta_max, math.radians(80.0))
    f_src = (w / 2.0) / math.tan(cov)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)
    theta = r / f
    inside = theta <= theta_max
    phi = np.arctan2(dy, dx)
    rp = f_src * np.tan(np.minimum(theta, math.radians(89.0)))
    sy = cy + rp * np.sin(phi)
    sx = cx + rp * np.cos(phi)
    image = _bilinear_image(img.astype(np.float64), sy, sx, inside)
    lab = _nearest_label(label, sy, sx, inside)
    return Sample(image, lab, sample.seed, "equidistant_fisheye")


def warp_equirect(sample: Sample, model: CameraModel) -> Sample:
    """Resample the source, read as a sinusoidal projection of the sphere,
    onto the equirectangular longitude/latitude grid.

    Each output row at latitude phi reads a horizontal window of the source
    row compressed by cos(phi), so the equator row is the identity and the
    pole rows collapse toward a single source column (pole stretching).
    """
    if model.kind != "equirectangular":
        raise ValueError("warp_equirect expects an equirectangular model")
    img, label = sample.image, sample.label
    _, h, w = img.shape
    cx = w / 2.0

    rows = np.arange(h)[:, None].astype(np.float64)
    cols = np.arange(w)[None, :].astype(np.float64)
    lat = (0.5 - rows / h) * math.pi
    sy = np.broadcast_to(rows, (h, w))
    sx = cx + (cols - cx) * np.cos(lat)
    valid = np.ones_like(sx, dtype=bool)
    image = _bilinear_image(img.astype(np.float64), sy, sx, valid)
    lab = _nearest_label(label, sy, sx, valid)
    return Sample(image, lab, sample.seed, "equirectangular")


def warp(sample: Sample, model: CameraModel) -> Sample:
    if model.kind == "pinhole":
        return sample
    if model.kind == "equidistant_fisheye":
        return warp_fisheye(sample, model)
    return warp_equirect(sample, model)


# -- dataset generation -----------------------------------------------------------------


def gen_dataset(n: int, out_dir, cfg: SceneConfig, camera: CameraModel,
                master_seed: int = 0, train_fraction: float = 0.8) -> Path:
    """Render, warp and serialize n samples; returns the manifest path.

    Labels are stored as float32 tensor files holding integer ids; the
    manifest is JSON with an 80/20 train/val split by default.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train = int(round(n * train_fraction))
    entries = []
    for i in range(n):
        sample = warp(render_scene(master_seed + i, cfg), camera)
        image_path = out / f"sample_{i:05d}_image.dmts"
        label_path = out / f"sample_{i:05d}_label.dmts"
        save_tensor(image_path, sample.image)
        save_tensor(label_path, sample.label.astype(np.float32))
        entries.append(
            {
                "image_path": image_path.name,
                "label_path": label_path.name,
                "split": "train" if i < n_train else "val",
                "seed": sample.seed,
            }
        )
    manifest = {
        "version": 1,
        "camera": camera.kind,
        "fov_deg": camera.fov_deg,
        "height": cfg.height,
        "width": cfg.width,
        "master_seed": master_seed,
        "classes": [f"class_{i}" for i in range(cfg.num_classes)],
        "ignore_id": IGNORE_ID,
        "samples": entries,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def load_manifest(manifest_path) -> dict:
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("version") != 1:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    return manifest


def load_sample(manifest_path, entry: dict) -> tuple[np.ndarray, np.ndarray]:
    base = Path(manifest_path).parent
    image = load_tensor(base / entry["image_path"])
    label = load_tensor(base / entry["label_path"]).astype(np.int64)
    return image, label
