"""Synthetic aligned infrared/visible dataset.

Each scene is a smooth field of Gaussian "thermal" blobs. The infrared image
is that field after a wide separable blur, affinely mapped so that a patch's
class is decided by fixed thresholds on its mean intensity (for two classes
the map puts the median patch mean at 0.5, so classes are balanced per image).
The visible image is high-frequency texture plus sharp-edged rectangles drawn
independently of the scene; ``ambiguity`` blends in a label-revealing term
with weight ``1 - ambiguity``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .container import load_container, save_container

MANIFEST = "manifest.txt"
SPLIT_FILES = {"train": "train.ivtn", "val": "val.ivtn"}


@dataclass
class Split:
    vis: np.ndarray      # [n, 3, H, W]
    ir: np.ndarray       # [n, 1, H, W]
    labels: np.ndarray   # [n, N] int64

    def __len__(self):
        return self.vis.shape[0]

    def batch(self, idx):
        return self.vis[idx], self.ir[idx], self.labels[idx]


def gaussian_kernel1d(radius):
    sigma = max(radius / 2.0, 1e-6)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(img, radius):
    k = gaussian_kernel1d(radius)
    out = convolve1d(img, k, axis=-1, mode="reflect")
    return convolve1d(out, k, axis=-2, mode="reflect")


def patch_means(img, patch_size):
    H, W = img.shape
    p = patch_size
    return img.reshape(H // p, p, W // p, p).mean(axis=(1, 3)).reshape(-1)


def _thermal_field(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = np.zeros((size, size))
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, size, size=2)
        sigma = rng.uniform(0.08, 0.2) * size
        amp = rng.uniform(0.4, 1.0)
        field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return blur(field, max(1, size // 8))


def _visible(rng, size):
    vis = np.empty((3, size, size))
    base = rng.uniform(0.3, 0.7, size=3)
    for c in range(3):
        vis[c] = base[c] + 0.15 * rng.standard_normal((size, size))
    for _ in range(rng.integers(2, 6)):
        y0, x0 = rng.integers(0, size, size=2)
        h, w = rng.integers(size // 8, size // 2 + 1, size=2)
        vis[:, y0:y0 + h, x0:x0 + w] += rng.uniform(-0.25, 0.25, size=(3, 1, 1))
    return vis


def make_sample(rng, size, patch_size, num_classes, ambiguity, ir_noise=0.0):
    """Return (vis [3,H,W], ir [1,H,W], labels [N]) for one scene."""
    field = _thermal_field(rng, size)
    means = patch_means(field, patch_size)
    centre = np.median(means)
    spread = np.abs(field - centre).max()
    ir = 0.5 + 0.5 * (field - centre) / max(spread, 1e-12)
    thresholds = np.arange(1, num_classes) / num_classes
    labels = np.digitize(patch_means(ir, patch_size), thresholds).astype(np.int64)
    if ir_noise > 0:
        ir = ir + ir_noise * rng.standard_normal(ir.shape)

    vis = _visible(rng, size)
    if ambiguity < 1.0:
        g = size // patch_size
        label_img = np.kron(labels.reshape(g, g) / (num_classes - 1), np.ones((patch_size, patch_size)))
        vis = ambiguity * vis + (1.0 - ambiguity) * label_img[None]
    return np.clip(vis, 0.0, 1.0), np.clip(ir, 0.0, 1.0)[None], labels


def generate(seed, n_samples, image_size=32, num_classes=2, ambiguity=1.0, patch_size=4,
             ir_noise=0.0, offset=0):
    """Samples ``offset .. offset + n_samples - 1`` of the stream for ``seed``."""
    if n_samples < 1:
        raise ValueError("empty dataset")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if image_size < 2 * patch_size or image_size % patch_size:
        raise ValueError(f"image_size {image_size} must be a multiple of patch_size {patch_size}")
    if not 0.0 <= ambiguity <= 1.0:
        raise ValueError("ambiguity must lie in [0, 1]")
    vis, ir, labels = [], [], []
    for i in range(offset, offset + n_samples):
        # per-sample stream: any sample can be regenerated independently
        rng = np.random.default_rng([seed, i])
        v, r, y = make_sample(rng, image_size, patch_size, num_classes, ambiguity, ir_noise)
        vis.append(v)
        ir.append(r)
        labels.append(y)
    return Split(np.stack(vis), np.stack(ir), np.stack(labels))


def write_manifest(path, entries):
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed manifest line {line!r}")
        out[key.strip()] = value.strip()
    return out


def gen_dataset(out_dir, seed=0, n_samples=512, image_size=32, num_classes=2, ambiguity=1.0,
                patch_size=4, n_val=None, ir_noise=0.0):
    """Write manifest + one container per split; returns the directory path.

    Validation samples follow the training samples in the per-sample seed
    stream, so the two splits never share a sample.
    """
    if n_val is None:
        n_val = max(1, n_samples // 4)
    out = Path(out_dir)
    train = generate(seed, n_samples, image_size, num_classes, ambiguity, patch_size, ir_noise)
    val = generate(seed, n_val, image_size, num_classes, ambiguity, patch_size, ir_noise,
                   offset=n_samples)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", train), ("val", val)):
        save_container(out / SPLIT_FILES[name], {
            "vis": split.vis,
            "ir": split.ir,
            "labels": split.labels.astype(np.float64),
        })
    write_manifest(out / MANIFEST, {
        "format": "ivtune-dataset/1",
        "seed": seed,
        "n_train": n_samples,
        "n_val": n_val,
        "image_size": image_size,
        "patch_size": patch_size,
        "num_classes": num_classes,
        "ambiguity": repr(float(ambiguity)),
        "ir_noise": repr(float(ir_noise)),
    })
    return out


def load_dataset(path):
    """Return ``(manifest dict, {"train": Split, "val": Split})``."""
    path = Path(path)
    manifest = read_manifest(path / MANIFEST)
    splits = {}
    for name, fname in SPLIT_FILES.items():
        data = load_container(path / fname)
        splits[name] = Split(data["vis"], data["ir"], data["labels"].astype(np.int64))
    return manifest, splits
