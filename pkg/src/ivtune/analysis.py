"""Feature-space diagnostics: layer-wise PCA, radial Fourier energy, parameter counts."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .backbone import ModelConfig, split_ratio_channels
from .autograd import Tensor, depthwise_conv3x3
from .model import TRAINABLE_PREFIXES, model_forward


class DegenerateInputError(ValueError):
    """Input has no variance (PCA) or no spectral mass (radial energy)."""


# -- PCA ----------------------------------------------------------------------

@dataclass
class PcaReport:
    ratios: dict  # layer index -> top-k explained-variance ratios

    def top1(self, layer):
        return float(self.ratios[layer][0])


def explained_variance_ratios(tokens):
    """All explained-variance ratios of ``tokens`` [M, C], largest first."""
    X = np.asarray(tokens, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("tokens must be [M, C]")
    M = X.shape[0]
    if M < 2:
        raise ValueError("PCA needs at least two tokens")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / M
    eig = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    total = eig.sum()
    if total <= 0 or not np.isfinite(total):
        raise DegenerateInputError("all tokens identical; explained variance undefined")
    return eig / total


def pca_layer_report(features, k=5):
    """Top-``k`` explained-variance ratios per layer.

    ``features`` is a sequence of per-layer arrays; any leading axes are
    pooled into tokens, the last axis is the channel axis.
    """
    ratios = {}
    for layer, feat in enumerate(features):
        feat = np.asarray(feat)
        ratios[layer] = explained_variance_ratios(feat.reshape(-1, feat.shape[-1]))[:k]
    return PcaReport(ratios)


def capture_layer_features(model, split, n_probe=8, seed=0):
    """Per-layer outputs z^1..z^L on a seeded probe batch, in eval mode."""
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(split), size=min(n_probe, len(split)), replace=False))
    vis, ir, _ = split.batch(idx)
    was_training = model.training
    model.eval()
    _, feats = model_forward(vis, ir, model, capture=True)
    model.train(was_training)
    return feats


# -- radial Fourier energy ----------------------------------------------------

@dataclass
class SpectrumReport:
    edges: np.ndarray    # B + 1 band edges in normalised radius
    energy: np.ndarray   # B normalised energies, sum 1

    @property
    def bands(self):
        return len(self.energy)


def _radius_grid(H, W):
    u = np.arange(H) - H // 2
    v = np.arange(W) - W // 2
    fu, fv = np.meshgrid(u / H, v / W, indexing="ij")
    r = np.sqrt(fu ** 2 + fv ** 2)
    return r / r.max()


def max_bands(H, W):
    """Largest band count the grid resolves: floor of the corner radius in index units."""
    return int(np.floor(np.hypot(H // 2, W // 2)))


def band_magnitudes(image, bands=16):
    """Unnormalised per-band sums of centred Fourier magnitudes."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ValueError("image must be [H, W] or [channels, H, W]")
    _, H, W = img.shape
    if H < 2 or W < 2:
        raise ValueError("image must be at least 2x2")
    if bands < 1:
        raise ValueError("bands must be >= 1")
    if bands > max(1, max_bands(H, W)):
        raise ValueError(f"{bands} bands exceed the radial resolution of a {H}x{W} grid")
    mag = np.abs(np.fft.fftshift(np.fft.fft2(img), axes=(-2, -1))).mean(axis=0)
    idx = np.minimum((_radius_grid(H, W) * bands).astype(np.int64), bands - 1)
    return np.bincount(idx.reshape(-1), weights=mag.reshape(-1), minlength=bands)


def radial_energy(image, bands=16):
    """Normalised sum of Fourier magnitudes per radial band (band 0 holds DC)."""
    sums = band_magnitudes(image, bands)
    total = sums.sum()
    if total <= 0:
        raise DegenerateInputError("image has no spectral energy")
    return SpectrumReport(np.linspace(0.0, 1.0, bands + 1), sums / total)


def mean_radial_energy(images, bands=16):
    """Average of per-image normalised band energies over ``images`` [n, ...]."""
    return np.mean([radial_energy(img, bands).energy for img in images], axis=0)


@dataclass
class SpectrumShift:
    edges: np.ndarray
    before: np.ndarray
    after: np.ndarray | None
    degenerate: bool = False


def _apply_operator(images, operator, params, patch_size):
    n, ch, H, W = images.shape
    if operator == "conv3x3":
        kernel = np.asarray(params, dtype=np.float64)
        if kernel.shape != (3, 3):
            raise ValueError("conv3x3 operator expects a 3x3 kernel")
        flat = images.reshape(n * ch, 1, H, W)
        out = depthwise_conv3x3(Tensor(flat), Tensor(kernel[None]), Tensor(np.zeros(1)))
        return out.data.reshape(n, ch, H, W)
    if operator == "linear_projection":
        p = patch_size
        proj = np.asarray(params, dtype=np.float64)
        if proj.shape != (p * p, p * p):
            raise ValueError(f"linear_projection expects a {p*p}x{p*p} matrix")
        if H % p or W % p:
            raise ValueError("image size not divisible by patch size")
        x = images.reshape(n, ch, H // p, p, W // p, p).transpose(0, 1, 2, 4, 3, 5)
        x = x.reshape(n, ch, H // p, W // p, p * p) @ proj.T
        x = x.reshape(n, ch, H // p, W // p, p, p).transpose(0, 1, 2, 4, 3, 5)
        return x.reshape(n, ch, H, W)
    raise ValueError(f"unknown operator {operator!r}")


def operator_spectrum_shift(images, operator, params=None, bands=16, patch_size=4, seed=0):
    """Mean band energies before and after applying ``operator`` to each image.

    ``conv3x3`` convolves every channel with one 3x3 kernel (zero padding);
    ``linear_projection`` maps each non-overlapping ``patch_size`` patch
    through a square matrix. Missing parameters are drawn from ``seed``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    if params is None:
        rng = np.random.default_rng(seed)
        if operator == "conv3x3":
            params = rng.normal(0.0, 1.0 / 3.0, size=(3, 3))
        else:
            params = rng.normal(0.0, 1.0 / patch_size, size=(patch_size ** 2, patch_size ** 2))
    after_imgs = _apply_operator(images, operator, params, patch_size)
    before = mean_radial_energy(images, bands)
    edges = np.linspace(0.0, 1.0, bands + 1)
    try:
        after = mean_radial_energy(after_imgs, bands)
    except DegenerateInputError:
        return SpectrumShift(edges, before, None, degenerate=True)
    return SpectrumShift(edges, before, after)


# -- parameter accounting -------------------------------------------------------

PRESETS = {
    "toy": ModelConfig(),
    "vit-l": ModelConfig(image_size=224, patch_size=16, depth=24, width=1024, heads=16,
                         mlp_ratio=4, num_classes=2, d_alpha=8, d_beta=16, split_ratio_inv=4),
}


@dataclass
class ParamReport:
    groups: dict = field(default_factory=dict)   # name -> (count, trainable)
    backbone: int = 0          # visible patch embed + encoder layers
    prompter: int = 0          # infrared patch embed + all prompter blocks
    head: int = 0
    trainable_backbone_side: int = 0
    ratio: float = 0.0

    @property
    def total(self):
        return sum(c for c, _ in self.groups.values())

    @property
    def trainable(self):
        return sum(c for c, t in self.groups.values() if t)


def _embed_count(cfg, channels):
    return channels * cfg.patch_size ** 2 * cfg.width + cfg.width + cfg.num_tokens * cfg.width


def _layer_count(cfg):
    C, hidden = cfg.width, cfg.mlp_ratio * cfg.width
    return (2 * C + 3 * C * C + 3 * C + C * C + C + 2 * C
            + hidden * C + hidden + C * hidden + C)


def mp_block_count(width, latent, split_ratio_inv, fusion):
    """Closed-form size of one prompter block."""
    C, d = width, latent
    k = split_ratio_channels(d, split_ratio_inv)
    count = 4 * C + 4 * C              # two LN affines, omega/phi pairs
    count += 2 * (C * d + d)           # s1, s2
    count += 9 * k + k                 # depthwise conv on the selected channels
    count += (d * d + d) + 2 * d + (d * d + d)
    count += d * C + C                 # s3
    if fusion == "beta":
        count += d * C + C             # s4
    return count


def param_report(config):
    """Exact parameter counts from configuration arithmetic alone."""
    if isinstance(config, str):
        if config not in PRESETS:
            raise ValueError(f"unknown preset {config!r}; choose from {sorted(PRESETS)}")
        config = PRESETS[config]
    config.validate()
    v = config.variant
    groups = {"vis_embed": _embed_count(config, 3)}
    for layer in range(config.depth):
        groups[f"layers.{layer}"] = _layer_count(config)
    if v in ("standard", "uni_fusion"):
        groups["ir_embed"] = _embed_count(config, 1)
    if v in ("standard", "uni_fusion", "vis_only"):
        groups["mp_alpha"] = mp_block_count(config.width, config.d_alpha, config.split_ratio_inv,
                                            "alpha")
        fusion = "alpha" if v == "uni_fusion" else "beta"
        for layer in range(config.depth):
            groups[f"mp_beta.{layer}"] = mp_block_count(config.width, config.d_beta,
                                                        config.split_ratio_inv, fusion)
    groups["head"] = config.num_classes * config.width + config.num_classes
    prefixes = TRAINABLE_PREFIXES[v]
    report = ParamReport()
    for name, count in groups.items():
        trainable = (name + ".").startswith(prefixes)
        report.groups[name] = (count, trainable)
        if name == "head":
            report.head = count
        elif name.startswith(("vis_embed", "layers")):
            report.backbone += count
        else:
            report.prompter += count
        if trainable and name != "head":
            report.trainable_backbone_side += count
    report.ratio = report.trainable_backbone_side / report.backbone
    return report


# -- CSV output ---------------------------------------------------------------

def _write_csv(path, schema, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={schema}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_pca_csv(path, report):
    rows = [(layer, i, repr(float(r)))
            for layer, ratios in report.ratios.items() for i, r in enumerate(ratios)]
    _write_csv(path, "ivtune-pca/1", ("layer", "rank_index", "ratio"), rows)


def write_spectrum_csv(path, reports):
    """``reports``: {modality: (edges, energies)}."""
    rows = []
    for modality, (edges, energy) in reports.items():
        for b, e in enumerate(energy):
            rows.append((modality, repr(float(edges[b])), repr(float(edges[b + 1])),
                         repr(float(e))))
    _write_csv(path, "ivtune-spectrum/1", ("modality", "band_lo", "band_hi", "energy"), rows)


def write_params_csv(path, report):
    rows = [(name, count, int(trainable)) for name, (count, trainable) in report.groups.items()]
    _write_csv(path, "ivtune-params/1", ("group", "count", "trainable"), rows)
