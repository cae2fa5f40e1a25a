"""Pre-norm ViT-style encoder used as the frozen backbone, plus patch embeddings and head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autograd import Parameter, Tensor, gelu, linear, reshape, softmax, transpose
from .module import LayerNorm, Linear, Module, trunc_normal

VARIANTS = ("standard", "vis_only", "uni_fusion", "fft", "frozen")
MODALITY_CHANNELS = {"vis": 3, "ir": 1}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 2
    d_alpha: int = 8
    d_beta: int = 16
    split_ratio_inv: int = 4
    variant: str = "standard"
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("image_size", "patch_size", "depth", "width", "heads", "mlp_ratio",
                    "d_alpha", "d_beta", "split_ratio_inv")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid * self.grid

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes):
        return type(self).from_dict({**self.to_dict(), **changes})


def split_ratio_channels(d, r):
    """Number of latent channels that go through the depthwise convolution."""
    return math.ceil(d / r)


# -- token <-> image plumbing ------------------------------------------------

def patchify(images, patch_size):
    """[B, ch, H, W] -> [B, N, ch*p*p] with row-major patch order."""
    B, ch, H, W = images.shape
    p = patch_size
    if H % p or W % p:
        raise ValueError(f"image size {H}x{W} not divisible by patch size {p}")
    x = images.reshape(B, ch, H // p, p, W // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(B, (H // p) * (W // p), ch * p * p))


def tokens_to_maps(z, grid):
    """[B, N, C] -> [B, C, H', W']."""
    B, N, C = z.shape
    if N != grid * grid:
        raise ValueError(f"{N} tokens do not form a {grid}x{grid} grid")
    return transpose(reshape(z, (B, grid, grid, C)), (0, 3, 1, 2))


def maps_to_tokens(m):
    """[B, C, H', W'] -> [B, N, C]."""
    B, C, H, W = m.shape
    return reshape(transpose(m, (0, 2, 3, 1)), (B, H * W, C))


# -- stages -----------------------------------------------------------------

class PatchEmbed(Module):
    """Non-overlapping patch projection plus learned positional embedding."""

    def __init__(self, rng, config, modality):
        if modality not in MODALITY_CHANNELS:
            raise ValueError(f"unknown modality {modality!r}")
        self.modality = modality
        self.patch_size = config.patch_size
        self.image_size = config.image_size
        ch = MODALITY_CHANNELS[modality]
        dt = config.np_dtype
        self.proj = Linear(rng, ch * config.patch_size ** 2, config.width, dtype=dt)
        self.pos = Parameter(trunc_normal(rng, (config.num_tokens, config.width), 0.02, dt))

    def __call__(self, image):
        image = np.asarray(image)
        ch = MODALITY_CHANNELS[self.modality]
        if image.ndim != 4 or image.shape[1] != ch:
            raise ValueError(f"{self.modality} image must be [B, {ch}, H, W], got {image.shape}")
        if image.shape[2] != self.image_size or image.shape[3] != self.image_size:
            raise ValueError(f"image must be {self.image_size}x{self.image_size}")
        patches = Tensor(patchify(image.astype(self.proj.weight.dtype, copy=False), self.patch_size))
        return self.proj(patches) + self.pos


def patch_embed(image, embed):
    return embed(image)


class Attention(Module):
    def __init__(self, rng, width, heads, dtype=np.float64):
        self.heads = heads
        self.qkv = Linear(rng, width, 3 * width, dtype=dtype)
        self.proj = Linear(rng, width, width, dtype=dtype)

    def __call__(self, x):
        B, N, C = x.shape
        h = self.heads
        dh = C // h
        qkv = transpose(reshape(self.qkv(x), (B, N, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = softmax(scores, axis=-1)
        out = reshape(transpose(attn @ v, (0, 2, 1, 3)), (B, N, C))
        return self.proj(out)


class Mlp(Module):
    def __init__(self, rng, width, hidden, dtype=np.float64):
        self.fc1 = Linear(rng, width, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, width, dtype=dtype)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class EncoderLayer(Module):
    """One frozen transformer layer split into its attention and FFN stages."""

    def __init__(self, rng, config):
        dt = config.np_dtype
        C = config.width
        self.ln1 = LayerNorm(C, dtype=dt)
        self.attn = Attention(rng, C, config.heads, dt)
        self.ln2 = LayerNorm(C, dtype=dt)
        self.mlp = Mlp(rng, C, config.mlp_ratio * C, dt)

    def attn_stage(self, z):
        return z + self.attn(self.ln1(z))

    def ffn_stage(self, z):
        return z + self.mlp(self.ln2(z))

    def __call__(self, z):
        return self.ffn_stage(self.attn_stage(z))


def attn_stage(z, layer):
    """``z + MHSA(LN(z))``."""
    return layer.attn_stage(z)


def ffn_stage(z, layer):
    """``z + W2 gelu(W1 LN(z))``."""
    return layer.ffn_stage(z)


class DecodeHead(Module):
    def __init__(self, rng, width, num_classes, dtype=np.float64):
        self.weight = Parameter(trunc_normal(rng, (num_classes, width), 0.02, dtype))
        self.bias = Parameter(np.zeros(num_classes, dtype=dtype))

    def __call__(self, z):
        return linear(z, self.weight, self.bias)


def decode_head(z, head):
    return head(z)
