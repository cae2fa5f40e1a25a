"""Modality-aware prompter blocks.

Both block kinds normalise and recalibrate the two streams, down-project them
to a latent width ``d``, run the hybrid operation on the visible latent only,
and differ in where the two streams are fused:

* ``alpha``: fuse in the latent space, one up-projection ``s3``.
* ``beta``: up-project each stream separately (``s3`` visible, ``s4`` prompt)
  and add in the token space.

``s3``/``s4`` start at zero so a fresh block emits an exact-zero prompt.
"""

from __future__ import annotations

import numpy as np

from .autograd import (
    BatchNormState,
    Parameter,
    batch_norm,
    concat,
    depthwise_conv3x3,
    layer_norm,
    pointwise_conv1x1,
    relu,
)
from .backbone import maps_to_tokens, split_ratio_channels, tokens_to_maps
from .module import Linear, Module, uniform_fan_in

FUSIONS = ("alpha", "beta")


class SimpleFeatureTransform(Module):
    def __init__(self, width, eps=1e-5, dtype=np.float64):
        ones = lambda: Parameter(np.ones(width, dtype=dtype))  # noqa: E731
        zeros = lambda: Parameter(np.zeros(width, dtype=dtype))  # noqa: E731
        self.ln1_weight, self.ln1_bias = ones(), zeros()
        self.ln2_weight, self.ln2_bias = ones(), zeros()
        self.omega1, self.phi1 = ones(), zeros()
        self.omega2, self.phi2 = ones(), zeros()
        self.eps = eps

    def __call__(self, z_vis, z_p):
        return sft(z_vis, z_p, self)


def sft(z_vis, z_p, params):
    """Channel-wise ``LN(z) * omega + phi`` applied to each stream with its own weights."""
    if z_vis.shape != z_p.shape:
        raise ValueError(f"stream shapes differ: {z_vis.shape} vs {z_p.shape}")
    p = params
    zv = layer_norm(z_vis, p.ln1_weight, p.ln1_bias, p.eps) * p.omega1 + p.phi1
    zp = layer_norm(z_p, p.ln2_weight, p.ln2_bias, p.eps) * p.omega2 + p.phi2
    return zv, zp


class HybridOp(Module):
    """Partial depthwise 3x3 conv with residual, then 1x1 -> BN -> ReLU -> 1x1."""

    def __init__(self, rng, channels, split_ratio_inv, dtype=np.float64):
        if channels < 1:
            raise ValueError("hybrid op needs at least one channel")
        k = split_ratio_channels(channels, split_ratio_inv)
        self.channels = channels
        self.conv_channels = k
        self.dw_weight = Parameter(uniform_fan_in(rng, (k, 3, 3), 9, dtype))
        self.dw_bias = Parameter(np.zeros(k, dtype=dtype))
        self.pw1_weight = Parameter(uniform_fan_in(rng, (channels, channels), channels, dtype))
        self.pw1_bias = Parameter(np.zeros(channels, dtype=dtype))
        self.bn_weight = Parameter(np.ones(channels, dtype=dtype))
        self.bn_bias = Parameter(np.zeros(channels, dtype=dtype))
        self.bn_state = BatchNormState.initialized(channels, dtype)
        self.pw2_weight = Parameter(uniform_fan_in(rng, (channels, channels), channels, dtype))
        self.pw2_bias = Parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, m):
        return hybrid_op(m, self, training=self.training)


def hybrid_op(m, params, training=True):
    """Apply the hybrid operation to latent maps ``m`` of shape [B, d, H', W']."""
    p = params
    d = m.shape[1]
    if d != p.channels:
        raise ValueError(f"expected {p.channels} latent channels, got {d}")
    k = p.conv_channels
    sel = m[:, :k]
    mixed = depthwise_conv3x3(sel, p.dw_weight, p.dw_bias) + sel
    if k < d:
        mixed = concat([mixed, m[:, k:]], axis=1)
    h = pointwise_conv1x1(mixed, p.pw1_weight, p.pw1_bias)
    h = relu(batch_norm(h, p.bn_weight, p.bn_bias, p.bn_state, training))
    return pointwise_conv1x1(h, p.pw2_weight, p.pw2_bias)


class MPBlock(Module):
    """One prompter block; ``fusion`` selects the alpha or beta fusion rule."""

    def __init__(self, rng, width, latent, split_ratio_inv, grid, fusion, dtype=np.float64):
        if fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        self.fusion = fusion
        self.grid = grid
        self.sft = SimpleFeatureTransform(width, dtype=dtype)
        self.s1 = Linear(rng, width, latent, dtype=dtype)
        self.s2 = Linear(rng, width, latent, dtype=dtype)
        self.ho = HybridOp(rng, latent, split_ratio_inv, dtype)
        self.s3 = Linear(rng, latent, width, zero=True, dtype=dtype)
        if fusion == "beta":
            self.s4 = Linear(rng, latent, width, zero=True, dtype=dtype)

    def latents(self, z_vis, z_p):
        """Return (enhanced visible latent, untouched prompt latent) as tokens."""
        zv, zp = self.sft(z_vis, z_p)
        m_vis = self.s1(zv)
        m_p = self.s2(zp)
        m_vis_e = maps_to_tokens(self.ho(tokens_to_maps(m_vis, self.grid)))
        return m_vis_e, m_p

    def __call__(self, z_vis, z_p):
        if self.fusion == "alpha":
            return mp_alpha(z_vis, z_p, self)
        return mp_beta(z_vis, z_p, self)


def mp_alpha(z_vis, z_p, block):
    """Fuse in the latent space: ``s3(HO(s1 v) + s2 p)``."""
    m_vis_e, m_p = block.latents(z_vis, z_p)
    return block.s3(m_vis_e + m_p)


def mp_beta(z_vis, z_p, block):
    """Fuse after separate up-projections: ``s3(HO(s1 v)) + s4(s2 p)``."""
    if not hasattr(block, "s4"):
        raise ValueError("mp_beta needs a block built with fusion='beta'")
    m_vis_e, m_p = block.latents(z_vis, z_p)
    return block.s3(m_vis_e) + block.s4(m_p)
