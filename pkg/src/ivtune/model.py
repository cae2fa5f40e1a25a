"""Full model: frozen backbone with infrared-conditioned prompts injected per layer."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor
from .backbone import DecodeHead, EncoderLayer, ModelConfig, PatchEmbed
from .module import Module
from .prompter import MPBlock, mp_alpha

# parameter-name prefixes that form the trainable set, per variant
TRAINABLE_PREFIXES = {
    "standard": ("ir_embed.", "mp_alpha.", "mp_beta.", "head."),
    "uni_fusion": ("ir_embed.", "mp_alpha.", "mp_beta.", "head."),
    "vis_only": ("mp_alpha.", "mp_beta.", "head."),
    "frozen": ("head.",),
    "fft": ("",),
}


class IVModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        dt = config.np_dtype
        v = config.variant
        self.vis_embed = PatchEmbed(rng, config, "vis")
        self.layers = [EncoderLayer(rng, config) for _ in range(config.depth)]
        self.head = DecodeHead(rng, config.width, config.num_classes, dt)
        # prompter weights come from their own stream so the backbone draw is
        # identical across variants
        prng = np.random.default_rng([config.seed, 1])
        if v in ("standard", "uni_fusion"):
            self.ir_embed = PatchEmbed(prng, config, "ir")
        if v in ("standard", "uni_fusion", "vis_only"):
            self.mp_alpha = MPBlock(prng, config.width, config.d_alpha, config.split_ratio_inv,
                                    config.grid, "alpha", dt)
            layer_fusion = "alpha" if v == "uni_fusion" else "beta"
            self.mp_beta = [
                MPBlock(prng, config.width, config.d_beta, config.split_ratio_inv,
                        config.grid, layer_fusion, dt)
                for _ in range(config.depth)
            ]
        self.assign_names()
        prefixes = TRAINABLE_PREFIXES[v]
        for name, p in self.named_parameters():
            p.trainable = name.startswith(prefixes)

    @property
    def has_prompter(self):
        return hasattr(self, "mp_alpha")

    @property
    def uses_ir(self):
        return hasattr(self, "ir_embed")

    def initial_prompt(self, z0, x_ir):
        """``P0`` from the visible tokens and the infrared prompt tokens."""
        if self.uses_ir:
            z_p = self.ir_embed(x_ir)
        else:
            z_p = Tensor(np.zeros(z0.shape, dtype=z0.dtype))
        return mp_alpha(z0, z_p, self.mp_alpha)

    def __call__(self, x_vis, x_ir=None, capture=False):
        return model_forward(x_vis, x_ir, self, capture=capture)

    def backbone_forward(self, x_vis, capture=False):
        """The frozen visible-only path: embed, plain layers, head."""
        z = self.vis_embed(x_vis)
        feats = []
        for layer in self.layers:
            z = layer(z)
            if capture:
                feats.append(z.data)
        logits = self.head(z)
        return (logits, feats) if capture else logits


def encoder_layer_forward(z_prev, prompt_in, layer, block):
    """One encoder layer with two calls of the layer's shared prompter block."""
    if z_prev.shape != prompt_in.shape:
        raise ValueError(f"token shape {z_prev.shape} != prompt shape {prompt_in.shape}")
    a = layer.attn_stage(z_prev)
    p1 = block(a, prompt_in)
    b = layer.ffn_stage(a + p1)
    p2 = block(b, prompt_in)
    return b + p2


def propagate_prompt(p0, z_l):
    """Prompt-stream input for the next layer: the initial prompt plus the layer output."""
    if p0.shape != z_l.shape:
        raise ValueError(f"prompt shape {p0.shape} != token shape {z_l.shape}")
    return p0 + z_l


def model_forward(x_vis, x_ir, model, capture=False):
    """Logits [B, N, K]; with ``capture`` also the per-layer outputs z^1..z^L."""
    if not model.has_prompter:
        return model.backbone_forward(x_vis, capture=capture)
    x_vis = np.asarray(x_vis)
    if model.uses_ir:
        if x_ir is None:
            raise ValueError(f"variant {model.config.variant!r} needs an infrared input")
        x_ir = np.asarray(x_ir)
        if x_ir.shape[0] != x_vis.shape[0] or x_ir.shape[2:] != x_vis.shape[2:]:
            raise ValueError(f"misaligned inputs: vis {x_vis.shape} vs ir {x_ir.shape}")
    z = model.vis_embed(x_vis)
    p0 = model.initial_prompt(z, x_ir)
    prompt = p0
    feats = []
    for layer, block in zip(model.layers, model.mp_beta):
        z = encoder_layer_forward(z, prompt, layer, block)
        prompt = propagate_prompt(p0, z)
        if capture:
            feats.append(z.data)
    logits = model.head(z)
    return (logits, feats) if capture else logits


def partition_params(model):
    """Split parameters into (trainable, frozen) name->Parameter dicts."""
    trainable, frozen = {}, {}
    for name, p in model.named_parameters():
        (trainable if p.trainable else frozen)[name] = p
    total = len(model.named_parameters())
    if len(trainable) + len(frozen) != total or set(trainable) & set(frozen):
        raise RuntimeError("parameter partition is not exhaustive and disjoint")
    return trainable, frozen


def parameter_groups(model):
    """Map each parameter name to its group label (ir_embed, mp_alpha, mp_beta.<l>, ...)."""
    groups = {}
    for name, _ in model.named_parameters():
        parts = name.split(".")
        if parts[0] in ("mp_beta", "layers"):
            groups[name] = ".".join(parts[:2])
        else:
            groups[name] = parts[0]
    return groups
