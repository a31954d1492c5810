"""Full enhancement network and its deterministic initialization."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
from torch import nn

from .blocks import (
    ExposureAwareFusion,
    GlobalEnhancementBlock,
    GuidedAttentionMapGenerator,
    LocalEnhancementBlock,
)
from .config import ModelConfig

_LUMA = (0.299, 0.587, 0.114)

SUBMODULE_GROUPS = ("gamg", "leb", "geb", "eaf")


@dataclass
class EnhancedOutput:
    """Everything one forward pass produces, batch-first conv layout.

    image is the fused result; attn the under/over maps; guided the
    re-highlighted input the local branch saw; mul/add the local factors;
    gamma (B x 1) and color_matrix (B x 3 x 3) the global parameters;
    fusion_weights (B x 3) the per-channel gate.
    """

    image: torch.Tensor
    attn: torch.Tensor
    guided: torch.Tensor
    mul: torch.Tensor
    add: torch.Tensor
    local_image: torch.Tensor
    global_image: torch.Tensor
    gamma: torch.Tensor
    color_matrix: torch.Tensor
    fusion_weights: torch.Tensor

    def detached(self) -> "EnhancedOutput":
        return EnhancedOutput(**{f.name: getattr(self, f.name).detach() for f in fields(self)})


def luminance(img: torch.Tensor) -> torch.Tensor:
    """BT.601 luminance of a B x 3 x H x W tensor, keeping a channel dim."""
    w = img.new_tensor(_LUMA).view(1, 3, 1, 1)
    return (img * w).sum(dim=1, keepdim=True)


def guided_input(img: torch.Tensor, attn: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    """Re-highlighting: img * (1 + gain * (attn_under + attn_over)).

    gain is clamped to be non-negative; at gain 0 (or attention 0) the
    guided image equals the input.
    """
    weight = attn[:, 0:1] + attn[:, 1:2]
    return img * (1.0 + gain.clamp_min(0.0) * weight)


def eaf_blend(local_img: torch.Tensor, global_img: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Convex per-channel blend: w * local + (1 - w) * global, clamped."""
    w = weights.view(weights.shape[0], -1, 1, 1)
    return (w * local_img + (1.0 - w) * global_img).clamp(0.0, 1.0)


class MixedExposureFormer(nn.Module):
    """Attention-guided enhancement: local and global branches, fused.

    Submodules are grouped as gamg (attention maps + guide gain), leb
    (local correction), geb (global correction), and eaf (fusion gate,
    absent when config.eaf_enabled is false, in which case the blend is a
    fixed 0.5/0.5).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.gamg = GuidedAttentionMapGenerator(config)
        self.leb = LocalEnhancementBlock(config.embed_dim)
        self.geb = GlobalEnhancementBlock(config.embed_dim, config.gamma_range)
        self.eaf = ExposureAwareFusion(config.embed_dim, config.attn_map_channels) if config.eaf_enabled else None

    def forward(self, img: torch.Tensor) -> EnhancedOutput:
        if img.ndim != 4 or img.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W input, got shape {tuple(img.shape)}")
        attn = self.gamg(img)
        guided = guided_input(img, attn, self.gamg.guide_gain)
        mul, add, local_img = self.leb(guided)
        inv_lum = 1.0 - luminance(img)
        gamma, color, global_img = self.geb(img, inv_lum)
        if self.eaf is not None:
            weights = self.eaf(local_img, global_img, attn)
        else:
            weights = torch.full((img.shape[0], 3), 0.5, dtype=img.dtype, device=img.device)
        image = eaf_blend(local_img, global_img, weights)
        return EnhancedOutput(
            image=image,
            attn=attn,
            guided=guided,
            mul=mul,
            add=add,
            local_image=local_img,
            global_image=global_img,
            gamma=gamma,
            color_matrix=color,
            fusion_weights=weights,
        )


def _xavier_bound(weight: torch.Tensor) -> float:
    receptive = 1
    for s in weight.shape[2:]:
        receptive *= s
    fan_in = weight.shape[1] * receptive
    fan_out = weight.shape[0] * receptive
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_model(config: ModelConfig) -> MixedExposureFormer:
    """Build and deterministically initialize the network from its config.

    Conv/linear weights are uniform(-a, a) with a = sqrt(6/(fan_in+fan_out))
    drawn from a generator seeded by config.seed; biases start at zero. The
    output heads are an exception: their weights start at zero with biases
    chosen so the fresh network is (near-)identity, i.e. mul=1, add=0,
    gamma=1, color=I, gate=0.5.
    """
    config.validate()
    model = MixedExposureFormer(config)
    gen = torch.Generator().manual_seed(config.seed)
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            bound = _xavier_bound(module.weight)
            module.weight.data.uniform_(-bound, bound, generator=gen)
            if module.bias is not None:
                module.bias.data.zero_()

    with torch.no_grad():
        model.leb.mul_head.weight.zero_()
        model.leb.mul_head.bias.fill_(math.log(math.e - 1.0))  # softplus -> 1
        model.leb.add_head.weight.zero_()
        model.leb.add_head.bias.zero_()
        lo, hi = config.gamma_range
        model.geb.gamma_head.weight.zero_()
        if lo < 1.0 < hi:
            frac = (1.0 - lo) / (hi - lo)  # sigmoid(bias) * (hi-lo) + lo == 1
            model.geb.gamma_head.bias.fill_(math.log(frac / (1.0 - frac)))
        else:
            model.geb.gamma_head.bias.zero_()  # range excludes 1; start mid-range
        model.geb.color_head.weight.zero_()
        model.geb.color_head.bias.zero_()
        if model.eaf is not None:
            model.eaf.gate.weight.zero_()
            model.eaf.gate.bias.zero_()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameter_breakdown(model: MixedExposureFormer) -> dict[str, int]:
    """Trainable-parameter count per submodule group; values sum to the total."""
    counts = dict.fromkeys(SUBMODULE_GROUPS, 0)
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        group = name.split(".", 1)[0]
        counts[group] = counts.get(group, 0) + p.numel()
    return counts
