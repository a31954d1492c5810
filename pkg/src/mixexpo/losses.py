"""Differentiable training objectives and the phase composites.

All losses take torch tensors (conv layout where spatial) and return
scalar tensors, so they can sit directly on the autograd tape. The two
composites mirror the pretraining and finetuning objectives and report
every raw term alongside the weighted total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .model.network import EnhancedOutput, luminance

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2
_KL_EPS = 1e-3
_SMOOTH_L1_BETA = 0.1


@dataclass(frozen=True)
class LossWeights:
    """Weights for the phase composites plus shared loss constants.

    alpha..eta weight the pretraining terms, lambda_w..nu the finetuning
    terms. The attention term always has weight 1. ma_mul_reg/ma_add_reg
    are the small regularizers inside the mul-add loss.
    """

    alpha: float = 1.0
    beta: float = 0.5
    gamma_w: float = 0.4
    delta: float = 0.1
    eta: float = 0.5
    lambda_w: float = 1.0
    mu: float = 0.4
    nu: float = 0.1
    charbonnier_eps: float = 1e-3
    photon_gain: float = 255.0
    ma_mul_reg: float = 0.01
    ma_add_reg: float = 0.01

    def validate(self) -> None:
        for name in ("alpha", "beta", "gamma_w", "delta", "eta", "lambda_w", "mu", "nu", "ma_mul_reg", "ma_add_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")
        if self.charbonnier_eps <= 0:
            raise ValueError(f"charbonnier_eps must be > 0, got {self.charbonnier_eps}")
        if self.photon_gain <= 0:
            raise ValueError(f"photon_gain must be > 0, got {self.photon_gain}")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma_w": self.gamma_w,
            "delta": self.delta,
            "eta": self.eta,
            "lambda_w": self.lambda_w,
            "mu": self.mu,
            "nu": self.nu,
            "charbonnier_eps": self.charbonnier_eps,
            "photon_gain": self.photon_gain,
            "ma_mul_reg": self.ma_mul_reg,
            "ma_add_reg": self.ma_add_reg,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LossWeights":
        w = cls(**{k: float(v) for k, v in doc.items()})
        w.validate()
        return w


@dataclass
class LossReport:
    """Weighted total (still on the autograd tape) plus raw per-term values."""

    total: torch.Tensor
    per_term: dict[str, float]
    weights: dict[str, float]


def _check_shapes(y: torch.Tensor, y_hat: torch.Tensor) -> None:
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")


def l1(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference."""
    _check_shapes(y, y_hat)
    return (y - y_hat).abs().mean()


def l2(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared difference."""
    _check_shapes(y, y_hat)
    return ((y - y_hat) ** 2).mean()


def charbonnier(y: torch.Tensor, y_hat: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Smooth L1 surrogate: mean of sqrt(d^2 + eps^2). Floor is eps, not 0."""
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    _check_shapes(y, y_hat)
    return torch.sqrt((y - y_hat) ** 2 + eps * eps).mean()


def _gaussian_window(dtype: torch.dtype, device: torch.device) -> torch.Tensor:
    coords = torch.arange(_SSIM_WINDOW, dtype=torch.float64) - (_SSIM_WINDOW - 1) / 2
    g = torch.exp(-(coords**2) / (2.0 * _SSIM_SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype=dtype, device=device).view(1, 1, _SSIM_WINDOW, _SSIM_WINDOW)


def _as_luminance_batch(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 2:
        return x.view(1, 1, *x.shape)
    if x.ndim == 4 and x.shape[1] == 3:
        return luminance(x)
    if x.ndim == 4 and x.shape[1] == 1:
        return x
    raise ValueError(f"expected H x W, B x 1 x H x W, or B x 3 x H x W, got shape {tuple(x.shape)}")


def ssim_map(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Local SSIM over an 11x11 Gaussian window (sigma 1.5) on luminance.

    The map covers the valid region only, so it is 10 pixels smaller than
    the input in each spatial dimension and no border padding ever enters
    the statistics.
    """
    _check_shapes(y, y_hat)
    a = _as_luminance_batch(y)
    b = _as_luminance_batch(y_hat)
    h, w = a.shape[-2:]
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} SSIM window")
    win = _gaussian_window(a.dtype, a.device)

    mu_a = F.conv2d(a, win)
    mu_b = F.conv2d(b, win)
    var_a = F.conv2d(a * a, win) - mu_a * mu_a
    var_b = F.conv2d(b * b, win) - mu_b * mu_b
    cov = F.conv2d(a * b, win) - mu_a * mu_b

    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    out = num / den
    if y.ndim == 2:
        return out[0, 0]
    return out


def ssim_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """1 - mean SSIM over the valid region."""
    return 1.0 - ssim_map(y, y_hat).mean()


def mul_add_loss(
    mul: torch.Tensor,
    add: torch.Tensor,
    i_low: torch.Tensor,
    i_high: torch.Tensor,
    mul_reg: float = 0.01,
    add_reg: float = 0.01,
) -> torch.Tensor:
    """Couples the correction factors to the target: smooth-L1 of
    mul*i_low + add against i_high (kink at 0.1), plus small pulls of mul
    toward 1 and add toward 0 that keep the factorization identifiable."""
    _check_shapes(mul, add)
    _check_shapes(i_low, i_high)
    recon = mul * i_low + add
    _check_shapes(recon, i_high)
    data = F.smooth_l1_loss(recon, i_high, beta=_SMOOTH_L1_BETA)
    return data + mul_reg * ((mul - 1.0) ** 2).mean() + add_reg * (add**2).mean()


def attention_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Charbonnier distance between predicted and target attention maps."""
    return charbonnier(pred, target, eps)


def poisson_kl_loss(y_hat: torch.Tensor, y: torch.Tensor, photon_gain: float = 255.0) -> torch.Tensor:
    """Mean KL(Pois(gain*y_hat + eps) || Pois(gain*y + eps)) per pixel.

    Closed form for Poisson rates a, b: a*ln(a/b) + b - a. Non-negative,
    zero exactly when the rates agree.
    """
    _check_shapes(y, y_hat)
    if photon_gain <= 0:
        raise ValueError(f"photon_gain must be > 0, got {photon_gain}")
    if (y_hat < 0).any() or (y < 0).any():
        raise ValueError("poisson_kl_loss requires non-negative intensities")
    a = photon_gain * y_hat + _KL_EPS
    b = photon_gain * y + _KL_EPS
    return (a * torch.log(a / b) + b - a).mean()


class RandomFeatureExtractor(nn.Module):
    """Fixed, seeded 3-layer conv stack used as the default perceptual space.

    A stand-in for a pretrained feature network: weights are drawn once
    from the seed, frozen, and never updated, so the induced distance is
    deterministic across processes with no downloads.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, 3, padding=1, stride=2)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1, stride=2)
        self.conv3 = nn.Conv2d(16, 16, 3, padding=1)
        gen = torch.Generator().manual_seed(seed)
        for m in (self.conv1, self.conv2, self.conv3):
            fan_in = m.weight.shape[1] * 9
            fan_out = m.weight.shape[0] * 9
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            m.weight.data.uniform_(-bound, bound, generator=gen)
            m.bias.data.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        return self.conv3(x)


_EXTRACTOR_CACHE: dict[tuple[int, torch.dtype], RandomFeatureExtractor] = {}


def default_extractor(seed: int = 0, dtype: torch.dtype = torch.float32) -> RandomFeatureExtractor:
    key = (seed, dtype)
    if key not in _EXTRACTOR_CACHE:
        _EXTRACTOR_CACHE[key] = RandomFeatureExtractor(seed).to(dtype)
    return _EXTRACTOR_CACHE[key]


def perceptual_loss(y: torch.Tensor, y_hat: torch.Tensor, extractor: nn.Module | None = None) -> torch.Tensor:
    """Mean squared distance in a fixed feature space."""
    _check_shapes(y, y_hat)
    if extractor is None:
        extractor = default_extractor(dtype=y.dtype)
    return ((extractor(y) - extractor(y_hat)) ** 2).mean()


def _report(pairs: list[tuple[str, float, torch.Tensor]]) -> LossReport:
    total = None
    per_term = {}
    weights = {}
    for name, weight, term in pairs:
        contribution = weight * term
        total = contribution if total is None else total + contribution
        per_term[name] = float(term.detach())
        weights[name] = weight
    return LossReport(total=total, per_term=per_term, weights=weights)


def pretrain_total(
    output: EnhancedOutput,
    y: torch.Tensor,
    i_low: torch.Tensor,
    target_attn: torch.Tensor,
    w: LossWeights,
    extractor: nn.Module | None = None,
) -> LossReport:
    """Pretraining composite over one batch.

    alpha * mean of L1 on the local and global branches, beta * L2 and
    gamma_w * SSIM and delta * perceptual on the fused image, eta * the
    mul-add coupling, plus the attention term at fixed weight 1.
    """
    w.validate()
    l1_pair = 0.5 * (l1(y, output.local_image) + l1(y, output.global_image))
    terms = [
        ("l1_pair", w.alpha, l1_pair),
        ("l2", w.beta, l2(y, output.image)),
        ("ssim", w.gamma_w, ssim_loss(y, output.image)),
        ("perceptual", w.delta, perceptual_loss(y, output.image, extractor)),
        (
            "mul_add",
            w.eta,
            mul_add_loss(output.mul, output.add, i_low, y, w.ma_mul_reg, w.ma_add_reg),
        ),
        ("attention", 1.0, attention_loss(output.attn, target_attn, w.charbonnier_eps)),
    ]
    return _report(terms)


def finetune_total(
    output: EnhancedOutput,
    y: torch.Tensor,
    w: LossWeights,
    target_attn: torch.Tensor | None = None,
) -> LossReport:
    """Finetuning composite: lambda_w * L1 + mu * SSIM on the fused image,
    nu * mean Poisson KL of the local and global branches against the target.

    When target_attn is given, the attention term joins at fixed weight 1,
    so the map stays supervised through both training phases.
    """
    w.validate()
    kl_pair = 0.5 * (
        poisson_kl_loss(output.local_image, y, w.photon_gain)
        + poisson_kl_loss(output.global_image, y, w.photon_gain)
    )
    terms = [
        ("l1", w.lambda_w, l1(y, output.image)),
        ("ssim", w.mu, ssim_loss(y, output.image)),
        ("poisson_kl", w.nu, kl_pair),
    ]
    if target_attn is not None:
        terms.append(("attention", 1.0, attention_loss(output.attn, target_attn, w.charbonnier_eps)))
    return _report(terms)
