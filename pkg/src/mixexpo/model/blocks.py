"""Building blocks of the enhancement network.

Feature tensors follow the conv layout B x C x H x W. The transformer
chain runs axis attention (rows as sequences over width, then columns
over height) and a dual-gated feed-forward, both behind pre-norm
residuals with layer normalization over the channel dimension.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig


class ChannelLayerNorm(nn.Module):
    """LayerNorm across channels for B x C x H x W tensors."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        y = (x - mean) / torch.sqrt(var + self.eps)
        return y * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class MultiHeadSelfAttention(nn.Module):
    """Standard multi-head self-attention over a sequence.

    Input is (N, L, D); queries, keys, and values come from one fused
    projection, attention is softmax(Q K^T / sqrt(d_k)) V per head, heads
    are concatenated and output-projected. No positional terms here, so
    the map is permutation-equivariant along L.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        n, length, dim = x.shape
        if dim != self.dim:
            raise ValueError(f"expected feature dim {self.dim}, got {dim}")
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def split(t):
            return t.view(n, length, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        scores = q @ k.transpose(-2, -1) / (self.head_dim**0.5)
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(n, length, dim)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class AxialAttention(nn.Module):
    """Attention over width (each row a sequence), then over height."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.row_attn = MultiHeadSelfAttention(dim, num_heads)
        self.col_attn = MultiHeadSelfAttention(dim, num_heads)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w = x.shape
        y = x.permute(0, 2, 3, 1)  # B H W D
        y = self.row_attn(y.reshape(b * h, w, d)).reshape(b, h, w, d)
        y = y.permute(0, 2, 1, 3)  # B W H D
        y = self.col_attn(y.reshape(b * w, h, d)).reshape(b, w, h, d)
        return y.permute(0, 3, 2, 1)  # B D H W


class DualGateFeedForward(nn.Module):
    """Two gated pathways, summed.

    Each pathway lifts with a 1x1 conv, filters with a 3x3 depthwise conv,
    and gates elementwise: gelu(u) * gelu(dw(u)) with u the lifted input.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.lift1 = nn.Conv2d(dim, dim, 1)
        self.depth1 = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.lift2 = nn.Conv2d(dim, dim, 1)
        self.depth2 = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u1 = self.lift1(x)
        u2 = self.lift2(x)
        return F.gelu(u1) * F.gelu(self.depth1(u1)) + F.gelu(u2) * F.gelu(self.depth2(u2))


class TransformerBlock(nn.Module):
    """Pre-norm residual block: attention sublayer then feed-forward sublayer."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = ChannelLayerNorm(dim)
        self.attn = AxialAttention(dim, num_heads)
        self.norm2 = ChannelLayerNorm(dim)
        self.ffn = DualGateFeedForward(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class PositionalBias(nn.Module):
    """Learnable low-resolution positional table, resized to the feature grid.

    Stored at table_size x table_size and bilinearly interpolated, so the
    network handles arbitrary image sizes with a fixed parameter cost.
    """

    def __init__(self, dim: int, table_size: int = 16):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(1, dim, table_size, table_size))

    def forward(self, height: int, width: int) -> torch.Tensor:
        if self.table.shape[-2:] == (height, width):
            return self.table
        return F.interpolate(self.table, size=(height, width), mode="bilinear", align_corners=False)


class GuidedAttentionMapGenerator(nn.Module):
    """Predicts per-pixel under/over attention maps in (0, 1).

    Embedding conv, one positional bias at the embedding stage, a chain of
    transformer blocks, and a sigmoid head with one channel per exposure
    class. guide_gain is the scalar used when the maps re-highlight the
    input image downstream.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.in_conv = nn.Conv2d(3, d, 3, padding=1)
        self.pos_bias = PositionalBias(d)
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.num_heads) for _ in range(cfg.num_blocks))
        self.head = nn.Conv2d(d, cfg.attn_map_channels, 3, padding=1)
        self.guide_gain = nn.Parameter(torch.ones(()))

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        h = self.in_conv(img)
        h = h + self.pos_bias(img.shape[-2], img.shape[-1]).to(h.dtype)
        for block in self.blocks:
            h = block(h)
        return torch.sigmoid(self.head(h))


class LocalEnhancementBlock(nn.Module):
    """Per-pixel multiplicative and additive correction of the guided image.

    Full-resolution conv stack (no resampling) with instance normalization,
    then two 1x1 heads: mul = softplus(raw) > 0 scales contrast, add =
    0.5*tanh(raw) shifts brightness. Output is clamp(mul * x + add, 0, 1).
    """

    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(3, dim, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(dim, affine=True)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(dim, affine=True)
        self.mul_head = nn.Conv2d(dim, 3, 1)
        self.add_head = nn.Conv2d(dim, 3, 1)

    def forward(self, guided: torch.Tensor):
        h = F.gelu(self.norm1(self.conv1(guided)))
        h = F.gelu(self.norm2(self.conv2(h)))
        mul = F.softplus(self.mul_head(h))
        add = 0.5 * torch.tanh(self.add_head(h))
        image = torch.clamp(mul * guided + add, 0.0, 1.0)
        return mul, add, image


class GlobalEnhancementBlock(nn.Module):
    """Image-wide gamma and color-matrix correction.

    Conditions on img * inverse-luminance, pools to a context vector, and
    predicts gamma in gamma_range (scaled sigmoid) plus a 3x3 color matrix
    I + 0.25*tanh(head). The color matrix is applied first, then gamma.
    """

    def __init__(self, dim: int, gamma_range: tuple[float, float]):
        super().__init__()
        self.gamma_range = gamma_range
        self.conv1 = nn.Conv2d(3, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.gamma_head = nn.Linear(dim, 1)
        self.color_head = nn.Linear(dim, 9)

    def forward(self, img: torch.Tensor, inv_lum: torch.Tensor):
        h = F.gelu(self.conv1(img * inv_lum))
        h = F.gelu(self.conv2(h))
        context = h.mean(dim=(2, 3))

        lo, hi = self.gamma_range
        gamma = lo + torch.sigmoid(self.gamma_head(context)) * (hi - lo)  # B x 1
        eye = torch.eye(3, dtype=img.dtype, device=img.device)
        color = eye + 0.25 * torch.tanh(self.color_head(context)).view(-1, 3, 3)

        balanced = torch.einsum("bij,bjhw->bihw", color, img).clamp(0.0, 1.0)
        # guard pow at exactly zero: x**g has an unbounded grad there for g < 1
        positive = torch.where(balanced > 0, balanced, torch.ones_like(balanced))
        image = torch.where(
            balanced > 0,
            positive ** gamma.view(-1, 1, 1, 1),
            torch.zeros_like(balanced),
        ).clamp(0.0, 1.0)
        return gamma, color, image


class ExposureAwareFusion(nn.Module):
    """Per-channel gate blending the local and global corrections.

    Two spatial convs over the concatenated (local, global, attention)
    stack, global average pooling to a context vector, then a sigmoid
    gate w in (0,1)^3; the blend is w*local + (1-w)*global.
    """

    def __init__(self, dim: int, attn_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(6 + attn_channels, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.gate = nn.Linear(dim, 3)

    def forward(self, local_img: torch.Tensor, global_img: torch.Tensor, attn: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.conv1(torch.cat([local_img, global_img, attn], dim=1)))
        h = F.gelu(self.conv2(h))
        context = h.mean(dim=(2, 3))
        return torch.sigmoid(self.gate(context))  # B x 3
