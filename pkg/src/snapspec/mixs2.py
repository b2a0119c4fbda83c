"""Mixed spectral/spatial transformer denoiser.

A U-shaped network of blocks that run spectral-wise self-attention and a
lightweight multi-scale convolution branch in parallel, exchanging context
through a spatial gate (conv branch -> Q/K/V) and a channel gate (attention
branch -> conv output). The denoiser runs in the dispersed (sensor-width)
domain and adds its output back onto the input.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cassi import shift_cube, unshift_cube
from .config import ModelConfig


class LayerNorm2d(nn.Module):
    """Bias-free layer norm over the channel axis at every pixel."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        var = x.var(dim=1, keepdim=True, unbiased=False)
        return x / torch.sqrt(var + self.eps) * self.weight.view(1, -1, 1, 1)


def _dwconv(dim: int, bias: bool = False) -> nn.Conv2d:
    return nn.Conv2d(dim, dim, 3, padding=1, groups=dim, bias=bias)


def spectral_attention_core(q, k, v, alpha):
    """Transposed (channel x channel) attention.

    q, k, v: ``(..., c, N)`` with N = H*W pixels. In matrix form, with
    Q, V of shape N x c and K of shape c x N, this computes
    ``A = softmax_rows(K Q / alpha)`` (c x c) and returns ``(V A)^T``.
    """
    for t in (q, k, v):
        if not torch.isfinite(t).all():
            raise FloatingPointError("non-finite input to spectral attention")
    attn = (k @ q.transpose(-2, -1)) / alpha
    attn = attn.softmax(dim=-1)
    return attn.transpose(-2, -1) @ v


class SpectralSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, bias: bool = False):
        super().__init__()
        self.heads = heads
        self.alpha = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, 1, bias=bias)
        self.qkv_dwconv = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3, bias=bias)
        self.project_out = nn.Conv2d(dim, dim, 1, bias=bias)

    def forward(self, x, spatial_map=None):
        b, c, h, w = x.shape
        q, k, v = self.qkv_dwconv(self.qkv(x)).chunk(3, dim=1)
        if spatial_map is not None:
            q, k, v = q * spatial_map, k * spatial_map, v * spatial_map
        split = lambda t: t.reshape(b, self.heads, c // self.heads, h * w)
        out = spectral_attention_core(split(q), split(k), split(v), self.alpha)
        return self.project_out(out.reshape(b, c, h, w))


class LightweightInception(nn.Module):
    """Four parallel paths of dim/4 channels: 1x1; 1x1-3x3; 1x1-3x3-3x3; pool-1x1."""

    def __init__(self, dim: int, bias: bool = False):
        super().__init__()
        q = dim // 4
        self.path1 = nn.Conv2d(dim, q, 1, bias=bias)
        self.path3 = nn.Sequential(nn.Conv2d(dim, q, 1, bias=bias), nn.GELU(), _dwconv(q, bias))
        self.path5 = nn.Sequential(nn.Conv2d(dim, q, 1, bias=bias), nn.GELU(), _dwconv(q, bias), _dwconv(q, bias))
        self.pool = nn.AvgPool2d(3, stride=1, padding=1, count_include_pad=False)
        self.pool_proj = nn.Conv2d(dim, q, 1, bias=bias)

    def forward(self, x):
        return torch.cat([self.path1(x), self.path3(x), self.path5(x), self.pool_proj(self.pool(x))], dim=1)


class BidirectionalInteraction(nn.Module):
    """Spatial gate from the conv branch and channel gate from the attention branch."""

    def __init__(self, dim: int, reduction: int = 4):
        super().__init__()
        self.spatial = nn.Conv2d(dim, 1, 1)
        hidden = max(dim // reduction, 1)
        self.channel = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(dim, hidden, 1),
            nn.GELU(),
            nn.Conv2d(hidden, dim, 1),
        )

    def spatial_map(self, incep_feats):
        return torch.sigmoid(self.spatial(incep_feats))

    def spectral_weights(self, attn_feats):
        return torch.sigmoid(self.channel(attn_feats))

    def forward(self, attn_feats, incep_feats):
        return self.spatial_map(incep_feats), self.spectral_weights(attn_feats)


class GDFN(nn.Module):
    """Gated depth-wise conv feed-forward network."""

    def __init__(self, dim: int, expansion: float, bias: bool = False):
        super().__init__()
        hidden = int(dim * expansion)
        self.hidden = hidden
        self.project_in = nn.Conv2d(dim, hidden * 2, 1, bias=bias)
        self.dwconv = _dwconv(hidden * 2, bias)
        self.gate = nn.GELU()
        self.project_out = nn.Conv2d(hidden, dim, 1, bias=bias)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(x1 * self.gate(x2))


class MixS2Block(nn.Module):
    def __init__(self, dim: int, heads: int, expansion: float, use_spatial_branch: bool = True,
                 use_bidirectional: bool = True):
        super().__init__()
        self.norm1 = LayerNorm2d(dim)
        self.attn = SpectralSelfAttention(dim, heads)
        self.use_spatial_branch = use_spatial_branch
        if use_spatial_branch:
            self.inception = LightweightInception(dim)
            self.fuse = nn.Conv2d(2 * dim, dim, 1, bias=False)
            if use_bidirectional:
                self.interaction = BidirectionalInteraction(dim)
        # runtime switch; the reduced (no-interaction) network is this forward with both gates at 1
        self.interaction_enabled = use_spatial_branch and use_bidirectional
        self.norm2 = LayerNorm2d(dim)
        self.ffn = GDFN(dim, expansion)

    def mix(self, h):
        if not self.use_spatial_branch:
            return self.attn(h)
        incep = self.inception(h)
        if self.interaction_enabled:
            attn = self.attn(h, self.interaction.spatial_map(incep))
            incep = incep * self.interaction.spectral_weights(attn)
        else:
            attn = self.attn(h)
        return self.fuse(torch.cat([attn, incep], dim=1))

    def forward(self, x):
        x = x + self.mix(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class StageInteraction(nn.Module):
    """Spatially adaptive modulation of a block's features by the previous stage.

    ``F = psi * F_hat + gamma`` with ``psi = 1 + DConv(act(Conv(F_n) + Conv(F_mirror)))``
    and gamma built the same way without the offset. The depth-wise convs start
    at zero, so the module is the identity at initialization.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.conv_same = nn.Conv2d(dim, dim, 1)
        self.conv_mirror = nn.Conv2d(dim, dim, 1)
        self.act = nn.GELU()
        self.psi = _dwconv(dim, bias=True)
        self.gamma = _dwconv(dim, bias=True)
        for conv in (self.psi, self.gamma):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, feat_cur, prev_same, prev_mirror):
        hidden = self.act(self.conv_same(prev_same) + self.conv_mirror(prev_mirror))
        return (1.0 + self.psi(hidden)) * feat_cur + self.gamma(hidden)


class Downsample(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=0.5, mode="bilinear", align_corners=False))


class Upsample(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False))


class BlockInteraction(nn.Module):
    """Fuse every encoder scale into the skip path of one decoder level."""

    def __init__(self, enc_channels: list[int], out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(sum(enc_channels), out_channels, 1, bias=False)
        self.dwconv = _dwconv(out_channels)

    def forward(self, enc_feats, size):
        resized = [
            f if tuple(f.shape[-2:]) == tuple(size) else F.interpolate(f, size=size, mode="bilinear",
                                                                       align_corners=False)
            for f in enc_feats
        ]
        return self.dwconv(self.proj(torch.cat(resized, dim=1)))


class MixS2Transformer(nn.Module):
    """U-shaped denoiser: ``denoise(v) = v + unshift(body(shift(v)))``.

    ``forward`` returns the denoised cube and the list of per-unit features
    (encoder levels, bottleneck, decoder levels) consumed by the next stage's
    stage interaction.
    """

    def __init__(self, config: ModelConfig, stage_interaction: bool = False):
        super().__init__()
        self.config = config
        L = config.levels
        ch = [config.channels * 2 ** i for i in range(L)]
        self.channels = ch

        def level(i):
            return nn.Sequential(*[
                MixS2Block(ch[i], config.heads[i], config.gdfn_expansion, config.use_spatial_branch,
                           config.use_bidirectional)
                for _ in range(config.blocks[i])
            ])

        self.embed = nn.Conv2d(config.bands, ch[0], 3, padding=1, bias=False)
        self.encoders = nn.ModuleList([level(i) for i in range(L - 1)])
        self.downs = nn.ModuleList([Downsample(ch[i], ch[i + 1]) for i in range(L - 1)])
        self.bottleneck = level(L - 1)
        # decoder modules are indexed by level (0 = full resolution)
        self.ups = nn.ModuleList([Upsample(ch[i + 1], ch[i]) for i in range(L - 1)])
        self.use_block_interaction = config.use_block_interaction
        if config.use_block_interaction:
            self.block_interactions = nn.ModuleList(
                [BlockInteraction(ch[:L - 1], ch[i]) for i in range(L - 1)]
            )
        self.merges = nn.ModuleList([nn.Conv2d(2 * ch[i], ch[i], 1, bias=False) for i in range(L - 1)])
        self.decoders = nn.ModuleList([level(i) for i in range(L - 1)])
        self.out = nn.Conv2d(ch[0], config.bands, 3, padding=1, bias=False)
        nn.init.zeros_(self.out.weight)

        self.n_units = 2 * L - 1
        self.unit_channels = ch[:L - 1] + [ch[L - 1]] + ch[:L - 1][::-1]
        if stage_interaction:
            self.stage_interactions = nn.ModuleList([StageInteraction(c) for c in self.unit_channels])
        else:
            self.stage_interactions = None

    def _modulate(self, n, feat, prev_feats):
        if self.stage_interactions is None or prev_feats is None:
            return feat
        mirror = self.n_units - 1 - n
        return self.stage_interactions[n](feat, prev_feats[n], prev_feats[mirror])

    def body(self, x, prev_feats=None):
        L = self.config.levels
        feats, skips = [], []
        f = self.embed(x)
        n = 0
        for i in range(L - 1):
            f = self._modulate(n, self.encoders[i](f), prev_feats)
            feats.append(f)
            skips.append(f)
            f = self.downs[i](f)
            n += 1
        f = self._modulate(n, self.bottleneck(f), prev_feats)
        feats.append(f)
        n += 1
        for i in reversed(range(L - 1)):
            f = self.ups[i](f)
            if self.use_block_interaction:
                skip = self.block_interactions[i](skips, f.shape[-2:])
            else:
                skip = skips[i]
            f = self.merges[i](torch.cat([f, skip], dim=1))
            f = self._modulate(n, self.decoders[i](f), prev_feats)
            feats.append(f)
            n += 1
        return self.out(f), feats

    def forward(self, v, prev_feats=None):
        step = self.config.step
        x = shift_cube(v, step)
        H, W = x.shape[-2:]
        mult = 2 ** (self.config.levels - 1)
        pad_h, pad_w = (-H) % mult, (-W) % mult
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        out, feats = self.body(x, prev_feats)
        out = out[..., :H, :W]
        return v + unshift_cube(out, step, v.shape[-1]), feats


class IdentityDenoiser(nn.Module):
    """Drop-in prior that leaves the gradient-step output unchanged."""

    def forward(self, v, prev_feats=None):
        return v, None


def denoise(v, model: nn.Module, prev_feats=None):
    """Apply a denoiser to a ``(B, C, H, W)`` batch; returns ``(cube, features)``."""
    return model(v, prev_feats)
