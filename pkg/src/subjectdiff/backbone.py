"""Toy latent denoiser with parallel text/visual cross-attention.

The latent space is a fixed 2x area-average downsample of the 64x64 image
(decode = nearest-neighbor upsample); no learned autoencoder.  Four
cross-attention sites (32/16/8/16 grids) each attend to their own text
sequence and, when an adapter is attached, to a shared set of visual tokens
via a second softmax branch scaled by gamma.  Both softmax maps are captured
per site for localization losses and mask-guided sampling.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import RejectedInputError

LATENT = 32


def encode_latent(images: torch.Tensor) -> torch.Tensor:
    """(N,3,64,64) image -> (N,3,32,32) latent via area averaging."""
    if images.shape[-2:] != (64, 64):
        raise RejectedInputError(f"expected 64x64 images, got {tuple(images.shape)}")
    return F.avg_pool2d(images, 2)


def decode_latent(z: torch.Tensor) -> torch.Tensor:
    """(N,3,32,32) latent -> (N,3,64,64) image via nearest-neighbor upsampling."""
    return F.interpolate(z, scale_factor=2, mode="nearest")


def pool_mask(masks: torch.Tensor) -> torch.Tensor:
    """(N,64,64) binary mask -> (N,32,32) soft mask in [0,1]."""
    return F.avg_pool2d(masks.float()[:, None], 2)[:, 0]


class NoiseSchedule:
    """Linear-beta schedule with cached cumulative products."""

    def __init__(self, timesteps=100, beta_start=1e-4, beta_end=2e-2):
        self.timesteps = timesteps
        self.betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        alphas = 1.0 - self.betas
        self.alpha_bar = torch.cumprod(alphas, dim=0)
        assert torch.all(self.betas > 0) and torch.all(self.betas < 1)
        assert torch.all(self.alpha_bar[1:] < self.alpha_bar[:-1])

    def check_t(self, t):
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any((t < 0) | (t >= self.timesteps)):
            raise RejectedInputError(f"timestep out of [0,{self.timesteps})")
        return t

    def add_noise(self, z0: torch.Tensor, t, epsilon: torch.Tensor) -> torch.Tensor:
        """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
        if epsilon.shape != z0.shape:
            raise RejectedInputError("noise shape must match the latent shape")
        t = self.check_t(t)
        abar = self.alpha_bar[t].to(z0.dtype)
        while abar.dim() < z0.dim():
            abar = abar.unsqueeze(-1)
        return abar.sqrt() * z0 + (1 - abar).sqrt() * epsilon


@dataclass
class LayerConditioning:
    """Per-site text-encoder outputs plus the placeholder position."""
    per_layer: torch.Tensor        # (N, l, L, d)
    placeholder_index: torch.Tensor  # (N,)


@dataclass
class SiteCapture:
    """Softmax maps captured at one cross-attention site."""
    grid: tuple                    # (h, w) of the query grid
    text_probs: torch.Tensor       # (N, h*w, L)
    visual_probs: torch.Tensor = None  # (N, h*w, m) when the adapter branch ran


@dataclass
class AttentionBundle:
    """All captured maps of one forward pass."""
    sites: list = field(default_factory=list)
    placeholder_index: torch.Tensor = None

    def placeholder_maps(self):
        """Per site: (N, h*w) attention of each query on the placeholder token."""
        p = self.placeholder_index
        return [s.text_probs.gather(2, p[:, None, None].expand(-1, s.text_probs.shape[1], 1))[..., 0]
                for s in self.sites]

    def constituent_maps(self):
        """Every per-token spatial map feeding the aggregated global map.

        Yields (grid, (N, h*w)) pairs: each visual token's map at each site
        plus the placeholder text map at each site.
        """
        if not self.sites:
            raise RejectedInputError("empty attention bundle")
        out = []
        for s in self.sites:
            if s.visual_probs is not None:
                for j in range(s.visual_probs.shape[-1]):
                    out.append((s.grid, s.visual_probs[..., j]))
        for s, pm in zip(self.sites, self.placeholder_maps()):
            out.append((s.grid, pm))
        return out

    def global_map(self, out_hw=(LATENT, LATENT)) -> torch.Tensor:
        return aggregate_maps(self.constituent_maps(), out_hw)


def _minmax_norm(flat: torch.Tensor) -> torch.Tensor:
    """Per-sample min-max to [0,1]; a constant map maps to all zeros."""
    lo = flat.min(dim=-1, keepdim=True).values
    hi = flat.max(dim=-1, keepdim=True).values
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    out = (flat - lo) / safe
    return torch.where(span > 0, out, torch.zeros_like(out))


def aggregate_maps(maps, out_hw=(LATENT, LATENT)) -> torch.Tensor:
    """Min-max normalize, bilinearly resize, and average constituent maps.

    maps: list of ((h, w), (N, h*w)) pairs.  Returns (N, H, W) in [0,1].
    """
    if not maps:
        raise RejectedInputError("no maps to aggregate")
    acc = None
    for (h, w), flat in maps:
        norm = _minmax_norm(flat).reshape(-1, 1, h, w)
        resized = F.interpolate(norm, size=out_hw, mode="bilinear", align_corners=False)
        acc = resized if acc is None else acc + resized
    return (acc / len(maps))[:, 0]


def dual_cross_attention(queries, text_kv, visual_kv, gamma, weights, mask=None,
                         placeholder_index=None):
    """softmax(Q Kt^T / sqrt(d)) Vt + gamma * softmax(Q Kv^T / sqrt(d)) Vv.

    queries: (N, T, d); text_kv: (N, L, d); visual_kv: (N, m, d) or None.
    weights: module carrying to_q / to_kt / to_vt (+ to_kv / to_vv).
    mask: optional (N, T) binary query mask; where 0, the visual branch is
    silenced and the placeholder text column is removed with renormalization.
    Returns (out, text_probs, visual_probs).
    """
    d = queries.shape[-1]
    q = weights.to_q(queries)
    kt = weights.to_kt(text_kv)
    vt = weights.to_vt(text_kv)
    text_probs = torch.softmax(q @ kt.transpose(-2, -1) / math.sqrt(d), dim=-1)
    visual_probs = None
    if mask is not None and placeholder_index is not None:
        text_probs = _mask_text_probs(text_probs, mask, placeholder_index)
    out = text_probs @ vt
    if visual_kv is not None:
        kv = weights.to_kv(visual_kv)
        vv = weights.to_vv(visual_kv)
        visual_probs = torch.softmax(q @ kv.transpose(-2, -1) / math.sqrt(d), dim=-1)
        if mask is not None:
            visual_probs = visual_probs * mask[..., None]
        out = out + gamma * (visual_probs @ vv)
    return out, text_probs, visual_probs


def _mask_text_probs(probs, mask, placeholder_index):
    """Zero the placeholder column for masked-out queries and renormalize.

    Touches only rows with mask == 0 so an all-ones mask is a bit-exact no-op.
    """
    zero = mask == 0
    if not bool(zero.any()):
        return probs
    length = probs.shape[-1]
    p = placeholder_index.to(torch.long)
    col = torch.arange(length, device=probs.device)[None, None, :] == p[:, None, None]
    killed = probs.masked_fill(zero[..., None] & col, 0.0)
    renorm = killed / killed.sum(dim=-1, keepdim=True).clamp(min=1e-12)
    # rows with mask == 1 keep the original values bit-exactly
    return torch.where(zero[..., None], renorm, probs)


class CrossAttentionSite(nn.Module):
    """Norm + dual cross-attention + output projection, residual."""

    def __init__(self, width):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.to_q = nn.Linear(width, width, bias=False)
        self.to_kt = nn.Linear(width, width, bias=False)
        self.to_vt = nn.Linear(width, width, bias=False)
        self.to_out = nn.Linear(width, width)
        self.to_kv = None
        self.to_vv = None

    def attach_adapter(self):
        """Create the trainable visual projections (keys copy text init, values zero)."""
        width = self.to_kt.weight.shape[0]
        self.to_kv = nn.Linear(width, width, bias=False)
        self.to_vv = nn.Linear(width, width, bias=False)
        with torch.no_grad():
            self.to_kv.weight.copy_(self.to_kt.weight)
            self.to_vv.weight.zero_()

    def forward(self, h, text_seq, visual_tokens, gamma, mask=None,
                placeholder_index=None):
        n, c, hh, ww = h.shape
        flat = h.flatten(2).transpose(1, 2)               # (N, T, C)
        attn, tp, vp = dual_cross_attention(
            self.norm(flat), text_seq,
            visual_tokens if self.to_kv is not None else None,
            gamma, self, mask=mask, placeholder_index=placeholder_index)
        flat = flat + self.to_out(attn)
        out = flat.transpose(1, 2).reshape(n, c, hh, ww)
        return out, SiteCapture(grid=(hh, ww), text_probs=tp, visual_probs=vp)


class _TimeEmbed(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.width = width
        self.mlp = nn.Sequential(nn.Linear(width, width * 2), nn.SiLU(),
                                 nn.Linear(width * 2, width))

    def forward(self, t):
        half = self.width // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        ang = t.float()[:, None] * freqs[None, :]
        return self.mlp(torch.cat([ang.sin(), ang.cos()], dim=-1))


class _ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.n1 = nn.GroupNorm(8, ch)
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(ch, ch)
        self.n2 = nn.GroupNorm(8, ch)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.emb(temb)[:, :, None, None]
        return x + self.c2(F.silu(self.n2(h)))


class Denoiser(nn.Module):
    """Three-resolution UNet (32/16/8) with four dual cross-attention sites."""

    def __init__(self, width=64, sites=4):
        super().__init__()
        if sites != 4:
            raise RejectedInputError("this toy denoiser is wired for 4 conditioning sites")
        self.width = width
        self.num_sites = sites
        self.time = _TimeEmbed(width)
        self.conv_in = nn.Conv2d(3, width, 3, padding=1)
        self.res_d1 = _ResBlock(width)
        self.site1 = CrossAttentionSite(width)            # 32x32
        self.down1 = nn.Conv2d(width, width, 3, stride=2, padding=1)
        self.res_d2 = _ResBlock(width)
        self.site2 = CrossAttentionSite(width)            # 16x16
        self.down2 = nn.Conv2d(width, width, 3, stride=2, padding=1)
        self.res_mid = _ResBlock(width)
        self.site3 = CrossAttentionSite(width)            # 8x8
        self.res_u1 = _ResBlock(width)
        self.site4 = CrossAttentionSite(width)            # 16x16
        self.res_u2 = _ResBlock(width)
        self.norm_out = nn.GroupNorm(8, width)
        self.conv_out = nn.Conv2d(width, 3, 3, padding=1)

    @property
    def sites(self):
        return [self.site1, self.site2, self.site3, self.site4]

    def attach_adapter(self):
        for site in self.sites:
            site.attach_adapter()

    def has_adapter(self):
        return self.site1.to_kv is not None

    def forward(self, z_t, t, conditioning: LayerConditioning, visual_tokens=None,
                gamma=1.0, mask=None):
        """Predict noise; returns (eps_pred, AttentionBundle).

        conditioning.per_layer must carry one text sequence per site; visual
        tokens are shared across sites.  mask, when given, is an (N, 32, 32)
        binary query mask applied at every site after nearest resizing.
        """
        per_layer = conditioning.per_layer
        if per_layer.shape[1] != self.num_sites:
            raise RejectedInputError(
                f"conditioning has {per_layer.shape[1]} layers, denoiser has {self.num_sites}")
        if visual_tokens is not None and not self.has_adapter():
            raise RejectedInputError("visual tokens passed to a denoiser without adapter")
        p = conditioning.placeholder_index
        temb = self.time(torch.as_tensor(t).reshape(-1))
        bundle = AttentionBundle(placeholder_index=p)

        def site_mask(hw):
            if mask is None:
                return None
            m = F.interpolate(mask.float()[:, None], size=hw, mode="nearest")
            return m.flatten(1)

        h1 = self.res_d1(self.conv_in(z_t), temb)
        h1, cap = self.site1(h1, per_layer[:, 0], visual_tokens, gamma,
                             mask=site_mask((32, 32)), placeholder_index=p)
        bundle.sites.append(cap)
        h2 = self.res_d2(F.silu(self.down1(h1)), temb)
        h2, cap = self.site2(h2, per_layer[:, 1], visual_tokens, gamma,
                             mask=site_mask((16, 16)), placeholder_index=p)
        bundle.sites.append(cap)
        h3 = self.res_mid(F.silu(self.down2(h2)), temb)
        h3, cap = self.site3(h3, per_layer[:, 2], visual_tokens, gamma,
                             mask=site_mask((8, 8)), placeholder_index=p)
        bundle.sites.append(cap)
        u1 = self.res_u1(F.interpolate(h3, scale_factor=2, mode="nearest") + h2, temb)
        u1, cap = self.site4(u1, per_layer[:, 3], visual_tokens, gamma,
                             mask=site_mask((16, 16)), placeholder_index=p)
        bundle.sites.append(cap)
        u2 = self.res_u2(F.interpolate(u1, scale_factor=2, mode="nearest") + h1, temb)
        eps = self.conv_out(F.silu(self.norm_out(u2)))
        return eps, bundle
