"""Subject-token encoder: maps image features to per-site conditioning tokens.

Two query transformers read the multi-layer image feature stack: one driven
by timestep/site-aware queries produces per-site subject tokens plus a text
CLS row; one with plain learned queries produces visual tokens plus a visual
CLS row.  A fusion step refines the visual tokens against the subject tokens
before they are handed to the denoiser's visual attention branch.  CLS rows
never reach the denoiser; they only feed the crossmodal contrastive loss.
"""

import math

import torch
import torch.nn as nn

from .errors import RejectedInputError

FOURIER_PAIRS = 8


class PerceiverAttention(nn.Module):
    """Attention of queries over [context, queries] with shared width.

    out = softmax(Q(q) K([c,q])^T / sqrt(d)) V([c,q]); no output projection.
    """

    def __init__(self, width):
        super().__init__()
        self.to_q = nn.Linear(width, width, bias=False)
        self.to_k = nn.Linear(width, width, bias=False)
        self.to_v = nn.Linear(width, width, bias=False)

    def forward(self, context, queries):
        if context is not None and context.shape[-1] != queries.shape[-1]:
            raise RejectedInputError("context/query width mismatch")
        both = queries if context is None or context.shape[-2] == 0 else \
            torch.cat([context, queries], dim=-2)
        q = self.to_q(queries)
        k = self.to_k(both)
        v = self.to_v(both)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(queries.shape[-1]), dim=-1)
        return att @ v


class _QformerBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.ln_ctx = nn.LayerNorm(width)
        self.ln_q = nn.LayerNorm(width)
        self.attend = PerceiverAttention(width)
        self.proj = nn.Linear(width, width)
        self.ln_mlp = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, width * 4), nn.GELU(),
                                 nn.Linear(width * 4, width))

    def forward(self, context, queries):
        queries = queries + self.proj(self.attend(self.ln_ctx(context), self.ln_q(queries)))
        return queries + self.mlp(self.ln_mlp(queries))


class Qformer(nn.Module):
    """Stack of perceiver blocks refining a fixed number of query slots."""

    def __init__(self, width, depth=4):
        super().__init__()
        self.blocks = nn.ModuleList(_QformerBlock(width) for _ in range(depth))
        self.norm = nn.LayerNorm(width)

    def forward(self, context, queries):
        for block in self.blocks:
            queries = block(context, queries)
        return self.norm(queries)


def fourier_features(t, timesteps=100, pairs=FOURIER_PAIRS):
    """sin/cos features of the timestep at geometrically spaced wavelengths."""
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    wavelengths = torch.logspace(0, math.log10(timesteps / 2), pairs)
    ang = 2 * math.pi * t[:, None] / wavelengths[None, :]
    return torch.cat([ang.sin(), ang.cos()], dim=-1)  # (N, 2*pairs)


class SubjectEncoder(nn.Module):
    """Produces per-site subject tokens, visual tokens, and fused visual tokens."""

    def __init__(self, width=64, sites=4, visual_tokens=4, depth=4, timesteps=100):
        super().__init__()
        self.width = width
        self.sites = sites
        self.visual_tokens = visual_tokens
        self.timesteps = timesteps
        self.fourier_proj = nn.Linear(2 * FOURIER_PAIRS, width)
        self.slot_emb = nn.Parameter(torch.randn(sites + 1, width) * 0.02)
        self.visual_queries = nn.Parameter(torch.randn(visual_tokens + 1, width) * 0.02)
        self.text_former = Qformer(width, depth)
        self.visual_former = Qformer(width, depth)
        self.fuse = PerceiverAttention(width)
        self.fuse_out = nn.Linear(width, width)
        nn.init.zeros_(self.fuse_out.weight)   # fusion starts as identity
        nn.init.zeros_(self.fuse_out.bias)

    def timestep_queries(self, t) -> torch.Tensor:
        """(N, sites+1, d) queries: projected timestep features + slot embeddings."""
        t = torch.as_tensor(t).reshape(-1)
        if torch.any((t < 0) | (t >= self.timesteps)):
            raise RejectedInputError(f"timestep out of [0,{self.timesteps})")
        base = self.fourier_proj(fourier_features(t, self.timesteps))
        return base[:, None, :] + self.slot_emb[None, :, :]

    def text_tokens(self, feature_stack, t) -> torch.Tensor:
        """(N, sites+1, d): rows 0..sites-1 are per-site subject tokens, last is CLS."""
        return self.text_former(feature_stack.features, self.timestep_queries(t))

    def visual_tokens_of(self, feature_stack) -> torch.Tensor:
        """(N, visual_tokens+1, d): learned-query read-out; last row is CLS."""
        n = feature_stack.features.shape[0]
        queries = self.visual_queries[None].expand(n, -1, -1)
        return self.visual_former(feature_stack.features, queries)

    def fuse_visual(self, text_tokens, visual_tokens) -> torch.Tensor:
        """Refine visual tokens with subject tokens as context (CLS rows excluded)."""
        ctx = text_tokens[..., : self.sites, :]
        q = visual_tokens[..., : self.visual_tokens, :]
        return q + self.fuse_out(self.fuse(ctx, q))

    def forward(self, feature_stack, t):
        """Returns MultimodalFeatures for a batch of feature stacks."""
        f_text = self.text_tokens(feature_stack, t)
        f_visual = self.visual_tokens_of(feature_stack)
        fused = self.fuse_visual(f_text, f_visual)
        return MultimodalFeatures(f_text, f_visual, fused, self.sites, self.visual_tokens)


class MultimodalFeatures:
    """Bundled outputs of the subject encoder for one batch."""

    def __init__(self, text_tokens, visual_tokens, fused_visual, sites, m):
        self.text_tokens = text_tokens          # (N, sites+1, d)
        self.visual_tokens = visual_tokens      # (N, m+1, d)
        self.fused_visual = fused_visual        # (N, m, d)
        self.sites = sites
        self.m = m

    @property
    def subject_tokens(self):
        """(N, sites, 1, d) view of the per-site subject tokens (one per site)."""
        return self.text_tokens[..., : self.sites, :].unsqueeze(-2)

    @property
    def text_cls(self):
        return self.text_tokens[..., self.sites, :]

    @property
    def visual_cls(self):
        return self.visual_tokens[..., self.m, :]
