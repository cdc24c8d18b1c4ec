"""Frozen feature extractors standing in for large pretrained encoders.

One small image encoder serves two read-outs: a multi-layer token stack used
by the subject encoder, and a pooled, unit-norm appearance vector used to
measure real-subject similarity.  A two-layer bidirectional transformer
encodes captions; per conditioning layer the placeholder position can be
overwritten with that layer's learned subject token.
"""

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import synthdata
from .errors import DegenerateInputError, RejectedInputError


def to_tensor_batch(images) -> torch.Tensor:
    """Stack HxWx3 [0,1] arrays into an N,3,H,W float tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


class FeatureStack:
    """Concatenated token features from several encoder depths."""

    def __init__(self, features: torch.Tensor, layers: int, tokens_per_layer: int):
        assert features.shape[-2] == layers * tokens_per_layer
        self.features = features          # (..., K*n_tok, d)
        self.layers = layers
        self.tokens_per_layer = tokens_per_layer


class _ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.c2(F.silu(self.c1(F.silu(x))))


class _SelfAttention(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.qkv = nn.Linear(ch, ch * 3)
        self.proj = nn.Linear(ch, ch)

    def forward(self, x):  # (N, T, C)
        h = self.norm(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        att = torch.softmax(q @ k.transpose(-2, -1) / np.sqrt(x.shape[-1]), dim=-1)
        return x + self.proj(att @ v)


class ImageEncoder(nn.Module):
    """Conv/attention hybrid; exposes token grids from its last three blocks."""

    def __init__(self, width=64, feature_layers=3, tokens_per_layer=16):
        super().__init__()
        if tokens_per_layer != 16 or feature_layers != 3:
            raise RejectedInputError("encoder is built for 3 layers of 4x4 token grids")
        self.width = width
        self.feature_layers = feature_layers
        self.tokens_per_layer = tokens_per_layer
        self.stem = nn.Conv2d(3, width, 4, stride=4)      # 64 -> 16
        self.block1 = _ResBlock(width)
        self.down2 = nn.Conv2d(width, width, 2, stride=2)  # 16 -> 8
        self.block2 = _ResBlock(width)
        self.down3 = nn.Conv2d(width, width, 2, stride=2)  # 8 -> 4
        self.block3 = _ResBlock(width)
        self.block4 = _SelfAttention(width)
        self.appearance_head = nn.Linear(width, width)

    def _trunk(self, images: torch.Tensor):
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[2] != 64 or images.shape[3] != 64:
            raise RejectedInputError(f"expected (N,3,64,64) images, got {tuple(images.shape)}")
        h1 = self.block1(F.silu(self.stem(images)))
        h2 = self.block2(F.silu(self.down2(h1)))          # (N, C, 8, 8)
        h3 = self.block3(F.silu(self.down3(h2)))          # (N, C, 4, 4)
        t3 = h3.flatten(2).transpose(1, 2)                # (N, 16, C)
        t4 = self.block4(t3)                              # (N, 16, C)
        return h2, t3, t4

    def multilayer(self, images: torch.Tensor) -> FeatureStack:
        """Token stack over blocks 2-4, each reduced to a 4x4 grid."""
        h2, t3, t4 = self._trunk(images)
        t2 = F.avg_pool2d(h2, 2).flatten(2).transpose(1, 2)
        stack = torch.cat([t2, t3, t4], dim=1)            # (N, 48, C)
        return FeatureStack(stack, self.feature_layers, self.tokens_per_layer)

    def appearance(self, segmented: torch.Tensor) -> torch.Tensor:
        """Unit-norm pooled vector of a segmented (background-free) image."""
        flat = segmented.flatten(1)
        if torch.any(flat.abs().sum(dim=1) == 0):
            raise DegenerateInputError("appearance of an all-zero segmented image")
        _, _, t4 = self._trunk(segmented)
        v = self.appearance_head(t4.mean(dim=1))
        return F.normalize(v, dim=-1)


def segment(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero out everything outside the subject mask."""
    return np.asarray(image, dtype=np.float32) * np.asarray(mask, dtype=np.float32)[..., None]


def supcon_loss(features: torch.Tensor, labels: torch.Tensor, temperature=0.1):
    """Supervised contrastive loss over unit-norm features (in-batch positives)."""
    sim = features @ features.T / temperature
    n = sim.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    sim = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    same = (labels[:, None] == labels[None, :]) & ~eye
    counts = same.sum(dim=1).clamp(min=1)
    return -(log_prob.masked_fill(~same, 0.0).sum(dim=1) / counts).mean()


def pretrain_appearance(dataset: synthdata.Dataset, steps=10000, batch_subjects=16,
                        views_per_subject=2, lr=1e-3, temperature=0.1, seed=0,
                        width=64, holdout_renders=0, log_every=500, progress=None):
    """Train the image encoder contrastively on segmented renders, then freeze it.

    Returns (encoder, history); history rows are (step, loss).
    """
    if len(dataset) == 0:
        raise DegenerateInputError("empty dataset")
    torch.manual_seed(seed)
    encoder = ImageEncoder(width=width)
    opt = torch.optim.AdamW(encoder.parameters(), lr=lr, weight_decay=1e-2)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 911])))
    train_idx, _ = dataset.split_indices(holdout_renders)
    by_subject = {}
    for idx in train_idx:
        by_subject.setdefault(dataset.records[idx]["subject_id"], []).append(idx)
    sids = [s for s in sorted(by_subject) if len(by_subject[s]) >= views_per_subject]
    if len(sids) < 2:
        raise DegenerateInputError("need at least two subjects with enough renders")
    history = []
    for step in range(steps):
        take = min(batch_subjects, len(sids))
        subj = rng.choice(len(sids), size=take, replace=False)
        images, labels = [], []
        for si in subj:
            idxs = by_subject[sids[int(si)]]
            picks = rng.choice(len(idxs), size=views_per_subject, replace=False)
            for pi in picks:
                s = dataset.sample(idxs[int(pi)])
                images.append(segment(s.image, s.mask))
                labels.append(s.subject_id)
        feats = encoder.appearance(to_tensor_batch(images))
        loss = supcon_loss(feats, torch.tensor(labels), temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            history.append((step, float(loss)))
            if progress:
                progress(step, float(loss))
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder, history


class TextEncoder(nn.Module):
    """Small bidirectional transformer over the fixed caption vocabulary."""

    def __init__(self, width=64, layers=2, heads=4, max_len=synthdata.CAPTION_LEN,
                 vocab_size=len(synthdata.VOCAB)):
        super().__init__()
        self.width = width
        self.token_emb = nn.Embedding(vocab_size, width)
        self.pos_emb = nn.Parameter(torch.randn(max_len, width) * 0.02)
        block = nn.TransformerEncoderLayer(
            d_model=width, nhead=heads, dim_feedforward=width * 4,
            dropout=0.0, activation="gelu", batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(block, num_layers=layers)
        self.norm = nn.LayerNorm(width)

    def _run(self, emb):
        return self.norm(self.blocks(emb + self.pos_emb[None, : emb.shape[1]]))

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        """Plain caption encoding with the placeholder's base embedding."""
        return self._run(self.token_emb(tokens))

    def encode_layers(self, tokens, placeholder_index, subject_tokens=None,
                      num_layers=4):
        """Per-conditioning-layer encodings with the subject token substituted.

        tokens: (N, L) ids; placeholder_index: (N,) ints; subject_tokens:
        (N, num_layers, d) or None.  Returns (N, num_layers, L, d).  Layer a is
        encoded with subject_tokens[:, a] written at the placeholder position.
        """
        if tokens.dim() == 1:
            tokens = tokens[None]
        n, length = tokens.shape
        p = torch.as_tensor(placeholder_index, dtype=torch.long).reshape(-1)
        if p.numel() == 1 and n > 1:
            p = p.expand(n).clone()
        if torch.any((p < 0) | (p >= length)):
            raise RejectedInputError("placeholder index out of caption range")
        if not torch.all(tokens.gather(1, p[:, None]).squeeze(1) == synthdata.PLACEHOLDER_ID):
            raise RejectedInputError("no placeholder token at the stated position")
        emb = self.token_emb(tokens)                      # (N, L, d)
        if subject_tokens is None:
            out = self._run(emb)
            return out[:, None].expand(n, num_layers, length, self.width)
        if subject_tokens.dim() == 2:
            subject_tokens = subject_tokens[None].expand(n, -1, -1)
        if subject_tokens.shape[1] != num_layers:
            raise RejectedInputError(
                f"expected {num_layers} per-layer subject tokens, got {subject_tokens.shape[1]}")
        stacked = emb[:, None].repeat(1, num_layers, 1, 1)  # (N, l, L, d)
        idx = p[:, None, None, None].expand(n, num_layers, 1, self.width)
        stacked = stacked.scatter(2, idx, subject_tokens[:, :, None, :])
        out = self._run(stacked.reshape(n * num_layers, length, self.width))
        return out.reshape(n, num_layers, length, self.width)
