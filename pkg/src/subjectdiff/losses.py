"""Training objectives.

All functions are pure and dtype-preserving so they can be checked with
double-precision finite differences.  Batch-index permutations leave every
loss invariant.
"""

import torch
import torch.nn.functional as F

from .errors import NonFiniteLossError, RejectedInputError

APPEARANCE_CLAMP = 0.1   # lower clamp on appearance similarity before inversion


def ldm_loss(epsilon: torch.Tensor, epsilon_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    if epsilon.shape != epsilon_pred.shape:
        raise RejectedInputError("noise prediction shape mismatch")
    return (epsilon - epsilon_pred).pow(2).mean()


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities between rows of a and rows of b."""
    return F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).transpose(-2, -1)


def cscl_loss(visual_cls: torch.Tensor, text_cls: torch.Tensor) -> torch.Tensor:
    """Symmetric crossmodal contrast on CLS tokens.

    a_ij = cos(visual_i, text_j).  Both denominators exclude the diagonal
    term, exactly as specified, so the loss can be negative.
    """
    if visual_cls.shape[0] < 2 or visual_cls.shape != text_cls.shape:
        raise RejectedInputError("need matching CLS batches with N >= 2")
    a = cosine_matrix(visual_cls, text_cls)
    n = a.shape[0]
    offdiag = a.masked_fill(torch.eye(n, dtype=torch.bool), float("-inf"))
    diag = a.diagonal()
    col = torch.logsumexp(offdiag, dim=0)    # sum_{j != i} exp(a_ji), text i fixed
    row = torch.logsumexp(offdiag, dim=1)    # sum_{j != i} exp(a_ij), visual i fixed
    return (col - diag).sum() + (row - diag).sum()


def appearance_scaling(r: torch.Tensor) -> torch.Tensor:
    """alpha = 1 / clamp(r, 0.1, 1): amplifies contrast between unlike subjects."""
    return 1.0 / r.clamp(APPEARANCE_CLAMP, 1.0)


class AppearanceSimilarity:
    """Pairwise appearance cosines of segmented subjects plus scaling factors."""

    def __init__(self, r: torch.Tensor):
        r = r.clone()
        r.fill_diagonal_(1.0)
        self.r = r
        self.alpha = appearance_scaling(r)


def appearance_similarity(segmented: torch.Tensor, encoder) -> AppearanceSimilarity:
    """Encode segmented images and build the similarity/scaling matrices."""
    vecs = encoder.appearance(segmented)
    return AppearanceSimilarity(cosine_matrix(vecs, vecs))


def macl_loss(anchor_tokens: torch.Tensor, positive_tokens: torch.Tensor,
              alpha: torch.Tensor, tau: float, pos_index=None) -> torch.Tensor:
    """Appearance-scaled contrast over per-site subject tokens (CLS included).

    anchor_tokens, positive_tokens: (N, A, d) with A = sites + 1.  For anchor
    i the contrast runs over the other batch slots k != i; the slot
    pos_index[i] (default (i+1) % N) carries anchor i's own positive instead
    of batch entry k, so the denominator has N-1 terms of which exactly one
    is the positive.  alpha[i, k] must be the appearance scaling between
    anchor i and whatever occupies slot k (i.e. alpha[i, pos_index[i]] is the
    anchor/positive scaling).  Returns the mean over anchors of the summed
    per-site terms.
    """
    n = anchor_tokens.shape[0]
    if n < 2:
        raise RejectedInputError("appearance contrast needs N >= 2")
    if tau <= 0:
        raise RejectedInputError("temperature must be positive")
    if positive_tokens.shape != anchor_tokens.shape:
        raise RejectedInputError("anchor/positive token shape mismatch")
    if alpha.shape != (n, n):
        raise RejectedInputError("alpha must be (N, N)")
    if pos_index is None:
        pos_index = (torch.arange(n) + 1) % n
    else:
        pos_index = torch.as_tensor(pos_index, dtype=torch.long)
        if torch.any(pos_index == torch.arange(n)):
            raise RejectedInputError("pos_index must differ from the anchor index")

    anc = F.normalize(anchor_tokens, dim=-1)
    pos = F.normalize(positive_tokens, dim=-1)
    cos = torch.einsum("iad,kad->ika", anc, anc)          # (N, N, A)
    cos_pos = torch.einsum("iad,iad->ia", anc, pos)       # (N, A)
    rows = torch.arange(n)
    cos = cos.clone()
    cos[rows, pos_index] = cos_pos
    logits = alpha[..., None] * cos / tau                 # (N, N, A)
    logits = logits.masked_fill(torch.eye(n, dtype=torch.bool)[..., None], float("-inf"))
    denom = torch.logsumexp(logits, dim=1)                # (N, A)
    numer = logits[rows, pos_index]                       # (N, A)
    return (denom - numer).sum(dim=1).mean()


def location_loss(global_map: torch.Tensor, soft_mask: torch.Tensor,
                  variant="paper") -> torch.Tensor:
    """Attention-localization penalty against the pooled subject mask.

    paper:        mean((1-M) * (1-A)) - mean(M * A)
    conventional: mean((1-M) * A)     - mean(M * A)
    """
    if global_map.shape != soft_mask.shape:
        raise RejectedInputError("map/mask shape mismatch")
    for name, x in (("map", global_map), ("mask", soft_mask)):
        if torch.any(x < 0) or torch.any(x > 1):
            raise RejectedInputError(f"{name} values outside [0,1]")
    if variant == "paper":
        outside = ((1 - soft_mask) * (1 - global_map)).mean()
    elif variant == "conventional":
        outside = ((1 - soft_mask) * global_map).mean()
    else:
        raise RejectedInputError(f"unknown location-loss variant {variant!r}")
    return outside - (soft_mask * global_map).mean()


def total_loss(ldm, cscl, macl, loc, lambda1=1e-2, lambda2=1e-3):
    """ldm + lambda1 * (cscl + macl) + lambda2 * loc, with finiteness checks."""
    parts = {"ldm": ldm, "cscl": cscl, "macl": macl, "loc": loc}
    for name, value in parts.items():
        v = torch.as_tensor(value)
        if not torch.isfinite(v).all():
            raise NonFiniteLossError(f"non-finite {name} loss: {v}")
    return ldm + lambda1 * (cscl + macl) + lambda2 * loc
