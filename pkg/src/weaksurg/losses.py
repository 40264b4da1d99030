"""Training objectives: classification, temporal equivariance and semantic continuity."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import grid_side, l2_normalize
from .errors import ConfigurationError, NumericFault

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def mlsm_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Multi-label soft margin loss, averaged over classes (and batch rows)."""
    if not torch.isfinite(logits).all():
        raise NumericFault("non-finite logits", component="cls")
    labels = labels.to(logits.dtype)
    per_class = -(labels * F.logsigmoid(logits) + (1 - labels) * F.logsigmoid(-logits))
    return per_class.mean()


# -- temporal equivariance -------------------------------------------------------


def spatial_similarity(z_ref: torch.Tensor, z_tgt: torch.Tensor, tau: float) -> torch.Tensor:
    """``F[i, j] = cos(z_ref[i], z_tgt[j]) / tau`` over the last two dims."""
    if z_ref.shape != z_tgt.shape:
        raise ConfigurationError(f"token grids differ: {tuple(z_ref.shape)} vs {tuple(z_tgt.shape)}")
    if tau <= 0:
        raise ConfigurationError("similarity temperature must be positive")
    return l2_normalize(z_ref) @ l2_normalize(z_tgt).transpose(-2, -1) / tau


def window_mask(n: int, k: int, device=None) -> torch.Tensor:
    """Boolean ``(N, N)``: entry ``(i, j)`` is True iff patch ``i`` lies in the
    ``k x k`` window centred on patch ``j``."""
    side = grid_side(n)
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"window size must be a positive odd number, got {k}")
    if k >= side:
        if k > side:
            warnings.warn(f"window {k} exceeds grid side {side}; using the full grid", stacklevel=3)
        return torch.ones(n, n, dtype=torch.bool, device=device)
    r = (k - 1) // 2
    idx = torch.arange(n, device=device)
    rows, cols = idx // side, idx % side
    return ((rows[:, None] - rows[None, :]).abs() <= r) & ((cols[:, None] - cols[None, :]).abs() <= r)


def neighborhood_mask(sim: torch.Tensor, k: int) -> torch.Tensor:
    """Set entries outside the local window to ``-inf``."""
    keep = window_mask(sim.shape[-1], k, device=sim.device)
    return sim.masked_fill(~keep, float("-inf"))


def propagate(sim_masked: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Carry per-patch ``values`` (``N x K``) from reference to target positions.

    Target patch ``j`` receives a convex combination of reference rows with
    weights ``softmax_i(F[i, j])`` over the unmasked window.
    """
    weights = sim_masked.softmax(dim=-2)
    return weights.transpose(-2, -1) @ values


@torch.no_grad()
def sinkhorn_assign(
    scores: torch.Tensor,
    eps: float = 0.05,
    iters: int = 3,
    allowed: torch.Tensor | None = None,
) -> torch.Tensor:
    """Balanced soft assignment of N tokens to K prototypes.

    ``scores`` is ``(N, K)``. Columns are driven to equal mass ``N / K'`` (``K'``
    allowed prototypes) and every row ends as a probability vector. ``allowed``
    is an optional boolean ``(K,)`` that zeroes excluded prototypes.
    """
    if eps <= 0:
        raise ConfigurationError("sinkhorn eps must be positive")
    if not torch.isfinite(scores).all():
        raise NumericFault("non-finite sinkhorn scores", component="pter")
    n, k = scores.shape
    q = torch.exp((scores - scores.max()) / eps)
    if allowed is not None:
        q = q * allowed.to(q.dtype)
        k = int(allowed.sum())
    q = q / q.sum()
    for _ in range(iters):
        col = q.sum(dim=0, keepdim=True)
        q = q / col.clamp_min(torch.finfo(q.dtype).tiny) / k
        q = q / q.sum(dim=1, keepdim=True).clamp_min(torch.finfo(q.dtype).tiny) / n
    return q / q.sum(dim=1, keepdim=True).clamp_min(torch.finfo(q.dtype).tiny)


def pter_loss(assign_ref: torch.Tensor, sim_masked: torch.Tensor, probs_tgt: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between propagated reference assignments and target
    prototype probabilities, averaged over target patches (and batch)."""
    targets = propagate(sim_masked, assign_ref.detach())
    logq = torch.log(probs_tgt.clamp_min(PROB_FLOOR))
    return -(targets * logq).sum(dim=-1).mean()


# -- semantic continuity ----------------------------------------------------------


@dataclass
class ContrastBatch:
    x_local: torch.Tensor  # (B*C*L, d)
    x_global: torch.Tensor  # (B*C, d)
    positives: torch.Tensor  # (B_local, B_global) bool
    members: torch.Tensor  # (B_local, B_global) bool, denominator membership
    tau: float = 0.1


def build_contrast_masks(local_class, local_image, local_valid, global_class, global_image, global_valid):
    """Positive and denominator masks for the continuity loss.

    A local row and a global row are positives when both are valid and share
    class and source image. Denominator members are the positives plus every
    valid cross-class pair.
    """
    lc, li, lv = (torch.as_tensor(a) for a in (local_class, local_image, local_valid))
    gc, gi, gv = (torch.as_tensor(a) for a in (global_class, global_image, global_valid))
    both = lv.bool()[:, None] & gv.bool()[None, :]
    same_class = lc[:, None] == gc[None, :]
    positives = both & same_class & (li[:, None] == gi[None, :])
    members = positives | (both & ~same_class)
    return positives, members


def ctsc_loss(batch: ContrastBatch) -> torch.Tensor:
    pos, mem = batch.positives.bool(), batch.members.bool()
    n_pos = int(pos.sum())
    if n_pos == 0:
        logger.debug("ctsc: no positives")
        return (batch.x_local.sum() + batch.x_global.sum()) * 0.0
    logits = batch.x_local @ batch.x_global.t() / batch.tau
    log_den = torch.logsumexp(logits.masked_fill(~mem, float("-inf")), dim=1, keepdim=True)
    log_ratio = (logits - log_den).masked_fill(~pos, 0.0)
    return -log_ratio.sum() / n_pos


def contrast_batch(x_local, x_global, local_presence, global_presence, tau=0.1) -> ContrastBatch:
    """Assemble a batch from ``x_local (B, L, C, d)``, ``x_global (B, C, d)``,
    ``local_presence (B, L, C)`` and ``global_presence (B, C)``."""
    b, l, c, d = x_local.shape
    dev = x_local.device
    img = torch.arange(b, device=dev)
    cls = torch.arange(c, device=dev)
    local_image = img[:, None, None].expand(b, l, c).reshape(-1)
    local_class = cls[None, None, :].expand(b, l, c).reshape(-1)
    global_image = img[:, None].expand(b, c).reshape(-1)
    global_class = cls[None, :].expand(b, c).reshape(-1)
    pos, mem = build_contrast_masks(
        local_class, local_image, torch.as_tensor(local_presence, device=dev).reshape(-1),
        global_class, global_image, torch.as_tensor(global_presence, device=dev).reshape(-1),
    )
    return ContrastBatch(x_local.reshape(-1, d), x_global.reshape(-1, d), pos, mem, tau)


# -- EMA and total -----------------------------------------------------------------


@torch.no_grad()
def ema_update(target, online, momentum: float):
    """``target <- momentum * target + (1 - momentum) * online``, in place.

    Accepts two modules, or two equal-length sequences of tensors.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ConfigurationError(f"EMA momentum must lie in [0, 1], got {momentum}")
    if isinstance(target, nn.Module):
        tgt = list(target.parameters()) + list(target.buffers())
        src = list(online.parameters()) + list(online.buffers())
    else:
        tgt, src = list(target), list(online)
    if len(tgt) != len(src):
        raise ConfigurationError("EMA parameter collections differ in length")
    for t, s in zip(tgt, src):
        if t.shape != s.shape:
            raise ConfigurationError(f"EMA shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)
    return target


def overall_loss(l_cls, l_pter=None, l_ctsc=None, weights=(1.0, 1.0, 1.0)):
    """Weighted sum of the enabled components; ``None`` terms are skipped."""
    total = 0.0
    for name, value, w in zip(("cls", "pter", "ctsc"), (l_cls, l_pter, l_ctsc), weights):
        if value is None:
            continue
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NumericFault(f"non-finite {name} loss ({v})", component=name)
        total = total + w * value
    return total
