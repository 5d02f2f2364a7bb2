"""Training objectives for both alternation stages.

All losses take batch tensors and return scalar tensors that keep the
autograd graph. Gap-restricted losses return a graph-free zero for an empty
gap batch; callers record the emptiness in :class:`LossBreakdown`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import torch

from .core_math import batch_joint, entropy, kl_divergence, mutual_information


def _zero(like: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=like.dtype, device=like.device)


def negative_mi(p_batch: torch.Tensor, q_batch: torch.Tensor) -> torch.Tensor:
    return -mutual_information(batch_joint(p_batch, q_batch, validate=False), validate=False)


def stage1_loss(target_preds: torch.Tensor, vil_preds: torch.Tensor) -> torch.Tensor:
    """Negative batch mutual information between target and teacher predictions.

    Which side receives gradients is decided by the caller: during prompt
    customization the target predictions arrive detached.
    """
    if target_preds.shape[0] == 0:
        raise ValueError("stage1_loss needs a non-empty batch")
    return negative_mi(target_preds, vil_preds)


def balance_loss(target_preds: torch.Tensor) -> torch.Tensor:
    """KL between the batch-mean prediction and the uniform prior."""
    if target_preds.shape[0] == 0:
        return _zero(target_preds)
    q_bar = target_preds.mean(0)
    uniform = torch.full_like(q_bar, 1.0 / q_bar.numel())
    return kl_divergence(q_bar, uniform, validate=False)


def pc_loss(target_preds: torch.Tensor, vil_preds: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    if target_preds.shape[0] == 0:
        return _zero(target_preds)
    return negative_mi(target_preds, vil_preds) + alpha * balance_loss(target_preds)


def cac_loss(
    logits: torch.Tensor,
    top_n_sets: torch.Tensor,
    iota: float = 0.1,
    literal: bool = False,
    detach_scale: bool = False,
) -> torch.Tensor:
    """Category attention calibration over a batch of logits.

    With ``a`` the product and ``b`` the sum of the logits at the sample's
    top-N categories, each sample contributes
    ``-log(exp(a/iota) / (exp(a/iota) + sum_{j not in M} exp(b * l_j / iota)))``.
    Logits are shifted per sample so the smallest is zero, which keeps ``a``
    monotone in every selected logit.

    Because ``b`` multiplies every negative logit, raising a selected logit
    also inflates the negative terms; when the selected categories are not
    already the largest logits, the exact gradient can push them down.
    ``detach_scale=True`` treats ``b`` as a constant scale (stop-gradient),
    after which a small descent step always widens the selected-vs-rest
    margin unless the loss is saturated or a selected logit is the minimum.

    ``literal=True`` evaluates the unshifted ``log(exp(a/iota) / sum_j exp(b*l_j/iota))``
    exactly as printed (ascending it pushes mass *away* from M); ablation only.
    """
    if logits.ndim != 2:
        raise ValueError("cac_loss expects (B, C) logits")
    B, C = logits.shape
    if B == 0:
        return _zero(logits)
    idx = torch.as_tensor(top_n_sets, dtype=torch.long, device=logits.device)
    if idx.ndim == 1:
        idx = idx[:, None]
    if idx.shape[0] != B:
        raise ValueError("one top-N set per sample required")
    N = idx.shape[1]
    if N >= C:
        raise ValueError(f"N={N} leaves no negative categories among C={C}")
    if idx.min() < 0 or idx.max() >= C:
        raise IndexError("top-N index out of range")
    if (idx.sort(1).values[:, 1:] == idx.sort(1).values[:, :-1]).any():
        raise ValueError("top-N indices must be distinct")

    l = logits if literal else logits - logits.min(1, keepdim=True).values
    picked = l.gather(1, idx)
    a = picked.prod(1)
    b = picked.sum(1)
    if detach_scale:
        b = b.detach()
    in_m = torch.zeros(B, C, dtype=torch.bool, device=logits.device)
    in_m.scatter_(1, idx, True)
    neg = (b[:, None] * l / iota).masked_fill(in_m, -math.inf)
    pos = a / iota
    if literal:
        return (pos - torch.logsumexp(neg, 1)).mean()
    denom = torch.logsumexp(torch.cat([pos[:, None], neg], 1), 1)
    return (denom - pos).mean()


def rc_loss(gap_uncertainties: torch.Tensor) -> torch.Tensor:
    """Mean referenced uncertainty over the gap batch."""
    if gap_uncertainties.numel() == 0:
        return _zero(gap_uncertainties)
    return gap_uncertainties.mean()


def rc_loss_from_preds(preds: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    if preds.shape[0] == 0:
        return _zero(preds)
    return rc_loss(entropy(preds, validate=False) - rho.detach().to(preds.dtype))


@dataclass
class LossBreakdown:
    stage1: float = 0.0
    cac: float = 0.0
    pc: float = 0.0
    rc: float = 0.0
    balance: float = 0.0
    stage2: float = 0.0
    gap_fraction: float = 0.0
    gap_empty: bool = False
    total: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def scalars(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "total"}


def stage2_loss(
    pc: torch.Tensor,
    cac: torch.Tensor,
    rc: torch.Tensor,
    beta: float = 0.4,
    eta: float = 0.05,
    *,
    balance: float | torch.Tensor = 0.0,
    stage1: float = 0.0,
    gap_fraction: float = 0.0,
) -> LossBreakdown:
    pc, cac, rc = (torch.as_tensor(x, dtype=torch.float64) for x in (pc, cac, rc))
    total = pc + beta * cac + eta * rc
    if not 0.0 <= gap_fraction <= 1.0:
        raise ValueError("gap_fraction must lie in [0, 1]")
    return LossBreakdown(
        stage1=float(stage1),
        cac=cac.item(),
        pc=pc.item(),
        rc=rc.item(),
        balance=float(balance),
        stage2=pc.item() + beta * cac.item() + eta * rc.item(),
        gap_fraction=gap_fraction,
        gap_empty=gap_fraction == 0.0,
        total=total,
    )
