"""Information-theoretic primitives shared by the adaptation losses.

Everything here works on torch tensors (or anything ``torch.as_tensor``
accepts) and stays differentiable, so the same functions back both the
training objectives and the numeric checks. Natural logarithms throughout.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch

PROB_FLOOR = 1e-8
SIMPLEX_TOL = 1e-6
MMD_BANDWIDTH_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)


class SimplexError(ValueError):
    """Raised when an input is not a probability vector (or batch of them)."""


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.double()
    return torch.as_tensor(x, dtype=torch.float64)


def check_simplex(p: torch.Tensor, tol: float = SIMPLEX_TOL, name: str = "p") -> None:
    """Validate that the last axis of ``p`` holds probability vectors."""
    with torch.no_grad():
        if p.ndim == 0 or p.shape[-1] == 0:
            raise SimplexError(f"{name}: expected a non-empty probability vector")
        if not torch.isfinite(p).all():
            raise SimplexError(f"{name}: non-finite entries")
        if (p < -tol).any():
            raise SimplexError(f"{name}: negative entries (min={p.min().item():.3g})")
        err = (p.sum(-1) - 1.0).abs().max().item()
        if err > tol:
            raise SimplexError(f"{name}: entries sum to 1 only within {err:.3g} (tol {tol:g})")


def entropy(p, validate: bool = True) -> torch.Tensor:
    """Shannon entropy along the last axis, with 0 * log 0 = 0."""
    p = _as_tensor(p)
    if validate:
        check_simplex(p)
    return -(p * torch.log(p.clamp_min(PROB_FLOOR))).sum(-1)


def batch_joint(p_batch, q_batch, validate: bool = True) -> torch.Tensor:
    """Symmetrized joint over class pairs, averaged over a batch of paired predictions.

    ``P = mean_i p_i q_i^T`` followed by ``(P + P^T) / 2``.
    """
    p = _as_tensor(p_batch)
    q = _as_tensor(q_batch)
    if p.ndim != 2 or q.ndim != 2:
        raise ValueError("batch_joint expects (B, C) batches")
    if p.shape != q.shape:
        raise ValueError(f"batch shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    if p.shape[0] == 0:
        raise ValueError("batch_joint needs at least one sample")
    if validate:
        check_simplex(p, name="p_batch")
        check_simplex(q, name="q_batch")
    joint = p.T @ q / p.shape[0]
    return (joint + joint.T) / 2


def mutual_information(joint, validate: bool = True) -> torch.Tensor:
    """Mutual information of a joint distribution matrix."""
    P = _as_tensor(joint)
    if P.ndim != 2:
        raise ValueError("joint must be a matrix")
    if validate:
        check_simplex(P.reshape(-1), name="joint")
    row = P.sum(1, keepdim=True)
    col = P.sum(0, keepdim=True)
    ratio = P.clamp_min(PROB_FLOOR) / (row @ col).clamp_min(PROB_FLOOR)
    return (P * torch.log(ratio)).sum()


def kl_divergence(p, q, validate: bool = True) -> torch.Tensor:
    """KL(p || q) along the last axis; +inf where q has no mass under p's support."""
    p = _as_tensor(p)
    q = _as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    if validate:
        check_simplex(p, name="p")
        check_simplex(q, name="q")
    terms = p * (torch.log(p.clamp_min(PROB_FLOOR)) - torch.log(q.clamp_min(PROB_FLOOR)))
    kl = terms.sum(-1)
    violation = ((q <= 0) & (p > 0)).any(-1)
    if violation.any():
        kl = torch.where(violation, torch.full_like(kl, math.inf), kl)
    return kl


def check_mi_kl_bound(p_batch, q_batch) -> tuple[float, float, bool]:
    """Return ``(-MI, mean KL, -MI <= mean KL)`` for a pair of prediction batches."""
    p = _as_tensor(p_batch)
    q = _as_tensor(q_batch)
    lhs = -mutual_information(batch_joint(p, q)).item()
    rhs = kl_divergence(p, q).mean().item()
    return lhs, rhs, lhs <= rhs


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d = (a * a).sum(1, keepdim=True) - 2 * a @ b.T + (b * b).sum(1)
    return d.clamp_min(0)


def median_bandwidths(X, Y, scales: Sequence[float] = MMD_BANDWIDTH_SCALES) -> list[float]:
    """Median pairwise distance over the pooled sample, times each scale."""
    Z = torch.cat([_as_tensor(X), _as_tensor(Y)]).double()
    d = _sq_dists(Z, Z).sqrt()
    off = d[~torch.eye(len(Z), dtype=torch.bool)]
    med = off.median().item() if off.numel() else 1.0
    if med <= 0:
        med = 1.0
    return [med * s for s in scales]


def mmd_distance(X, Y, bandwidths: Sequence[float] | None = None) -> float:
    """Unbiased multi-kernel RBF MMD^2, clipped at zero.

    The kernel is the sum over bandwidths of ``exp(-|x - y|^2 / (2 s^2))``.
    ``bandwidths=None`` uses the median heuristic.
    """
    X = _as_tensor(X).double()
    Y = _as_tensor(Y).double()
    if X.ndim != 2 or Y.ndim != 2:
        raise ValueError("mmd_distance expects (n, d) sets")
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("mmd_distance needs non-empty sets")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if bandwidths is None:
        bandwidths = median_bandwidths(X, Y)

    def kern(a, b):
        d = _sq_dists(a, b)
        return sum(torch.exp(-d / (2 * s * s)) for s in bandwidths)

    n, m = len(X), len(Y)
    kxx, kyy, kxy = kern(X, X), kern(Y, Y), kern(X, Y)
    # a single sample has no off-diagonal pairs; fall back to the biased term
    xx = (kxx.sum() - kxx.diagonal().sum()) / (n * (n - 1)) if n > 1 else kxx.mean()
    yy = (kyy.sum() - kyy.diagonal().sum()) / (m * (m - 1)) if m > 1 else kyy.mean()
    value = (xx + yy - 2 * kxy.mean()).item()
    return max(value, 0.0)
