"""Referenced-entropy uncertainty and the epoch-wise gap-region curriculum."""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .core_math import _as_tensor, entropy

REFERENCE_MODES = ("ema", "additive")


@dataclass(frozen=True)
class ReferenceState:
    """Per-sample entropy references, indexed by dataset-wide sample index."""

    rho: torch.Tensor
    epoch: int = 0
    delta: float = 0.1
    mode: str = "ema"

    def __post_init__(self):
        if self.mode not in REFERENCE_MODES:
            raise ValueError(f"unknown reference mode {self.mode!r}")
        if self.rho.ndim != 1:
            raise ValueError("rho must be a flat vector")

    @property
    def n(self) -> int:
        return self.rho.numel()


@dataclass(frozen=True)
class CurriculumSchedule:
    epsilon: float = 0.01
    gamma: float = 1.01

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not self.gamma > 1:
            raise ValueError(f"gamma must exceed 1, got {self.gamma}")


def init_reference(source_predictions, delta: float = 0.1, mode: str = "ema") -> ReferenceState:
    """Start every reference at the entropy of the source model's prediction."""
    p = torch.as_tensor(source_predictions, dtype=torch.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("need one source prediction per target sample")
    return ReferenceState(rho=entropy(p).detach().clone(), epoch=0, delta=delta, mode=mode)


def update_reference(state: ReferenceState, current_entropies) -> ReferenceState:
    h = torch.as_tensor(current_entropies, dtype=state.rho.dtype)
    if h.shape != state.rho.shape:
        raise ValueError(f"expected {state.n} entropies, got {tuple(h.shape)}")
    if state.mode == "additive":
        rho = state.rho + state.delta * h
    else:
        rho = (1 - state.delta) * state.rho + state.delta * h
    return replace(state, rho=rho, epoch=state.epoch + 1)


def referenced_uncertainty(pred, rho) -> torch.Tensor:
    """Predictive entropy minus the sample's reference. Negative values are legal.

    Works on a single vector or a batch; gradients flow through ``pred`` only.
    """
    pred = _as_tensor(pred)
    rho = torch.as_tensor(rho, dtype=pred.dtype)
    return entropy(pred, validate=False) - rho.detach()


def threshold(k: int, schedule: CurriculumSchedule) -> float:
    if k < 0:
        raise ValueError("epoch index must be non-negative")
    return schedule.epsilon * schedule.gamma**k


def detect_gap_region(uncertainties, m_k: float) -> torch.Tensor:
    """Indices whose uncertainty strictly exceeds the threshold."""
    u = torch.as_tensor(uncertainties)
    return torch.nonzero(u > m_k, as_tuple=False).flatten()
