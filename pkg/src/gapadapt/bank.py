"""Prediction memory bank, pseudo-label fusion and top-N category extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np
import torch

from .core_math import check_simplex

_MAGIC = b"PBNK"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class PredictionBank:
    """Stores the latest target-model and teacher prediction for every target sample.

    Target rows are replaced batch by batch; teacher rows are refreshed
    wholesale once per epoch. The two stores never alias each other.
    Rows are kept in float32, the precision of the serialized section, so a
    dump/load round trip is exact; reads come back as float64.
    """

    def __init__(self, initial_target, initial_vil):
        target = torch.as_tensor(initial_target).detach().to(torch.float32, copy=True)
        vil = torch.as_tensor(initial_vil).detach().to(torch.float32, copy=True)
        if target.ndim != 2 or target.shape != vil.shape:
            raise ValueError(
                f"bank stores must be matching (n, C) matrices, got {tuple(target.shape)} "
                f"and {tuple(vil.shape)}"
            )
        check_simplex(target, name="initial_target")
        check_simplex(vil, name="initial_vil")
        self._target = target
        self._vil = vil

    @property
    def target_preds(self) -> torch.Tensor:
        return self._target.double()

    @property
    def vil_preds(self) -> torch.Tensor:
        return self._vil.double()

    @property
    def n(self) -> int:
        return self._target.shape[0]

    @property
    def num_classes(self) -> int:
        return self._target.shape[1]

    def _check_indices(self, indices: torch.Tensor) -> None:
        if indices.numel() and (indices.min() < 0 or indices.max() >= self.n):
            raise IndexError(f"bank index out of range [0, {self.n})")

    def update_target_rows(self, indices, new_preds) -> None:
        idx = torch.as_tensor(indices, dtype=torch.long).flatten()
        self._check_indices(idx)
        if idx.numel() == 0:
            return
        rows = torch.as_tensor(new_preds).detach().to(torch.float32)
        if rows.shape != (idx.numel(), self.num_classes):
            raise ValueError(f"expected {idx.numel()} rows of width {self.num_classes}")
        check_simplex(rows, name="new_preds")
        # index_copy_ with duplicate indices is unordered; keep last-write-wins explicit
        for i, r in zip(idx.tolist(), rows):
            self._target[i] = r

    def refresh_vil_all(self, new_preds) -> None:
        rows = torch.as_tensor(new_preds).detach().to(torch.float32, copy=True)
        if rows.shape != self._vil.shape:
            raise ValueError(f"expected {self.n} teacher rows, got {rows.shape[0]}")
        check_simplex(rows, name="new_preds")
        self._vil = rows

    def fetch(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(indices, dtype=torch.long).flatten()
        self._check_indices(idx)
        return self._target[idx].double(), self._vil[idx].double()

    def dump(self, fh: BinaryIO) -> None:
        """Write the header (magic, version, n, C) then both stores as row-major float32."""
        fh.write(_HEADER.pack(_MAGIC, _VERSION, self.n, self.num_classes))
        fh.write(self._target.numpy().astype("<f4").tobytes(order="C"))
        fh.write(self._vil.numpy().astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, fh: BinaryIO) -> "PredictionBank":
        magic, version, n, c = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _MAGIC or version != _VERSION:
            raise ValueError("not a prediction bank section")
        size = n * c * 4
        target = np.frombuffer(fh.read(size), dtype="<f4").reshape(n, c).copy()
        vil = np.frombuffer(fh.read(size), dtype="<f4").reshape(n, c).copy()
        return cls(torch.from_numpy(target), torch.from_numpy(vil))


def create_bank(n: int, num_classes: int, initial_target, initial_vil) -> PredictionBank:
    bank = PredictionBank(initial_target, initial_vil)
    if bank.n != n or bank.num_classes != num_classes:
        raise ValueError(
            f"expected ({n}, {num_classes}) stores, got ({bank.n}, {bank.num_classes})"
        )
    return bank


def sample_fusion_weight(lambda_rate: float, rng: np.random.Generator, size=None):
    """Draw ``min(Exp(rate=lambda_rate), 1)``; the clamp keeps fusion convex."""
    if not lambda_rate > 0:
        raise ValueError(f"exponential rate must be positive, got {lambda_rate}")
    draw = rng.exponential(1.0 / lambda_rate, size=size)
    return np.minimum(draw, 1.0)


def fuse(p_prime, p_dprime, tau) -> torch.Tensor:
    """Convex combination ``tau * p_prime + (1 - tau) * p_dprime``.

    ``tau`` may be a scalar or one weight per row.
    """
    p1 = torch.as_tensor(p_prime, dtype=torch.float64)
    p2 = torch.as_tensor(p_dprime, dtype=torch.float64)
    t = torch.as_tensor(tau, dtype=torch.float64)
    if ((t < 0) | (t > 1)).any():
        raise ValueError("fusion weight must lie in [0, 1]")
    if t.ndim == 1 and p1.ndim == 2:
        t = t[:, None]
    return t * p1 + (1 - t) * p2


def top_n_categories(p_bar, n: int) -> torch.Tensor:
    """Indices of the ``n`` largest entries, descending; ties go to the lower index."""
    p = torch.as_tensor(p_bar)
    c = p.shape[-1]
    if not 1 <= n <= c:
        raise ValueError(f"N must lie in [1, {c}], got {n}")
    order = torch.sort(-p, dim=-1, stable=True).indices
    return order[..., :n]


@dataclass
class FusedLabel:
    p_bar: torch.Tensor
    tau: float
    top_n: list[int]
