"""Adam with bias correction and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class LrSchedule:
    """Cosine decay from lr0 at epoch 0 to eta_min at epoch T.

    eta_min defaults to lr0 / 100.
    """
    lr0: float = 1e-4
    total_epochs: int = 100
    eta_min: Optional[float] = None

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.eta_min is None:
            object.__setattr__(self, "eta_min", self.lr0 / 100.0)


def cosine_lr(sched: LrSchedule, epoch: int) -> float:
    if not 0 <= epoch <= sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside schedule range [0, {sched.total_epochs}]")
    span = sched.lr0 - sched.eta_min
    return sched.eta_min + 0.5 * span * (1.0 + math.cos(math.pi * epoch / sched.total_epochs))


class NumericalError(RuntimeError):
    """Raised when a training step meets non-finite values."""


@dataclass
class _Slot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class Adam:
    """Holds first/second moments per parameter, keyed by tensor identity.

    A parameter skipped in one ``step`` call (e.g. while the encoder is
    frozen) keeps its slot untouched; its step counter resumes when it is
    stepped again, so bias correction stays well defined after unfreezing.
    Frozen parameters are the caller's business: pass only the tensors to
    update.
    """

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._slots: dict[int, _Slot] = {
            id(p): _Slot(np.zeros_like(p.data), np.zeros_like(p.data)) for p in params}

    def step(self, params: Sequence[Tensor], lr: float) -> None:
        for p in params:
            slot = self._slots.get(id(p))
            if slot is None:
                raise KeyError(f"parameter {p.name or p.shape} unknown to this optimizer")
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericalError(
                    f"non-finite gradient in parameter {p.name or p.shape}; step rejected")
            slot.t += 1
            slot.m = self.beta1 * slot.m + (1.0 - self.beta1) * g
            slot.v = self.beta2 * slot.v + (1.0 - self.beta2) * g * g
            mhat = slot.m / (1.0 - self.beta1 ** slot.t)
            vhat = slot.v / (1.0 - self.beta2 ** slot.t)
            p.data = p.data - (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
