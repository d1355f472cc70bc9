"""Training objectives: L1 functional loss, normalized bit-rate loss and their combinations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .mask import ChannelMask
from .tensor import ShapeError, Tensor


@dataclass
class LossConfig:
    alpha1: float = 0.0
    gamma: float = 0.0
    alpha2: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("gamma and beta must lie in [0, 1]")


def functional_loss(sr: Tensor, hr: Tensor) -> Tensor:
    """Mean absolute error."""
    if sr.shape != hr.shape:
        raise ShapeError(f"functional_loss: {sr.shape} vs {hr.shape}")
    return T.mean(T.tabs(sr - hr))


def bitrate_loss(mask: ChannelMask) -> Tensor:
    """Mask density ``sum(mask) / (C*H*W)``; differentiable through the mask surrogate."""
    if mask.tensor is None:
        return Tensor(mask.density())
    return T.mean(mask.tensor)


def total_loss(lf: Tensor, lb: Tensor, cfg: LossConfig) -> Tensor:
    """``L_f + alpha1 * |L_b - gamma|``."""
    return lf + T.tabs(lb - cfg.gamma) * cfg.alpha1


def multi_sparsity_loss(lf: Tensor, lb: Tensor, pdf: np.ndarray, v: Tensor, cfg: LossConfig) -> Tensor:
    """``L_f + alpha1*|L_b - gamma| + alpha2*|avg(pdf * V) - beta|``.

    ``avg`` is the arithmetic mean over the n products (and over images when batched).
    """
    pdf = np.asarray(pdf, dtype=np.float64)
    if pdf.size != v.size:
        raise ShapeError(f"pdf length {pdf.size} != V length {v.size}")
    avg = T.mean(v * Tensor(pdf.reshape(v.shape)))
    return total_loss(lf, lb, cfg) + T.tabs(avg - cfg.beta) * cfg.alpha2
