"""Adaptation objectives: contrastive modality alignment, self-distillation and their blend."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError
from .tensor import Tensor, cosine_similarity, mean, mul, relu


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.0
    lam: float = 0.75

    def validate(self) -> None:
        if not 0.0 <= self.margin <= 1.0:
            raise InvalidConfigError(f"margin={self.margin} outside [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidConfigError(f"lambda={self.lam} outside [0, 1]")


def contrastive_loss(e_s: Tensor, e_t: Tensor, y, m: float = 0.0) -> Tensor:
    """Cosine contrastive loss between source and target embeddings.

    Genuine pairs (y=1) pay ``1 - cos``; impostor pairs (y=0) pay
    ``max(0, cos - m)``.  For ``[N, D]`` inputs the per-pair losses are averaged.
    """
    cos = cosine_similarity(e_s, e_t)
    dtype = cos.data.dtype
    y = np.asarray(y, dtype=dtype)
    if y.shape != cos.shape:
        raise InvalidConfigError(f"labels shape {list(y.shape)} does not match {cos.dims} pairs")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidConfigError("labels must be 0 or 1")
    genuine = mul(Tensor(y), 1.0 - cos)
    impostor = mul(Tensor(1 - y), relu(cos - m))
    per_pair = genuine + impostor
    return mean(per_pair) if per_pair.ndim else per_pair


def self_distillation_loss(e_teacher: Tensor, e_student: Tensor) -> Tensor:
    """``1 - cos(teacher, student)``, averaged over rows; the teacher side is detached."""
    per = 1.0 - cosine_similarity(e_teacher.detach(), e_student)
    return mean(per) if per.ndim else per


def total_loss(l_c, l_sdl, lam: float):
    """``(1 - lam) * l_c + lam * l_sdl``; the endpoints return the single term unchanged."""
    if not 0.0 <= lam <= 1.0:
        raise InvalidConfigError(f"lambda={lam} outside [0, 1]")
    if lam == 0.0:
        return l_c
    if lam == 1.0:
        return l_sdl
    if isinstance(l_c, Tensor) or isinstance(l_sdl, Tensor):
        l_c = l_c if isinstance(l_c, Tensor) else Tensor(l_c)
        l_sdl = l_sdl if isinstance(l_sdl, Tensor) else Tensor(l_sdl)
        return mul(l_c, 1.0 - lam) + mul(l_sdl, lam)
    return (1.0 - lam) * l_c + lam * l_sdl
