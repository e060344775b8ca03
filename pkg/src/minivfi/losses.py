"""Training objectives: Charbonnier, L1-regularised pruning loss, Laplacian
pyramid loss and the teacher-student distillation loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHARB_EPS = 1e-3
PRUNE_LAMBDA = 1e-4
KD_ALPHA = 0.1

# 5-tap binomial, the Burt-Adelson generating kernel
BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 5
    # weight of level j is base ** j
    weight_base: float = 4.0


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise T.ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def charbonnier(pred: Tensor, gt: Tensor, eps: float = CHARB_EPS) -> Tensor:
    """Mean of ``sqrt((pred - gt)^2 + eps^2)``."""
    _same_shape(pred, gt, "charbonnier")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = T.sub(pred, gt)
    return T.mean(T.sqrt(T.add(T.mul(d, d), eps * eps)))


def l1_norm(weights: Iterable[Tensor]) -> Tensor:
    total = None
    for w in weights:
        s = T.tsum(T.absolute(w))
        total = s if total is None else T.add(total, s)
    return total if total is not None else Tensor(0.0)


def prune_loss(pred: Tensor, gt: Tensor, weights: Iterable[Tensor], lam: float = PRUNE_LAMBDA,
               eps: float = CHARB_EPS) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    loss = charbonnier(pred, gt, eps)
    if lam == 0:
        return loss
    return T.add(loss, T.mul(l1_norm(weights), lam))


# ---------------------------------------------------------------------------
# Laplacian pyramid
# ---------------------------------------------------------------------------

@dataclass
class PyramidStack:
    levels: list[Tensor]
    gaussians: list[Tensor]

    def reconstruct(self) -> Tensor:
        img = self.levels[-1]
        for lap in reversed(self.levels[:-1]):
            img = T.add(lap, _upsample(img))
        return img


def _blur(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    dt = x.dtype
    flat = T.reshape(x, (N * C, 1, H, W))
    kh = Tensor(BINOMIAL5.astype(dt).reshape(1, 1, 5, 1))
    kw = Tensor(BINOMIAL5.astype(dt).reshape(1, 1, 1, 5))
    y = T.conv2d(flat, kh, padding="reflect", pad=(2, 0))
    y = T.conv2d(y, kw, padding="reflect", pad=(0, 2))
    return T.reshape(y, (N, C, H, W))


def _downsample(x: Tensor) -> Tensor:
    return T.subsample2(_blur(x))


def _upsample(x: Tensor) -> Tensor:
    return T.mul(_blur(T.zero_insert2(x)), 4.0)


def laplacian_pyramid(img: Tensor, levels: int = 5) -> PyramidStack:
    if img.ndim != 4:
        raise T.ShapeError(f"laplacian_pyramid expects [N,C,H,W], got {img.shape}")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    div = 2 ** (levels - 1)
    H, W = img.shape[2:]
    if H % div or W % div:
        raise T.ShapeError(f"{H}x{W} is not divisible by {div} as {levels} levels require")
    gauss = [img]
    for _ in range(levels - 1):
        gauss.append(_downsample(gauss[-1]))
    laps = [T.sub(gauss[j], _upsample(gauss[j + 1])) for j in range(levels - 1)]
    laps.append(gauss[-1])
    return PyramidStack(laps, gauss)


def lap_loss(a: Tensor, b: Tensor, cfg: PyramidConfig = PyramidConfig()) -> Tensor:
    """``sum_j base**j * mean|Lap_j(a) - Lap_j(b)|`` over ``cfg.levels`` levels.

    The pyramid is linear, so it is built once on ``a - b``.
    """
    _same_shape(a, b, "lap_loss")
    pyr = laplacian_pyramid(T.sub(a, b), cfg.levels)
    total = None
    for j, lev in enumerate(pyr.levels):
        term = T.mean(T.absolute(lev))
        w = cfg.weight_base ** j
        if w != 1.0:
            term = T.mul(term, w)
        total = term if total is None else T.add(total, term)
    return total


def kd_total_loss(out: Tensor, gt: Tensor, teacher_pred, alpha: float = KD_ALPHA,
                  cfg: PyramidConfig = PyramidConfig()) -> dict[str, Tensor]:
    """``alpha * stud + dist`` with ``stud = lap(out, gt)`` and ``dist = lap(teacher, out)``.

    The teacher prediction is detached; no gradient reaches the teacher.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    teacher = teacher_pred.detach() if isinstance(teacher_pred, Tensor) else Tensor(teacher_pred)
    _same_shape(out, gt, "kd_total_loss")
    _same_shape(out, teacher, "kd_total_loss")
    stud = lap_loss(out, gt, cfg)
    dist = lap_loss(teacher, out, cfg)
    return {"total": combine_kd(stud, dist, alpha), "stud": stud, "dist": dist}


def combine_kd(stud, dist, alpha: float = KD_ALPHA):
    """``alpha * stud + dist``; works on tensors and plain floats alike."""
    if isinstance(stud, Tensor) or isinstance(dist, Tensor):
        return T.add(T.mul(stud, alpha), dist)
    return alpha * stud + dist
