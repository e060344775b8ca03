"""Parameter updates: AdaMax for dense training, OBProx-SG for sparse fine-tuning.

OBProx-SG alternates two kinds of step on the L1-regularised objective
``f(theta) + lam * ||theta||_1`` given stochastic gradients of the smooth
part ``f`` only:

- Prox-SG: gradient step followed by soft-thresholding with ``lr * lam``.
- Orthant: gradient step on ``f + lam * sign_ref . theta`` restricted to the
  orthant face of the current iterate; coordinates that would change sign are
  set to exactly 0 and zeros stay frozen.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

ADAMAX_LR = 1e-3
OBPROX_LR = 1e-4
TRAJECTORY_HEADER = ("epoch", "phase", "loss", "density", "zeros", "total")


class MissingGradError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class AdaMaxState:
    lr: float = ADAMAX_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    u: list[np.ndarray] = field(default_factory=list)


def adamax_step(params: Sequence[Tensor], state: AdaMaxState) -> AdaMaxState:
    """One AdaMax update in place, using ``p.grad`` of every parameter."""
    if state.lr <= 0:
        raise ValueError("lr must be positive")
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise MissingGradError(f"parameters {missing} have no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.u = [np.zeros_like(p.data) for p in params]
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    step = state.lr / (1.0 - b1 ** state.step_count)
    for p, m, u in zip(params, state.m, state.u):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        np.maximum(b2 * u, np.abs(g), out=u)
        p.data -= (step * m / (u + state.eps)).astype(p.dtype, copy=False)
    return state


def soft_threshold(x, tau: float):
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def prox_sg_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float, lam: float) -> None:
    """``theta <- soft_threshold(theta - lr * g, lr * lam)`` in place."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    tau = lr * lam
    for p, g in zip(params, grads):
        z = p.data - lr * g
        p.data[...] = soft_threshold(z, tau) if tau > 0 else z


def orthant_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float, lam: float,
                 sign_ref: Sequence[np.ndarray]) -> None:
    """Orthant-face step in place; sign changes are projected to exactly 0."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    for p, g, s in zip(params, grads, sign_ref):
        if s.shape != p.shape:
            raise T.ShapeError(f"sign_ref shape {s.shape} != parameter shape {p.shape}")
        z = p.data - lr * (g + lam * s)
        keep = (np.sign(z) == s) & (s != 0)
        p.data[...] = np.where(keep, z, 0.0)


@dataclass(frozen=True)
class ObproxSchedule:
    """Epoch-level switching between Prox-SG and orthant phases.

    ``prox_epochs=None`` means "first half of the run". With ``alternating``
    the pattern ``prox_epochs`` x Prox-SG then ``orthant_epochs`` x orthant repeats.
    """
    prox_epochs: int | None = None
    orthant_epochs: int | None = None
    alternating: bool = False

    def phase(self, epoch: int, total: int) -> str:
        n_p = self.prox_epochs if self.prox_epochs is not None else (total + 1) // 2
        if not self.alternating:
            return "prox" if epoch < n_p else "orthant"
        n_o = self.orthant_epochs if self.orthant_epochs is not None else max(1, total - n_p)
        return "prox" if epoch % (n_p + n_o) < n_p else "orthant"


@dataclass
class OBProxState:
    lr: float = OBPROX_LR
    lam: float = 1e-4
    schedule: ObproxSchedule = ObproxSchedule()
    step_count: int = 0
    phase: str = "prox"


def count_zeros(weights: Sequence[Tensor]) -> tuple[int, int]:
    zeros = sum(int(np.count_nonzero(w.data == 0.0)) for w in weights)
    total = sum(w.size for w in weights)
    return zeros, total


@dataclass
class TrajectoryRow:
    epoch: int
    phase: str
    loss: float
    density: float
    zeros: int
    total: int


def trajectory_csv(rows: Sequence[TrajectoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    for r in rows:
        w.writerow([r.epoch, r.phase, repr(float(r.loss)), repr(float(r.density)), r.zeros, r.total])
    return buf.getvalue()


def read_trajectory_csv(text: str) -> list[TrajectoryRow]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != TRAJECTORY_HEADER:
        raise ValueError("not a density trajectory CSV")
    return [TrajectoryRow(int(e), p, float(lo), float(d), int(z), int(t)) for e, p, lo, d, z, t in rows[1:]]


def obprox_run(ckpt, train: "np.ndarray", epochs: int, lam: float, lr: float = OBPROX_LR,
               schedule: ObproxSchedule = ObproxSchedule(), batch: int = 8, seed: int = 0,
               on_step=None):
    """Sparsity-inducing fine-tuning of ``ckpt`` on quintuplets ``train``.

    ``train`` is ``[n, 5, C, H, W]`` in time order (0, 1, 1.5, 2, 3). Only the
    Charbonnier term is differentiated; the L1 term enters through the
    proximal / orthant updates on prunable weights. Biases and non-prunable
    weights take plain SGD steps.

    Returns ``(sparse_checkpoint, trajectory_rows)``.
    """
    from .losses import charbonnier
    from .netdef import forward_interpolate

    if len(train) == 0:
        raise ValueError("training set is empty")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    work = ckpt.copy(requires_grad=True)
    pruned = work.prunable_weights()
    pruned_ids = {id(w) for w in pruned}
    others = [t for t in work.tensors() if id(t) not in pruned_ids]
    state = OBProxState(lr=lr, lam=lam, schedule=schedule)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0B9]))
    inputs, gts = split_quintuplets(train)
    rows: list[TrajectoryRow] = []
    for epoch in range(epochs):
        state.phase = schedule.phase(epoch, epochs)
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), batch):
            idx = np.sort(order[start : start + batch])
            T.zero_grads(work.tensors())
            try:
                out = forward_interpolate(work, inputs[idx])["I_out"]
                loss = charbonnier(out, T.Tensor(gts[idx]))
            except T.NumericError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}, step {state.step_count}: "
                                      f"{exc}") from exc
            val = float(loss.data)
            if not np.isfinite(val):
                raise DivergenceError(f"loss is {val} at epoch {epoch}, step {state.step_count}")
            T.backward(loss)
            grads = [w.grad for w in pruned]
            if state.phase == "prox":
                prox_sg_step(pruned, grads, lr, lam)
            else:
                signs = [np.sign(w.data) for w in pruned]
                orthant_step(pruned, grads, lr, lam, signs)
            for t in others:
                if t.grad is not None:
                    t.data -= (lr * t.grad).astype(t.dtype, copy=False)
            state.step_count += 1
            losses.append(val)
            if on_step is not None:
                on_step(state, pruned)
        zeros, total = count_zeros(pruned)
        rows.append(TrajectoryRow(epoch, state.phase, float(np.mean(losses)),
                                  (total - zeros) / total, zeros, total))
        log.info("obprox epoch %d %s loss=%.5f density=%.4f", epoch, state.phase, rows[-1].loss,
                 rows[-1].density)
    T.zero_grads(work.tensors())
    out = work.copy(requires_grad=True)
    out.meta.update({"phase": "prune", "epoch": epochs, "seed": int(seed), "lambda": lam,
                     "lr": lr, "loss_curve": [r.loss for r in rows],
                     "density_curve": [r.density for r in rows]})
    return out, rows


def split_quintuplets(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``[n,5,C,H,W]`` -> (inputs ``[n,4C,H,W]`` from t=0,1,2,3, targets ``[n,C,H,W]``)."""
    n, five, C, H, W = q.shape
    if five != 5:
        raise T.ShapeError(f"quintuplets must be [n,5,C,H,W], got {q.shape}")
    inputs = np.ascontiguousarray(q[:, [0, 1, 3, 4]].reshape(n, 4 * C, H, W))
    return inputs, np.ascontiguousarray(q[:, 2])
