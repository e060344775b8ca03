"""Training loops for the teacher, the baseline student and the distilled student.

All three share one loop. The batch order depends only on ``cfg.seed``, so a
baseline run and a distilled run with the same seed see identical batches;
the only difference is the loss.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .evalkit import frame_metrics
from .losses import KD_ALPHA, PyramidConfig, kd_total_loss, lap_loss
from .netdef import Checkpoint, NetworkSpec, forward_interpolate, interpolate, new_checkpoint
from .optim import ADAMAX_LR, AdaMaxState, DivergenceError, adamax_step, split_quintuplets

log = logging.getLogger(__name__)

MODES = ("baseline", "distill")
RUNLOG_HEADER = ("epoch", "total", "stud", "dist", "val_psnr", "val_ssim", "seconds")
# salts for the batch-order and augmentation streams; init uses netdef's own salt
_SHUFFLE_SALT = 0xD15
_AUGMENT_SALT = 0xA06


class TeacherMutationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    alpha: float = KD_ALPHA
    lr: float = ADAMAX_LR
    batch: int = 8
    seed: int = 0
    mode: str = "baseline"
    cache_teacher: bool = False
    augment: bool = False
    pyramid_levels: int = 5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.lr <= 0 or self.batch < 1:
            raise ValueError("lr must be positive and batch >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class EpochRecord:
    epoch: int
    total: float
    stud: float
    dist: float | None
    val_psnr: float
    val_ssim: float
    seconds: float


@dataclass
class RunLog:
    config: dict
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[tuple[float, float, float | None]] = field(default_factory=list)
    batches: list[list[int]] = field(default_factory=list)
    best_epoch: int = -1
    best_checkpoint: Checkpoint | None = None
    teacher_fingerprint: str | None = None
    wall_clock: float = 0.0

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUNLOG_HEADER)
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.total), repr(r.stud), "" if r.dist is None else repr(r.dist),
                        repr(r.val_psnr), repr(r.val_ssim), repr(r.seconds)])
        return buf.getvalue()


def read_runlog_csv(text: str) -> list[EpochRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != RUNLOG_HEADER:
        raise ValueError("not a run log CSV")
    return [EpochRecord(int(e), float(t), float(s), float(d) if d else None, float(p), float(q), float(sec))
            for e, t, s, d, p, q, sec in rows[1:]]


def _splits(dataset) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(dataset, "split"):
        return dataset.split("train"), dataset.split("val")
    return np.asarray(dataset["train"]), np.asarray(dataset["val"])


def validate(ckpt: Checkpoint, split: np.ndarray, batch: int = 8) -> dict:
    """Mean and std of PSNR/SSIM of ``I_out`` against the t=1.5 frames of ``split``."""
    if len(split) == 0:
        raise ValueError("validation split is empty")
    inputs, gt = split_quintuplets(np.asarray(split))
    pred = interpolate(ckpt, inputs, batch=batch)
    p, s = frame_metrics(pred, gt)
    return {"psnr_mean": float(p.mean()), "psnr_std": float(p.std()),
            "ssim_mean": float(s.mean()), "ssim_std": float(s.std()), "n": int(len(p))}


def batch_order(n: int, epochs: int, batch: int, seed: int) -> list[list[int]]:
    """Every epoch's batches in order; a pure function of ``(n, epochs, batch, seed)``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _SHUFFLE_SALT]))
    out = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        out += [np.sort(perm[i : i + batch]).tolist() for i in range(0, n, batch)]
    return out


def augment_flags(n_batches: int, seed: int) -> np.ndarray:
    """Per-batch ``(flip_h, flip_v, reverse_time)`` flags; a pure function of ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _AUGMENT_SALT]))
    return rng.random((n_batches, 3)) < 0.5


def apply_augment(inputs: np.ndarray, gt: np.ndarray, flags) -> tuple[np.ndarray, np.ndarray]:
    """Flip both axes and/or reverse time; the t=1.5 target is unchanged by time reversal."""
    n, c4, H, W = inputs.shape
    x = inputs.reshape(n, 4, c4 // 4, H, W)
    fh, fv, rev = (bool(f) for f in flags)
    if fh:
        x, gt = x[..., ::-1], gt[..., ::-1]
    if fv:
        x, gt = x[..., ::-1, :], gt[..., ::-1, :]
    if rev:
        x = x[:, ::-1]
    return np.ascontiguousarray(x.reshape(n, c4, H, W)), np.ascontiguousarray(gt)


def _train(spec: NetworkSpec, dataset, cfg: TrainConfig, teacher: Checkpoint | None,
           init: Checkpoint | None = None) -> tuple[Checkpoint, RunLog]:
    train, val = _splits(dataset)
    if len(train) == 0:
        raise ValueError("training split is empty")
    inputs, gts = split_quintuplets(train)
    if inputs.shape[1] != 4 * spec.channels:
        raise T.ShapeError(f"dataset has {inputs.shape[1] // 4} channels, model expects {spec.channels}")

    model = (init.copy(requires_grad=True) if init is not None
             else new_checkpoint(spec, cfg.seed, meta={"phase": cfg.mode}))
    params = model.tensors()
    opt = AdaMaxState(lr=cfg.lr)
    pyr = PyramidConfig(levels=cfg.pyramid_levels)
    logbook = RunLog(config=asdict(cfg), seed=cfg.seed)

    fp = None
    # teacher outputs memoised per (sample, augmentation) when caching is on
    cache: dict[tuple, np.ndarray] | None = {} if cfg.cache_teacher else None
    if teacher is not None:
        if teacher.spec.channels != spec.channels:
            raise T.ShapeError("teacher and student disagree on channel count")
        fp = teacher.fingerprint()
        logbook.teacher_fingerprint = fp

    nb = -(-len(train) // cfg.batch)
    order = batch_order(len(train), cfg.epochs, cfg.batch, cfg.seed)
    flags = augment_flags(len(order), cfg.seed)
    best_psnr = -np.inf
    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        for b, idx in enumerate(order[epoch * nb : (epoch + 1) * nb]):
            logbook.batches.append(idx)
            x, y = inputs[idx], gts[idx]
            aug = tuple(bool(f) for f in flags[epoch * nb + b]) if cfg.augment else (False,) * 3
            if any(aug):
                x, y = apply_augment(x, y, aug)
            T.zero_grads(params)
            try:
                out = forward_interpolate(model, x)["I_out"]
                gt = T.Tensor(y)
                if teacher is None:
                    loss = lap_loss(out, gt, pyr)
                    parts = (float(loss.data), float(loss.data), None)
                else:
                    tpred = _teacher_batch(teacher, x, idx, aug, cache)
                    terms = kd_total_loss(out, gt, tpred, cfg.alpha, pyr)
                    loss = terms["total"]
                    parts = (float(loss.data), float(terms["stud"].data), float(terms["dist"].data))
            except T.NumericError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
            if not np.isfinite(parts[0]):
                raise DivergenceError(f"loss is {parts[0]} at epoch {epoch}, batch {b}")
            T.backward(loss)
            adamax_step(params, opt)
            logbook.steps.append(parts)
            sums += [parts[0], parts[1], parts[2] or 0.0]
        T.zero_grads(params)
        metrics = validate(model, val) if len(val) else {"psnr_mean": float("nan"), "ssim_mean": float("nan")}
        mean = sums / nb
        rec = EpochRecord(epoch, float(mean[0]), float(mean[1]),
                          None if teacher is None else float(mean[2]),
                          metrics["psnr_mean"], metrics["ssim_mean"], time.perf_counter() - t0)
        logbook.epochs.append(rec)
        if rec.val_psnr > best_psnr:
            best_psnr = rec.val_psnr
            logbook.best_epoch = epoch
            logbook.best_checkpoint = model.copy(requires_grad=False)
        log.info("%s epoch %d loss=%.5f val_psnr=%.3f (%.1fs)", cfg.mode, epoch, rec.total,
                 rec.val_psnr, rec.seconds)

    if teacher is not None and teacher.fingerprint() != fp:
        raise TeacherMutationError("teacher parameters changed during distillation")
    logbook.wall_clock = time.perf_counter() - t_start
    model.meta.update({"phase": cfg.mode, "epoch": cfg.epochs, "seed": cfg.seed,
                       "loss_curve": [r.total for r in logbook.epochs],
                       "val_psnr_curve": [r.val_psnr for r in logbook.epochs]})
    if fp is not None:
        model.meta["teacher_fingerprint"] = fp
    final = model.copy(requires_grad=False)
    if logbook.best_checkpoint is not None:
        logbook.best_checkpoint.meta.update(final.meta, best_epoch=logbook.best_epoch)
    return final, logbook


def _teacher_batch(teacher: Checkpoint, x: np.ndarray, idx, aug, cache) -> np.ndarray:
    if cache is None:
        with T.no_grad():
            return forward_interpolate(teacher, x)["I_out"].data
    todo = [j for j, i in enumerate(idx) if (i, aug) not in cache]
    if todo:
        with T.no_grad():
            pred = forward_interpolate(teacher, x[todo])["I_out"].data
        for j, p in zip(todo, pred):
            cache[(idx[j], aug)] = p
    return np.stack([cache[(i, aug)] for i in idx])


def train_baseline(student_spec: NetworkSpec, dataset, cfg: TrainConfig) -> tuple[Checkpoint, RunLog]:
    """Train from random init on ground truth only (Laplacian pyramid loss, AdaMax)."""
    if cfg.mode != "baseline":
        raise ValueError("train_baseline needs cfg.mode = 'baseline'")
    return _train(student_spec, dataset, cfg, teacher=None)


def train_distilled(student_spec: NetworkSpec, teacher_ckpt: Checkpoint, dataset,
                    cfg: TrainConfig) -> tuple[Checkpoint, RunLog]:
    """Train from random init on ``alpha * lap(out, gt) + lap(teacher, out)``."""
    if cfg.mode != "distill":
        raise ValueError("train_distilled needs cfg.mode = 'distill'")
    _smoke_test(teacher_ckpt)
    return _train(student_spec, dataset, cfg, teacher=teacher_ckpt)


def train_teacher(teacher_spec: NetworkSpec, dataset, cfg: TrainConfig) -> tuple[Checkpoint, RunLog]:
    """The dense teacher is trained exactly like a baseline student."""
    ckpt, logbook = train_baseline(teacher_spec, dataset, cfg)
    ckpt.meta["phase"] = "teacher"
    return ckpt, logbook


def _smoke_test(ckpt: Checkpoint) -> None:
    d = 16
    C = ckpt.spec.channels
    with T.no_grad():
        out = forward_interpolate(ckpt, np.full((1, 4 * C, d, d), 0.5, np.float32))["I_out"]
    if out.shape != (1, C, d, d) or not np.all(np.isfinite(out.data)):
        raise ValueError("teacher checkpoint fails the forward smoke test")
