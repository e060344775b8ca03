"""Quality metrics, runtime benchmarking and comparison reports."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a, b, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float(cap)
    return 10.0 * math.log10(peak * peak / mse)


def to_gray(img) -> np.ndarray:
    """``[C,H,W]`` or ``[H,W]`` to ``[H,W]``; RGB uses Rec.601 luma."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 2:
        return x
    if x.ndim == 3 and x.shape[0] == 1:
        return x[0]
    if x.ndim == 3 and x.shape[0] == 3:
        return np.tensordot(LUMA, x, axes=(0, 0))
    raise ValueError(f"cannot convert shape {x.shape} to grayscale")


def _gauss_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, k1: float = 0.01,
         k2: float = 0.03, peak: float = 1.0) -> float:
    """Mean SSIM over all positions where the Gaussian window fits."""
    x, y = to_gray(a), to_gray(b)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if min(x.shape) < window:
        raise ValueError(f"ssim: image {x.shape} smaller than the {window}x{window} window")
    g = _gauss_window(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    vx = _filter_valid(x * x, g) - mx * mx
    vy = _filter_valid(y * y, g) - my * my
    cxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def frame_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample PSNR and SSIM for batches ``[n, C, H, W]``."""
    p = np.array([psnr(pi, gi) for pi, gi in zip(pred, gt)])
    s = np.array([ssim(pi, gi) for pi, gi in zip(pred, gt)])
    return p, s


# ---------------------------------------------------------------------------
# runtime
# ---------------------------------------------------------------------------

def environment() -> dict:
    threads = {k: os.environ[k] for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
               if k in os.environ}
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for ln in fh:
                if ln.startswith("model name"):
                    cpu = ln.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return {"cpu": cpu, "cpu_count": os.cpu_count(), "threads": threads,
            "python": platform.python_version(), "numpy": np.__version__}


def bench_runtime(ckpt, res: int = 64, reps: int = 10, warmup: int = 2, seed: int = 0) -> dict:
    """Wall-clock of one single-frame interpolation (forward only, no graph)."""
    from . import tensor as T
    from .netdef import forward_interpolate

    if reps < 10:
        raise ValueError("reps must be >= 10")
    C = ckpt.spec.channels
    frames = np.random.default_rng(seed).random((1, 4 * C, res, res)).astype(np.float32)
    times = []
    with T.no_grad():
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            forward_interpolate(ckpt, frames)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt)
    arr = np.array(times)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "reps": times, "res": res,
            "env": environment()}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalRecord:
    model: str
    split: str
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    runtime_mean_sec: float
    params_M: float


REPORT_COLUMNS = tuple(f.name for f in fields(EvalRecord))
# higher is better for quality, lower for cost
_BEST = {"psnr_mean": max, "ssim_mean": max, "runtime_mean_sec": min, "params_M": min}


def best_flags(records: list[EvalRecord]) -> list[set[str]]:
    flags: list[set[str]] = [set() for _ in records]
    for col, pick in _BEST.items():
        vals = [getattr(r, col) for r in records]
        target = pick(vals)
        for i, v in enumerate(vals):
            if v == target:
                flags[i].add(col)
    return flags


def emit_report(records: list[EvalRecord], fmt: str = "text", env: dict | None = None) -> str:
    """Render records as ``text`` table, ``csv`` or ``jsonl``; best values are flagged."""
    if not records:
        raise ValueError("report needs at least one record")
    flags = best_flags(records)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS + ("best",))
        for r, f in zip(records, flags):
            w.writerow([repr(v) if isinstance(v, float) else v for v in astuple_ordered(r)]
                       + [";".join(sorted(f))])
        return buf.getvalue()
    if fmt == "jsonl":
        lines = []
        if env is not None:
            lines.append(json.dumps({"environment": env}, sort_keys=True))
        for r, f in zip(records, flags):
            d = asdict(r)
            d["best"] = sorted(f)
            lines.append(json.dumps(d, sort_keys=True))
        return "\n".join(lines) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    head = ["model", "split", "PSNR", "SSIM", "RT (s)", "#P (M)"]
    rows = []
    for r, f in zip(records, flags):
        def mark(col, s):
            return s + ("*" if col in f else "")
        rows.append([
            r.model, r.split,
            mark("psnr_mean", f"{r.psnr_mean:.3f}±{r.psnr_std:.3f}"),
            mark("ssim_mean", f"{r.ssim_mean:.4f}±{r.ssim_std:.4f}"),
            mark("runtime_mean_sec", f"{r.runtime_mean_sec:.4f}"),
            mark("params_M", f"{r.params_M:.4f}"),
        ])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(head)]
    fmt_row = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [fmt_row(head), fmt_row(["-" * w for w in widths])] + [fmt_row(r) for r in rows]
    out.append("* best in column")
    return "\n".join(out) + "\n"


def astuple_ordered(r: EvalRecord) -> tuple:
    return tuple(getattr(r, c) for c in REPORT_COLUMNS)


def parse_csv_report(text: str) -> list[EvalRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0][: len(REPORT_COLUMNS)]) != REPORT_COLUMNS:
        raise ValueError("not a report CSV")
    out = []
    for row in rows[1:]:
        vals = row[: len(REPORT_COLUMNS)]
        out.append(EvalRecord(vals[0], vals[1], *(float(v) for v in vals[2:])))
    return out


def record_from_json(d: dict) -> EvalRecord:
    return EvalRecord(**{k: d[k] for k in REPORT_COLUMNS})
