"""Procedural five-frame sequences with analytic ground truth at t=1.5.

Scenes are continuous functions of ``(x, y, t)`` (sums of sinusoids, gratings
and filled polygons under translation, rotation or zoom). Each pixel is the
mean of a 4x4 grid of sub-samples, so sub-pixel motion is well defined and the
middle frame is rendered, never interpolated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

GENERATOR_VERSION = 1
TIMES = (0.0, 1.0, 1.5, 2.0, 3.0)
TIME_TAGS = ("0", "1", "15", "2", "3")
KINDS = ("translate", "rotate", "multi-object", "zoom")
SUPERSAMPLE = 4
SPEED_RANGE = (0.5, 8.0)
RES_DIVISOR = 16


class FrameError(ValueError):
    """Unreadable frame file or an out-of-range frame tensor."""


@dataclass
class Quintuplet:
    frames: np.ndarray  # [5, C, H, W], times 0, 1, 1.5, 2, 3
    motion_meta: dict = field(default_factory=dict)

    @property
    def I0(self):
        return self.frames[0]

    @property
    def I1(self):
        return self.frames[1]

    @property
    def Igt(self):
        return self.frames[2]

    @property
    def I2(self):
        return self.frames[3]

    @property
    def I3(self):
        return self.frames[4]


# ---------------------------------------------------------------------------
# textures: callables (x, y) -> values in [0, 1], shape broadcast over channels
# ---------------------------------------------------------------------------

class _Waves:
    def __init__(self, rng, channels: int, n_waves: int, max_freq: float, contrast: float):
        self.freq = rng.uniform(-max_freq, max_freq, (n_waves, 2))
        self.phase = rng.uniform(0, 2 * math.pi, n_waves)
        amp = rng.uniform(0.3, 1.0, (n_waves, channels))
        self.amp = contrast * amp / amp.sum(axis=0, keepdims=True)
        self.mean = rng.uniform(0.45, 0.55, channels)

    def __call__(self, x, y):
        out = np.broadcast_to(self.mean[:, None, None], (len(self.mean),) + x.shape).copy()
        for (u, v), ph, a in zip(self.freq, self.phase, self.amp):
            w = np.cos(2 * math.pi * (u * x + v * y) + ph)
            out += a[:, None, None] * w
        return out


def _make_texture(rng, channels: int, tex_id: int):
    if tex_id == 0:  # band-limited noise
        return _Waves(rng, channels, 8, 0.12, 0.42)
    # grating: one or two dominant frequencies
    return _Waves(rng, channels, int(rng.integers(1, 3)), 0.15, 0.4)


def _polygon(rng, centre, radius):
    n = int(rng.integers(3, 7))
    # evenly spread angles keep every gap below pi, so the centre is inside
    ang = rng.uniform(0, 2 * math.pi) + 2 * math.pi * (np.arange(n) + rng.uniform(-0.3, 0.3, n)) / n
    rad = radius * rng.uniform(0.6, 1.0, n)
    return np.stack([centre[0] + rad * np.cos(ang), centre[1] + rad * np.sin(ang)], axis=1)


def _inside(poly, x, y):
    # vertices sorted by angle around an interior point -> convex test per edge
    inside = np.ones(x.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        (x0, y0), (x1, y1) = poly[i], poly[(i + 1) % n]
        inside &= (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0
    return inside


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

def _sample_grid(res: int):
    off = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    coords = (np.arange(res)[:, None] + off[None, :]).reshape(-1)
    y, x = np.meshgrid(coords, coords, indexing="ij")
    return x, y


def _box_down(img: np.ndarray, res: int) -> np.ndarray:
    C = img.shape[0]
    return img.reshape(C, res, SUPERSAMPLE, res, SUPERSAMPLE).mean(axis=(2, 4))


def _speed(rng) -> float:
    return float(rng.uniform(*SPEED_RANGE))


def _direction(rng) -> np.ndarray:
    a = rng.uniform(0, 2 * math.pi)
    return np.array([math.cos(a), math.sin(a)])


def _render(scene, res: int, channels: int) -> np.ndarray:
    x, y = _sample_grid(res)
    frames = [_box_down(scene(x, y, t), res) for t in TIMES]
    return np.clip(np.stack(frames), 0.0, 1.0)


def gen_sequence(seed: int, kind: str, res: int = 64, channels: int = 1,
                 velocity: tuple[float, float] | None = None, texture: int | None = None) -> Quintuplet:
    """Render one quintuplet. ``velocity`` (px/frame) overrides the sampled motion for ``translate``."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if res < RES_DIVISOR or res % RES_DIVISOR:
        raise ValueError(f"res must be a positive multiple of {RES_DIVISOR}, got {res}")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), GENERATOR_VERSION]))
    tex_id = int(rng.integers(0, 2)) if texture is None else int(texture)
    tex = _make_texture(rng, channels, tex_id)
    c = res / 2.0
    meta: dict = {"kind": kind, "texture": tex_id, "seed": int(seed)}

    if kind == "translate":
        v = np.asarray(velocity, dtype=float) if velocity is not None else _speed(rng) * _direction(rng)
        meta.update(velocity=[float(v[0]), float(v[1])], speed=float(np.hypot(*v)))

        def scene(x, y, t):
            return tex(x - v[0] * t, y - v[1] * t)

    elif kind == "rotate":
        r_max = c * math.sqrt(2)
        speed = _speed(rng)
        omega = speed / r_max * (1 if rng.random() < 0.5 else -1)
        meta.update(rotation=omega, speed=speed)

        def scene(x, y, t):
            ca, sa = math.cos(-omega * t), math.sin(-omega * t)
            dx, dy = x - c, y - c
            return tex(c + ca * dx - sa * dy, c + sa * dx + ca * dy)

    elif kind == "zoom":
        r_max = c * math.sqrt(2)
        speed = _speed(rng)
        # radial speed ~ zeta * r at the corners
        zeta = speed / r_max * (1 if rng.random() < 0.5 else -1)
        meta.update(zoom=zeta, speed=speed)

        def scene(x, y, t):
            s = math.exp(zeta * (t - 1.5))
            return tex(c + (x - c) / s, c + (y - c) / s)

    else:  # multi-object
        v_bg = _speed(rng) * _direction(rng) * 0.5
        objs = []
        for _ in range(int(rng.integers(1, 4))):
            centre = rng.uniform(0.25 * res, 0.75 * res, 2)
            poly = _polygon(rng, centre, rng.uniform(0.1, 0.25) * res)
            v = _speed(rng) * _direction(rng)
            otex = _make_texture(rng, channels, int(rng.integers(0, 2)))
            objs.append((poly, v, otex))
        speeds = [float(np.hypot(*v_bg))] + [float(np.hypot(*o[1])) for o in objs]
        meta.update(background_velocity=[float(v) for v in v_bg],
                    object_velocities=[[float(a) for a in o[1]] for o in objs], speed=max(speeds))

        def scene(x, y, t):
            img = tex(x - v_bg[0] * t, y - v_bg[1] * t)
            for poly, v, otex in objs:
                xs, ys = x - v[0] * t, y - v[1] * t
                mask = _inside(poly, xs, ys)
                img = np.where(mask[None], otex(xs, ys), img)
            return img

    frames = _render(scene, res, channels).astype(np.float64)
    return Quintuplet(frames, meta)


# ---------------------------------------------------------------------------
# frame files
# ---------------------------------------------------------------------------

def quantize(arr: np.ndarray) -> np.ndarray:
    """[0,1] floats to uint8, rounding half away from zero."""
    a = np.asarray(arr, dtype=np.float64)
    if not np.isfinite(a).all() or a.min(initial=0.0) < 0.0 or a.max(initial=0.0) > 1.0:
        raise FrameError("frame values must be finite and within [0, 1]")
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def write_frame(frame, path) -> None:
    """Write a ``[C,H,W]`` or ``[H,W]`` frame in [0,1] as an 8-bit PNG."""
    arr = frame.data if hasattr(frame, "data") and not isinstance(frame, np.ndarray) else frame
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 3:
        if arr.shape[0] != 3:
            raise FrameError(f"frames must have 1 or 3 channels, got shape {arr.shape}")
        img = Image.fromarray(np.ascontiguousarray(quantize(arr).transpose(1, 2, 0)), mode="RGB")
    elif arr.ndim == 2:
        img = Image.fromarray(quantize(arr), mode="L")
    else:
        raise FrameError(f"cannot write frame of shape {arr.shape}")
    try:
        img.save(path, format="PNG", optimize=False, compress_level=6)
    except OSError as exc:
        raise OSError(f"writing frame {path}: {exc}") from exc


def read_frame(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG as float32 ``[C,H,W]`` in [0,1]."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("L", "RGB"):
                raise FrameError(f"{path}: unsupported image mode {img.mode}")
            arr = np.asarray(img)
    except FrameError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise FrameError(f"{path}: malformed image ({exc})") from exc
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return (arr.astype(np.float32) / np.float32(255.0))


def frame_name(seq_id: int, tag: str) -> str:
    return f"seq{seq_id:04d}_t{tag}.png"


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    count: int
    res: int
    channels: int
    seed: int
    splits: dict[str, list[int]]
    generator_version: int = GENERATOR_VERSION
    motion: dict[int, dict] = field(default_factory=dict)

    def text(self) -> str:
        lines = ["dataset v1", f"generator {self.generator_version}", f"seed {self.seed}",
                 f"count {self.count}", f"res {self.res}", f"channels {self.channels}"]
        for name in ("train", "val", "test"):
            lines.append(f"split {name} " + " ".join(str(i) for i in self.splits[name]))
        for i in sorted(self.motion):
            lines.append(f"seq {i} {json.dumps(self.motion[i], sort_keys=True)}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse(text: str) -> "DatasetManifest":
        lines = text.splitlines()
        if not lines or lines[0] != "dataset v1":
            raise ValueError("not a dataset manifest")
        head, splits, motion = {}, {}, {}
        for ln in lines[1:]:
            tag, _, rest = ln.partition(" ")
            if tag == "split":
                name, _, ids = rest.partition(" ")
                splits[name] = [int(v) for v in ids.split()]
            elif tag == "seq":
                i, _, js = rest.partition(" ")
                motion[int(i)] = json.loads(js)
            elif tag:
                head[tag] = int(rest)
        return DatasetManifest(head["count"], head["res"], head["channels"], head["seed"], splits,
                               head["generator"], motion)


def split_counts(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n_val = int(math.floor(n * fractions[1] + 0.5))
    n_test = int(math.floor(n * fractions[2] + 0.5))
    return n - n_val - n_test, n_val, n_test


def sequence_kind(seed: int, seq_id: int) -> tuple[str, int]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(seq_id), 7]))
    return KINDS[int(rng.integers(len(KINDS)))], int(rng.integers(0, 2**31 - 1))


def build_dataset(out_dir, n_sequences: int = 200, seed: int = 0, res: int = 64, channels: int = 1,
                  splits=(0.8, 0.1, 0.1)) -> DatasetManifest:
    if n_sequences < 10:
        raise ValueError("need at least 10 sequences")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_val, n_test = split_counts(n_sequences, splits)
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED])).permutation(n_sequences)
    split_ids = {
        "train": sorted(int(i) for i in perm[:n_train]),
        "val": sorted(int(i) for i in perm[n_train : n_train + n_val]),
        "test": sorted(int(i) for i in perm[n_train + n_val :]),
    }
    motion = {}
    for i in range(n_sequences):
        kind, sub_seed = sequence_kind(seed, i)
        q = gen_sequence(sub_seed, kind, res, channels)
        motion[i] = q.motion_meta
        for tag, frame in zip(TIME_TAGS, q.frames):
            write_frame(frame, out / frame_name(i, tag))
    manifest = DatasetManifest(n_sequences, res, channels, int(seed), split_ids, GENERATOR_VERSION, motion)
    (out / "manifest.txt").write_text(manifest.text())
    return manifest


@dataclass
class Dataset:
    manifest: DatasetManifest
    root: Path
    _cache: dict = field(default_factory=dict)

    def split(self, name: str) -> np.ndarray:
        """Quintuplets of a split as float32 ``[n, 5, C, H, W]`` (ids ascending)."""
        if name not in self._cache:
            ids = self.manifest.splits[name]
            arr = np.stack([np.stack([read_frame(self.root / frame_name(i, tag)) for tag in TIME_TAGS])
                            for i in ids]) if ids else np.zeros((0, 5, self.manifest.channels,
                                                                 self.manifest.res, self.manifest.res),
                                                                np.float32)
            self._cache[name] = arr
        return self._cache[name]

    def ids(self, name: str) -> list[int]:
        return list(self.manifest.splits[name])


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.txt"
    try:
        manifest = DatasetManifest.parse(path.read_text())
    except OSError as exc:
        raise OSError(f"reading dataset manifest {path}: {exc}") from exc
    return Dataset(manifest, root)
