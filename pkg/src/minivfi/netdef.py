"""Branch-structured interpolator definitions, parameter counting and checkpoints.

A network is an ordered list of convolution layers, each described by the
5-tuple ``[C_out, C_in, q0, q1, q2]`` plus wiring (which producers it
concatenates). 2-D layers store ``[C_out, C_in, kH, kW, 1]``.

Topology (four branches):

``branchA``
    3-level U-Net over the four stacked frames ending in a head that predicts
    per-pixel ``k x k`` kernels for I1 and I2; the filtered sum is candidate A.
``branchB``
    shallow conv stack whose output is added to the I1/I2 average; candidate B.
``fusion``
    conv stack over the concatenated live candidates; its output plus the mean
    candidate is the intermediate frame.
``refine3d``
    two 3-D convolutions over ``{I0, I1, intermediate, I2, I3}`` giving the
    residual R. The interpolated frame is intermediate + R.

Candidate branches can be removed by a compression plan; fusion then only
sees the remaining candidates.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

PRELU_SLOPE = 0.1
UNET_DIVISOR = 4
CANDIDATE_BRANCHES = ("branchA", "branchB")
BRANCHES = ("branchA", "branchB", "fusion", "refine3d")
MANIFEST_VERSION = 1

CKPT_MAGIC = b"SNET"
CKPT_VERSION = 1


class SpecError(ValueError):
    """A network spec violates channel compatibility or its constructor contract."""


class CheckpointError(Exception):
    """Base class for checkpoint read failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    c_out: int
    c_in: int
    q0: int
    q1: int
    q2: int
    branch: str
    prunable: bool = True
    inputs: tuple[str, ...] = ()
    act: str = "prelu"
    bias: bool = True
    pad: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("conv2d", "conv3d"):
            raise SpecError(f"layer {self.id}: unknown kind {self.kind!r}")
        dims = (self.c_out, self.c_in, self.q0, self.q1, self.q2)
        if any(int(v) != v or v < 1 for v in dims):
            raise SpecError(f"layer {self.id}: 5-tuple entries must be positive ints, got {list(dims)}")
        if self.kind == "conv2d" and self.q2 != 1:
            raise SpecError(f"layer {self.id}: conv2d layers encode as [C_out, C_in, kH, kW, 1]")
        if self.act not in ("prelu", "none"):
            raise SpecError(f"layer {self.id}: unknown activation {self.act!r}")

    @property
    def tuple5(self) -> tuple[int, int, int, int, int]:
        return (self.c_out, self.c_in, self.q0, self.q1, self.q2)

    @property
    def p(self) -> int:
        """Weight count ``C_out * C_in * q0 * q1 * q2`` (biases excluded)."""
        return self.c_out * self.c_in * self.q0 * self.q1 * self.q2

    @property
    def kernel(self) -> tuple[int, ...]:
        return (self.q0, self.q1) if self.kind == "conv2d" else (self.q0, self.q1, self.q2)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.c_out, self.c_in) + self.kernel

    def line(self) -> str:
        return (f"{self.id} {self.kind} {self.c_out} {self.c_in} {self.q0} {self.q1} {self.q2} "
                f"{self.branch} {int(self.prunable)}")

    def wire_line(self) -> str:
        pad = "-" if self.pad is None else ",".join(str(p) for p in self.pad)
        return f"{self.id} act={self.act} bias={int(self.bias)} pad={pad} in={'+'.join(self.inputs)}"


def _source_layer(src: str) -> str | None:
    if src.startswith("@"):
        return None
    return src.split("^", 1)[0]


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    channels: int = 1
    kernel_size: int = 5
    removed_branches: frozenset[str] = frozenset()
    name: str = "teacher"

    # -- lookup ---------------------------------------------------------
    def layer(self, lid: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == lid:
                return layer
        raise KeyError(lid)

    @property
    def ids(self) -> list[str]:
        return [layer.id for layer in self.layers]

    def branch_layers(self, branch: str) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.branch == branch]

    @property
    def live_candidates(self) -> list[str]:
        return [b for b in CANDIDATE_BRANCHES if b not in self.removed_branches]

    def externals(self) -> dict[str, tuple[int, str | None]]:
        """External inputs available to layers: name -> (width, owning branch)."""
        C = self.channels
        ext = {"@frames": (4 * C, None), "@stack5": (C, None)}
        for b, name in (("branchA", "@candA"), ("branchB", "@candB")):
            if b not in self.removed_branches:
                ext[name] = (C, b)
        return ext

    def ports(self) -> dict[str, int]:
        """Output layers consumed by glue code, with their required C_out."""
        C, k = self.channels, self.kernel_size
        req = {"f_out": C, "r2": C}
        if "branchA" not in self.removed_branches:
            req["a_head"] = 2 * k * k
        if "branchB" not in self.removed_branches:
            req["b_out"] = C
        return req

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {layer.id: [] for layer in self.layers}
        for layer in self.layers:
            for src in layer.inputs:
                lid = _source_layer(src)
                if lid is not None and lid in out:
                    out[lid].append(layer.id)
        return out

    # -- invariants -----------------------------------------------------
    def validate(self) -> "NetworkSpec":
        if self.channels < 1 or self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise SpecError("channels must be >= 1 and kernel_size odd")
        if not self.live_candidates:
            raise SpecError("at least one candidate branch must stay live")
        ext = self.externals()
        seen: dict[str, LayerSpec] = {}
        for layer in self.layers:
            if layer.id in seen:
                raise SpecError(f"duplicate layer id {layer.id}")
            if layer.branch in self.removed_branches:
                raise SpecError(f"layer {layer.id} belongs to removed branch {layer.branch}")
            width = 0
            for src in layer.inputs:
                lid = _source_layer(src)
                if lid is None:
                    if src not in ext:
                        raise SpecError(f"layer {layer.id}: unknown external input {src}")
                    width += ext[src][0]
                    continue
                if lid not in seen:
                    raise SpecError(f"layer {layer.id}: input {src} is not an earlier layer")
                prod = seen[lid]
                if (prod.kind == "conv3d") != (layer.kind == "conv3d"):
                    raise SpecError(f"layer {layer.id}: cannot mix 2-D and 3-D tensors")
                width += prod.c_out
            if width != layer.c_in:
                raise SpecError(
                    f"layer {layer.id}: C_in={layer.c_in} but its inputs {list(layer.inputs)} "
                    f"provide {width} channels"
                )
            seen[layer.id] = layer
        for lid, need in self.ports().items():
            if lid not in seen:
                raise SpecError(f"missing output layer {lid}")
            if seen[lid].c_out != need:
                raise SpecError(f"output layer {lid}: C_out={seen[lid].c_out}, glue needs {need}")
        r2 = seen["r2"]
        if r2.kind != "conv3d" or r2.q0 != 5 or (r2.pad or (0,))[0] != 0:
            raise SpecError("r2 must be a conv3d collapsing the 5-frame axis")
        return self

    # -- text form ------------------------------------------------------
    def manifest(self, meta: Mapping | None = None) -> str:
        lines = [f"network v{MANIFEST_VERSION}", f"name {self.name}",
                 f"channels {self.channels}", f"kernel {self.kernel_size}"]
        lines += [f"removed {b}" for b in sorted(self.removed_branches)]
        for layer in self.layers:
            lines.append("layer " + layer.line())
        for layer in self.layers:
            lines.append("wire " + layer.wire_line())
        for key in sorted(meta or {}):
            lines.append(f"meta {key} {json.dumps(meta[key], sort_keys=True)}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_manifest(text: str) -> tuple["NetworkSpec", dict]:
        head: dict[str, str] = {}
        removed: list[str] = []
        layer_rows: list[list[str]] = []
        wires: dict[str, dict[str, str]] = {}
        meta: dict = {}
        lines = text.splitlines()
        if not lines or lines[0] != f"network v{MANIFEST_VERSION}":
            raise SpecError(f"not a network manifest (first line {lines[:1]!r})")
        for ln in lines[1:]:
            if not ln.strip():
                continue
            tag, _, rest = ln.partition(" ")
            if tag in ("name", "channels", "kernel"):
                head[tag] = rest
            elif tag == "removed":
                removed.append(rest)
            elif tag == "layer":
                layer_rows.append(rest.split())
            elif tag == "wire":
                parts = rest.split()
                wires[parts[0]] = dict(p.split("=", 1) for p in parts[1:])
            elif tag == "meta":
                key, _, val = rest.partition(" ")
                meta[key] = json.loads(val)
            else:
                raise SpecError(f"unknown manifest line: {ln!r}")
        layers = []
        for row in layer_rows:
            if len(row) != 9:
                raise SpecError(f"layer line needs 9 fields: {row}")
            lid, kind, *nums, branch, prunable = row
            w = wires.get(lid)
            if w is None:
                raise SpecError(f"layer {lid} has no wire line")
            pad = None if w["pad"] == "-" else tuple(int(v) for v in w["pad"].split(","))
            inputs = tuple(w["in"].split("+")) if w["in"] else ()
            layers.append(LayerSpec(lid, kind, *(int(v) for v in nums), branch=branch,
                                    prunable=prunable == "1", inputs=inputs, act=w["act"],
                                    bias=w["bias"] == "1", pad=pad))
        spec = NetworkSpec(tuple(layers), channels=int(head["channels"]),
                           kernel_size=int(head["kernel"]), removed_branches=frozenset(removed),
                           name=head.get("name", "net"))
        return spec.validate(), meta


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TeacherConfig:
    channels: int = 1
    unet: tuple[int, int, int] = (16, 32, 64)
    branch_b: int = 16
    fusion: int = 16
    refine: int = 8
    kernel_size: int = 5


def build_teacher(cfg: TeacherConfig = TeacherConfig()) -> NetworkSpec:
    knobs = {"channels": cfg.channels, "branch_b": cfg.branch_b, "fusion": cfg.fusion,
             "refine": cfg.refine, "kernel_size": cfg.kernel_size}
    for i, w in enumerate(cfg.unet):
        knobs[f"unet[{i}]"] = w
    bad = [k for k, v in knobs.items() if int(v) != v or v < 1]
    if len(cfg.unet) != 3:
        bad.append("unet (needs 3 levels)")
    if bad:
        raise SpecError(f"knobs must be positive integers: {', '.join(bad)}")
    if cfg.kernel_size % 2 == 0:
        raise SpecError("kernel_size must be odd")
    C, k = cfg.channels, cfg.kernel_size
    w1, w2, w3 = cfg.unet
    wb, wf, wr = cfg.branch_b, cfg.fusion, cfg.refine

    def c2(lid, co, ci, branch, inputs, ksz=3, act="prelu", prunable=True):
        return LayerSpec(lid, "conv2d", co, ci, ksz, ksz, 1, branch, prunable, tuple(inputs), act)

    layers = [
        c2("a_enc1", w1, 4 * C, "branchA", ["@frames"]),
        c2("a_enc1b", w1, w1, "branchA", ["a_enc1"]),
        c2("a_enc2", w2, w1, "branchA", ["a_enc1b^pool"]),
        c2("a_enc2b", w2, w2, "branchA", ["a_enc2"]),
        c2("a_enc3", w3, w2, "branchA", ["a_enc2b^pool"]),
        c2("a_enc3b", w3, w3, "branchA", ["a_enc3"]),
        c2("a_enc3c", w3, w3, "branchA", ["a_enc3b"]),
        c2("a_dec2", w2, w3 + w2, "branchA", ["a_enc3c^up", "a_enc2b"]),
        c2("a_dec1", w1, w2 + w1, "branchA", ["a_dec2^up", "a_enc1b"]),
        c2("a_head", 2 * k * k, w1, "branchA", ["a_dec1"], ksz=1, act="none", prunable=False),
        c2("b1", wb, 4 * C, "branchB", ["@frames"]),
        c2("b2", wb, wb, "branchB", ["b1"]),
        c2("b3", wb, wb, "branchB", ["b2"]),
        c2("b_out", C, wb, "branchB", ["b3"], act="none"),
        c2("f1", wf, 2 * C, "fusion", ["@candA", "@candB"]),
        c2("f2", wf, wf, "fusion", ["f1"]),
        c2("f_out", C, wf, "fusion", ["f2"], act="none"),
        LayerSpec("r1", "conv3d", wr, C, 3, 3, 3, "refine3d", True, ("@stack5",), "prelu"),
        LayerSpec("r2", "conv3d", C, wr, 5, 3, 3, "refine3d", True, ("r1",), "none", pad=(0, 1, 1)),
    ]
    return NetworkSpec(tuple(layers), channels=C, kernel_size=k, name="teacher").validate()


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def build_from_plan(teacher: NetworkSpec, plan) -> NetworkSpec:
    """Rewrite channel counts of ``teacher`` according to a compression plan.

    ``plan.ratios[l]`` is the ratio applied to layer ``l``'s input dimension;
    every producer feeding ``l`` shrinks its output by the same ratio (per
    concatenated block, rounded half-up, minimum 1). A producer feeding several
    consumers keeps the largest count any of them asks for. Image and glue
    facing dimensions never change. Layers of ``plan.removed_branches`` are
    dropped.
    """
    removed = frozenset(plan.removed_branches)
    unknown = removed - set(BRANCHES)
    if unknown:
        raise SpecError(f"plan removes unknown branches {sorted(unknown)}")
    if not [b for b in CANDIDATE_BRANCHES if b not in removed]:
        raise SpecError("plan removes every candidate branch; fusion would have no input")
    if removed & {"fusion", "refine3d"}:
        raise SpecError("only candidate branches can be removed")
    live = [layer for layer in teacher.layers if layer.branch not in removed]
    missing = [layer.id for layer in live if layer.prunable and layer.id not in plan.ratios]
    if missing:
        raise SpecError(f"plan has no ratio for prunable layers {missing}")

    probe = replace(teacher, layers=tuple(live), removed_branches=removed)
    ports = probe.ports()
    ext = probe.externals()
    consumers = probe.consumers()

    new_out: dict[str, int] = {}
    # walk from the output back to the input
    for layer in reversed(live):
        if layer.id in ports or not consumers[layer.id]:
            new_out[layer.id] = layer.c_out
            continue
        want = 0
        for cid in consumers[layer.id]:
            r = float(plan.ratios.get(cid, 1.0))
            want = max(want, max(1, _round_half_up(r * layer.c_out)))
        new_out[layer.id] = min(want, layer.c_out)

    rebuilt = []
    for layer in live:
        inputs = []
        c_in = 0
        for src in layer.inputs:
            lid = _source_layer(src)
            if lid is None:
                if src in ext:
                    inputs.append(src)
                    c_in += ext[src][0]
                continue
            if lid in new_out:
                inputs.append(src)
                c_in += new_out[lid]
        if c_in == 0:
            raise SpecError(f"layer {layer.id} would have zero input channels")
        rebuilt.append(replace(layer, c_out=new_out[layer.id], c_in=c_in, inputs=tuple(inputs)))
    return NetworkSpec(tuple(rebuilt), channels=teacher.channels, kernel_size=teacher.kernel_size,
                       removed_branches=removed, name="student").validate()


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def count_params(spec: NetworkSpec) -> dict:
    per_layer = {layer.id: layer.p + (layer.c_out if layer.bias else 0) for layer in spec.layers}
    return {"per_layer": per_layer, "total": sum(per_layer.values())}


def init_params(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> dict[str, dict[str, Tensor]]:
    """Fan-in uniform init, ``U(-b, b)`` with ``b = sqrt(1 / (C_in*q0*q1*q2))``."""
    params = {}
    for layer in spec.layers:
        bound = math.sqrt(1.0 / (layer.c_in * layer.q0 * layer.q1 * layer.q2))
        entry = {"weight": Tensor(rng.uniform(-bound, bound, layer.weight_shape).astype(dtype),
                                  requires_grad=True)}
        if layer.bias:
            entry["bias"] = Tensor(rng.uniform(-bound, bound, (layer.c_out,)).astype(dtype),
                                   requires_grad=True)
        params[layer.id] = entry
    return params


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict[str, dict[str, Tensor]]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for layer in self.spec.layers:
            entry = self.params.get(layer.id)
            if entry is None:
                raise SpecError(f"checkpoint lacks parameters for layer {layer.id}")
            if entry["weight"].shape != layer.weight_shape:
                raise SpecError(f"layer {layer.id}: weight {entry['weight'].shape} != {layer.weight_shape}")
            if layer.bias and entry.get("bias") is None:
                raise SpecError(f"layer {layer.id}: missing bias")
            if layer.bias and entry["bias"].shape != (layer.c_out,):
                raise SpecError(f"layer {layer.id}: bias {entry['bias'].shape} != ({layer.c_out},)")

    def tensors(self) -> list[Tensor]:
        out = []
        for layer in self.spec.layers:
            out.append(self.params[layer.id]["weight"])
            if layer.bias:
                out.append(self.params[layer.id]["bias"])
        return out

    def prunable_weights(self) -> list[Tensor]:
        return [self.params[layer.id]["weight"] for layer in self.spec.layers if layer.prunable]

    def copy(self, requires_grad: bool = True) -> "Checkpoint":
        params = {lid: {k: Tensor(t.data.copy(), requires_grad=requires_grad) for k, t in e.items()}
                  for lid, e in self.params.items()}
        return Checkpoint(self.spec, params, json.loads(json.dumps(self.meta)))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256(self.spec.manifest().encode())
        for t in self.tensors():
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()


def new_checkpoint(spec: NetworkSpec, seed: int, meta: dict | None = None) -> Checkpoint:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A17]))
    return Checkpoint(spec, init_params(spec, rng), dict(meta or {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    manifest = ckpt.spec.manifest(ckpt.meta).encode("utf-8")
    body = bytearray(CKPT_MAGIC)
    body += struct.pack("<II", CKPT_VERSION, len(manifest))
    body += manifest
    for t in ckpt.tensors():
        body += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    version, mlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CKPT_VERSION}")
    if len(raw) < 12 + mlen + 4:
        raise CheckpointTruncatedError(f"{path}: manifest truncated")
    try:
        spec, meta = NetworkSpec.from_manifest(raw[12 : 12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, SpecError, KeyError, ValueError) as exc:
        if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != struct.unpack_from("<I", raw, len(raw) - 4)[0]:
            raise CheckpointChecksumError(f"{path}: CRC mismatch") from exc
        raise CheckpointFormatError(f"{path}: malformed manifest: {exc}") from exc
    shapes = []
    for layer in spec.layers:
        shapes.append((layer.id, "weight", layer.weight_shape))
        if layer.bias:
            shapes.append((layer.id, "bias", (layer.c_out,)))
    need = 12 + mlen + sum(4 * math.prod(s) for _, _, s in shapes) + 4
    if len(raw) < need:
        raise CheckpointTruncatedError(f"{path}: {len(raw)} bytes, expected {need}")
    if len(raw) > need:
        raise CheckpointFormatError(f"{path}: {len(raw) - need} trailing bytes")
    crc = struct.unpack_from("<I", raw, need - 4)[0]
    if zlib.crc32(raw[: need - 4]) & 0xFFFFFFFF != crc:
        raise CheckpointChecksumError(f"{path}: CRC mismatch")
    params: dict[str, dict[str, Tensor]] = {}
    off = 12 + mlen
    for lid, key, shape in shapes:
        n = math.prod(shape)
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        params.setdefault(lid, {})[key] = Tensor(arr, requires_grad=True)
        off += 4 * n
    return Checkpoint(spec, params, meta)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _as_frame_stack(frames, channels: int) -> np.ndarray:
    arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    if arr.ndim == 5:
        N, C, F, H, W = arr.shape
        if F != 4 or C != channels:
            raise T.ShapeError(f"frames [N,C,4,H,W] expected with C={channels}, got {arr.shape}")
        arr = arr.transpose(0, 2, 1, 3, 4).reshape(N, 4 * C, H, W)
    elif arr.ndim != 4 or arr.shape[1] != 4 * channels:
        raise T.ShapeError(f"frames must be [N,{4 * channels},H,W] or [N,{channels},4,H,W], got {arr.shape}")
    H, W = arr.shape[2:]
    if H % UNET_DIVISOR or W % UNET_DIVISOR:
        raise T.ShapeError(f"frame size {H}x{W} must be divisible by {UNET_DIVISOR}")
    return np.ascontiguousarray(arr)


def _source(env: dict, src: str) -> Tensor:
    if "^" in src:
        lid, op = src.split("^", 1)
        key = src
        if key not in env:
            env[key] = T.bilinear_resize(env[lid], 2) if op == "up" else T.avg_pool2(env[lid])
        return env[key]
    return env[src]


def _run_branch(spec: NetworkSpec, params, env: dict, branch: str) -> None:
    for layer in spec.layers:
        if layer.branch != branch:
            continue
        xs = [_source(env, s) for s in layer.inputs]
        x = xs[0] if len(xs) == 1 else T.concat(xs, axis=1)
        p = params[layer.id]
        conv = T.conv2d if layer.kind == "conv2d" else T.conv3d
        y = conv(x, p["weight"], p.get("bias"), padding="reflect", pad=layer.pad)
        if layer.act == "prelu":
            y = T.prelu(y, PRELU_SLOPE)
        env[layer.id] = y


def forward_interpolate(ckpt: Checkpoint, frames) -> dict[str, Tensor]:
    """Interpolate the frame at t=1.5 from frames at t=0,1,2,3.

    Returns ``I_out`` (= ``I_tilde + R``), ``I_tilde`` and ``R``, each
    ``[N, C, H, W]``.
    """
    spec = ckpt.spec
    C = spec.channels
    stack = _as_frame_stack(frames, C)
    N, _, H, W = stack.shape
    dtype = next(iter(ckpt.params.values()))["weight"].dtype
    stack = stack.astype(dtype, copy=False)
    I = [stack[:, f * C : (f + 1) * C] for f in range(4)]
    env: dict = {"@frames": Tensor(stack)}

    cands = []
    if "branchA" not in spec.removed_branches:
        _run_branch(spec, ckpt.params, env, "branchA")
        k = spec.kernel_size
        kernels = T.softmax(env["a_head"], axis=1)
        near = Tensor(np.stack([I[1], I[2]], axis=1))
        env["@candA"] = T.local_filter(near, kernels, k, padding="reflect")
        cands.append(env["@candA"])
    if "branchB" not in spec.removed_branches:
        _run_branch(spec, ckpt.params, env, "branchB")
        blend = Tensor(0.5 * (I[1] + I[2]))
        env["@candB"] = T.add(blend, env["b_out"])
        cands.append(env["@candB"])

    _run_branch(spec, ckpt.params, env, "fusion")
    base = cands[0]
    for c in cands[1:]:
        base = T.add(base, c)
    if len(cands) > 1:
        base = T.mul(base, 1.0 / len(cands))
    I_tilde = T.add(base, env["f_out"])

    def lift(a):
        t = a if isinstance(a, Tensor) else Tensor(a)
        return T.reshape(t, (N, C, 1, H, W))

    env["@stack5"] = T.concat([lift(I[0]), lift(I[1]), lift(I_tilde), lift(I[2]), lift(I[3])], axis=2)
    _run_branch(spec, ckpt.params, env, "refine3d")
    R = T.reshape(env["r2"], (N, C, H, W))
    I_out = T.add(I_tilde, R)
    return {"I_out": I_out, "I_tilde": I_tilde, "R": R}


def interpolate(ckpt: Checkpoint, frames, batch: int = 8) -> np.ndarray:
    """Graph-free batched inference; returns ``I_out`` as an array."""
    stack = _as_frame_stack(frames, ckpt.spec.channels)
    outs = []
    with T.no_grad():
        for i in range(0, len(stack), batch):
            outs.append(forward_interpolate(ckpt, stack[i : i + batch])["I_out"].data)
    return np.concatenate(outs, axis=0)


def iter_layers(spec: NetworkSpec, branches: Iterable[str]) -> list[LayerSpec]:
    wanted = set(branches)
    return [layer for layer in spec.layers if layer.branch in wanted]
