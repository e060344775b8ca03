"""Density analysis and compression plans.

A sparse checkpoint is summarised per layer by its density (share of weights
that are not exactly zero). Each layer's density becomes the ratio by which
its input dimension shrinks; the producers feeding it shrink their output
dimension to match. A candidate branch whose mean density is near zero is
removed outright.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .netdef import (
    CANDIDATE_BRANCHES,
    Checkpoint,
    NetworkSpec,
    LayerSpec,
    SpecError,
    _round_half_up,
    count_params,
)
from .tensor import ShapeError, Tensor

BRANCH_THRESHOLD = 0.05
REPORT_VERSION = 1
PLAN_VERSION = 1


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class LayerDensity:
    nonzeros: int
    p_l: int

    @property
    def d_l(self) -> Fraction:
        return Fraction(self.nonzeros, self.p_l)


def layer_density(weights, spec: LayerSpec) -> LayerDensity:
    """Exact count of weights different from 0.0 against ``p_l``."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    if tuple(w.shape) != spec.weight_shape:
        raise ShapeError(f"layer {spec.id}: weight shape {w.shape} != {spec.weight_shape}")
    return LayerDensity(int(np.count_nonzero(w)), spec.p)


@dataclass(frozen=True)
class DensityReport:
    per_layer: Mapping[str, LayerDensity]

    @property
    def model_density(self) -> Fraction:
        nz = sum(e.nonzeros for e in self.per_layer.values())
        p = sum(e.p_l for e in self.per_layer.values())
        return Fraction(nz, p) if p else Fraction(1)

    def branch_density(self, spec: NetworkSpec, branch: str) -> Fraction | None:
        """``p_l``-weighted density over the reported layers of ``branch``."""
        rows = [self.per_layer[layer.id] for layer in spec.branch_layers(branch)
                if layer.id in self.per_layer]
        p = sum(r.p_l for r in rows)
        if not p:
            return None
        return Fraction(sum(r.nonzeros for r in rows), p)

    def text(self) -> str:
        md = self.model_density
        lines = [f"density v{REPORT_VERSION}",
                 f"model {md.numerator} {md.denominator} {float(md):.6f}"]
        for lid, e in self.per_layer.items():
            lines.append(f"layer {lid} {e.nonzeros} {e.p_l} {float(e.d_l):.6f}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse(text: str) -> "DensityReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != f"density v{REPORT_VERSION}":
            raise ValueError("not a density report")
        per = {}
        for ln in lines[1:]:
            parts = ln.split()
            if parts[0] == "layer":
                per[parts[1]] = LayerDensity(int(parts[2]), int(parts[3]))
            elif parts[0] != "model":
                raise ValueError(f"unknown report line: {ln!r}")
        return DensityReport(per)


def model_density(ckpt: Checkpoint, prunable_only: bool = True) -> DensityReport:
    """Per-layer densities of a checkpoint (biases excluded)."""
    per = {}
    for layer in ckpt.spec.layers:
        if prunable_only and not layer.prunable:
            continue
        per[layer.id] = layer_density(ckpt.params[layer.id]["weight"], layer)
    return DensityReport(per)


@dataclass(frozen=True)
class CompressionPlan:
    ratios: Mapping[str, float]
    removed_branches: frozenset[str] = frozenset()
    provenance: DensityReport | None = None
    branch_threshold: float = BRANCH_THRESHOLD
    notes: tuple[str, ...] = field(default_factory=tuple)

    @property
    def is_identity(self) -> bool:
        return not self.removed_branches and all(r == 1.0 for r in self.ratios.values())

    def text(self) -> str:
        lines = [f"plan v{PLAN_VERSION}", f"threshold {self.branch_threshold!r}"]
        lines += [f"removed {b}" for b in sorted(self.removed_branches)]
        lines += [f"ratio {lid} {r!r}" for lid, r in self.ratios.items()]
        lines += [f"note {n}" for n in self.notes]
        if self.provenance is not None:
            lines += ["provenance"] + self.provenance.text().splitlines()
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse(text: str) -> "CompressionPlan":
        lines = text.splitlines()
        if not lines or lines[0] != f"plan v{PLAN_VERSION}":
            raise ValueError("not a compression plan")
        ratios: dict[str, float] = {}
        removed: list[str] = []
        notes: list[str] = []
        threshold = BRANCH_THRESHOLD
        prov = None
        for i, ln in enumerate(lines[1:], start=1):
            if not ln.strip():
                continue
            tag, _, rest = ln.partition(" ")
            if tag == "threshold":
                threshold = float(rest)
            elif tag == "removed":
                removed.append(rest)
            elif tag == "ratio":
                lid, val = rest.split()
                ratios[lid] = float(val)
            elif tag == "note":
                notes.append(rest)
            elif tag == "provenance":
                prov = DensityReport.parse("\n".join(lines[i + 1 :]))
                break
            else:
                raise ValueError(f"unknown plan line: {ln!r}")
        return CompressionPlan(ratios, frozenset(removed), prov, threshold, tuple(notes))


def make_plan(report: DensityReport, spec: NetworkSpec,
              branch_threshold: float = BRANCH_THRESHOLD) -> CompressionPlan:
    """Turn densities into per-layer input ratios and branch verdicts.

    Prunable layers take ``r = max(d_l, 1 / C_in)`` so at least one input
    channel survives rounding; non-prunable layers and layers fed only by the
    image inputs keep ratio 1.
    """
    if branch_threshold < 0:
        raise PlanError("branch threshold must be >= 0")
    missing = [layer.id for layer in spec.layers if layer.prunable and layer.id not in report.per_layer]
    if missing:
        raise PlanError(f"density report does not cover layers {missing}")

    removed = set()
    notes = []
    for b in CANDIDATE_BRANCHES:
        if b in spec.removed_branches:
            continue
        d = report.branch_density(spec, b)
        if d is not None and d < branch_threshold:
            removed.add(b)
            notes.append(f"{b} mean density {float(d):.6f} < {branch_threshold}")
    if not [b for b in spec.live_candidates if b not in removed]:
        raise PlanError("every candidate branch falls below the removal threshold; "
                        "lower the threshold or prune less")

    ratios: dict[str, float] = {}
    # output to input, so the listing reads in propagation order
    for layer in reversed(spec.layers):
        if layer.branch in removed:
            continue
        if not layer.prunable or all(src.startswith("@") for src in layer.inputs):
            ratios[layer.id] = 1.0
            continue
        d = float(report.per_layer[layer.id].d_l)
        ratios[layer.id] = max(d, 1.0 / layer.c_in)
    return CompressionPlan(ratios, frozenset(removed), report, branch_threshold, tuple(notes))


def identity_plan(spec: NetworkSpec) -> CompressionPlan:
    return CompressionPlan({layer.id: 1.0 for layer in spec.layers})


def propagate_chain(layers: Sequence[Sequence[int]], densities: Sequence[float]) -> list[tuple[int, ...]]:
    """Ratio propagation on a plain chain of 5-tuples, last layer first.

    Layer ``n`` becomes ``[C_out, r_n*C_in, ...]`` and its producer
    ``[r_n*C_out, C_in, ...]`` (rounded half-up, minimum 1). The first input
    and the last output are boundary dimensions and stay fixed.
    """
    if len(layers) != len(densities):
        raise ValueError("one density per layer")
    out = [list(t) for t in layers]
    for n in range(len(out) - 1, 0, -1):
        if out[n][1] != layers[n - 1][0]:
            raise SpecError(f"chain broken between layers {n - 1} and {n}")
        c = max(1, _round_half_up(float(densities[n]) * out[n][1]))
        out[n][1] = c
        out[n - 1][0] = c
    return [tuple(t) for t in out]


def summarize_compression(teacher_spec: NetworkSpec | int, student_spec: NetworkSpec | int) -> dict:
    """Parameter totals (weights and biases) and the reduction in percent."""
    def total(s):
        return s if isinstance(s, (int, float)) else count_params(s)["total"]

    before, after = total(teacher_spec), total(student_spec)
    if before <= 0:
        raise ValueError("teacher has no parameters")
    return {"params_before": before, "params_after": after,
            "reduction_pct": round(100.0 * (1.0 - after / before), 1)}
