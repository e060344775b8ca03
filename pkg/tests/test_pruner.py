from fractions import Fraction

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from minivfi import netdef as N
from minivfi import pruner as P
from minivfi.tensor import ShapeError

TINY = N.TeacherConfig(unet=(4, 8, 8), branch_b=4, fusion=4, refine=2)


def report_from(spec, densities: dict) -> P.DensityReport:
    per = {}
    for layer in spec.layers:
        if layer.prunable:
            d = densities.get(layer.id, 1.0)
            per[layer.id] = P.LayerDensity(int(round(d * layer.p)), layer.p)
    return P.DensityReport(per)


def test_layer_density_exact():
    spec = N.LayerSpec("x", "conv2d", 64, 32, 3, 3, 1, "fusion")
    w = np.random.default_rng(0).standard_normal(spec.weight_shape).astype(np.float32)
    assert P.layer_density(w, spec).d_l == 1
    flat = w.reshape(-1)
    flat[[5, 700, 18000]] = 0.0
    e = P.layer_density(w, spec)
    assert e.nonzeros == 18429 and e.d_l == Fraction(18429, 18432)
    assert P.layer_density(np.zeros(spec.weight_shape), spec).d_l == 0
    with pytest.raises(ShapeError):
        P.layer_density(np.zeros((3, 3)), spec)


def test_model_density_is_weighted():
    rep = P.DensityReport({"a": P.LayerDensity(20, 100), "b": P.LayerDensity(60, 100)})
    assert rep.model_density == Fraction(2, 5)
    rep = P.DensityReport({"a": P.LayerDensity(0, 100), "b": P.LayerDensity(300, 300)})
    assert rep.model_density == Fraction(3, 4)
    swapped = P.DensityReport(dict(reversed(list(rep.per_layer.items()))))
    assert swapped.model_density == rep.model_density


def test_model_density_matches_recount(tmp_path):
    ckpt = N.new_checkpoint(N.build_teacher(TINY), 0)
    rng = np.random.default_rng(1)
    for w in ckpt.prunable_weights():
        w.data[rng.random(w.shape) < 0.3] = 0.0
    path = tmp_path / "s.snet"
    N.save_checkpoint(ckpt, path)
    back = N.load_checkpoint(path)
    rep = P.model_density(back)
    nz = sum(int((w.data != 0).sum()) for w in ckpt.prunable_weights())
    total = sum(w.size for w in ckpt.prunable_weights())
    assert rep.model_density == Fraction(nz, total)


def test_report_and_plan_text_roundtrip():
    spec = N.build_teacher()
    rep = report_from(spec, {"b1": 0.01, "b2": 0.03, "b3": 0.02, "b_out": 0.02, "a_enc3b": 0.4})
    assert P.DensityReport.parse(rep.text()) == rep
    plan = P.make_plan(rep, spec)
    back = P.CompressionPlan.parse(plan.text())
    assert back == plan


def test_uniform_density_gives_identity_plan():
    spec = N.build_teacher()
    plan = P.make_plan(report_from(spec, {}), spec)
    assert plan.is_identity
    student = N.build_from_plan(spec, plan)
    assert [l.tuple5 for l in student.layers] == [l.tuple5 for l in spec.layers]


def test_chain_rewrite_example():
    a, b = (64, 32, 3, 3, 1), (64, 64, 3, 3, 1)
    got = P.propagate_chain([a, b], [1.0, 0.5])
    assert got == [(32, 32, 3, 3, 1), (64, 32, 3, 3, 1)]


def test_chain_rewrite_in_teacher():
    spec = N.build_teacher()
    plan = P.make_plan(report_from(spec, {"a_enc3b": 0.5}), spec)
    student = N.build_from_plan(spec, plan)
    assert student.layer("a_enc3").tuple5 == (32, 32, 3, 3, 1)
    assert student.layer("a_enc3b").tuple5 == (64, 32, 3, 3, 1)


def test_low_density_branch_is_removed():
    spec = N.build_teacher()
    rep = report_from(spec, {"b1": 0.01, "b2": 0.03, "b3": 0.02, "b_out": 0.02})
    assert rep.branch_density(spec, "branchB") < 0.05
    plan = P.make_plan(rep, spec, branch_threshold=0.05)
    assert plan.removed_branches == {"branchB"}
    assert not any(lid.startswith("b") for lid in plan.ratios)
    student = N.build_from_plan(spec, plan)
    assert student.live_candidates == ["branchA"]


def test_removing_every_candidate_is_an_error():
    spec = N.build_teacher()
    dens = {l.id: 0.0 for l in spec.layers if l.branch in ("branchA", "branchB")}
    with pytest.raises(P.PlanError):
        P.make_plan(report_from(spec, dens), spec)


def test_plan_needs_full_report():
    spec = N.build_teacher()
    with pytest.raises(P.PlanError):
        P.make_plan(P.DensityReport({}), spec)


def test_summarize_compression():
    assert P.summarize_compression(21_030_000, 1_820_000)["reduction_pct"] == 91.3
    spec = N.build_teacher()
    assert P.summarize_compression(spec, spec)["reduction_pct"] == 0.0
    plan = P.make_plan(report_from(spec, {"a_enc3b": 0.5, "a_dec2": 0.25}), spec)
    student = N.build_from_plan(spec, plan)
    s = P.summarize_compression(spec, student)
    hand = sum(l.p + l.c_out for l in student.layers)
    assert s["params_after"] == hand and s["params_before"] == sum(l.p + l.c_out for l in spec.layers)


TINY_SPEC = N.build_teacher(TINY)
PRUNABLE = [l for l in TINY_SPEC.layers if l.prunable]


@st.composite
def density_reports(draw):
    per = {}
    kill = draw(st.sampled_from([None, "branchA", "branchB"]))
    for layer in PRUNABLE:
        if layer.branch == kill:
            nz = draw(st.integers(0, layer.p // 50))
        else:
            nz = draw(st.integers(0, layer.p))
        per[layer.id] = P.LayerDensity(nz, layer.p)
    return P.DensityReport(per)


@settings(max_examples=120, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(density_reports())
def test_every_plan_yields_a_working_student(rep):
    try:
        plan = P.make_plan(rep, TINY_SPEC)
    except P.PlanError:
        # only when both candidate branches sit below the threshold
        assert all(rep.branch_density(TINY_SPEC, b) < P.BRANCH_THRESHOLD for b in N.CANDIDATE_BRANCHES)
        return
    assert all(0 < r <= 1 for r in plan.ratios.values())
    for layer in PRUNABLE:
        assert layer.id in plan.ratios or layer.branch in plan.removed_branches
    student = N.build_from_plan(TINY_SPEC, plan).validate()
    assert P.make_plan(rep, TINY_SPEC) == plan  # deterministic
    ckpt = N.new_checkpoint(student, 0)
    out = N.interpolate(ckpt, np.random.default_rng(0).random((1, 4, 16, 16)).astype(np.float32))
    assert out.shape == (1, 1, 16, 16) and np.isfinite(out).all()


@settings(max_examples=60, deadline=None)
@given(density_reports(), st.sampled_from([l.id for l in PRUNABLE]), st.floats(0, 1))
def test_lowering_a_density_never_adds_parameters(rep, lid, shrink):
    full = dict(rep.per_layer)
    e = full[lid]
    full[lid] = P.LayerDensity(int(e.nonzeros * shrink), e.p_l)
    lower = P.DensityReport(full)
    try:
        hi = P.make_plan(rep, TINY_SPEC)
        lo = P.make_plan(lower, TINY_SPEC)
    except P.PlanError:
        return
    assert lo.removed_branches >= hi.removed_branches
    n_hi = N.count_params(N.build_from_plan(TINY_SPEC, hi))["total"]
    n_lo = N.count_params(N.build_from_plan(TINY_SPEC, lo))["total"]
    assert n_lo <= n_hi
